//! The two data-collection pipelines as device functions.
//!
//! LDP: `init_state` resets the PRR cache, `ldp_dc` produces one privatized
//! report. FL: `init_state` empties the dataset, `sense_store` appends a
//! reading, `train` runs local gradient descent and returns the weights.
//! Functions of one app share a single state slot.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::crypto::{hash, BackendRegistry, CanonicalMessage, CryptoError, KeyMaterial};
use crate::device::{
    BehaviorMeta, Device, DeviceConfig, ExecutionContext, FunctionBinary, FunctionFault, Sensor,
    StorageMode, DEFAULT_PMEM_SIZE, PMEM_FILL,
};
use crate::fl::{self, Dataset, ModelWeights, Sample, TrainingConfig};
use crate::ldp::{self, LdpParams, PrrCache};
use crate::rng::{DeviceStreams, StreamRng};
use crate::verifier::ExpectedFunction;

pub const INIT_STATE: &str = "init_state";
pub const LDP_DC: &str = "ldp_dc";
pub const SENSE_STORE: &str = "sense_store";
pub const TRAIN: &str = "train";

pub const LDP_SLOT: &str = "prr_cache";
pub const FL_SLOT: &str = "dataset";

/// Size of each synthesized function image and the spacing between them.
const CODE_LEN: usize = 1024;
const CODE_STRIDE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum App {
    Ldp,
    Fl,
}

impl App {
    pub fn as_str(self) -> &'static str {
        match self {
            App::Ldp => "ldp",
            App::Fl => "fl",
        }
    }

    pub fn phases(self) -> &'static [Phase] {
        match self {
            App::Ldp => &[Phase::Setup, Phase::Collect],
            App::Fl => &[Phase::Setup, Phase::Collect, Phase::Train],
        }
    }

    pub fn function_ids(self) -> &'static [&'static str] {
        match self {
            App::Ldp => &[INIT_STATE, LDP_DC],
            App::Fl => &[INIT_STATE, SENSE_STORE, TRAIN],
        }
    }

    pub fn slot(self) -> &'static str {
        match self {
            App::Ldp => LDP_SLOT,
            App::Fl => FL_SLOT,
        }
    }

    /// Function run in each phase.
    pub fn phase_function(self, phase: Phase) -> Option<&'static str> {
        match (self, phase) {
            (_, Phase::Setup) => Some(INIT_STATE),
            (App::Ldp, Phase::Collect) => Some(LDP_DC),
            (App::Fl, Phase::Collect) => Some(SENSE_STORE),
            (App::Fl, Phase::Train) => Some(TRAIN),
            (App::Ldp, Phase::Train) => None,
        }
    }

    /// Functions with their pmem offsets.
    pub fn functions(self) -> Vec<(FunctionBinary, usize)> {
        let fbs = match self {
            App::Ldp => vec![ldp_init_function(), ldp_dc_function()],
            App::Fl => vec![fl_init_function(), sense_store_function(), train_function()],
        };
        fbs.into_iter()
            .enumerate()
            .map(|(i, fb)| (fb, i * CODE_STRIDE))
            .collect()
    }

    pub fn expected_functions(self) -> BTreeMap<String, ExpectedFunction> {
        self.functions()
            .into_iter()
            .map(|(fb, _)| {
                (
                    fb.id.clone(),
                    ExpectedFunction {
                        meta: fb.meta,
                        stateful: fb.is_stateful(),
                    },
                )
            })
            .collect()
    }

    /// The program image an honest device of this app carries.
    pub fn pmem_image(self, size: usize) -> Vec<u8> {
        let mut pmem = vec![PMEM_FILL; size];
        for (fb, offset) in self.functions() {
            pmem[offset..offset + fb.code.len()].copy_from_slice(&fb.code);
        }
        pmem
    }

    /// Offset and length of `f_id` in the program image.
    pub fn function_range(self, f_id: &str) -> Option<(usize, usize)> {
        self.functions()
            .into_iter()
            .find(|(fb, _)| fb.id == f_id)
            .map(|(fb, off)| (off, fb.code.len()))
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for App {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ldp" => Ok(App::Ldp),
            "fl" => Ok(App::Fl),
            other => Err(format!("unknown app `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Setup,
    Collect,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Collect => "collect",
            Phase::Train => "train",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "setup" => Ok(Phase::Setup),
            "collect" => Ok(Phase::Collect),
            "train" => Ok(Phase::Train),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Deterministic stand-in for a compiled function: a descriptor binding the
/// id, state slot and declared behaviors, padded with id-derived bytes.
pub fn synthesize_code(id: &str, slot: Option<&str>, meta: BehaviorMeta) -> Vec<u8> {
    let mut code = CanonicalMessage::new()
        .field("fn", id)
        .field("slot", slot.unwrap_or(""))
        .field("meta", [meta.to_byte()])
        .encode();
    let mut block = hash(id.as_bytes());
    while code.len() < CODE_LEN {
        code.extend_from_slice(block.as_ref());
        block = hash(block.as_ref());
    }
    code.truncate(CODE_LEN);
    code
}

fn stateful(
    id: &'static str,
    slot: &'static str,
    body: impl Fn(&mut ExecutionContext<'_>) -> Result<Vec<u8>, FunctionFault> + Send + Sync + 'static,
) -> FunctionBinary {
    let meta = BehaviorMeta::COMPLIANT;
    FunctionBinary::new(
        id,
        synthesize_code(id, Some(slot), meta),
        meta,
        Some(slot.to_owned()),
        body,
    )
}

/// Reads and checks the current state, as every stateful body must first.
fn checked_state(ctx: &mut ExecutionContext<'_>) -> Vec<u8> {
    let s = ctx.read_state();
    ctx.check_state(&s);
    s
}

fn commit(ctx: &mut ExecutionContext<'_>, s: Vec<u8>) {
    ctx.write_state(s.clone());
    ctx.set_state(&s);
}

pub fn encode_ldp_input(params: &LdpParams<f64>) -> Vec<u8> {
    CanonicalMessage::new()
        .field("f", params.f.to_le_bytes())
        .field("p", params.p.to_le_bytes())
        .field("q", params.q.to_le_bytes())
        .field("k", [params.k])
        .encode()
}

pub fn decode_ldp_input(bytes: &[u8]) -> Option<LdpParams<f64>> {
    let msg = CanonicalMessage::decode(bytes)?;
    let real = |label| Some(f64::from_le_bytes(msg.get(label)?.try_into().ok()?));
    let k = match msg.get("k")? {
        [k] => *k,
        _ => return None,
    };
    LdpParams::new(real("f")?, real("p")?, real("q")?, k).ok()
}

fn ldp_init_function() -> FunctionBinary {
    stateful(INIT_STATE, LDP_SLOT, |ctx| {
        checked_state(ctx);
        commit(ctx, ldp::init_state());
        Ok(Vec::new())
    })
}

fn ldp_dc_function() -> FunctionBinary {
    stateful(LDP_DC, LDP_SLOT, |ctx| {
        let params =
            decode_ldp_input(ctx.input()).ok_or_else(|| FunctionFault::new("bad LDP input"))?;
        let s = checked_state(ctx);
        let mut cache = PrrCache::deserialize(&s, params.k).map_err(FunctionFault::new)?;
        let raw = ctx.read_sensor();
        let reading = u32::from_le_bytes(
            raw.as_slice()
                .try_into()
                .map_err(|_| FunctionFault::new("sensor reading is not a u32"))?,
        );
        let streams = ctx.streams();
        let report = ldp::ldp_dc(reading, &params, &mut cache, &mut streams.prr, &mut streams.irr)
            .map_err(FunctionFault::new)?;
        commit(ctx, cache.serialize());
        Ok(report.as_packed().to_vec())
    })
}

fn fl_init_function() -> FunctionBinary {
    stateful(INIT_STATE, FL_SLOT, |ctx| {
        checked_state(ctx);
        commit(ctx, fl::init_dataset());
        Ok(Vec::new())
    })
}

fn sense_store_function() -> FunctionBinary {
    stateful(SENSE_STORE, FL_SLOT, |ctx| {
        let s = checked_state(ctx);
        let data = Dataset::<f64>::deserialize(&s).map_err(FunctionFault::new)?;
        let raw = ctx.read_sensor();
        let sample = decode_sample(&raw).ok_or_else(|| FunctionFault::new("bad sensor sample"))?;
        let data = fl::sense_store(data, sample).map_err(FunctionFault::new)?;
        commit(ctx, data.serialize());
        Ok(Vec::new())
    })
}

fn train_function() -> FunctionBinary {
    stateful(TRAIN, FL_SLOT, |ctx| {
        let (weights, cfg) =
            decode_train_input(ctx.input()).ok_or_else(|| FunctionFault::new("bad train input"))?;
        let s = checked_state(ctx);
        let data = Dataset::<f64>::deserialize(&s).map_err(FunctionFault::new)?;
        let trained = fl::train(&data, &weights, &cfg).map_err(FunctionFault::new)?;
        // dataset is unchanged; recommit it
        ctx.set_state(&s);
        Ok(trained.serialize())
    })
}

pub fn encode_train_input(weights: &ModelWeights<f64>, cfg: &TrainingConfig<f64>) -> Vec<u8> {
    CanonicalMessage::new()
        .field("w", weights.serialize())
        .field_u64("t", cfg.epochs as u64)
        .field("alpha", cfg.alpha.to_le_bytes())
        .encode()
}

pub fn decode_train_input(bytes: &[u8]) -> Option<(ModelWeights<f64>, TrainingConfig<f64>)> {
    let msg = CanonicalMessage::decode(bytes)?;
    let weights = ModelWeights::deserialize(msg.get("w")?).ok()?;
    let epochs = usize::try_from(u64::from_le_bytes(msg.get("t")?.try_into().ok()?)).ok()?;
    let alpha = f64::from_le_bytes(msg.get("alpha")?.try_into().ok()?);
    Some((weights, TrainingConfig { epochs, alpha }))
}

/// `d` features then the target, `f64 LE` each.
pub fn encode_sample(sample: &Sample<f64>) -> Vec<u8> {
    sample
        .x
        .iter()
        .chain(std::iter::once(&sample.y))
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode_sample(bytes: &[u8]) -> Option<Sample<f64>> {
    if bytes.len() < 16 || bytes.len() % 8 != 0 {
        return None;
    }
    let mut vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let y = vals.pop()?;
    Some(Sample { x: vals, y })
}

/// Draws k-bit readings from a fixed categorical distribution.
#[derive(Clone, Debug)]
pub struct CategoricalSensor {
    cumulative: Vec<f64>,
}

impl CategoricalSensor {
    /// `frequencies` lists the probability of the first values; the rest of
    /// the mass is spread uniformly over the remaining `2^k` values.
    pub fn new(frequencies: &[f64], k: u8) -> Result<Self, String> {
        let width = 1usize << k;
        if frequencies.len() > width {
            return Err(format!("{} frequencies for {width} values", frequencies.len()));
        }
        if frequencies.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err("frequencies must lie in [0, 1]".into());
        }
        let listed: f64 = frequencies.iter().sum();
        if listed > 1.0 + 1e-9 {
            return Err(format!("frequencies sum to {listed} > 1"));
        }
        let rest = width - frequencies.len();
        if rest == 0 && (listed - 1.0).abs() > 1e-9 {
            return Err(format!("frequencies sum to {listed}, expected 1"));
        }
        let fill = if rest == 0 { 0.0 } else { (1.0 - listed) / rest as f64 };
        let mut acc = 0.0;
        let cumulative = (0..width)
            .map(|x| {
                acc += frequencies.get(x).copied().unwrap_or(fill);
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut StreamRng) -> u32 {
        let u: f64 = rng.gen::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1) as u32
    }
}

impl Sensor for CategoricalSensor {
    fn read(&mut self, rng: &mut StreamRng) -> Vec<u8> {
        self.sample(rng).to_le_bytes().to_vec()
    }
}

/// Samples `y = w·x + b + noise` with features uniform in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct LinearSensor {
    pub truth: ModelWeights<f64>,
    pub noise: f64,
}

impl LinearSensor {
    pub fn sample(&self, rng: &mut StreamRng) -> Sample<f64> {
        let x: Vec<f64> = (0..self.truth.dim())
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let noise = if self.noise > 0.0 {
            rng.gen_range(-self.noise..=self.noise)
        } else {
            0.0
        };
        let y = self.truth.predict(&x) + noise;
        Sample { x, y }
    }
}

impl Sensor for LinearSensor {
    fn read(&mut self, rng: &mut StreamRng) -> Vec<u8> {
        encode_sample(&self.sample(rng))
    }
}

/// Replays a fixed list of readings, cycling when exhausted.
#[derive(Clone, Debug)]
pub struct TraceSensor {
    readings: Vec<Vec<u8>>,
    next: usize,
}

impl TraceSensor {
    pub fn new(readings: Vec<Vec<u8>>) -> Self {
        assert!(!readings.is_empty(), "trace needs at least one reading");
        Self { readings, next: 0 }
    }
}

impl Sensor for TraceSensor {
    fn read(&mut self, _rng: &mut StreamRng) -> Vec<u8> {
        let r = self.readings[self.next % self.readings.len()].clone();
        self.next += 1;
        r
    }
}

/// A device with the app's functions installed at their standard offsets.
pub fn build_device(
    app: App,
    sk_dev: KeyMaterial,
    pk_vrf: KeyMaterial,
    storage_mode: StorageMode,
    registry: Arc<BackendRegistry>,
    sensor: Box<dyn Sensor>,
    streams: DeviceStreams,
) -> Result<Device, CryptoError> {
    let mut cfg = DeviceConfig::new(sk_dev, pk_vrf, streams);
    cfg.storage_mode = storage_mode;
    cfg.registry = registry;
    cfg.sensor = sensor;
    cfg.pmem_size = DEFAULT_PMEM_SIZE;
    let mut device = Device::new(cfg)?;
    for (fb, offset) in app.functions() {
        device
            .register_function(fb, offset)
            .expect("standard layout is disjoint and in range");
    }
    Ok(device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    #[test]
    fn layout_matches_device_image() {
        for app in [App::Ldp, App::Fl] {
            let reg = Arc::new(BackendRegistry::default());
            let mut rng = derive_stream(0, &["k"]);
            let sk = reg.generate("mac", &mut rng).unwrap();
            let dev = build_device(
                app,
                sk.clone(),
                sk.public_only(),
                StorageMode::Digest,
                reg,
                Box::new(crate::device::NullSensor),
                DeviceStreams::new(0, 0),
            )
            .unwrap();
            assert_eq!(dev.nsw().pmem(), app.pmem_image(DEFAULT_PMEM_SIZE).as_slice());
            for id in app.function_ids() {
                assert!(app.function_range(id).is_some());
                assert!(app.expected_functions()[*id].adheres());
            }
        }
    }

    #[test]
    fn code_binds_slot_and_meta() {
        let a = synthesize_code("f", Some("s"), BehaviorMeta::COMPLIANT);
        assert_eq!(a.len(), CODE_LEN);
        assert_ne!(a, synthesize_code("f", Some("t"), BehaviorMeta::COMPLIANT));
        assert_ne!(a, synthesize_code("f", Some("s"), BehaviorMeta::STATELESS));
    }

    #[test]
    fn input_codecs_round_trip() {
        let p = LdpParams::new(0.5, 0.75, 0.25, 3).unwrap();
        assert_eq!(decode_ldp_input(&encode_ldp_input(&p)), Some(p));
        assert_eq!(decode_ldp_input(b"junk"), None);
        let w = ModelWeights { w: vec![1.0, 2.0], b: 3.0 };
        let cfg = TrainingConfig { epochs: 7, alpha: 0.1 };
        assert_eq!(decode_train_input(&encode_train_input(&w, &cfg)), Some((w, cfg)));
        let s = Sample { x: vec![0.5], y: -1.0 };
        assert_eq!(decode_sample(&encode_sample(&s)), Some(s));
    }

    #[test]
    fn categorical_sensor_fills_remaining_mass_uniformly() {
        let s = CategoricalSensor::new(&[0.3, 0.2, 0.1], 3).unwrap();
        let probs = s.probabilities();
        assert!((probs[0] - 0.3).abs() < 1e-12);
        for p in &probs[3..] {
            assert!((p - 0.08).abs() < 1e-12);
        }
        assert!(CategoricalSensor::new(&[0.8, 0.8], 1).is_err());
        assert!(CategoricalSensor::new(&[0.5, 0.4], 1).is_err());
        let mut rng = derive_stream(1, &["s"]);
        assert!((0..1000).all(|_| s.sample(&mut rng) < 8));
    }
}
