//! Runs a fleet of emulated devices through an app's phases against a
//! scripted adversary, and aggregates whatever the verifier accepted.
//!
//! Requests go out phase by phase, and within a phase round by round in
//! device order, all from one verifier counter. A device whose request is
//! rejected takes no further part.

mod config;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

pub use config::{AttackKind, AttackSpec, FlScenario, LdpScenario, Patch, ScenarioConfig, Timing};

use crate::apps::{self, App, CategoricalSensor, LinearSensor, Phase};
use crate::crypto::{BackendRegistry, CryptoError, KeyMaterial};
use crate::device::{
    AbortReason, AsyncEvent, BytePatch, Device, ExecutionOutcome, Sensor, DEFAULT_PMEM_SIZE,
};
use crate::fl::{self, AggregationConfig, FlError, ModelWeights, TrainingConfig};
use crate::ldp::{self, BitVector, FrequencyEstimate, LdpError};
use crate::protocol::{PoSXRequest, PoSXResponse};
use crate::rng::{derive_stream, DeviceStreams, StreamRng};
use crate::transcript::{Record, Transcript};
use crate::verifier::{DeviceId, DeviceRecord, FailureCause, Verdict, VerifierError, VerifierState};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Ldp(#[from] LdpError),
    #[error(transparent)]
    Fl(#[from] FlError),
}

/// Where and why a device dropped out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    pub phase: Phase,
    pub c_vrf: u64,
    pub cause: FailureCause,
    /// Set when the device itself refused to produce a proof.
    pub abort: Option<AbortReason>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceSummary {
    pub device: DeviceId,
    pub accepted: usize,
    pub failure: Option<Failure>,
}

impl DeviceSummary {
    pub fn verdict(&self) -> Verdict {
        self.failure
            .as_ref()
            .map_or(Verdict::Accept, |f| Verdict::Reject(f.cause))
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub devices: Vec<DeviceSummary>,
    /// Accepted LDP reports in transcript order.
    pub reports: Vec<(DeviceId, BitVector)>,
    /// Accepted model updates in device order.
    pub updates: Vec<(DeviceId, ModelWeights<f64>)>,
    pub estimate: Option<FrequencyEstimate<f64>>,
    /// Global weights the round started from.
    pub initial_weights: Option<ModelWeights<f64>>,
    pub aggregate: Option<ModelWeights<f64>>,
    pub transcript: Transcript,
    pub pmem_expected: Vec<u8>,
    pub device_keys: BTreeMap<DeviceId, KeyMaterial>,
}

impl ScenarioOutcome {
    pub fn all_accepted(&self) -> bool {
        self.devices.iter().all(|d| d.failure.is_none())
    }

    pub fn summary(&self) -> Summary {
        let cfg = &self.config;
        Summary {
            app: cfg.app.as_str(),
            device_count: cfg.device_count,
            crypto_backend: cfg.crypto_backend.clone(),
            storage_mode: cfg.storage_mode.as_str(),
            seed: cfg.seed,
            all_accepted: self.all_accepted(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceLine {
                    device: d.device,
                    verdict: d.verdict().to_string(),
                    accepted: d.accepted,
                    failed_phase: d.failure.as_ref().map(|f| f.phase.as_str()),
                    failed_c_vrf: d.failure.as_ref().map(|f| f.c_vrf),
                    abort: d.failure.as_ref().and_then(|f| f.abort).map(AbortReason::as_str),
                })
                .collect(),
            ldp: self.estimate.as_ref().map(|e| LdpLine {
                n: e.n,
                counts: e.counts.clone(),
                estimates: e.estimates.clone(),
            }),
            fl: self.aggregate.as_ref().map(|w| FlLine {
                m: self.updates.len(),
                w: w.w.clone(),
                b: w.b,
            }),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub app: &'static str,
    pub device_count: usize,
    pub crypto_backend: String,
    pub storage_mode: &'static str,
    pub seed: u64,
    pub all_accepted: bool,
    pub devices: Vec<DeviceLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ldp: Option<LdpLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fl: Option<FlLine>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviceLine {
    pub device: DeviceId,
    pub verdict: String,
    pub accepted: usize,
    pub failed_phase: Option<&'static str>,
    pub failed_c_vrf: Option<u64>,
    pub abort: Option<&'static str>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LdpLine {
    pub n: usize,
    pub counts: Vec<u64>,
    pub estimates: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlLine {
    pub m: usize,
    pub w: Vec<f64>,
    pub b: f64,
}

/// Something an attack can be applied to.
pub enum AttackTarget<'a> {
    Device(&'a mut Device),
    Request {
        request: &'a mut PoSXRequest,
        previous: Option<&'a PoSXRequest>,
        registry: &'a BackendRegistry,
        rng: &'a mut StreamRng,
    },
    Response(&'a mut Option<PoSXResponse>),
}

/// Applies one attack and returns a description of what changed, or
/// `None` if there was nothing to act on (e.g. no response to tamper with).
pub fn apply_attack(
    app: App,
    spec: &AttackSpec,
    target: AttackTarget<'_>,
) -> Result<Option<String>, HarnessError> {
    let mismatch = || HarnessError::Config(format!("{spec}: wrong target"));
    match (&spec.kind, target) {
        (AttackKind::None, _) => Ok(None),
        (AttackKind::CorruptFunction { f_id, patch }, AttackTarget::Device(dev)) => {
            let (base, len) = app.function_range(f_id).ok_or_else(mismatch)?;
            let mut code = dev.nsw().pmem()[base..base + len].to_vec();
            patch.apply(&mut code);
            let start = base + patch.offset;
            let bytes = code[patch.offset..patch.offset + patch.mask.len()].to_vec();
            dev.inject_async_event(AsyncEvent::PatchPmem(BytePatch::new(start, bytes)));
            Ok(Some(format!("pmem of {f_id}: {patch}")))
        }
        (AttackKind::TamperState { f_id, patch }, AttackTarget::Device(dev)) => {
            let slot = dev
                .nsw()
                .function(f_id)
                .ok_or_else(mismatch)?
                .slot()
                .to_owned();
            let mut state = dev.nsw().state(&slot).to_vec();
            patch.apply(&mut state);
            dev.inject_async_event(AsyncEvent::PatchState {
                slot: slot.clone(),
                patch: BytePatch::new(0, state),
            });
            Ok(Some(format!("state slot {slot}: {patch}")))
        }
        (AttackKind::TamperRequest { patch }, AttackTarget::Request { request, .. }) => {
            patch.apply(&mut request.input);
            Ok(Some(format!("request input: {patch}")))
        }
        (AttackKind::ReplayRequest, AttackTarget::Request { request, previous, .. }) => {
            let Some(prev) = previous else {
                return Ok(None);
            };
            *request = prev.clone();
            Ok(Some(format!("replayed request c={}", prev.c_vrf)))
        }
        (
            AttackKind::ForgeRequest,
            AttackTarget::Request {
                request,
                registry,
                rng,
                ..
            },
        ) => {
            let key = registry.generate(&request.sigma_vrf.scheme, rng)?;
            request.sigma_vrf = registry.sign(&key, &request.digest())?;
            Ok(Some("request re-signed with an unknown key".into()))
        }
        (AttackKind::TamperOutput { patch }, AttackTarget::Response(resp)) => {
            let Some(resp) = resp.as_mut() else {
                return Ok(None);
            };
            patch.apply(&mut resp.output);
            Ok(Some(format!("response output: {patch}")))
        }
        (AttackKind::DropResponse, AttackTarget::Response(resp)) => {
            Ok(resp.take().map(|_| "response dropped".to_owned()))
        }
        _ => Err(mismatch()),
    }
}

struct Member {
    device: Device,
    seq: u64,
    last_request: Option<PoSXRequest>,
    accepted: usize,
    failure: Option<Failure>,
}

impl Member {
    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, HarnessError> {
    run_scenario_with(cfg, Arc::new(BackendRegistry::default()))
}

/// Runs with a caller-supplied backend registry, for extension schemes.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    registry: Arc<BackendRegistry>,
) -> Result<ScenarioOutcome, HarnessError> {
    cfg.validate()?;
    let scheme = cfg.crypto_backend.as_str();
    registry
        .get(scheme)
        .map_err(|_| HarnessError::Config(format!("unknown crypto_backend `{scheme}`")))?;
    let app = cfg.app;
    let seed = cfg.seed;

    let sk_vrf = registry.generate(scheme, &mut derive_stream(seed, &["keys", "verifier"]))?;
    let mut verifier = VerifierState::new(sk_vrf, Arc::clone(&registry))?;
    let pmem_expected = app.pmem_image(DEFAULT_PMEM_SIZE);

    let mut members = Vec::with_capacity(cfg.device_count);
    let mut device_keys = BTreeMap::new();
    for i in 0..cfg.device_count {
        let tag = i.to_string();
        let sk_dev = registry.generate(scheme, &mut derive_stream(seed, &["keys", "device", &tag]))?;
        let device = apps::build_device(
            app,
            sk_dev,
            verifier.pk_vrf(),
            cfg.storage_mode,
            Arc::clone(&registry),
            sensor_for(cfg)?,
            DeviceStreams::new(seed, i),
        )?;
        let pk = device.public_key();
        verifier.register_device(
            i,
            DeviceRecord {
                pk_dev: pk.clone(),
                pmem_expected: pmem_expected.clone(),
                expected: app.expected_functions(),
            },
        );
        device_keys.insert(i, pk);
        members.push(Member {
            device,
            seq: 0,
            last_request: None,
            accepted: 0,
            failure: None,
        });
    }

    let mut adversary = derive_stream(seed, &["adversary"]);
    let mut transcript = Transcript::new();
    let mut reports = Vec::new();
    let mut updates = BTreeMap::new();
    let initial_weights = cfg.fl.as_ref().map(|f| ModelWeights::zeros(f.dim));

    let device_attacks = |m: &mut Member, i: usize, t: &mut Transcript, timing: Timing, phase: Phase| {
        for spec in cfg.attacks_for(i).filter(|a| a.timing == timing) {
            if let Some(note) = apply_attack(app, spec, AttackTarget::Device(&mut m.device))? {
                let seq = m.next_seq();
                t.push(Record::tamper(phase, i, seq, spec.kind.name(), &note));
            }
        }
        Ok::<_, HarnessError>(())
    };

    for (pi, &phase) in app.phases().iter().enumerate() {
        for (i, m) in members.iter_mut().enumerate() {
            if m.failure.is_some() {
                continue;
            }
            let timing = if pi == 0 {
                Timing::BeforeSetup
            } else {
                Timing::BetweenPhases(app.phases()[pi - 1], phase)
            };
            device_attacks(m, i, &mut transcript, timing, phase)?;
        }

        let f_id = app.phase_function(phase).expect("phase belongs to app");
        let input = phase_input(cfg, phase, initial_weights.as_ref());
        for _round in 0..phase_rounds(cfg, phase) {
            for (i, m) in members.iter_mut().enumerate() {
                if m.failure.is_some() {
                    continue;
                }
                let issued = verifier.make_request(i, f_id, &input)?;
                let seq = m.next_seq();
                transcript.push(Record::request(phase, i, seq, &issued));

                // transit attacks fire on the first exchange of their phase
                let transit: Vec<&AttackSpec> = if m.first_in_phase(phase) {
                    cfg.attacks_for(i)
                        .filter(|a| a.timing == Timing::InTransit(phase))
                        .collect()
                } else {
                    Vec::new()
                };
                let (on_request, on_response): (Vec<&AttackSpec>, Vec<&AttackSpec>) =
                    transit.into_iter().partition(|a| a.kind.acts_on_request());
                let mut delivered = issued.clone();
                for spec in on_request {
                    let note = apply_attack(
                        app,
                        spec,
                        AttackTarget::Request {
                            request: &mut delivered,
                            previous: m.last_request.as_ref(),
                            registry: &registry,
                            rng: &mut adversary,
                        },
                    )?;
                    if let Some(note) = note {
                        let seq = m.next_seq();
                        transcript.push(Record::tamper(phase, i, seq, spec.kind.name(), &note));
                    }
                }

                let outcome = m.device.execute(&delivered);
                for event in m.device.take_log() {
                    let seq = m.next_seq();
                    transcript.push(Record::transition(phase, i, seq, &event));
                }
                m.last_request = Some(delivered);
                let abort = outcome.abort_reason();
                let mut response = match outcome {
                    ExecutionOutcome::Response(r) => Some(r),
                    ExecutionOutcome::Aborted(_) => None,
                };

                for spec in on_response {
                    if let Some(note) = apply_attack(app, spec, AttackTarget::Response(&mut response))? {
                        let seq = m.next_seq();
                        transcript.push(Record::tamper(phase, i, seq, spec.kind.name(), &note));
                    }
                }

                let seq = m.next_seq();
                match &response {
                    Some(r) => transcript.push(Record::response(phase, i, seq, &issued, r)),
                    None => {
                        let reason = abort.map_or("timeout", AbortReason::as_str);
                        transcript.push(Record::no_response(phase, i, seq, &issued, reason));
                    }
                }
                let verdict = verifier.validate_posx(i, &issued, response.as_ref());
                let seq = m.next_seq();
                transcript.push(Record::verdict(phase, i, seq, issued.c_vrf, verdict, abort));

                match (verdict, response) {
                    (Verdict::Accept, Some(r)) => {
                        m.accepted += 1;
                        collect_output(cfg, phase, i, &r.output, &mut reports, &mut updates)?;
                    }
                    (Verdict::Reject(cause), _) => {
                        m.failure = Some(Failure {
                            phase,
                            c_vrf: issued.c_vrf,
                            cause,
                            abort,
                        });
                    }
                    (Verdict::Accept, None) => unreachable!("accept needs a response"),
                }
            }
        }
    }
    transcript.sort_canonical();

    let estimate = match &cfg.ldp {
        Some(l) if !reports.is_empty() => {
            let bits: Vec<BitVector> = reports.iter().map(|(_, b)| b.clone()).collect();
            Some(ldp::estimate_frequency(&bits, &l.params)?)
        }
        _ => None,
    };
    let updates: Vec<(DeviceId, ModelWeights<f64>)> = updates.into_iter().collect();
    let aggregate = match (&cfg.fl, &initial_weights) {
        (Some(f), Some(w0)) if !updates.is_empty() => {
            let ws: Vec<ModelWeights<f64>> = updates.iter().map(|(_, w)| w.clone()).collect();
            Some(fl::fedavg_aggregate(w0, &ws, &AggregationConfig { eta: f.eta })?)
        }
        _ => None,
    };

    Ok(ScenarioOutcome {
        config: cfg.clone(),
        devices: members
            .into_iter()
            .enumerate()
            .map(|(i, m)| DeviceSummary {
                device: i,
                accepted: m.accepted,
                failure: m.failure,
            })
            .collect(),
        reports,
        updates,
        estimate,
        initial_weights,
        aggregate,
        transcript,
        pmem_expected,
        device_keys,
    })
}

impl Member {
    /// Whether the request about to be sent is the device's first in `phase`.
    fn first_in_phase(&self, phase: Phase) -> bool {
        match &self.last_request {
            None => true,
            Some(prev) => phase_of(&prev.f_id) != phase,
        }
    }
}

fn phase_of(f_id: &str) -> Phase {
    match f_id {
        apps::INIT_STATE => Phase::Setup,
        apps::TRAIN => Phase::Train,
        _ => Phase::Collect,
    }
}

fn phase_rounds(cfg: &ScenarioConfig, phase: Phase) -> usize {
    match phase {
        Phase::Setup | Phase::Train => 1,
        Phase::Collect => match (&cfg.ldp, &cfg.fl) {
            (Some(l), _) => l.rounds,
            (_, Some(f)) => f.samples,
            _ => 0,
        },
    }
}

fn phase_input(cfg: &ScenarioConfig, phase: Phase, global: Option<&ModelWeights<f64>>) -> Vec<u8> {
    match (phase, &cfg.ldp, &cfg.fl, global) {
        (Phase::Collect, Some(l), _, _) => apps::encode_ldp_input(&l.params),
        (Phase::Train, _, Some(f), Some(w)) => apps::encode_train_input(
            w,
            &TrainingConfig {
                epochs: f.epochs,
                alpha: f.alpha,
            },
        ),
        _ => Vec::new(),
    }
}

fn sensor_for(cfg: &ScenarioConfig) -> Result<Box<dyn Sensor>, HarnessError> {
    match (&cfg.ldp, &cfg.fl) {
        (Some(l), _) => Ok(Box::new(
            CategoricalSensor::new(&l.frequencies, l.params.k).map_err(HarnessError::Config)?,
        )),
        (_, Some(f)) => Ok(Box::new(LinearSensor {
            truth: ModelWeights {
                w: f.true_weights.clone(),
                b: f.true_bias,
            },
            noise: f.noise,
        })),
        _ => Err(HarnessError::Config("no app parameters".into())),
    }
}

fn collect_output(
    cfg: &ScenarioConfig,
    phase: Phase,
    device: DeviceId,
    output: &[u8],
    reports: &mut Vec<(DeviceId, BitVector)>,
    updates: &mut BTreeMap<DeviceId, ModelWeights<f64>>,
) -> Result<(), HarnessError> {
    match (cfg.app, phase) {
        (App::Ldp, Phase::Collect) => {
            let width = cfg.ldp.as_ref().expect("validated").params.width();
            let bits = BitVector::from_packed(output, width).ok_or(LdpError::LengthMismatch {
                expected: width,
                got: output.len() * 8,
            })?;
            reports.push((device, bits));
        }
        (App::Fl, Phase::Train) => {
            updates.insert(device, ModelWeights::deserialize(output)?);
        }
        _ => {}
    }
    Ok(())
}
