//! Scenario files and the attack catalog.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::apps::{App, Phase};
use crate::device::StorageMode;
use crate::ldp::LdpParams;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct LdpScenario {
    pub params: LdpParams<f64>,
    /// Collect rounds, one report per device each.
    pub rounds: usize,
    /// Probabilities of the first values; the rest is spread uniformly.
    pub frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlScenario {
    pub dim: usize,
    /// Collect rounds, one sensed sample per device each.
    pub samples: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub eta: f64,
    pub true_weights: Vec<f64>,
    pub true_bias: f64,
    pub noise: f64,
}

/// When an attack fires relative to the protocol phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timing {
    BeforeSetup,
    BetweenPhases(Phase, Phase),
    InTransit(Phase),
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timing::BeforeSetup => f.write_str("before_setup"),
            Timing::BetweenPhases(a, b) => write!(f, "between_phases({a}, {b})"),
            Timing::InTransit(p) => write!(f, "in_transit({p})"),
        }
    }
}

impl FromStr for Timing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "before_setup" {
            return Ok(Timing::BeforeSetup);
        }
        let call = |name: &str| {
            s.strip_prefix(name)
                .and_then(|r| r.trim_start().strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
        };
        if let Some(args) = call("between_phases") {
            let (a, b) = args
                .split_once(',')
                .ok_or_else(|| format!("`{s}`: between_phases takes two phases"))?;
            return Ok(Timing::BetweenPhases(a.trim().parse()?, b.trim().parse()?));
        }
        if let Some(arg) = call("in_transit") {
            return Ok(Timing::InTransit(arg.trim().parse()?));
        }
        Err(format!(
            "`{s}`: expected before_setup, between_phases(a, b) or in_transit(phase)"
        ))
    }
}

/// XOR mask applied at `offset`. Targets shorter than `offset + mask.len()`
/// are zero-extended first, so a patch always changes its target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub offset: usize,
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn apply(&self, target: &mut Vec<u8>) {
        let end = self.offset + self.mask.len();
        if target.len() < end {
            target.resize(end, 0);
        }
        for (t, m) in target[self.offset..end].iter_mut().zip(&self.mask) {
            *t ^= m;
        }
    }
}

impl fmt::Display for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "xor {} at {}", hex::encode(&self.mask), self.offset)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackKind {
    None,
    /// Rewrites code bytes of an installed function (offset relative to it).
    CorruptFunction { f_id: String, patch: Patch },
    /// Rewrites the NS-side state a function reads.
    TamperState { f_id: String, patch: Patch },
    TamperOutput { patch: Patch },
    /// Rewrites the request input in flight.
    TamperRequest { patch: Patch },
    /// Delivers the device's previous request instead of the fresh one.
    ReplayRequest,
    /// Re-signs the fresh request with a key the verifier never held.
    ForgeRequest,
    DropResponse,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::CorruptFunction { .. } => "corrupt_function",
            AttackKind::TamperState { .. } => "tamper_state",
            AttackKind::TamperOutput { .. } => "tamper_output",
            AttackKind::TamperRequest { .. } => "tamper_request",
            AttackKind::ReplayRequest => "replay_request",
            AttackKind::ForgeRequest => "forge_request",
            AttackKind::DropResponse => "drop_response",
        }
    }

    pub fn acts_on_request(&self) -> bool {
        matches!(
            self,
            AttackKind::TamperRequest { .. } | AttackKind::ReplayRequest | AttackKind::ForgeRequest
        )
    }

    fn acts_on_device(&self) -> bool {
        matches!(
            self,
            AttackKind::CorruptFunction { .. } | AttackKind::TamperState { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackSpec {
    pub device: usize,
    pub kind: AttackKind,
    pub timing: Timing,
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} on device {} {}", self.kind.name(), self.device, self.timing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub app: App,
    pub device_count: usize,
    pub crypto_backend: String,
    pub storage_mode: StorageMode,
    pub seed: u64,
    pub ldp: Option<LdpScenario>,
    pub fl: Option<FlScenario>,
    pub attacks: Vec<AttackSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    app: String,
    device_count: usize,
    #[serde(default = "default_backend")]
    crypto_backend: String,
    #[serde(default = "default_storage")]
    storage_mode: String,
    #[serde(default)]
    seed: u64,
    ldp: Option<RawLdp>,
    fl: Option<RawFl>,
    #[serde(default, rename = "attack")]
    attacks: Vec<RawAttack>,
}

fn default_backend() -> String {
    "mac".into()
}

fn default_storage() -> String {
    StorageMode::Digest.as_str().into()
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLdp {
    f: f64,
    p: f64,
    q: f64,
    k: u8,
    #[serde(default = "one")]
    rounds: usize,
    #[serde(default)]
    frequencies: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFl {
    samples: usize,
    epochs: usize,
    alpha: f64,
    #[serde(default = "unit")]
    eta: f64,
    true_weights: Vec<f64>,
    #[serde(default)]
    true_bias: f64,
    #[serde(default)]
    noise: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    device: usize,
    kind: String,
    when: String,
    function: Option<String>,
    #[serde(default)]
    offset: usize,
    mask: Option<String>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_owned()))?;
        let cfg = Self::from_raw(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_raw(raw: RawScenario) -> Result<Self, HarnessError> {
        let app: App = raw.app.parse().map_err(HarnessError::Config)?;
        let storage_mode: StorageMode = raw.storage_mode.parse().map_err(HarnessError::Config)?;
        let ldp = raw
            .ldp
            .map(|l| {
                Ok::<_, HarnessError>(LdpScenario {
                    params: LdpParams::new(l.f, l.p, l.q, l.k)
                        .map_err(|e| HarnessError::Config(e.to_string()))?,
                    rounds: l.rounds,
                    frequencies: l.frequencies,
                })
            })
            .transpose()?;
        let fl = raw.fl.map(|f| FlScenario {
            dim: f.true_weights.len(),
            samples: f.samples,
            epochs: f.epochs,
            alpha: f.alpha,
            eta: f.eta,
            true_weights: f.true_weights,
            true_bias: f.true_bias,
            noise: f.noise,
        });
        let attacks = raw
            .attacks
            .into_iter()
            .map(|a| parse_attack(a, app))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            app,
            device_count: raw.device_count,
            crypto_backend: raw.crypto_backend,
            storage_mode,
            seed: raw.seed,
            ldp,
            fl,
            attacks,
        })
    }

    /// Rejects attack/phase combinations that cannot happen and apps
    /// without their parameter section.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.device_count == 0 {
            return err("device_count must be at least 1".into());
        }
        match self.app {
            App::Ldp => {
                let Some(l) = &self.ldp else {
                    return err("app = \"ldp\" needs an [ldp] section".into());
                };
                if self.fl.is_some() {
                    return err("[fl] section given for app = \"ldp\"".into());
                }
                if l.rounds == 0 {
                    return err("ldp.rounds must be at least 1".into());
                }
                crate::apps::CategoricalSensor::new(&l.frequencies, l.params.k)
                    .map_err(HarnessError::Config)?;
            }
            App::Fl => {
                let Some(f) = &self.fl else {
                    return err("app = \"fl\" needs an [fl] section".into());
                };
                if self.ldp.is_some() {
                    return err("[ldp] section given for app = \"fl\"".into());
                }
                if f.dim == 0 {
                    return err("fl.true_weights must not be empty".into());
                }
                if f.samples == 0 || f.epochs == 0 {
                    return err("fl.samples and fl.epochs must be at least 1".into());
                }
                let finite = [f.alpha, f.eta, f.true_bias, f.noise]
                    .iter()
                    .chain(&f.true_weights)
                    .all(|v| v.is_finite());
                if !finite || f.alpha < 0.0 || f.noise < 0.0 {
                    return err("fl parameters must be finite, alpha and noise non-negative".into());
                }
            }
        }
        for a in &self.attacks {
            self.validate_attack(a)?;
        }
        Ok(())
    }

    fn validate_attack(&self, a: &AttackSpec) -> Result<(), HarnessError> {
        let bad = |why: &str| Err(HarnessError::Config(format!("{a}: {why}")));
        if a.device >= self.device_count {
            return bad("no such device");
        }
        let phases = self.app.phases();
        match a.timing {
            Timing::BeforeSetup => {}
            Timing::BetweenPhases(x, y) => {
                if !phases.windows(2).any(|w| w == [x, y]) {
                    return bad("phases are not consecutive for this app");
                }
            }
            Timing::InTransit(p) => {
                if !phases.contains(&p) {
                    return bad("phase does not exist for this app");
                }
            }
        }
        let on_device = a.kind.acts_on_device();
        let in_transit = matches!(a.timing, Timing::InTransit(_));
        if a.kind != AttackKind::None && on_device == in_transit {
            return bad(if on_device {
                "device attacks happen before setup or between phases"
            } else {
                "message attacks happen in transit"
            });
        }
        match &a.kind {
            AttackKind::CorruptFunction { f_id, patch } => {
                let Some((_, len)) = self.app.function_range(f_id) else {
                    return bad("unknown function");
                };
                if patch.offset + patch.mask.len() > len {
                    return bad("patch runs past the end of the function");
                }
            }
            AttackKind::TamperState { f_id, .. } => {
                if self.app.function_range(f_id).is_none() {
                    return bad("unknown function");
                }
            }
            AttackKind::ReplayRequest if a.timing == Timing::InTransit(phases[0]) => {
                return bad("nothing to replay before the first request");
            }
            _ => {}
        }
        Ok(())
    }

    pub fn attacks_for(&self, device: usize) -> impl Iterator<Item = &AttackSpec> {
        self.attacks.iter().filter(move |a| a.device == device)
    }
}

fn parse_attack(raw: RawAttack, app: App) -> Result<AttackSpec, HarnessError> {
    let timing: Timing = raw.when.parse().map_err(HarnessError::Config)?;
    let cfg_err = |m: String| HarnessError::Config(format!("attack `{}`: {m}", raw.kind));
    let patch = || -> Result<Patch, HarnessError> {
        let mask = match &raw.mask {
            Some(h) => hex::decode(h).map_err(|e| cfg_err(format!("mask: {e}")))?,
            None => vec![0xff],
        };
        if mask.is_empty() || mask.iter().all(|&b| b == 0) {
            return Err(cfg_err("mask must have a nonzero byte".into()));
        }
        Ok(Patch {
            offset: raw.offset,
            mask,
        })
    };
    let function = || -> Result<String, HarnessError> {
        raw.function
            .clone()
            .ok_or_else(|| cfg_err("needs `function`".into()))
    };
    let kind = match raw.kind.as_str() {
        "none" => AttackKind::None,
        "corrupt_function" => AttackKind::CorruptFunction {
            f_id: function()?,
            patch: patch()?,
        },
        "tamper_state" => AttackKind::TamperState {
            // any function of the app names its shared slot
            f_id: raw.function.clone().unwrap_or_else(|| app.function_ids()[0].to_owned()),
            patch: patch()?,
        },
        "tamper_output" => AttackKind::TamperOutput { patch: patch()? },
        "tamper_request" => AttackKind::TamperRequest { patch: patch()? },
        "replay_request" => AttackKind::ReplayRequest,
        "forge_request" => AttackKind::ForgeRequest,
        "drop_response" => AttackKind::DropResponse,
        other => return Err(cfg_err(format!("unknown attack kind `{other}`"))),
    };
    Ok(AttackSpec {
        device: raw.device,
        kind,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LDP: &str = r#"
app = "ldp"
device_count = 3
crypto_backend = "sig"
storage_mode = "outsourced_mac"
seed = 5

[ldp]
f = 0.5
p = 0.75
q = 0.25
k = 3
rounds = 2
frequencies = [0.5]
"#;

    fn with_attack(base: &str, attack: &str) -> Result<ScenarioConfig, HarnessError> {
        ScenarioConfig::from_toml(&format!("{base}\n[[attack]]\n{attack}"))
    }

    #[test]
    fn parses_full_scenario() {
        let cfg = ScenarioConfig::from_toml(LDP).unwrap();
        assert_eq!(cfg.app, App::Ldp);
        assert_eq!(cfg.storage_mode, StorageMode::OutsourcedMac);
        assert_eq!(cfg.ldp.as_ref().unwrap().rounds, 2);
        assert!(cfg.attacks.is_empty());

        let cfg = with_attack(
            LDP,
            "device = 1\nkind = \"tamper_state\"\nwhen = \"between_phases(setup, collect)\"\nmask = \"0f\"\noffset = 2",
        )
        .unwrap();
        assert_eq!(
            cfg.attacks[0],
            AttackSpec {
                device: 1,
                kind: AttackKind::TamperState {
                    f_id: "init_state".into(),
                    patch: Patch { offset: 2, mask: vec![0x0f] }
                },
                timing: Timing::BetweenPhases(Phase::Setup, Phase::Collect),
            }
        );
    }

    #[test]
    fn defaults() {
        let cfg = ScenarioConfig::from_toml(
            "app = \"fl\"\ndevice_count = 1\n[fl]\nsamples = 4\nepochs = 3\nalpha = 0.1\ntrue_weights = [1.0]",
        )
        .unwrap();
        assert_eq!(cfg.crypto_backend, "mac");
        assert_eq!(cfg.storage_mode, StorageMode::Digest);
        assert_eq!(cfg.fl.unwrap().eta, 1.0);
    }

    #[test]
    fn rejects_impossible_combinations() {
        let cases = [
            "device = 0\nkind = \"corrupt_function\"\nfunction = \"ldp_dc\"\nwhen = \"in_transit(collect)\"",
            "device = 0\nkind = \"tamper_output\"\nwhen = \"before_setup\"",
            "device = 0\nkind = \"tamper_output\"\nwhen = \"in_transit(train)\"",
            "device = 0\nkind = \"replay_request\"\nwhen = \"in_transit(setup)\"",
            "device = 0\nkind = \"tamper_state\"\nwhen = \"between_phases(setup, train)\"",
            "device = 0\nkind = \"corrupt_function\"\nfunction = \"train\"\nwhen = \"before_setup\"",
            "device = 0\nkind = \"corrupt_function\"\nfunction = \"ldp_dc\"\nwhen = \"before_setup\"\noffset = 1024",
            "device = 3\nkind = \"drop_response\"\nwhen = \"in_transit(collect)\"",
            "device = 0\nkind = \"tamper_output\"\nwhen = \"in_transit(collect)\"\nmask = \"00\"",
            "device = 0\nkind = \"teleport\"\nwhen = \"before_setup\"",
            "device = 0\nkind = \"none\"\nwhen = \"sometime\"",
        ];
        for case in cases {
            assert!(with_attack(LDP, case).is_err(), "accepted: {case}");
        }
        assert!(ScenarioConfig::from_toml("app = \"ldp\"\ndevice_count = 1").is_err());
        assert!(ScenarioConfig::from_toml(&LDP.replace("seed = 5", "seed = 5\nbogus = 1")).is_err());
        assert!(ScenarioConfig::from_toml(&LDP.replace("q = 0.25", "q = 0.75")).is_err());
    }

    #[test]
    fn timing_grammar() {
        for t in [
            Timing::BeforeSetup,
            Timing::BetweenPhases(Phase::Collect, Phase::Train),
            Timing::InTransit(Phase::Setup),
        ] {
            assert_eq!(t.to_string().parse::<Timing>().unwrap(), t);
        }
        assert_eq!(
            "in_transit ( train )".parse::<Timing>(),
            Ok(Timing::InTransit(Phase::Train))
        );
    }

    #[test]
    fn patch_always_changes_target() {
        let p = Patch { offset: 3, mask: vec![1] };
        let mut empty = Vec::new();
        p.apply(&mut empty);
        assert_eq!(empty, [0, 0, 0, 1]);
        let mut v = vec![1, 1, 1, 1];
        p.apply(&mut v);
        assert_eq!(v, [1, 1, 1, 0]);
    }
}
