use posx::apps::Phase;
use posx::device::{AbortReason, StorageMode};
use posx::harness::{run_scenario, ScenarioConfig, ScenarioOutcome};
use posx::transcript::{parse_transcript, verify_transcript, RecordKind};
use posx::verifier::{FailureCause, Verdict};
use posx::crypto::BackendRegistry;

const LDP: &str = r#"
app = "ldp"
device_count = 4
seed = 9
[ldp]
f = 0.5
p = 0.75
q = 0.25
k = 3
rounds = 2
"#;

const FL: &str = r#"
app = "fl"
device_count = 4
seed = 9
[fl]
samples = 8
epochs = 50
alpha = 0.1
true_weights = [1.5, -2.0]
true_bias = 0.5
"#;

fn scenario(base: &str, backend: &str, mode: StorageMode, attack: Option<&str>) -> ScenarioConfig {
    let mut text = base.replace(
        "seed = 9",
        &format!("seed = 9\ncrypto_backend = \"{backend}\"\nstorage_mode = \"{mode}\""),
    );
    if let Some(a) = attack {
        text.push_str("\n[[attack]]\ndevice = 0\n");
        text.push_str(a);
    }
    ScenarioConfig::from_toml(&text).unwrap()
}

fn run(base: &str, backend: &str, mode: StorageMode, attack: Option<&str>) -> ScenarioOutcome {
    run_scenario(&scenario(base, backend, mode, attack)).unwrap()
}

fn failure_of(out: &ScenarioOutcome) -> (Phase, FailureCause, Option<AbortReason>) {
    let f = out.devices[0].failure.as_ref().expect("device 0 should fail");
    (f.phase, f.cause, f.abort)
}

#[test]
fn benign_runs_accept_everywhere() {
    for backend in ["mac", "sig"] {
        for mode in StorageMode::ALL {
            for base in [LDP, FL] {
                let out = run(base, backend, mode, None);
                assert!(out.all_accepted(), "{backend}/{mode}");
                let checks = verify_transcript(
                    &out.transcript.to_text(),
                    &BackendRegistry::default(),
                    &out.pmem_expected,
                    &out.device_keys,
                )
                .unwrap();
                assert!(!checks.is_empty() && checks.iter().all(|c| c.valid));
            }
        }
    }
}

#[test]
fn detection_matrix() {
    use AbortReason::*;
    use FailureCause::*;
    let cases: &[(&str, &str, Phase, FailureCause, Option<AbortReason>)] = &[
        (LDP, "kind = \"corrupt_function\"\nfunction = \"init_state\"\nwhen = \"before_setup\"", Phase::Setup, BadProof, None),
        (LDP, "kind = \"corrupt_function\"\nfunction = \"ldp_dc\"\nwhen = \"between_phases(setup, collect)\"", Phase::Collect, BadProof, None),
        (LDP, "kind = \"tamper_state\"\nwhen = \"between_phases(setup, collect)\"", Phase::Collect, NoResponse, Some(StateCheckFailed)),
        (LDP, "kind = \"tamper_output\"\nwhen = \"in_transit(collect)\"", Phase::Collect, BadProof, None),
        (LDP, "kind = \"replay_request\"\nwhen = \"in_transit(collect)\"", Phase::Collect, NoResponse, Some(BadCounter)),
        (LDP, "kind = \"forge_request\"\nwhen = \"in_transit(collect)\"", Phase::Collect, NoResponse, Some(BadRequestTag)),
        (LDP, "kind = \"tamper_request\"\nwhen = \"in_transit(collect)\"", Phase::Collect, NoResponse, Some(BadRequestTag)),
        (LDP, "kind = \"drop_response\"\nwhen = \"in_transit(setup)\"", Phase::Setup, NoResponse, None),
        (FL, "kind = \"tamper_state\"\nwhen = \"between_phases(collect, train)\"", Phase::Train, NoResponse, Some(StateCheckFailed)),
        (FL, "kind = \"tamper_output\"\nwhen = \"in_transit(train)\"", Phase::Train, BadProof, None),
        (FL, "kind = \"corrupt_function\"\nfunction = \"train\"\nwhen = \"between_phases(collect, train)\"", Phase::Train, BadProof, None),
    ];
    for backend in ["mac", "sig"] {
        for mode in StorageMode::ALL {
            for (base, attack, phase, cause, abort) in cases {
                let out = run(base, backend, mode, Some(attack));
                assert_eq!(
                    failure_of(&out),
                    (*phase, *cause, *abort),
                    "{backend}/{mode}: {attack}"
                );
                assert!(out.devices[1..].iter().all(|d| d.failure.is_none()));
            }
        }
    }
}

#[test]
fn rejected_contributions_never_reach_aggregates() {
    let out = run(LDP, "mac", StorageMode::Digest, Some("kind = \"tamper_output\"\nwhen = \"in_transit(collect)\""));
    assert!(out.reports.iter().all(|(d, _)| *d != 0));
    assert_eq!(out.estimate.as_ref().unwrap().n, 3 * 2);

    let benign = run(FL, "mac", StorageMode::Digest, None);
    let attacked = run(FL, "mac", StorageMode::Digest, Some("kind = \"tamper_output\"\nwhen = \"in_transit(train)\""));
    let honest: Vec<_> = benign.updates.iter().filter(|(d, _)| *d != 0).map(|(_, w)| w.clone()).collect();
    let expect = posx::fl::fedavg_aggregate(
        benign.initial_weights.as_ref().unwrap(),
        &honest,
        &posx::AggregationConfig { eta: 1.0 },
    )
    .unwrap();
    assert_eq!(attacked.aggregate.unwrap(), expect);
    assert_eq!(attacked.updates.len(), 3);
}

#[test]
fn runs_are_deterministic() {
    for base in [LDP, FL] {
        let a = run(base, "sig", StorageMode::OutsourcedMac, None);
        let b = run(base, "sig", StorageMode::OutsourcedMac, None);
        assert_eq!(a.transcript.to_text(), b.transcript.to_text());
        assert_eq!(format!("{:?}", a.summary()), format!("{:?}", b.summary()));
    }
}

#[test]
fn transcript_records_follow_the_protocol() {
    let out = run(LDP, "mac", StorageMode::Digest, Some("kind = \"tamper_state\"\nwhen = \"between_phases(setup, collect)\""));
    let recs = parse_transcript(&out.transcript.to_text()).unwrap();
    let dev0: Vec<_> = recs.iter().filter(|r| r.device == 0).collect();
    assert!(dev0.iter().any(|r| r.kind == RecordKind::Tamper));
    let last = dev0.last().unwrap();
    assert_eq!(last.kind, RecordKind::Verdict);
    assert_eq!(last.text("abort"), Some("state_check_failed"));
    assert_eq!(last.text("verdict"), Some(Verdict::Reject(FailureCause::NoResponse).to_string().as_str()));
    // every device's counters strictly increase
    for d in 0..4 {
        let cs: Vec<u64> = recs
            .iter()
            .filter(|r| r.device == d && r.kind == RecordKind::Request)
            .map(|r| r.u64("c").unwrap())
            .collect();
        assert!(cs.windows(2).all(|w| w[0] < w[1]));
    }
}
