use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn posx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name]
        .iter()
        .collect();
    p.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn run_into(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let path = scenario(name);
    let mut args = vec!["run", "--scenario", &path, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    posx(&args)
}

fn verdicts(summary: &str) -> Vec<String> {
    summary
        .lines()
        .filter(|l| l.contains("\"verdict\"") || l.contains("\"abort\""))
        .map(str::to_owned)
        .collect()
}

#[test]
fn benign_run_exits_zero_and_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = run_into(tmp.path(), "ldp_benign.toml", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = fs::read_to_string(tmp.path().join("summary.json")).unwrap();
    assert_eq!(summary, stdout(&out));
    assert!(summary.contains("\"all_accepted\": true"));
    for f in ["transcript.txt", "pmem_expected.bin", "device_keys.txt", "reports.txt"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn state_tamper_run_names_the_abort() {
    let tmp = TempDir::new().unwrap();
    let out = run_into(tmp.path(), "ldp_state_tamper.toml", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("\"abort\": \"state_check_failed\""));
}

#[test]
fn seed_override_changes_reports_not_verdicts() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for name in ["ldp_benign.toml", "ldp_state_tamper.toml"] {
        let oa = run_into(a.path(), name, &["--seed", "100"]);
        let ob = run_into(b.path(), name, &["--seed", "101"]);
        assert_eq!(oa.status.code(), ob.status.code());
        assert_eq!(verdicts(&stdout(&oa)), verdicts(&stdout(&ob)));
        let ra = fs::read(a.path().join("reports.txt")).unwrap();
        let rb = fs::read(b.path().join("reports.txt")).unwrap();
        assert_ne!(ra, rb, "{name}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    run_into(a.path(), "fl_benign.toml", &[]);
    run_into(b.path(), "fl_benign.toml", &[]);
    for f in ["transcript.txt", "summary.json", "device_keys.txt", "pmem_expected.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ldp_aggregate_contract() {
    let tmp = TempDir::new().unwrap();
    let reports = tmp.path().join("r.txt");
    // value 2 of k=2: bit 2 set, packed bit-0-first
    fs::write(&reports, "04\n").unwrap();
    let args = |p: &Path| {
        vec![
            "ldp-aggregate".to_owned(),
            "--reports".into(),
            p.to_str().unwrap().into(),
            "--f".into(),
            "0".into(),
            "--p".into(),
            "1".into(),
            "--q".into(),
            "0".into(),
            "--k".into(),
            "2".into(),
        ]
    };
    let run = |p: &Path| {
        let a = args(p);
        posx(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let out = run(&reports);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "0\t0\t0\n1\t0\t0\n2\t1\t1\n3\t0\t0\n");

    fs::write(&reports, "").unwrap();
    assert_ne!(run(&reports).status.code(), Some(0));

    fs::write(&reports, "04\n0g\n").unwrap();
    let out = run(&reports);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn verify_transcript_contract() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    run_into(dir, "ldp_benign.toml", &[]);
    let t = dir.join("transcript.txt");
    let pk = dir.join("device_keys.txt");
    let pmem = dir.join("pmem_expected.bin");
    let verify = |t: &Path, pmem: &Path| {
        posx(&[
            "verify-transcript",
            "--transcript",
            t.to_str().unwrap(),
            "--pmem",
            pmem.to_str().unwrap(),
            "--pk",
            pk.to_str().unwrap(),
        ])
    };
    let ok = verify(&t, &pmem);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("12/12 proofs valid"));

    let mut other = fs::read(&pmem).unwrap();
    other[5000] ^= 1;
    let bad_pmem = dir.join("other.bin");
    fs::write(&bad_pmem, other).unwrap();
    let out = verify(&t, &bad_pmem);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("INVALID"));

    let text = fs::read_to_string(&t).unwrap();
    let line = text.lines().position(|l| l.starts_with("response ")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let last = lines[line].pop().unwrap();
    lines[line].push(if last == '0' { '1' } else { '0' });
    let flipped = dir.join("flipped.txt");
    fs::write(&flipped, lines.join("\n") + "\n").unwrap();
    let out = verify(&flipped, &pmem);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains(&format!("line {}", line + 1)), "{}", stderr(&out));
}

#[test]
fn fl_round_prints_aggregate() {
    let out = posx(&["fl-round", "--scenario", &scenario("fl_benign.toml")]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["m"], 4);
    assert!((v["w"][0].as_f64().unwrap() - 1.5).abs() < 0.05);

    let out = posx(&["fl-round", "--scenario", &scenario("fl_model_tamper.toml")]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["m"], 3);

    let out = posx(&["fl-round", "--scenario", &scenario("ldp_benign.toml")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_prints_every_record() {
    let tmp = TempDir::new().unwrap();
    run_into(tmp.path(), "ldp_state_tamper.toml", &[]);
    let t = tmp.path().join("transcript.txt");
    let out = posx(&["replay", "--transcript", t.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&t).unwrap();
    assert_eq!(stdout(&out).lines().count(), text.lines().count());
    assert!(stdout(&out).contains("abort state_check_failed"));
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let out = posx(&["run", "--scenario", &scenario("ldp_benign.toml"), "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "app = \"ldp\"\ndevice_count = 2\n").unwrap();
    let out = posx(&["run", "--scenario", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("[ldp]"), "{}", stderr(&out));
}
