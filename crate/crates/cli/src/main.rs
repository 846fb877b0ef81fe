use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use posx::apps::App;
use posx::crypto::BackendRegistry;
use posx::harness::{run_scenario, ScenarioConfig, ScenarioOutcome};
use posx::ldp::{self, LdpParams};
use posx::transcript::{self, RecordKind};

/// Emulated proofs of stateful execution for LDP and FL data collection.
#[derive(Parser)]
#[command(name = "posx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario; exits 0 iff every device is accepted throughout.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate value frequencies from a file of hex reports.
    LdpAggregate {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        f: f64,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        k: u8,
    },
    /// Run one federated round and print the aggregated weights.
    FlRound {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a transcript in readable form after checking its chain.
    Replay {
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Recheck every device proof in a transcript.
    VerifyTranscript {
        #[arg(long)]
        transcript: PathBuf,
        /// Expected program image.
        #[arg(long)]
        pmem: PathBuf,
        /// Key file with `<device> <scheme> <hex>` lines.
        #[arg(long)]
        pk: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_toml(&read(path)?)
        .with_context(|| format!("in {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_artifacts(out: &ScenarioOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let put = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    };
    put("transcript.txt", out.transcript.to_text().as_bytes())?;
    put("summary.json", summary_json(out)?.as_bytes())?;
    put("pmem_expected.bin", &out.pmem_expected)?;
    put("device_keys.txt", transcript::format_key_file(&out.device_keys).as_bytes())?;
    if out.config.app == App::Ldp {
        let reports: Vec<_> = out.reports.iter().map(|(_, r)| r.clone()).collect();
        put("reports.txt", ldp::format_reports(&reports).as_bytes())?;
    }
    Ok(())
}

fn summary_json(out: &ScenarioOutcome) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&out.summary())?;
    s.push('\n');
    Ok(s)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { scenario, seed, out } => {
            let cfg = load_scenario(&scenario, seed)?;
            let outcome = run_scenario(&cfg)?;
            write_artifacts(&outcome, &out)?;
            print!("{}", summary_json(&outcome)?);
            Ok(outcome.all_accepted())
        }
        Command::LdpAggregate { reports, f, p, q, k } => {
            let params = LdpParams::new(f, p, q, k)?;
            let reports = ldp::parse_reports(&read(&reports)?, k)
                .with_context(|| format!("in {}", reports.display()))?;
            let est = ldp::estimate_frequency(&reports, &params)?;
            print!("{}", ldp::format_estimate(&est));
            Ok(true)
        }
        Command::FlRound { scenario, out } => {
            let cfg = load_scenario(&scenario, None)?;
            if cfg.app != App::Fl {
                bail!("{} is not an fl scenario", scenario.display());
            }
            let outcome = run_scenario(&cfg)?;
            if let Some(dir) = out {
                write_artifacts(&outcome, &dir)?;
            }
            let Some(w) = &outcome.aggregate else {
                bail!("no device update was accepted");
            };
            let line = serde_json::json!({ "m": outcome.updates.len(), "w": w.w, "b": w.b });
            println!("{line}");
            Ok(outcome.all_accepted())
        }
        Command::Replay { transcript } => {
            let records = transcript::parse_transcript(&read(&transcript)?)?;
            for r in &records {
                let fields: Vec<String> = r
                    .body
                    .fields()
                    .iter()
                    .map(|(label, value)| format!("{label}={}", render(r.kind, label, value)))
                    .collect();
                println!(
                    "{:<8} dev={:<3} seq={:<4} {:<12} {}",
                    r.phase.as_str(),
                    r.device,
                    r.seq,
                    r.kind.tag(),
                    fields.join(" ")
                );
            }
            Ok(true)
        }
        Command::VerifyTranscript { transcript, pmem, pk } => {
            let text = read(&transcript)?;
            let pmem = fs::read(&pmem).with_context(|| format!("reading {}", pmem.display()))?;
            let keys = transcript::parse_key_file(&read(&pk)?)?;
            let checks = transcript::verify_transcript(&text, &BackendRegistry::default(), &pmem, &keys)?;
            for c in &checks {
                println!(
                    "line {} device {} c={} {}",
                    c.line,
                    c.device,
                    c.c_vrf,
                    if c.valid { "valid" } else { "INVALID" }
                );
            }
            let ok = checks.iter().filter(|c| c.valid).count();
            println!("{ok}/{} proofs valid", checks.len());
            Ok(ok == checks.len())
        }
    }
}

fn render(kind: RecordKind, label: &str, value: &[u8]) -> String {
    let integer = matches!(label, "c") && value.len() == 8;
    if integer {
        return u64::from_le_bytes(value.try_into().expect("8 bytes")).to_string();
    }
    let texty = matches!(kind, RecordKind::Tamper | RecordKind::Transition | RecordKind::Verdict)
        || matches!(label, "f" | "scheme" | "sigma_scheme" | "reason");
    match std::str::from_utf8(value) {
        Ok(s) if texty => format!("{s:?}"),
        _ => hex::encode(value),
    }
}
