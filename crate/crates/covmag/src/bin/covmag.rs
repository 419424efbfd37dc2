use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use covmag::field::NoiseSourceSpec;
use covmag::harness::{self, ExperimentConfig};
use covmag::theory;

#[derive(Parser)]
#[command(
    name = "covmag",
    about = "Two-sensor covariance magnetometry simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the config's master_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to COVMAG_THREADS, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Tabular output format
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run one point: shot table + correlation report
    Simulate(RunArgs),
    /// Run the config's sweep axis, one seeded point per value
    Sweep(RunArgs),
    /// Print the closed-form prediction for a config without simulating
    Theory {
        #[arg(long)]
        config: PathBuf,
    },
    /// Spectral decomposition over a tau sweep
    Reconstruct(RunArgs),
    /// Parse, default and cross-validate a config; echo the resolved form
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in numerical oracle suite
    Selftest {
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            use covmag::Error::*;
            match e {
                Config(_) | Io(_) | InvalidGrid(_) | InvalidSource { .. } | GridTooCoarse { .. }
                | DuplicateSeedStream(_) | GridCoverage { .. } | InvalidSequence(_)
                | InvalidChannel(_) | DriftNeedsPhotonCount => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load(path: &PathBuf, seed: Option<u64>) -> covmag::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> covmag::Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => {
            harness::init_threads(args.threads);
            let cfg = load(&args.config, args.seed)?;
            let (table, report) = harness::run(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            match args.format {
                Format::Csv => table.write_csv(&args.out.join("shots.csv"))?,
                Format::Jsonl => table.write_jsonl(&args.out.join("shots.jsonl"))?,
            }
            report.write_jsonl(&args.out.join("report.jsonl"))?;
            println!(
                "r = {:+.6e}  sigma_r = {:.3e}  n = {}  ({:.2e} shots/s)",
                report.estimate.r,
                report.estimate.sigma_r,
                report.estimate.n_effective,
                report.shots_per_second
            );
            if let (Some(t), Some(res)) = (&report.theory, report.residual) {
                println!(
                    "theory [{}]: r_obs = {:+.6e}  residual = {:+.2}",
                    t.model, t.r_observed, res
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            harness::init_threads(args.threads);
            let cfg = load(&args.config, args.seed)?;
            let result = harness::run_sweep(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            match args.format {
                Format::Csv => result.write_csv(&args.out.join("sweep.csv"))?,
                Format::Jsonl => {
                    let text = serde_json::to_string(&result).expect("serializes");
                    std::fs::write(args.out.join("sweep.jsonl"), text + "\n")?;
                }
            }
            println!("{} sweep points written", result.points.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Theory { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let point = harness::resolve(&cfg)?;
            match harness::predict(&point) {
                Some(t) => {
                    println!("{}", serde_json::to_string_pretty(&t).expect("serializes"));
                    Ok(ExitCode::SUCCESS)
                }
                None => Err(covmag::Error::Config(
                    "no closed-form prediction for this source combination".into(),
                )),
            }
        }
        Command::Reconstruct(args) => {
            harness::init_threads(args.threads);
            let cfg = load(&args.config, args.seed)?;
            let rows = harness::reconstruct_report(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            match args.format {
                Format::Csv => {
                    harness::write_reconstruct_csv(&rows, &args.out.join("reconstruct.csv"))?
                }
                Format::Jsonl => {
                    let mut text = String::new();
                    for row in &rows {
                        text.push_str(&serde_json::to_string(row).expect("serializes"));
                        text.push('\n');
                    }
                    std::fs::write(args.out.join("reconstruct.jsonl"), text)?;
                }
            }
            println!("{} reconstruction points written", rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            print!("{}", cfg.to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { threads } => {
            harness::init_threads(threads);
            if selftest() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// selftest: quick numerical oracles covering each stage

struct Suite {
    all_ok: bool,
}

impl Suite {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.all_ok &= ok;
    }
}

fn base_config(n_shots: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
schema_version = 1
n_shots = {n_shots}
master_seed = 20260824

[sequence]
kind = "xy8"
tau = 250e-9
n_pulses = 32

[channel1]
mode = "threshold"
p1_given_0 = 0.0
p1_given_1 = 1.0

[channel2]
mode = "threshold"
p1_given_0 = 0.0
p1_given_1 = 1.0
"#
    ))
    .expect("built-in config is valid")
}

fn selftest() -> bool {
    let mut suite = Suite { all_ok: true };

    // 1. null pipeline
    {
        let cfg = base_config(100_000);
        let (_, report) = harness::run(&cfg).expect("null run");
        let ok = report.estimate.r.abs() < 3.0 * report.estimate.sigma_r;
        suite.check(
            "null-pipeline",
            ok,
            format!(
                "|r| = {:.2e} < 3 sigma_r = {:.2e}",
                report.estimate.r.abs(),
                3.0 * report.estimate.sigma_r
            ),
        );
    }

    // 2. shared-tone correlation vs closed form
    {
        let mut cfg = base_config(200_000);
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(0.8e-6, 2.0e6, 0.0, 11);
        let (_, report) = harness::run(&cfg).expect("tone run");
        let res = report.residual.expect("theory available");
        suite.check(
            "shared-tone-bessel",
            res.abs() < 3.0,
            format!("residual = {res:+.2}"),
        );
    }

    // 3. line-broadened correlation constant
    {
        let consts = covmag::sequence::GyromagneticConstants::default();
        let line = theory::LineShape::truncated(2.0e6, 1.0e6);
        let r = theory::r_ideal_bessel_broadened(0.0, 0.0, 13e-6, &line, 250e-9, 32, &consts);
        suite.check(
            "broadened-bessel-constant",
            (r - 0.27990).abs() < 2e-3,
            format!("r = {r:.5} (reference 0.27990)"),
        );
    }

    // 4. sensitivity timing anchors
    {
        let consts = covmag::sequence::GyromagneticConstants::default();
        let (t2, t, sb) = (100e-6, 50e-6, 1e-9);
        let t_fast = theory::required_total_time(1.0, t2, t, 1e-3, sb, &consts);
        let t_mid = theory::required_total_time(4.0, t2, t, 1e-3, sb, &consts);
        let t_slow = theory::required_total_time(35.0, t2, t, 300e-9, sb, &consts);
        let ok = (t_fast - 13.05).abs() < 0.2
            && (t_mid / 3340.0 - 1.0).abs() < 0.01
            && (t_slow / 3600.0 - 260.6).abs() < 3.0;
        suite.check(
            "sensitivity-anchors",
            ok,
            format!(
                "{t_fast:.2} s / {:.2} h / {:.1} h",
                t_mid / 3600.0,
                t_slow / 3600.0
            ),
        );
    }

    // 5. spectral round trip
    {
        let (tau, n) = (1.8e-6, 16);
        let t = n as f64 * tau;
        let s_c = 0.3 / t * std::f64::consts::PI / 2.0;
        let r = theory::forward_correlation_from_spectrum(s_c, 0.8, 0.8, 16.0, tau, n);
        let point =
            theory::reconstruct_correlated_spectrum(r, 0.8, 0.8, 16.0, tau, n, 1e-3).unwrap();
        suite.check(
            "spectral-round-trip",
            (point.s_c / s_c - 1.0).abs() < 1e-12,
            format!("relative error = {:.2e}", (point.s_c / s_c - 1.0).abs()),
        );
    }

    // 6. replay determinism
    {
        let mut cfg = base_config(20_000);
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(0.8e-6, 2.0e6, 0.0, 11);
        let point = harness::resolve(&cfg).unwrap();
        let a = harness::run_point(&point).unwrap();
        let b = harness::run_point(&point).unwrap();
        suite.check(
            "replay-determinism",
            a == b,
            "two runs bit-identical".to_string(),
        );
    }

    println!(
        "selftest: {}",
        if suite.all_ok { "ALL PASS" } else { "FAILED" }
    );
    suite.all_ok
}
