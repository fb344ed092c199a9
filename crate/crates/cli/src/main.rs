//! `ider`: runs continual-learning experiments from a TOML config, writes
//! result bundles and plots, and compares bundles.

mod bundle;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ider::nn::Network;
use ider::trainer::{run_experiment, RunOptions, RunResult};

use bundle::{compare, ResultBundle};
use config::{ExperimentConfig, Overrides, PlotKind};

const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Parser)]
#[command(name = "ider", version, about = "Continual-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured seed and write the result bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Validate the config and print the resolved plan without training.
    DryRun {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare a candidate bundle against a baseline bundle, seed by seed.
    Compare {
        /// Candidate `results.json` or the directory holding it.
        candidate: PathBuf,
        /// Baseline `results.json` or the directory holding it.
        baseline: PathBuf,
    },
    /// Write the task stream of one seed as JSON.
    ExportStreamManifest {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Destination file; printed to stdout when absent.
        #[arg(long = "manifest")]
        manifest: Option<PathBuf>,
    },
}

/// Failure classes, each with its own exit status.
enum Failure {
    Config(anyhow::Error),
    Comparison(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Comparison(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, overrides } => cmd_run(&config, &overrides),
        Command::DryRun { config, overrides } => cmd_dry_run(&config, &overrides),
        Command::Compare {
            candidate,
            baseline,
        } => cmd_compare(&candidate, &baseline),
        Command::ExportStreamManifest {
            config,
            overrides,
            manifest,
        } => cmd_manifest(&config, &overrides, manifest.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Comparison(msg) => eprintln!("{msg}"),
                Failure::Runtime(e) => eprintln!("run failed: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path, overrides).map_err(Failure::Config)
}

fn cmd_dry_run(path: &Path, overrides: &Overrides) -> Result<(), Failure> {
    let cfg = load(path, overrides)?;
    let (train, test) = cfg.load_data().map_err(Failure::Config)?;
    let arch = cfg.architecture(train.shape()).map_err(Failure::Config)?;
    let n_params = Network::zeroed(arch.clone())
        .map_err(|e| Failure::Config(e.into()))?
        .n_params();
    let resolved = toml::to_string_pretty(&cfg).map_err(|e| Failure::Config(e.into()))?;
    println!("{resolved}");
    println!(
        "config hash: {}",
        bundle::config_hash(&cfg).map_err(Failure::Config)?
    );
    println!(
        "data: {} train / {} test samples of shape {:?}, {} classes",
        train.len(),
        test.len(),
        train.shape(),
        train.n_classes()
    );
    println!("network: {n_params} parameters");
    for &seed in &cfg.output.seeds {
        let stream = cfg.stream(&train, seed).map_err(Failure::Config)?;
        println!("seed {seed}:");
        for t in stream.tasks() {
            println!(
                "  task {}: classes {:?}, {} samples",
                t.task_id,
                t.classes,
                t.train_samples.len()
            );
        }
    }
    Ok(())
}

fn cmd_manifest(path: &Path, overrides: &Overrides, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(path, overrides)?;
    let (train, _) = cfg.load_data().map_err(Failure::Config)?;
    let seed = cfg.output.seeds[0];
    let stream = cfg.stream(&train, seed).map_err(Failure::Config)?;
    let json =
        serde_json::to_string_pretty(&stream.manifest()).map_err(|e| Failure::Runtime(e.into()))?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Runtime),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn bundle_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(RESULTS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_compare(candidate: &Path, baseline: &Path) -> Result<(), Failure> {
    let a = ResultBundle::load(&bundle_path(candidate)).map_err(Failure::Runtime)?;
    let b = ResultBundle::load(&bundle_path(baseline)).map_err(Failure::Runtime)?;
    let report = compare(&a, &b).map_err(Failure::Config)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Comparison(
            "directional criteria do not hold".into(),
        ))
    }
}

fn cmd_run(path: &Path, overrides: &Overrides) -> Result<(), Failure> {
    let cfg = load(path, overrides)?;
    let (train, test) = cfg.load_data().map_err(Failure::Config)?;
    let arch = cfg.architecture(train.shape()).map_err(Failure::Config)?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::Runtime)?;
    let keep_logs = cfg.output.plots.contains(&PlotKind::IdempotenceHist);
    let mut runs: Vec<RunResult> = Vec::new();
    for &seed in &cfg.output.seeds {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let stream = cfg.stream(&train, seed).map_err(Failure::Config)?;
        let progress = out.join(format!("progress_seed{seed}"));
        let options = RunOptions {
            run_dir: Some(&progress),
            keep_logs,
            keep_steps: false,
        };
        eprintln!(
            "seed {seed}: training {} tasks with {:?}",
            stream.len(),
            train_cfg.method
        );
        let (mut result, _) = run_experiment(&stream, &train, &test, &arch, &train_cfg, &options)
            .map_err(|e| Failure::Runtime(e.into()))?;
        write_seed_artifacts(&out, &cfg, &result).map_err(Failure::Runtime)?;
        eprintln!(
            "seed {seed}: FAA {:.4}  FF {}  ECE {:.4}",
            result.faa,
            result
                .final_forgetting
                .map_or("n/a".into(), |f| format!("{f:.4}")),
            result.ece
        );
        result.confidence.clear();
        result.idempotence = None;
        runs.push(result);
        write_bundle(&out, &cfg, &runs).map_err(Failure::Runtime)?;
    }
    write_summary_plots(&out, &cfg, &runs).map_err(Failure::Runtime)?;
    Ok(())
}

fn write_bundle(out: &Path, cfg: &ExperimentConfig, runs: &[RunResult]) -> anyhow::Result<()> {
    let bundle = ResultBundle::new(cfg, runs.to_vec())?;
    let tmp = out.join(format!("{RESULTS_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_string_pretty(&bundle)? + "\n")?;
    std::fs::rename(tmp, out.join(RESULTS_FILE))?;
    Ok(())
}

fn write_seed_artifacts(out: &Path, cfg: &ExperimentConfig, r: &RunResult) -> anyhow::Result<()> {
    let k = r.seed;
    std::fs::write(
        out.join(format!("acc_matrix_seed{k}.csv")),
        r.matrix.to_csv(),
    )?;
    std::fs::write(
        out.join(format!("reliability_seed{k}.csv")),
        ider::metrics::reliability_csv(&r.reliability),
    )?;
    if cfg.output.plots.contains(&PlotKind::Reliability) {
        let bins: Vec<_> = r
            .reliability
            .iter()
            .map(|b| {
                (
                    b.lower,
                    b.upper,
                    (b.count > 0).then_some((b.accuracy, b.confidence)),
                )
            })
            .collect();
        plot::reliability_chart(&out.join(format!("reliability_seed{k}.png")), &bins)?;
    }
    if cfg.output.plots.contains(&PlotKind::IdempotenceHist) {
        if let Some(log) = &r.idempotence {
            let mut samples = vec![log.self_distance.clone()];
            samples.extend(log.cross_distance.clone());
            plot::histogram_chart(&out.join(format!("idempotence_seed{k}.png")), &samples, 30)?;
        }
    }
    Ok(())
}

/// Mean accuracy over the tasks seen so far, after each task.
fn accuracy_curve(r: &RunResult) -> Vec<f64> {
    let m = &r.matrix;
    (0..m.n_tasks())
        .map(|t| {
            let accs: Vec<f64> = (0..=t).filter_map(|i| m.get(i, t)).collect();
            accs.iter().sum::<f64>() / accs.len().max(1) as f64
        })
        .collect()
}

fn write_summary_plots(
    out: &Path,
    cfg: &ExperimentConfig,
    runs: &[RunResult],
) -> anyhow::Result<()> {
    if cfg.output.plots.contains(&PlotKind::AccuracyCurve) {
        let series: Vec<Vec<f64>> = runs.iter().map(accuracy_curve).collect();
        plot::line_chart(&out.join("accuracy_curve.png"), &series, (0.0, 1.0))?;
    }
    if cfg.output.plots.contains(&PlotKind::TaskMass) {
        let series: Vec<Vec<f64>> = runs.iter().filter_map(|r| r.task_mass.clone()).collect();
        if let Some(first) = series.first() {
            plot::grouped_bar_chart(
                &out.join("task_mass.png"),
                &series,
                1.0 / first.len() as f64,
            )?;
        }
    }
    Ok(())
}
