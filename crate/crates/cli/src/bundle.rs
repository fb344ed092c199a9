//! Result bundles: per-seed records, aggregates and paired comparisons.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ider::streams::Protocol;
use ider::trainer::RunResult;

use crate::config::ExperimentConfig;

/// Minimum per-seed FAA gain for a candidate to pass a comparison.
pub const FAA_MARGIN: f64 = 0.05;
/// Minimum per-seed relative ECE reduction for a candidate to pass.
pub const ECE_REDUCTION: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub faa: Stat,
    pub final_forgetting: Option<Stat>,
    pub ece: Stat,
    pub wall_clock_secs: Stat,
}

impl Aggregate {
    pub fn of(runs: &[RunResult]) -> Option<Self> {
        let pick = |f: fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let ff: Option<Vec<f64>> = runs.iter().map(|r| r.final_forgetting).collect();
        Some(Self {
            faa: Stat::of(&pick(|r| r.faa))?,
            final_forgetting: ff.as_deref().and_then(Stat::of),
            ece: Stat::of(&pick(|r| r.ece))?,
            wall_clock_secs: Stat::of(&pick(|r| r.wall_clock_secs.iter().sum()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub version: String,
    pub git_revision: Option<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub aggregate: Option<Aggregate>,
}

/// SHA-256 of the resolved config, ignoring where the output is written.
pub fn config_hash(config: &ExperimentConfig) -> anyhow::Result<String> {
    let mut c = config.clone();
    c.output.dir = Default::default();
    let digest = Sha256::digest(serde_json::to_vec(&c)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

impl ResultBundle {
    pub fn new(config: &ExperimentConfig, runs: Vec<RunResult>) -> anyhow::Result<Self> {
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: git_revision(),
            config_hash: config_hash(config)?,
            config: config.clone(),
            aggregate: Aggregate::of(&runs),
            runs,
        })
    }

    pub fn protocol(&self) -> Protocol {
        self.config.stream.protocol
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    /// Candidate minus baseline.
    pub faa: f64,
    pub final_forgetting: Option<f64>,
    pub ece: f64,
    /// `1 - ece_candidate / ece_baseline`; absent when the baseline ECE is 0.
    pub ece_relative_reduction: Option<f64>,
    pub faa_improved: bool,
    pub ff_reduced: Option<bool>,
    pub ece_reduced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub per_seed: Vec<SeedDelta>,
    pub mean_ff_delta: Option<f64>,
    /// FAA gain of at least `FAA_MARGIN` on every seed.
    pub faa_margin_holds: bool,
    /// Relative ECE reduction of at least `ECE_REDUCTION` on every seed.
    pub ece_reduction_holds: bool,
    /// Lower mean final forgetting.
    pub ff_reduction_holds: bool,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.faa_margin_holds && self.ece_reduction_holds && self.ff_reduction_holds
    }

    pub fn render(&self) -> String {
        let mut s = String::from("seed     dFAA      dFF       dECE    ECE-rel\n");
        let fmt = |v: Option<f64>| v.map_or("      n/a".to_string(), |v| format!("{v:+9.4}"));
        for d in &self.per_seed {
            s.push_str(&format!(
                "{:<5}{:+9.4}{}{:+9.4}{}\n",
                d.seed,
                d.faa,
                fmt(d.final_forgetting),
                d.ece,
                fmt(d.ece_relative_reduction)
            ));
        }
        let mark = |b: bool| if b { "holds" } else { "fails" };
        s.push_str(&format!(
            "FAA gain >= {FAA_MARGIN} on every seed: {}\nECE reduction >= {:.0}% on every seed: {}\nmean FF lower: {}\n",
            mark(self.faa_margin_holds),
            ECE_REDUCTION * 100.0,
            mark(self.ece_reduction_holds),
            mark(self.ff_reduction_holds),
        ));
        s
    }
}

/// Pairs runs by seed and reports candidate-minus-baseline deltas.
pub fn compare(candidate: &ResultBundle, baseline: &ResultBundle) -> anyhow::Result<Comparison> {
    if candidate.protocol() != baseline.protocol() {
        bail!(
            "bundles use different stream protocols ({:?} vs {:?})",
            candidate.protocol(),
            baseline.protocol()
        );
    }
    let seeds = |b: &ResultBundle| {
        let mut s: Vec<u64> = b.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s
    };
    if seeds(candidate) != seeds(baseline) {
        bail!(
            "bundles cover different seeds ({:?} vs {:?})",
            seeds(candidate),
            seeds(baseline)
        );
    }
    if candidate.runs.is_empty() {
        bail!("bundles contain no runs");
    }
    let per_seed: Vec<SeedDelta> = candidate
        .runs
        .iter()
        .map(|c| {
            let b = baseline
                .runs
                .iter()
                .find(|b| b.seed == c.seed)
                .expect("seed lists match");
            let ff = c
                .final_forgetting
                .zip(b.final_forgetting)
                .map(|(x, y)| x - y);
            let rel = (b.ece > 0.0).then(|| 1.0 - c.ece / b.ece);
            SeedDelta {
                seed: c.seed,
                faa: c.faa - b.faa,
                final_forgetting: ff,
                ece: c.ece - b.ece,
                ece_relative_reduction: rel,
                faa_improved: c.faa > b.faa,
                ff_reduced: ff.map(|d| d < 0.0),
                ece_reduced: c.ece < b.ece,
            }
        })
        .collect();
    let ffs: Option<Vec<f64>> = per_seed.iter().map(|d| d.final_forgetting).collect();
    let mean_ff_delta = ffs.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Comparison {
        faa_margin_holds: per_seed.iter().all(|d| d.faa >= FAA_MARGIN),
        ece_reduction_holds: per_seed
            .iter()
            .all(|d| d.ece_relative_reduction.is_some_and(|r| r >= ECE_REDUCTION)),
        ff_reduction_holds: mean_ff_delta.is_some_and(|d| d < 0.0),
        mean_ff_delta,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
