//! Accuracy, forgetting, calibration and idempotence diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{empty_batch, FrozenCheckpoint, Network};
use crate::streams::TaskStream;
use crate::tensor::{softmax_rows, Tensor};

/// `a[i][t]`: accuracy on task `i` after training through task `t`, defined
/// for `i <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n_tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            entries: vec![vec![None; n_tasks]; n_tasks],
        }
    }

    /// Builds a complete matrix from rows `a[i][t]` (entries above the
    /// diagonal, `t < i`, are ignored).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            for t in i..rows.len() {
                let v = *row
                    .get(t)
                    .ok_or_else(|| shape_err(format!("row {i} is missing entry {t}")))?;
                m.set(i, t, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn set(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        if task > after || after >= self.n_tasks {
            return Err(shape_err(format!(
                "entry ({task}, {after}) lies outside the lower triangle of a {0}x{0} matrix",
                self.n_tasks
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(shape_err(format!("accuracy {acc} outside [0, 1]")));
        }
        self.entries[task][after] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.entries.get(task)?.get(after).copied().flatten()
    }

    /// Accuracies of every task after the last one, if all are recorded.
    pub fn final_row(&self) -> Result<Vec<f64>> {
        if self.n_tasks == 0 {
            return Err(Error::UndefinedMetric("matrix has no tasks".into()));
        }
        let last = self.n_tasks - 1;
        (0..self.n_tasks)
            .map(|i| {
                self.get(i, last).ok_or_else(|| {
                    Error::UndefinedMetric(format!(
                        "accuracy of task {i} after the last task is missing"
                    ))
                })
            })
            .collect()
    }

    /// CSV with one row per evaluated task and one column per training
    /// stage; undefined cells are left blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for t in 0..self.n_tasks {
            s.push_str(&format!(",after_{t}"));
        }
        s.push('\n');
        for i in 0..self.n_tasks {
            s.push_str(&i.to_string());
            for t in 0..self.n_tasks {
                s.push(',');
                if let Some(v) = self.get(i, t) {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean accuracy over all tasks after the final task.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over the first `T-1` tasks of the drop from their best accuracy
/// before the final task to their final accuracy.
pub fn final_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.n_tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "forgetting needs at least two tasks".into(),
        ));
    }
    let last = m.final_row()?;
    let mut total = 0.0;
    for (i, &fin) in last.iter().enumerate().take(t - 1) {
        let best = (i..t - 1)
            .map(|j| {
                m.get(i, j).ok_or_else(|| {
                    Error::UndefinedMetric(format!("accuracy ({i}, {j}) is missing"))
                })
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .map(|a| a - fin)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / (t - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
    pub task: usize,
}

impl ConfidenceRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Index of the `(m/B, (m+1)/B]` bin containing `p`.
pub fn bin_index(p: f64, n_bins: usize) -> usize {
    let b = n_bins as f64;
    let mut m = ((p * b).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    if m > 0 && p <= m as f64 / b {
        m -= 1;
    } else if m + 1 < n_bins && p > (m + 1) as f64 / b {
        m += 1;
    }
    m
}

/// Per-bin counts, accuracy and mean confidence over equal-width bins.
pub fn reliability_table(log: &[ConfidenceRecord], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::Config(
            "at least one calibration bin is required".into(),
        ));
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for r in log {
        let m = bin_index(r.confidence, n_bins);
        count[m] += 1;
        correct[m] += usize::from(r.correct());
        conf[m] += r.confidence;
    }
    Ok((0..n_bins)
        .map(|m| {
            let n = count[m];
            ReliabilityBin {
                lower: m as f64 / n_bins as f64,
                upper: (m + 1) as f64 / n_bins as f64,
                count: n,
                accuracy: if n > 0 {
                    correct[m] as f64 / n as f64
                } else {
                    0.0
                },
                confidence: if n > 0 { conf[m] / n as f64 } else { 0.0 },
            }
        })
        .collect())
}

/// Expected calibration error: count-weighted mean of per-bin
/// `|accuracy - confidence|`.
pub fn ece(log: &[ConfidenceRecord], n_bins: usize) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::UndefinedMetric("calibration of an empty log".into()));
    }
    let table = reliability_table(log, n_bins)?;
    let n = log.len() as f64;
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn reliability_csv(table: &[ReliabilityBin]) -> String {
    let mut s = String::from("lower,upper,count,accuracy,confidence\n");
    for b in table {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lower, b.upper, b.count, b.accuracy, b.confidence
        ));
    }
    s
}

/// Confidence records of argmax predictions over `logits`.
pub fn confidence_records(
    logits: &Tensor,
    labels: &[usize],
    tasks: &[usize],
) -> Vec<ConfidenceRecord> {
    let p = softmax_rows(logits);
    (0..p.batch())
        .map(|i| {
            let (predicted, &confidence) = p
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty head");
            ConfidenceRecord {
                confidence,
                predicted,
                label: labels[i],
                task: tasks[i],
            }
        })
        .collect()
}

fn row_distances(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.batch())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Per-sample `||f(x, softmax(f(x, z))) - f(x, z)||_2` for explicit second
/// inputs `z`.
pub fn idempotence_distances_with(net: &Network, x: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
    let y0 = net.forward(x, z)?;
    let y1 = net.forward(x, &softmax_rows(&y0))?;
    Ok(row_distances(&y1, &y0))
}

/// Per-sample idempotence distance starting from the empty signal. Without a
/// checkpoint the network re-processes its own prediction; with one, the
/// checkpoint does.
pub fn idempotence_distances(
    net: &Network,
    checkpoint: Option<&FrozenCheckpoint>,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let y0 = net.forward(x, &empty_batch(x.batch(), net.n_classes())?)?;
    let p0 = softmax_rows(&y0);
    let y1 = match checkpoint {
        Some(ck) => ck.forward(x, &p0)?,
        None => net.forward(x, &p0)?,
    };
    Ok(row_distances(&y1, &y0))
}

/// Equal-width histogram counts of `values` over `[lo, hi]`.
pub fn histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; n_bins];
    if n_bins == 0 || hi <= lo {
        return counts;
    }
    for &v in values {
        let m = (((v - lo) / (hi - lo)) * n_bins as f64).floor();
        counts[(m.max(0.0) as usize).min(n_bins - 1)] += 1;
    }
    counts
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Mean softmax mass (at the empty signal) assigned to each task's classes.
/// Undefined for streams whose tasks share classes.
pub fn task_probability_mass(net: &Network, x: &Tensor, stream: &TaskStream) -> Result<Vec<f64>> {
    let owner = stream.class_to_task()?;
    let logits = net.forward(x, &empty_batch(x.batch(), net.n_classes())?)?;
    Ok(probability_mass_from_logits(&logits, &owner, stream.len()))
}

pub fn probability_mass_from_logits(
    logits: &Tensor,
    owner: &[Option<usize>],
    n_tasks: usize,
) -> Vec<f64> {
    let p = softmax_rows(logits);
    let mut mass = vec![0.0; n_tasks];
    for i in 0..p.batch() {
        for (c, &v) in p.row(i).iter().enumerate() {
            if let Some(t) = owner[c] {
                mass[t] += v;
            }
        }
    }
    let n = p.batch().max(1) as f64;
    mass.iter_mut().for_each(|m| *m /= n);
    mass
}
