//! Class-incremental and generalized class-incremental task streams.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{config_err, Error, Result};

/// Per-rank decay of the long-tail class weights.
pub const LONGTAIL_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Cil,
    GcilUniform,
    GcilLongtail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcilMode {
    Uniform,
    Longtail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Sorted class ids.
    pub classes: Vec<usize>,
    /// Indices into the training split.
    pub train_samples: Vec<usize>,
    pub per_class_counts: BTreeMap<usize, usize>,
}

impl TaskSpec {
    fn new(task_id: usize, train_samples: Vec<usize>, dataset: &LabeledDataset) -> Self {
        let mut per_class_counts = BTreeMap::new();
        for &i in &train_samples {
            *per_class_counts.entry(dataset.label(i)).or_insert(0) += 1;
        }
        Self {
            task_id,
            classes: per_class_counts.keys().copied().collect(),
            train_samples,
            per_class_counts,
        }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    protocol: Protocol,
    seed: u64,
    n_classes: usize,
    tasks: Vec<TaskSpec>,
}

/// Exported description of a stream (sample indices omitted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub protocol: Protocol,
    pub seed: u64,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub per_class_counts: BTreeMap<usize, usize>,
}

impl TaskStream {
    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Owning task of each class; errors when a class belongs to several
    /// tasks. Classes never shown map to `None`.
    pub fn class_to_task(&self) -> Result<Vec<Option<usize>>> {
        let mut owner = vec![None; self.n_classes];
        for t in &self.tasks {
            for &c in &t.classes {
                if let Some(prev) = owner[c] {
                    return Err(Error::UndefinedMetric(format!(
                        "class {c} appears in tasks {prev} and {}",
                        t.task_id
                    )));
                }
                owner[c] = Some(t.task_id);
            }
        }
        Ok(owner)
    }

    /// Union of the classes of tasks `0..=t`.
    pub fn classes_seen(&self, t: usize) -> Vec<usize> {
        let mut seen: Vec<usize> = self.tasks[..=t]
            .iter()
            .flat_map(|s| s.classes.clone())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest {
            protocol: self.protocol,
            seed: self.seed,
            tasks: self
                .tasks
                .iter()
                .map(|t| ManifestTask {
                    task_id: t.task_id,
                    classes: t.classes.clone(),
                    per_class_counts: t.per_class_counts.clone(),
                })
                .collect(),
        }
    }
}

/// Splits the classes into `n_tasks` disjoint groups of equal size using a
/// seeded permutation; each task receives every training sample of its
/// classes.
pub fn make_cil_stream(dataset: &LabeledDataset, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    let c = dataset.n_classes();
    if n_tasks < 1 {
        return Err(config_err("a stream needs at least one task"));
    }
    if !c.is_multiple_of(n_tasks) {
        return Err(config_err(format!(
            "{c} classes cannot be split evenly into {n_tasks} tasks"
        )));
    }
    if dataset.is_empty() {
        return Err(config_err("cannot build a stream from an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng);
    let per = c / n_tasks;
    let mut task_of = vec![0; c];
    for (pos, &class) in perm.iter().enumerate() {
        task_of[class] = pos / per;
    }
    let mut samples = vec![Vec::new(); n_tasks];
    for i in 0..dataset.len() {
        samples[task_of[dataset.label(i)]].push(i);
    }
    let tasks = samples
        .into_iter()
        .enumerate()
        .map(|(t, s)| {
            let mut spec = TaskSpec::new(t, s, dataset);
            let mut classes: Vec<usize> = perm[t * per..(t + 1) * per].to_vec();
            classes.sort_unstable();
            spec.classes = classes;
            spec
        })
        .collect();
    Ok(TaskStream {
        protocol: Protocol::Cil,
        seed,
        n_classes: c,
        tasks,
    })
}

/// Splits `total` into `k ≥ 1` counts: equal up to rounding, or, for the long
/// tail, proportional to `LONGTAIL_DECAY^rank` after one sample per class.
fn split_counts(total: usize, k: usize, mode: GcilMode) -> Vec<usize> {
    match mode {
        GcilMode::Uniform => (0..k)
            .map(|r| total / k + usize::from(r < total % k))
            .collect(),
        GcilMode::Longtail => {
            let spare = total - k;
            let w: Vec<f64> = (0..k).map(|r| LONGTAIL_DECAY.powi(r as i32)).collect();
            let sum: f64 = w.iter().sum();
            let exact: Vec<f64> = w.iter().map(|wi| wi / sum * spare as f64).collect();
            let mut counts: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
            // Rounding leftovers go to the head ranks, which keeps the counts
            // non-increasing and the head strictly above the tail.
            let left = total - counts.iter().sum::<usize>();
            for c in counts.iter_mut().take(left) {
                *c += 1;
            }
            counts
        }
    }
}

/// Generalized stream: per task, a uniformly drawn number of classes (drawn
/// without replacement within the task, independently across tasks) and a
/// fixed sample budget split uniformly or along a seeded long tail.
pub fn make_gcil_stream(
    dataset: &LabeledDataset,
    n_tasks: usize,
    mode: GcilMode,
    class_count_range: (usize, usize),
    samples_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    let c = dataset.n_classes();
    let (lo, hi) = class_count_range;
    if n_tasks < 1 {
        return Err(config_err("a stream needs at least one task"));
    }
    if lo < 1 || lo > hi || hi > c {
        return Err(config_err(format!(
            "class count range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {c}"
        )));
    }
    if samples_per_task < hi {
        return Err(config_err(format!(
            "{samples_per_task} samples per task cannot cover {hi} classes"
        )));
    }
    let pools: Vec<Vec<usize>> = (0..c).map(|k| dataset.class_indices(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let k = rng.random_range(lo..=hi);
        let classes: Vec<usize> = index::sample(&mut rng, c, k).into_vec();
        let counts = split_counts(samples_per_task, k, mode);
        let mut samples = Vec::with_capacity(samples_per_task);
        for (&class, &count) in classes.iter().zip(&counts) {
            let pool = &pools[class];
            if pool.is_empty() {
                return Err(config_err(format!("class {class} has no training samples")));
            }
            let mut picked = Vec::with_capacity(count);
            while picked.len() < count {
                let take = (count - picked.len()).min(pool.len());
                picked.extend(
                    index::sample(&mut rng, pool.len(), take)
                        .into_iter()
                        .map(|j| pool[j]),
                );
            }
            samples.extend(picked);
        }
        tasks.push(TaskSpec::new(t, samples, dataset));
    }
    Ok(TaskStream {
        protocol: match mode {
            GcilMode::Uniform => Protocol::GcilUniform,
            GcilMode::Longtail => Protocol::GcilLongtail,
        },
        seed,
        n_classes: c,
        tasks,
    })
}
