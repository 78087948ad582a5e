//! Modular-arithmetic datasets, deterministic 50/50 splits, batch iteration.
//!
//! The input space is all 97^2 = 9409 ordered pairs (a, b); each configured
//! task labels every pair. Datasets are regenerated from seeds, never stored.

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use serde::{Deserialize, Serialize};

pub const MODULUS: u16 = 97;
pub const FULL_SIZE: usize = (MODULUS as usize) * (MODULUS as usize);
pub const TRAIN_SIZE: usize = FULL_SIZE / 2; // floor -> 4704
pub const TEST_SIZE: usize = FULL_SIZE - TRAIN_SIZE; // ceil -> 4705

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Add,
    Mul,
    SqSum,
    Sub,
}

impl TaskKind {
    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::Mul => "mul",
            TaskKind::SqSum => "sqsum",
            TaskKind::Sub => "sub",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(TaskKind::Add),
            "mul" => Ok(TaskKind::Mul),
            "sqsum" | "sq" => Ok(TaskKind::SqSum),
            "sub" => Ok(TaskKind::Sub),
            other => Err(Error::config(format!(
                "unknown task '{other}' (expected add, mul, sqsum, sub)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub op: TaskKind,
    pub modulus: u16,
}

impl TaskSpec {
    pub fn new(op: TaskKind) -> Self {
        TaskSpec { op, modulus: MODULUS }
    }
}

/// Class index of (a, b) under the task formula.
pub fn label(a: u16, b: u16, spec: &TaskSpec) -> Result<u16> {
    let m = spec.modulus as i64;
    if a as i64 >= m || b as i64 >= m {
        return Err(Error::data(format!(
            "residue out of range: ({a}, {b}) mod {m}"
        )));
    }
    let (a, b) = (a as i64, b as i64);
    let v = match spec.op {
        TaskKind::Add => (a + b) % m,
        TaskKind::Mul => (a * b) % m,
        TaskKind::SqSum => (a * a + b * b) % m,
        TaskKind::Sub => (a - b).rem_euclid(m),
    };
    Ok(v as u16)
}

/// All ordered pairs with one label per configured task.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub pairs: Vec<(u16, u16)>,
    pub tasks: Vec<TaskSpec>,
    /// labels[task][pair index]
    pub labels: Vec<Vec<u16>>,
}

pub fn full_dataset(tasks: &[TaskSpec]) -> PairDataset {
    assert!(!tasks.is_empty(), "at least one task required");
    let mut pairs = Vec::with_capacity(FULL_SIZE);
    for a in 0..MODULUS {
        for b in 0..MODULUS {
            pairs.push((a, b));
        }
    }
    let labels = tasks
        .iter()
        .map(|t| {
            pairs
                .iter()
                .map(|&(a, b)| label(a, b, t).expect("in-range by construction"))
                .collect()
        })
        .collect();
    PairDataset {
        pairs,
        tasks: tasks.to_vec(),
        labels,
    }
}

#[derive(Debug, Clone)]
pub struct SplitHandle {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub split_seed: u64,
}

/// Deterministic 50/50 split: uniformly random permutation under the
/// ("data-split", seed) stream; the first half (floor) trains.
pub fn split(dataset: &PairDataset, seed: u64) -> SplitHandle {
    assert_eq!(dataset.pairs.len(), FULL_SIZE, "split expects the full set");
    let mut idx: Vec<u32> = (0..FULL_SIZE as u32).collect();
    let mut rng = SeededRng::new(seed, "data-split");
    rng.shuffle(&mut idx);
    let test = idx.split_off(TRAIN_SIZE);
    SplitHandle {
        train: idx,
        test,
        split_seed: seed,
    }
}

/// One epoch of train batches: a fresh shuffle per (run_seed, epoch), cut
/// into `batch_size` chunks with the final short batch retained.
pub fn batches(
    split: &SplitHandle,
    batch_size: usize,
    run_seed: u64,
    epoch: u64,
) -> Vec<Vec<u32>> {
    assert!(batch_size >= 1);
    let mut order = split.train.clone();
    let mut rng = SeededRng::substream(run_seed, "batch-order", epoch);
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Token pairs and per-task labels for a set of dataset indices.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub pairs: Vec<(u16, u16)>,
    /// labels[task][row]
    pub labels: Vec<Vec<u16>>,
}

pub fn gather(dataset: &PairDataset, indices: &[u32]) -> LabeledBatch {
    let pairs = indices
        .iter()
        .map(|&i| dataset.pairs[i as usize])
        .collect();
    let labels = dataset
        .labels
        .iter()
        .map(|task_labels| indices.iter().map(|&i| task_labels[i as usize]).collect())
        .collect();
    LabeledBatch { pairs, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_trivials() {
        assert_eq!(label(3, 4, &TaskSpec::new(TaskKind::Add)).unwrap(), 7);
        assert_eq!(label(10, 20, &TaskSpec::new(TaskKind::Mul)).unwrap(), 6);
        assert_eq!(label(5, 6, &TaskSpec::new(TaskKind::SqSum)).unwrap(), 61);
        assert_eq!(label(2, 5, &TaskSpec::new(TaskKind::Sub)).unwrap(), 94);
        assert_eq!(label(0, 0, &TaskSpec::new(TaskKind::Add)).unwrap(), 0);
        assert_eq!(label(0, 0, &TaskSpec::new(TaskKind::Mul)).unwrap(), 0);
        assert_eq!(label(0, 0, &TaskSpec::new(TaskKind::SqSum)).unwrap(), 0);
    }

    #[test]
    fn label_rejects_out_of_range() {
        assert!(label(97, 0, &TaskSpec::new(TaskKind::Add)).is_err());
    }

    #[test]
    fn label_matches_wide_integer_oracle() {
        // Oracle: the same formulas in i128, no modular shortcuts.
        let mut rng = SeededRng::new(77, "label-oracle");
        for _ in 0..1000 {
            let a = rng.below(97) as u16;
            let b = rng.below(97) as u16;
            let op = match rng.below(4) {
                0 => TaskKind::Add,
                1 => TaskKind::Mul,
                2 => TaskKind::SqSum,
                _ => TaskKind::Sub,
            };
            let got = label(a, b, &TaskSpec::new(op)).unwrap() as i128;
            let (ai, bi) = (a as i128, b as i128);
            let want = match op {
                TaskKind::Add => (ai + bi) % 97,
                TaskKind::Mul => (ai * bi) % 97,
                TaskKind::SqSum => (ai * ai + bi * bi) % 97,
                TaskKind::Sub => (ai - bi).rem_euclid(97),
            };
            assert_eq!(got, want, "{a} {b} {op:?}");
        }
    }

    #[test]
    fn full_dataset_cardinality() {
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        assert_eq!(ds.pairs.len(), 9409);
        assert_eq!(ds.labels.len(), 1);
        assert_eq!(ds.labels[0].len(), 9409);
    }

    #[test]
    fn add_label_multiset_is_uniform() {
        // Each residue class c has exactly 97 pairs with (a+b) mod 97 = c;
        // counted by brute force.
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        let mut counts = [0usize; 97];
        for &l in &ds.labels[0] {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 97), "{counts:?}");
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        for seed in 0..20u64 {
            let s1 = split(&ds, seed);
            let s2 = split(&ds, seed);
            assert_eq!(s1.train, s2.train);
            assert_eq!(s1.test, s2.test);
            assert_eq!(s1.train.len(), TRAIN_SIZE);
            assert_eq!(s1.test.len(), TEST_SIZE);
            let mut all: Vec<u32> = s1.train.iter().chain(s1.test.iter()).copied().collect();
            all.sort_unstable();
            assert!(all.iter().enumerate().all(|(i, &x)| i as u32 == x));
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_splits() {
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        let base = split(&ds, 0);
        for seed in 1..=10u64 {
            let other = split(&ds, seed);
            assert_ne!(base.train, other.train, "seed {seed}");
        }
    }

    #[test]
    fn epoch_batches_shape_and_coverage() {
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        let s = split(&ds, 42);
        let bs = batches(&s, 512, 42, 0);
        assert_eq!(bs.len(), 10);
        assert!(bs[..9].iter().all(|b| b.len() == 512));
        assert_eq!(bs[9].len(), 96);
        let mut union: Vec<u32> = bs.concat();
        union.sort_unstable();
        let mut train_sorted = s.train.clone();
        train_sorted.sort_unstable();
        assert_eq!(union, train_sorted);
    }

    #[test]
    fn epochs_have_distinct_orderings() {
        let ds = full_dataset(&[TaskSpec::new(TaskKind::Add)]);
        let s = split(&ds, 42);
        let e0 = batches(&s, 512, 42, 0);
        let e1 = batches(&s, 512, 42, 1);
        assert_ne!(e0[0], e1[0]);
        // Same epoch key replays exactly.
        assert_eq!(e0, batches(&s, 512, 42, 0));
    }
}
