//! Synthetic task suites: rotated-regression and cluster-classification
//! tasks with a constructed conflicting pair and few-shot regimes.

use crate::config::SuiteConfig;
use crate::error::{Error, Result};
use crate::numerics::{linalg, DenseArray, RngStream};

/// Supported few-shot train fractions, plus 1.0 for full data.
pub const SUPPORTED_FRACTIONS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Inputs and targets for one split of one task.
///
/// Regression targets are `n x output_dim`; classification targets are
/// `n x 1` class indices stored as floats.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub inputs: DenseArray,
    pub targets: DenseArray,
    pub split: Split,
    pub kind: TaskKind,
    pub n_classes: usize,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New dataset from the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<TaskDataset> {
        let n = self.len();
        let d_in = self.inputs.dims()[1];
        let d_out = self.targets.dims()[1];
        let mut inputs = Vec::with_capacity(rows.len() * d_in);
        let mut targets = Vec::with_capacity(rows.len() * d_out);
        for &row in rows {
            if row >= n {
                return Err(Error::InvalidInput(format!(
                    "subset row {row} out of range for {n} samples"
                )));
            }
            inputs.extend_from_slice(&self.inputs.data()[row * d_in..(row + 1) * d_in]);
            targets.extend_from_slice(&self.targets.data()[row * d_out..(row + 1) * d_out]);
        }
        Ok(TaskDataset {
            inputs: DenseArray::from_vec(vec![rows.len(), d_in], inputs)?,
            targets: DenseArray::from_vec(vec![rows.len(), d_out], targets)?,
            split: self.split,
            kind: self.kind,
            n_classes: self.n_classes,
        })
    }
}

/// Full description of one synthetic task; datasets are regenerated on
/// demand from seed-separated streams, so specs stay cheap to copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub seed: u64,
    /// Stream label of the target map (rotation or cluster centers).
    /// The conflicting pair shares one label and differs only in sign.
    pub map_label: String,
    pub sign: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub n_classes: usize,
    pub center_std: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_fraction: f64,
}

impl TaskSpec {
    /// Same task with the train split reduced to the given fraction.
    pub fn with_data_fraction(&self, fraction: f64) -> Result<TaskSpec> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidInput(format!(
                "data_fraction must lie in [0, 1], got {fraction}"
            )));
        }
        let mut spec = self.clone();
        spec.data_fraction = fraction;
        Ok(spec)
    }

    fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => (self.data_fraction * self.n_train as f64).floor() as usize,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Row-orthonormal map used by regression tasks, output_dim x input_dim.
    fn regression_map(&self) -> Vec<f64> {
        let mut rng = RngStream::labeled(self.seed, &self.map_label);
        let q = linalg::random_orthogonal(self.input_dim, &mut rng);
        q[..self.output_dim * self.input_dim].to_vec()
    }

    /// Cluster centers used by classification tasks, n_classes x input_dim.
    fn class_centers(&self) -> Vec<f64> {
        let mut rng = RngStream::labeled(self.seed, &format!("{}/centers", self.map_label));
        let mut centers = rng.normal_vec(self.n_classes * self.input_dim);
        for v in &mut centers {
            *v *= self.center_std;
        }
        centers
    }

    /// Generates a split. Draws come from per-split streams, so train,
    /// val and test are disjoint, and smaller data fractions are prefixes
    /// of larger ones.
    pub fn dataset(&self, split: Split) -> Result<TaskDataset> {
        let n = self.split_count(split);
        let d_in = self.input_dim;
        let mut noise_rng = RngStream::labeled(
            self.seed,
            &format!("{}/{}/noise", self.task_id, split.label()),
        );
        match self.kind {
            TaskKind::Regression => {
                // keyed by map_label so the conflicting pair sees identical
                // inputs with mirrored targets
                let mut x_rng = RngStream::labeled(
                    self.seed,
                    &format!("{}/{}/x", self.map_label, split.label()),
                );
                let map = self.regression_map();
                let xs = x_rng.normal_vec(n * d_in);
                let mut targets = vec![0.0; n * self.output_dim];
                for s in 0..n {
                    let row = &xs[s * d_in..(s + 1) * d_in];
                    let mapped = linalg::matvec(&map, self.output_dim, d_in, row);
                    for (o, m) in mapped.iter().enumerate() {
                        targets[s * self.output_dim + o] =
                            self.sign * self.gain * m + self.noise_std * noise_rng.normal();
                    }
                }
                Ok(TaskDataset {
                    inputs: DenseArray::from_vec(vec![n, d_in], xs)?,
                    targets: DenseArray::from_vec(vec![n, self.output_dim], targets)?,
                    split,
                    kind: self.kind,
                    n_classes: 0,
                })
            }
            TaskKind::Classification => {
                let centers = self.class_centers();
                let mut cls_rng = RngStream::labeled(
                    self.seed,
                    &format!("{}/{}/cls", self.task_id, split.label()),
                );
                let mut xs = vec![0.0; n * d_in];
                let mut targets = vec![0.0; n];
                for s in 0..n {
                    let c = cls_rng.below(self.n_classes);
                    targets[s] = c as f64;
                    for j in 0..d_in {
                        xs[s * d_in + j] =
                            centers[c * d_in + j] + self.noise_std * noise_rng.normal();
                    }
                }
                Ok(TaskDataset {
                    inputs: DenseArray::from_vec(vec![n, d_in], xs)?,
                    targets: DenseArray::from_vec(vec![n, 1], targets)?,
                    split,
                    kind: self.kind,
                    n_classes: self.n_classes,
                })
            }
        }
    }

    /// True when `other` computes the negated target map of `self`.
    pub fn is_negation_of(&self, other: &TaskSpec) -> bool {
        self.kind == TaskKind::Regression
            && other.kind == TaskKind::Regression
            && self.map_label == other.map_label
            && self.sign == -other.sign
            && self.gain == other.gain
    }
}

/// Builds a reproducible suite. Tasks 0 and 1 form the conflicting pair
/// (shared rotation, opposite signs); interior tasks alternate
/// classifications and fresh regressions. The final task is a
/// fresh-rotation regression and carries the configured long-tail data
/// fraction, so its target map is disjoint from every earlier task's.
pub fn make_task_suite(cfg: &SuiteConfig, input_dim: usize, output_dim: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if cfg.size < 2 {
        return Err(Error::InvalidConfig("suite size must be at least 2".into()));
    }
    if output_dim > input_dim {
        return Err(Error::InvalidConfig(format!(
            "regression map needs output_dim <= input_dim, got {output_dim} > {input_dim}"
        )));
    }
    if cfg.n_classes < 2 || cfg.n_classes > output_dim {
        return Err(Error::InvalidConfig(format!(
            "n_classes must lie in [2, output_dim], got {}",
            cfg.n_classes
        )));
    }
    if !SUPPORTED_FRACTIONS
        .iter()
        .any(|f| (f - cfg.long_tail_fraction).abs() < 1e-12)
    {
        return Err(Error::InvalidConfig(format!(
            "long_tail_fraction must be one of {SUPPORTED_FRACTIONS:?}, got {}",
            cfg.long_tail_fraction
        )));
    }
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidConfig(
            "suite sample counts must be positive".into(),
        ));
    }

    let mut suite = Vec::with_capacity(cfg.size);
    for i in 0..cfg.size {
        let (kind, map_label, sign) = match i {
            0 => (TaskKind::Regression, "suite/map/0".to_string(), 1.0),
            1 => (TaskKind::Regression, "suite/map/0".to_string(), -1.0),
            _ if i + 1 == cfg.size || i % 2 == 1 => {
                (TaskKind::Regression, format!("suite/map/{i}"), 1.0)
            }
            _ => (TaskKind::Classification, format!("suite/map/{i}"), 1.0),
        };
        let task_id = match (i, kind) {
            (0, _) => "reg-pos".to_string(),
            (1, _) => "reg-neg".to_string(),
            (_, TaskKind::Regression) => format!("reg-{i}"),
            (_, TaskKind::Classification) => format!("cls-{i}"),
        };
        let noise_std = match kind {
            TaskKind::Regression => cfg.noise_std,
            TaskKind::Classification => cfg.cluster_std,
        };
        let data_fraction = if i == cfg.size - 1 {
            cfg.long_tail_fraction
        } else {
            1.0
        };
        suite.push(TaskSpec {
            task_id,
            kind,
            seed,
            map_label,
            sign,
            gain: cfg.gain,
            noise_std,
            n_classes: cfg.n_classes,
            center_std: cfg.center_std,
            input_dim,
            output_dim,
            n_train: cfg.n_train,
            n_val: cfg.n_val,
            n_test: cfg.n_test,
            data_fraction,
        });
    }
    debug_assert!(suite[1].is_negation_of(&suite[0]));
    Ok(suite)
}
