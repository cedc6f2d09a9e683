//! Experiment configuration: TOML-backed, fully defaulted, validated, and
//! content-hashed so pipeline stages can detect mismatched inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Storage precision for container payloads. Internal computation is
/// always 64-bit; f32 only narrows what gets persisted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// How task vectors are computed: activation-space deltas (primary) or
/// parameter-space deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVecMode {
    Activation,
    ParamDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Icm,
    Soup,
    Ta,
    Ties,
    DareTies,
    Regmean,
    SvdLatent,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Icm => "icm",
            MergeMethod::Soup => "soup",
            MergeMethod::Ta => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
            MergeMethod::Regmean => "regmean",
            MergeMethod::SvdLatent => "svd_latent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 32,
            output_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub gain: f64,
    pub noise_std: f64,
    pub n_classes: usize,
    pub cluster_std: f64,
    pub center_std: f64,
    /// Train fraction of the last task; 1.0 disables the long-tail regime.
    pub long_tail_fraction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            size: 4,
            n_train: 256,
            n_val: 64,
            n_test: 128,
            gain: 1.5,
            noise_std: 0.05,
            n_classes: 4,
            cluster_std: 1.0,
            center_std: 2.0,
            long_tail_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub n_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            n_samples: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub rank: usize,
    /// Defaults to `rank` when absent, giving unit LoRA scaling.
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
}

impl FinetuneConfig {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            epochs: 240,
            lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskVecConfig {
    pub n_probe: usize,
    pub mode: TaskVecMode,
}

impl Default for TaskVecConfig {
    fn default() -> Self {
        Self {
            n_probe: 64,
            mode: TaskVecMode::Activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_dim: 128,
        }
    }
}

/// Meta-training hyperparameters (outer loop and inner adaptation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub iters: usize,
    pub batch_size: usize,
    /// Outer (meta) step size; 0 turns meta_step into a pure evaluation.
    pub gamma: f64,
    /// Inner adaptation step size.
    pub beta: f64,
    /// Inner adaptation step count K.
    pub inner_steps: usize,
    pub lambda_kl: f64,
    /// Samples per inner-loop mini-batch.
    pub inner_batch: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_size: 4,
            gamma: 0.4,
            beta: 1e-2,
            inner_steps: 1,
            lambda_kl: 0.005,
            inner_batch: 32,
        }
    }
}

/// One merge method with its parameters. Irrelevant fields are ignored by
/// methods that do not use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// TA scaling; defaults to 1/n_tasks when absent.
    pub lambda_ta: Option<f64>,
    /// TIES trim density.
    pub density: f64,
    /// DARE drop probability.
    pub drop_p: f64,
    /// SVD-latent reconstruction rank.
    pub svd_rank: usize,
    /// ICM weight grid resolution over the simplex.
    pub grid_step: f64,
    /// Stream seed override for stochastic mergers; defaults to the
    /// experiment seed.
    pub seed: Option<u64>,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            method: MergeMethod::Soup,
            lambda_ta: None,
            density: 0.5,
            drop_p: 0.3,
            svd_rank: 2,
            grid_step: 0.25,
            seed: None,
        }
    }
}

impl MergeSpec {
    pub fn of(method: MergeMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

fn default_merges() -> Vec<MergeSpec> {
    [
        MergeMethod::Icm,
        MergeMethod::Soup,
        MergeMethod::Ta,
        MergeMethod::Ties,
        MergeMethod::DareTies,
        MergeMethod::Regmean,
        MergeMethod::SvdLatent,
    ]
    .into_iter()
    .map(MergeSpec::of)
    .collect()
}

/// Root configuration for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub taskvec: TaskVecConfig,
    pub vae: VaeConfig,
    pub meta: MetaConfig,
    pub merges: Vec<MergeSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            precision: Precision::F64,
            out_dir: None,
            model: ModelConfig::default(),
            suite: SuiteConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            taskvec: TaskVecConfig::default(),
            vae: VaeConfig::default(),
            meta: MetaConfig::default(),
            merges: default_merges(),
        }
    }
}

impl ExperimentConfig {
    /// Parses, fills derived defaults, and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("config file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Canonical textual form with every default made explicit.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    /// SHA-256 of the canonical textual form, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Fills values whose defaults depend on other fields.
    pub fn resolve(&mut self) {
        if self.finetune.alpha.is_none() {
            self.finetune.alpha = Some(self.finetune.rank as f64);
        }
        if self.merges.is_empty() {
            self.merges = default_merges();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.input_dim == 0 || m.hidden_dim == 0 || m.output_dim == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        if m.output_dim > m.input_dim {
            return Err(Error::InvalidConfig(
                "output_dim must not exceed input_dim (reconstruction pretext and rotation targets)"
                    .into(),
            ));
        }
        let s = &self.suite;
        if s.size < 2 {
            return Err(Error::InvalidConfig("suite.size must be at least 2".into()));
        }
        if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
            return Err(Error::InvalidConfig(
                "suite sample counts must be positive".into(),
            ));
        }
        if s.gain <= 0.0 || s.noise_std < 0.0 || s.cluster_std < 0.0 || s.center_std <= 0.0 {
            return Err(Error::InvalidConfig(
                "suite generator parameters out of range".into(),
            ));
        }
        if s.n_classes < 2 || s.n_classes > m.output_dim {
            return Err(Error::InvalidConfig(format!(
                "suite.n_classes must lie in [2, output_dim], got {}",
                s.n_classes
            )));
        }
        if !crate::toybase::tasks::SUPPORTED_FRACTIONS
            .iter()
            .any(|f| (f - s.long_tail_fraction).abs() < 1e-12)
        {
            return Err(Error::InvalidConfig(format!(
                "suite.long_tail_fraction must be one of {:?}",
                crate::toybase::tasks::SUPPORTED_FRACTIONS
            )));
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.n_samples == 0 || p.lr <= 0.0 {
            return Err(Error::InvalidConfig(
                "pretrain needs positive epochs, samples and lr".into(),
            ));
        }
        let f = &self.finetune;
        if f.rank == 0 || f.rank > m.input_dim.min(m.hidden_dim) {
            return Err(Error::InvalidConfig(format!(
                "finetune.rank must lie in [1, min(input_dim, hidden_dim)], got {}",
                f.rank
            )));
        }
        if f.effective_alpha() <= 0.0 {
            return Err(Error::InvalidConfig("finetune.alpha must be positive".into()));
        }
        if f.epochs == 0 || f.lr <= 0.0 {
            return Err(Error::InvalidConfig(
                "finetune needs positive epochs and lr".into(),
            ));
        }
        if self.taskvec.n_probe == 0 {
            return Err(Error::InvalidConfig("taskvec.n_probe must be positive".into()));
        }
        let v = &self.vae;
        if v.latent_dim == 0 || v.hidden_dim == 0 {
            return Err(Error::InvalidConfig("vae dims must be positive".into()));
        }
        let mt = &self.meta;
        if mt.batch_size == 0 {
            return Err(Error::InvalidConfig("meta.batch_size must be positive".into()));
        }
        if mt.batch_size > s.size {
            return Err(Error::InvalidConfig(format!(
                "meta.batch_size {} exceeds the number of tasks {}",
                mt.batch_size, s.size
            )));
        }
        if mt.gamma < 0.0 || mt.beta < 0.0 || mt.lambda_kl < 0.0 {
            return Err(Error::InvalidConfig(
                "meta step sizes and lambda_kl must be non-negative".into(),
            ));
        }
        if mt.inner_batch == 0 {
            return Err(Error::InvalidConfig("meta.inner_batch must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.merges {
            if !seen.insert(spec.method) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate merge method {}",
                    spec.method.name()
                )));
            }
            if !(0.0..1.0).contains(&spec.drop_p) {
                return Err(Error::InvalidConfig(format!(
                    "merge drop_p must lie in [0, 1), got {}",
                    spec.drop_p
                )));
            }
            if spec.density <= 0.0 || spec.density > 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "merge density must lie in (0, 1], got {}",
                    spec.density
                )));
            }
            if spec.svd_rank == 0 {
                return Err(Error::InvalidConfig("merge svd_rank must be positive".into()));
            }
            if spec.grid_step <= 0.0 || spec.grid_step > 0.5 {
                return Err(Error::InvalidConfig(format!(
                    "merge grid_step must lie in (0, 0.5], got {}",
                    spec.grid_step
                )));
            }
            if let Some(l) = spec.lambda_ta {
                if !l.is_finite() {
                    return Err(Error::InvalidConfig("merge lambda_ta must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn merge_spec(&self, method: MergeMethod) -> Option<&MergeSpec> {
        self.merges.iter().find(|m| m.method == method)
    }
}
