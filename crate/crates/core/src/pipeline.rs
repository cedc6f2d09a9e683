//! Experiment orchestration: output-directory layout, run manifest,
//! locking, idempotent stages, and artifact (de)serialization through the
//! container format.
//!
//! Every stage validates the config hash recorded in the manifest, skips
//! work whose artifact already exists unless forced, and records what it
//! wrote plus wall-clock timing. All artifacts are deterministic functions
//! of the config, so reruns produce byte-identical files; only the
//! manifest's timing block varies.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MergeMethod, MergeSpec, Precision, TaskVecMode};
use crate::container::{load_container, save_container, Section};
use crate::error::{Error, Result};
use crate::evalmetrics::MergeReport;
use crate::fusion::{
    dare_ties_merge, icm_fuse, regmean_lora, select_fusion_weights, soup_merge, svd_latent_merge,
    ta_merge, ties_merge, ParamDelta,
};
use crate::fvae::{init_vae, VaeParams};
use crate::metaloop::{build_combined_dataset, train_meta, CombinedEntry, MetaTask};
use crate::numerics::DenseArray;
use crate::taskvec::{extract_task_vector, param_delta_vector, ProbeBatch, TaskVector};
use crate::toybase::tasks::Split;
use crate::toybase::{
    apply_lora, finetune_lora, make_task_suite, pretrain, unflatten, Activation, AdapterShape,
    BaseModel, CheckpointSequence, FlatParams, TaskSpec,
};

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_FINETUNE: &str = "finetune";
pub const STAGE_TASKVEC: &str = "taskvec";
pub const STAGE_TRAIN_VAE: &str = "train_vae";
pub const STAGE_FUSE: &str = "fuse";
pub const STAGE_EVAL: &str = "eval";
pub const STAGE_REPORT: &str = "report";

/// Output-directory layout.
#[derive(Debug, Clone)]
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(root: &Path) -> Self {
        OutPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base.icmf")
    }

    pub fn finetune_rel(&self, task_id: &str) -> String {
        format!("finetune/{task_id}.icmf")
    }

    pub fn finetune(&self, task_id: &str) -> PathBuf {
        self.root.join(self.finetune_rel(task_id))
    }

    pub fn taskvec(&self) -> PathBuf {
        self.root.join("taskvec.icmf")
    }

    pub fn vae(&self) -> PathBuf {
        self.root.join("vae.icmf")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("meta_history.csv")
    }

    pub fn merged_rel(&self, method: MergeMethod) -> String {
        format!("merged/{}.icmf", method.name())
    }

    pub fn merged(&self, method: MergeMethod) -> PathBuf {
        self.root.join(self.merged_rel(method))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents.csv")
    }
}

/// Per-run record of what was produced from which config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Stage name to the relative paths it wrote.
    pub artifacts: BTreeMap<String, Vec<String>>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    fn fresh(hash: String) -> Self {
        RunManifest {
            config_hash: hash,
            artifacts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }
}

fn save_manifest(paths: &OutPaths, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidInput(format!("manifest serialization failed: {e}")))?;
    std::fs::write(paths.manifest(), text)?;
    Ok(())
}

fn load_manifest(paths: &OutPaths) -> Result<Option<RunManifest>> {
    let path = paths.manifest();
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let manifest = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("malformed manifest: {e}")))?;
    Ok(Some(manifest))
}

/// Creates the output directory, echoes the canonical config into it, and
/// loads or initializes the manifest. An existing manifest with a
/// different config hash is an error unless `force` resets the run.
fn open_manifest(cfg: &ExperimentConfig, paths: &OutPaths, force: bool) -> Result<RunManifest> {
    std::fs::create_dir_all(&paths.root)?;
    let hash = cfg.hash()?;
    let manifest = match load_manifest(paths)? {
        Some(existing) if existing.config_hash == hash => existing,
        Some(existing) => {
            if force {
                RunManifest::fresh(hash)
            } else {
                return Err(Error::ConfigHashMismatch {
                    expected: existing.config_hash,
                    found: hash,
                });
            }
        }
        None => RunManifest::fresh(hash),
    };
    std::fs::write(paths.config(), cfg.to_toml_string()?)?;
    Ok(manifest)
}

fn stage_done(manifest: &RunManifest, stage: &str, paths: &OutPaths) -> bool {
    manifest.artifacts.get(stage).is_some_and(|files| {
        !files.is_empty() && files.iter().all(|f| paths.root.join(f).exists())
    })
}

fn record(
    manifest: &mut RunManifest,
    paths: &OutPaths,
    stage: &str,
    files: Vec<String>,
    started: Instant,
) -> Result<()> {
    manifest.artifacts.insert(stage.to_string(), files);
    manifest
        .timings_ms
        .insert(stage.to_string(), started.elapsed().as_secs_f64() * 1e3);
    save_manifest(paths, manifest)
}

/// Exclusive-writer guard on the output directory; the lock file is
/// removed when the guard drops.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out: &Path) -> Result<LockGuard> {
        std::fs::create_dir_all(out)?;
        let path = OutPaths::new(out).lock();
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn meta_section(values: Vec<f64>) -> Section {
    Section::vector(values, Precision::F64)
}

fn array_section(arr: &DenseArray, precision: Precision) -> Section {
    Section {
        dims: arr.dims().to_vec(),
        dtype: precision,
        data: arr.data().to_vec(),
    }
}

fn get_section<'a>(
    sections: &'a BTreeMap<String, Section>,
    name: &str,
) -> Result<&'a Section> {
    sections
        .get(name)
        .ok_or_else(|| Error::ContainerFormat(format!("missing section {name}")))
}

fn section_array(section: &Section) -> Result<DenseArray> {
    DenseArray::from_vec(section.dims.clone(), section.data.clone())
}

fn usize_of(v: f64, what: &str) -> Result<usize> {
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
        return Err(Error::ContainerFormat(format!(
            "{what} must be a small non-negative integer, got {v}"
        )));
    }
    Ok(v as usize)
}

fn shape_to_section(shape: &AdapterShape) -> Result<Section> {
    let layers = shape.adapted_layers();
    let mut dims_by_layer: BTreeMap<usize, (Option<usize>, Option<usize>)> = BTreeMap::new();
    for entry in &shape.entries {
        let slot = dims_by_layer.entry(entry.layer).or_default();
        match entry.factor {
            crate::toybase::FactorTag::A => slot.1 = Some(entry.cols),
            crate::toybase::FactorTag::B => slot.0 = Some(entry.rows),
        }
    }
    let mut values = vec![shape.rank as f64, shape.alpha, layers.len() as f64];
    for layer in layers {
        let (d_out, d_in) = dims_by_layer[&layer];
        let d_out = d_out.ok_or_else(|| {
            Error::DimMismatch(format!("layer {layer} lacks a B factor in the manifest"))
        })?;
        let d_in = d_in.ok_or_else(|| {
            Error::DimMismatch(format!("layer {layer} lacks an A factor in the manifest"))
        })?;
        values.extend([layer as f64, d_out as f64, d_in as f64]);
    }
    Ok(meta_section(values))
}

fn shape_from_section(section: &Section) -> Result<Arc<AdapterShape>> {
    let v = &section.data;
    if v.len() < 3 {
        return Err(Error::ContainerFormat("adapter manifest too short".into()));
    }
    let rank = usize_of(v[0], "adapter rank")?;
    let alpha = v[1];
    let n_layers = usize_of(v[2], "adapter layer count")?;
    if v.len() != 3 + 3 * n_layers {
        return Err(Error::ContainerFormat(format!(
            "adapter manifest expects {} values, got {}",
            3 + 3 * n_layers,
            v.len()
        )));
    }
    let mut layer_dims = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let layer = usize_of(v[3 + 3 * i], "adapter layer index")?;
        let d_out = usize_of(v[4 + 3 * i], "adapter output dim")?;
        let d_in = usize_of(v[5 + 3 * i], "adapter input dim")?;
        layer_dims.push((layer, d_out, d_in));
    }
    Ok(Arc::new(AdapterShape::new(rank, alpha, &layer_dims)?))
}

/// Base model to container sections.
pub fn base_to_sections(
    model: &BaseModel,
    precision: Precision,
) -> BTreeMap<String, Section> {
    let mut sections = BTreeMap::new();
    sections.insert(
        "dims".to_string(),
        meta_section(vec![
            model.input_dim as f64,
            model.hidden_dim as f64,
            model.output_dim as f64,
        ]),
    );
    for (i, w) in model.weights.iter().enumerate() {
        sections.insert(format!("weights/{i}"), array_section(w, precision));
    }
    for (i, b) in model.biases.iter().enumerate() {
        sections.insert(format!("biases/{i}"), array_section(b, precision));
    }
    sections
}

/// Base model from container sections.
pub fn base_from_sections(sections: &BTreeMap<String, Section>) -> Result<BaseModel> {
    let dims = get_section(sections, "dims")?;
    if dims.data.len() != 3 {
        return Err(Error::ContainerFormat("model dims must have 3 values".into()));
    }
    let input_dim = usize_of(dims.data[0], "input_dim")?;
    let hidden_dim = usize_of(dims.data[1], "hidden_dim")?;
    let output_dim = usize_of(dims.data[2], "output_dim")?;
    let mut weights = Vec::with_capacity(3);
    let mut biases = Vec::with_capacity(3);
    for i in 0..3 {
        weights.push(section_array(get_section(sections, &format!("weights/{i}"))?)?);
        biases.push(section_array(get_section(sections, &format!("biases/{i}"))?)?);
    }
    let expect = [
        (hidden_dim, input_dim),
        (hidden_dim, hidden_dim),
        (output_dim, hidden_dim),
    ];
    for (i, (rows, cols)) in expect.iter().enumerate() {
        if weights[i].dims() != [*rows, *cols] || biases[i].dims() != [*rows] {
            return Err(Error::ContainerFormat(format!(
                "layer {i} arrays disagree with the stored dims"
            )));
        }
    }
    let model = BaseModel {
        input_dim,
        hidden_dim,
        output_dim,
        activation: Activation::Tanh,
        weights: weights.try_into().expect("exactly three layers"),
        biases: biases.try_into().expect("exactly three layers"),
    };
    Ok(model)
}

/// Checkpoint sequence to container sections.
pub fn sequence_to_sections(
    seq: &CheckpointSequence,
    precision: Precision,
) -> Result<BTreeMap<String, Section>> {
    let mut sections = BTreeMap::new();
    let shape = &seq.entries[0].1.shape;
    sections.insert("meta/adapter".to_string(), shape_to_section(shape)?);
    sections.insert(
        "meta/retained".to_string(),
        meta_section(vec![seq.retained_window as f64]),
    );
    for (epoch, flat) in &seq.entries {
        sections.insert(
            format!("epoch/{epoch:06}"),
            Section {
                dims: vec![flat.data.len()],
                dtype: precision,
                data: flat.data.clone(),
            },
        );
    }
    Ok(sections)
}

/// Checkpoint sequence from container sections.
pub fn sequence_from_sections(
    task_id: &str,
    sections: &BTreeMap<String, Section>,
) -> Result<CheckpointSequence> {
    let shape = shape_from_section(get_section(sections, "meta/adapter")?)?;
    let retained = usize_of(
        get_section(sections, "meta/retained")?.data[0],
        "retained window",
    )?;
    let mut entries = Vec::new();
    for (name, section) in sections {
        if let Some(raw) = name.strip_prefix("epoch/") {
            let epoch: usize = raw.parse().map_err(|_| {
                Error::ContainerFormat(format!("bad epoch section name {name}"))
            })?;
            entries.push((
                epoch,
                FlatParams::new(Arc::clone(&shape), section.data.clone())?,
            ));
        }
    }
    entries.sort_by_key(|(e, _)| *e);
    let seq = CheckpointSequence::new(task_id.to_string(), entries)?;
    if seq.retained_window != retained {
        return Err(Error::ContainerFormat(format!(
            "sequence for {task_id} retained {} checkpoints but records {retained}",
            seq.retained_window
        )));
    }
    Ok(seq)
}

/// Task vectors to one container.
pub fn vectors_to_sections(
    vectors: &BTreeMap<String, TaskVector>,
    precision: Precision,
) -> BTreeMap<String, Section> {
    let mut sections = BTreeMap::new();
    for (task_id, vector) in vectors {
        sections.insert(
            format!("task/{task_id}"),
            array_section(&vector.data, precision),
        );
    }
    sections
}

/// Task vectors from one container.
pub fn vectors_from_sections(
    sections: &BTreeMap<String, Section>,
) -> Result<BTreeMap<String, TaskVector>> {
    let mut vectors = BTreeMap::new();
    for (name, section) in sections {
        if let Some(task_id) = name.strip_prefix("task/") {
            vectors.insert(
                task_id.to_string(),
                TaskVector {
                    data: section_array(section)?,
                    task_id: task_id.to_string(),
                },
            );
        }
    }
    if vectors.is_empty() {
        return Err(Error::ContainerFormat("no task vectors stored".into()));
    }
    Ok(vectors)
}

/// VAE parameters (plus standardizer) to container sections.
pub fn vae_to_sections(vae: &VaeParams, precision: Precision) -> Result<BTreeMap<String, Section>> {
    let mut sections = BTreeMap::new();
    sections.insert("meta/adapter".to_string(), shape_to_section(&vae.shape)?);
    sections.insert(
        "meta/dims".to_string(),
        meta_section(vec![
            vae.input_dim as f64,
            vae.cond_dim as f64,
            vae.latent_dim as f64,
            vae.hidden_dim as f64,
        ]),
    );
    for (name, arr) in vae.param_arrays() {
        sections.insert(format!("param/{name}"), array_section(arr, precision));
    }
    sections.insert(
        "norm/flat_mean".to_string(),
        array_section(&vae.norm.flat_mean, Precision::F64),
    );
    sections.insert(
        "norm/flat_scale".to_string(),
        array_section(&vae.norm.flat_scale, Precision::F64),
    );
    sections.insert(
        "norm/cond_mean".to_string(),
        array_section(&vae.norm.cond_mean, Precision::F64),
    );
    sections.insert(
        "norm/cond_scale".to_string(),
        array_section(&vae.norm.cond_scale, Precision::F64),
    );
    Ok(sections)
}

/// VAE parameters from container sections.
pub fn vae_from_sections(sections: &BTreeMap<String, Section>) -> Result<VaeParams> {
    let shape = shape_from_section(get_section(sections, "meta/adapter")?)?;
    let dims = get_section(sections, "meta/dims")?;
    if dims.data.len() != 4 {
        return Err(Error::ContainerFormat("vae dims must have 4 values".into()));
    }
    let input_dim = usize_of(dims.data[0], "vae input_dim")?;
    let cond_dim = usize_of(dims.data[1], "vae cond_dim")?;
    let latent_dim = usize_of(dims.data[2], "vae latent_dim")?;
    let hidden_dim = usize_of(dims.data[3], "vae hidden_dim")?;
    if input_dim != shape.flat_len() {
        return Err(Error::ContainerFormat(
            "vae input width disagrees with the adapter manifest".into(),
        ));
    }
    let mut vae = init_vae(shape, cond_dim, latent_dim, hidden_dim, 0)?;
    if vae.input_dim != input_dim {
        return Err(Error::ContainerFormat("vae input width mismatch".into()));
    }
    let names: Vec<&'static str> = vae.param_arrays().iter().map(|(n, _)| *n).collect();
    for name in names {
        let section = get_section(sections, &format!("param/{name}"))?;
        let arr = section_array(section)?;
        let target = match name {
            "enc_w1" => &mut vae.enc_w1,
            "enc_b1" => &mut vae.enc_b1,
            "enc_w2" => &mut vae.enc_w2,
            "enc_b2" => &mut vae.enc_b2,
            "enc_mu_w" => &mut vae.enc_mu_w,
            "enc_mu_b" => &mut vae.enc_mu_b,
            "enc_lv_w" => &mut vae.enc_lv_w,
            "enc_lv_b" => &mut vae.enc_lv_b,
            "dec_w1" => &mut vae.dec_w1,
            "dec_b1" => &mut vae.dec_b1,
            "dec_w2" => &mut vae.dec_w2,
            "dec_b2" => &mut vae.dec_b2,
            "dec_out_w" => &mut vae.dec_out_w,
            "dec_out_b" => &mut vae.dec_out_b,
            other => {
                return Err(Error::ContainerFormat(format!(
                    "unknown vae parameter {other}"
                )))
            }
        };
        if target.dims() != arr.dims() {
            return Err(Error::ContainerFormat(format!(
                "vae parameter {name} has dims {:?}, expected {:?}",
                arr.dims(),
                target.dims()
            )));
        }
        *target = arr;
    }
    vae.norm.flat_mean = section_array(get_section(sections, "norm/flat_mean")?)?;
    vae.norm.flat_scale = section_array(get_section(sections, "norm/flat_scale")?)?;
    vae.norm.cond_mean = section_array(get_section(sections, "norm/cond_mean")?)?;
    vae.norm.cond_scale = section_array(get_section(sections, "norm/cond_scale")?)?;
    if vae.norm.flat_mean.len() != input_dim || vae.norm.cond_mean.len() != cond_dim {
        return Err(Error::ContainerFormat(
            "standardizer widths disagree with the vae dims".into(),
        ));
    }
    vae.check_finite()?;
    Ok(vae)
}

/// Merged adapter to container sections; extra named vectors (fusion
/// weights) ride along.
pub fn adapter_to_sections(
    flat: &FlatParams,
    precision: Precision,
    extra: &[(&str, Vec<f64>)],
) -> Result<BTreeMap<String, Section>> {
    let mut sections = BTreeMap::new();
    sections.insert("meta/adapter".to_string(), shape_to_section(&flat.shape)?);
    sections.insert(
        "flat".to_string(),
        Section {
            dims: vec![flat.data.len()],
            dtype: precision,
            data: flat.data.clone(),
        },
    );
    for (name, values) in extra {
        sections.insert(name.to_string(), meta_section(values.clone()));
    }
    Ok(sections)
}

/// Merged adapter from container sections.
pub fn adapter_from_sections(sections: &BTreeMap<String, Section>) -> Result<FlatParams> {
    let shape = shape_from_section(get_section(sections, "meta/adapter")?)?;
    let flat = get_section(sections, "flat")?;
    FlatParams::new(shape, flat.data.clone())
}

fn load_base(paths: &OutPaths) -> Result<BaseModel> {
    if !paths.base().exists() {
        return Err(Error::MissingInput(
            "base model artifact not found; run the pretrain stage first".into(),
        ));
    }
    base_from_sections(&load_container(&paths.base())?)
}

fn suite_of(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    make_task_suite(
        &cfg.suite,
        cfg.model.input_dim,
        cfg.model.output_dim,
        cfg.seed,
    )
}

/// Tasks that have a stored fine-tuning sequence, in suite order. Tasks
/// whose train split is empty (data fraction 0) have no sequence.
fn load_sequences(
    cfg: &ExperimentConfig,
    paths: &OutPaths,
) -> Result<(Vec<TaskSpec>, BTreeMap<String, CheckpointSequence>)> {
    let suite = suite_of(cfg)?;
    let mut sequences = BTreeMap::new();
    let mut any = false;
    for task in &suite {
        let path = paths.finetune(&task.task_id);
        if path.exists() {
            any = true;
            sequences.insert(
                task.task_id.clone(),
                sequence_from_sections(&task.task_id, &load_container(&path)?)?,
            );
        }
    }
    if !any {
        return Err(Error::MissingInput(
            "no fine-tuning artifacts found; run the finetune stage first".into(),
        ));
    }
    Ok((suite, sequences))
}

fn load_vectors(paths: &OutPaths) -> Result<BTreeMap<String, TaskVector>> {
    if !paths.taskvec().exists() {
        return Err(Error::MissingInput(
            "task vectors not found; run the taskvec stage first".into(),
        ));
    }
    vectors_from_sections(&load_container(&paths.taskvec())?)
}

fn load_vae(paths: &OutPaths) -> Result<VaeParams> {
    if !paths.vae().exists() {
        return Err(Error::MissingInput(
            "vae artifact not found; run the train-vae stage first".into(),
        ));
    }
    vae_from_sections(&load_container(&paths.vae())?)
}

/// Trains the base model.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_PRETRAIN, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = pretrain(&cfg.model, &cfg.pretrain, cfg.seed)?;
    save_container(&paths.base(), &base_to_sections(&base, cfg.precision))?;
    record(
        &mut manifest,
        &paths,
        STAGE_PRETRAIN,
        vec!["base.icmf".to_string()],
        started,
    )
}

/// Fine-tunes one LoRA adapter per task and stores the checkpoint tails.
pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_FINETUNE, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = load_base(&paths)?;
    let suite = suite_of(cfg)?;
    std::fs::create_dir_all(paths.root.join("finetune"))?;
    let mut files = Vec::new();
    for task in &suite {
        if task.dataset(Split::Train)?.is_empty() {
            continue;
        }
        let seq = finetune_lora(&base, task, &cfg.finetune, cfg.seed)?;
        save_container(
            &paths.finetune(&task.task_id),
            &sequence_to_sections(&seq, cfg.precision)?,
        )?;
        files.push(paths.finetune_rel(&task.task_id));
    }
    if files.is_empty() {
        return Err(Error::InvalidConfig(
            "every task has an empty train split; nothing to fine-tune".into(),
        ));
    }
    record(&mut manifest, &paths, STAGE_FINETUNE, files, started)
}

/// Extracts one task vector per fine-tuned task.
pub fn cmd_taskvec(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_TASKVEC, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = load_base(&paths)?;
    let (suite, sequences) = load_sequences(cfg, &paths)?;
    let probe = ProbeBatch::shared(cfg.taskvec.n_probe, cfg.model.input_dim, cfg.seed)?;
    let mut vectors = BTreeMap::new();
    for task in &suite {
        let Some(seq) = sequences.get(&task.task_id) else {
            continue;
        };
        let vector = match cfg.taskvec.mode {
            TaskVecMode::Activation => {
                let adapter = unflatten(seq.final_params())?;
                let adapted = apply_lora(&base, &adapter)?;
                extract_task_vector(&base, &adapted, &probe, &task.task_id)?
            }
            TaskVecMode::ParamDelta => param_delta_vector(seq.final_params(), &task.task_id)?,
        };
        vectors.insert(task.task_id.clone(), vector);
    }
    save_container(
        &paths.taskvec(),
        &vectors_to_sections(&vectors, cfg.precision),
    )?;
    record(
        &mut manifest,
        &paths,
        STAGE_TASKVEC,
        vec!["taskvec.icmf".to_string()],
        started,
    )
}

fn meta_tasks(
    suite: &[TaskSpec],
    sequences: &BTreeMap<String, CheckpointSequence>,
    vectors: &BTreeMap<String, TaskVector>,
) -> Result<Vec<MetaTask>> {
    let mut tasks = Vec::new();
    for task in suite {
        let Some(seq) = sequences.get(&task.task_id) else {
            continue;
        };
        let vector = vectors.get(&task.task_id).ok_or_else(|| {
            Error::MissingInput(format!("no task vector stored for {}", task.task_id))
        })?;
        tasks.push(MetaTask {
            task_id: task.task_id.clone(),
            vector: vector.clone(),
            sequence: seq.clone(),
            train_data: task.dataset(Split::Train)?,
        });
    }
    Ok(tasks)
}

/// Meta-trains the fusion VAE on the combined checkpoint dataset.
pub fn cmd_train_vae(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_TRAIN_VAE, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = load_base(&paths)?;
    let (suite, sequences) = load_sequences(cfg, &paths)?;
    let vectors = load_vectors(&paths)?;
    let tasks = meta_tasks(&suite, &sequences, &vectors)?;
    if tasks.is_empty() {
        return Err(Error::MissingInput("no tasks available for meta-training".into()));
    }
    let shape = Arc::clone(&tasks[0].sequence.final_params().shape);
    let cond_dim = tasks[0].vector.len();
    let vae_init = init_vae(
        shape,
        cond_dim,
        cfg.vae.latent_dim,
        cfg.vae.hidden_dim,
        cfg.seed,
    )?;
    let outcome = train_meta(&base, &tasks, &cfg.meta, &vae_init, cfg.seed)?;
    save_container(&paths.vae(), &vae_to_sections(&outcome.params, cfg.precision)?)?;
    std::fs::write(paths.history(), outcome.history.to_csv_string())?;
    record(
        &mut manifest,
        &paths,
        STAGE_TRAIN_VAE,
        vec!["vae.icmf".to_string(), "meta_history.csv".to_string()],
        started,
    )
}

/// Entries eligible for fusion, in suite order.
fn fusion_entries(
    suite: &[TaskSpec],
    sequences: &BTreeMap<String, CheckpointSequence>,
    vectors: &BTreeMap<String, TaskVector>,
) -> Result<(Vec<(FlatParams, TaskVector)>, Vec<TaskSpec>)> {
    let mut entries = Vec::new();
    let mut specs = Vec::new();
    for task in suite {
        let Some(seq) = sequences.get(&task.task_id) else {
            continue;
        };
        let vector = vectors.get(&task.task_id).ok_or_else(|| {
            Error::MissingInput(format!("no task vector stored for {}", task.task_id))
        })?;
        entries.push((seq.final_params().clone(), vector.clone()));
        specs.push(task.clone());
    }
    Ok((entries, specs))
}

/// Selects fusion weights on validation splits and decodes the fused
/// adapter through the trained VAE.
pub fn cmd_fuse(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_FUSE, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = load_base(&paths)?;
    let (suite, sequences) = load_sequences(cfg, &paths)?;
    let vectors = load_vectors(&paths)?;
    let vae = load_vae(&paths)?;
    let (entries, specs) = fusion_entries(&suite, &sequences, &vectors)?;
    if entries.is_empty() {
        return Err(Error::MissingInput("no adapters available to fuse".into()));
    }
    let spec = cfg
        .merge_spec(MergeMethod::Icm)
        .cloned()
        .unwrap_or_else(|| MergeSpec::of(MergeMethod::Icm));
    let mut eval_sets = Vec::with_capacity(specs.len());
    for task in &specs {
        eval_sets.push(task.dataset(Split::Val)?);
    }
    let weights = select_fusion_weights(&vae, &base, &entries, &eval_sets, spec.grid_step)?;
    let fused = icm_fuse(&vae, &entries, &weights)?;
    std::fs::create_dir_all(paths.root.join("merged"))?;
    save_container(
        &paths.merged(MergeMethod::Icm),
        &adapter_to_sections(&fused, cfg.precision, &[("weights", weights)])?,
    )?;
    record(
        &mut manifest,
        &paths,
        STAGE_FUSE,
        vec![paths.merged_rel(MergeMethod::Icm)],
        started,
    )
}

fn baseline_merge(
    cfg: &ExperimentConfig,
    base: &BaseModel,
    deltas: &[ParamDelta],
    spec: &MergeSpec,
) -> Result<FlatParams> {
    let flats: Vec<FlatParams> = deltas.iter().map(|d| d.flat.clone()).collect();
    match spec.method {
        MergeMethod::Soup => soup_merge(&flats),
        MergeMethod::Ta => {
            let lambda = spec
                .lambda_ta
                .unwrap_or_else(|| 1.0 / deltas.len() as f64);
            ta_merge(deltas, lambda)
        }
        MergeMethod::Ties => ties_merge(deltas, spec.density),
        MergeMethod::DareTies => dare_ties_merge(
            deltas,
            spec.drop_p,
            spec.density,
            spec.seed.unwrap_or(cfg.seed),
        ),
        MergeMethod::Regmean => {
            let probe =
                ProbeBatch::shared(cfg.taskvec.n_probe, cfg.model.input_dim, cfg.seed)?;
            regmean_lora(base, deltas, &probe)
        }
        MergeMethod::SvdLatent => svd_latent_merge(&flats, spec.svd_rank),
        MergeMethod::Icm => Err(Error::InvalidConfig(
            "icm fusion is produced by the fuse stage, not the baseline merger".into(),
        )),
    }
}

/// Runs the training-free baseline mergers. With `method` given, only
/// that one; otherwise every configured non-ICM merge.
pub fn cmd_merge_baseline(
    cfg: &ExperimentConfig,
    out: &Path,
    method: Option<MergeMethod>,
    force: bool,
) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    let specs: Vec<MergeSpec> = match method {
        Some(MergeMethod::Icm) => {
            return Err(Error::InvalidConfig(
                "icm fusion is produced by the fuse stage, not the baseline merger".into(),
            ))
        }
        Some(m) => vec![cfg
            .merge_spec(m)
            .cloned()
            .unwrap_or_else(|| MergeSpec::of(m))],
        None => cfg
            .merges
            .iter()
            .filter(|s| s.method != MergeMethod::Icm)
            .cloned()
            .collect(),
    };
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no baseline merges configured".into()));
    }
    let mut loaded = None;
    for spec in &specs {
        let stage = format!("merge_{}", spec.method.name());
        if !force && stage_done(&manifest, &stage, &paths) {
            continue;
        }
        let started = Instant::now();
        if loaded.is_none() {
            let base = load_base(&paths)?;
            let (suite, sequences) = load_sequences(cfg, &paths)?;
            let mut deltas = Vec::new();
            for task in &suite {
                if let Some(seq) = sequences.get(&task.task_id) {
                    deltas.push(ParamDelta::new(
                        seq.final_params().clone(),
                        task.task_id.clone(),
                    ));
                }
            }
            loaded = Some((base, deltas));
        }
        let (base, deltas) = loaded.as_ref().expect("populated above");
        let merged = baseline_merge(cfg, base, deltas, spec)?;
        std::fs::create_dir_all(paths.root.join("merged"))?;
        save_container(
            &paths.merged(spec.method),
            &adapter_to_sections(&merged, cfg.precision, &[])?,
        )?;
        record(
            &mut manifest,
            &paths,
            &stage,
            vec![paths.merged_rel(spec.method)],
            started,
        )?;
    }
    Ok(())
}

/// Scores every configured merged adapter on every task's test split.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_EVAL, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    let base = load_base(&paths)?;
    let (suite, sequences) = load_sequences(cfg, &paths)?;
    let mut merged = BTreeMap::new();
    for spec in &cfg.merges {
        let path = paths.merged(spec.method);
        if !path.exists() {
            return Err(Error::MissingInput(format!(
                "merged adapter {} not found; run the fuse/merge stages first",
                path.display()
            )));
        }
        merged.insert(
            spec.method.name().to_string(),
            adapter_from_sections(&load_container(&path)?)?,
        );
    }
    let per_task: BTreeMap<String, FlatParams> = sequences
        .iter()
        .map(|(id, seq)| (id.clone(), seq.final_params().clone()))
        .collect();
    let report = crate::evalmetrics::multitask_report(&base, &merged, &per_task, &suite)?;
    std::fs::write(paths.report_json(), report.to_json_string()?)?;
    record(
        &mut manifest,
        &paths,
        STAGE_EVAL,
        vec!["report.json".to_string()],
        started,
    )
}

/// Encoder means of the combined entries, one CSV row per checkpoint.
pub fn latent_export_csv(vae: &VaeParams, entries: &[CombinedEntry]) -> Result<String> {
    let mut out = String::from("task_id,epoch");
    for j in 0..vae.latent_dim {
        out.push_str(&format!(",mu_{j}"));
    }
    out.push('\n');
    for entry in entries {
        let (g, _) = vae.encode_cached(&entry.flat.data, entry.vector.data.data())?;
        out.push_str(&format!("{},{}", entry.task_id, entry.epoch));
        for m in g.mu.data() {
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Emits the final report CSV (from the eval stage's data), plus the
/// latent export, and verifies that every manifest artifact still exists.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    let mut manifest = open_manifest(cfg, &paths, force)?;
    if !force && stage_done(&manifest, STAGE_REPORT, &paths) {
        return Ok(());
    }
    let started = Instant::now();
    if !paths.report_json().exists() {
        return Err(Error::MissingInput(
            "report data not found; run the eval stage first".into(),
        ));
    }
    for (stage, files) in &manifest.artifacts {
        for file in files {
            if !paths.root.join(file).exists() {
                return Err(Error::MissingInput(format!(
                    "artifact {file} recorded by stage {stage} is missing"
                )));
            }
        }
    }
    let report = MergeReport::from_json_str(&std::fs::read_to_string(paths.report_json())?)?;
    std::fs::write(paths.report_csv(), report.to_csv_string())?;

    let (suite, sequences) = load_sequences(cfg, &paths)?;
    let vectors = load_vectors(&paths)?;
    let vae = load_vae(&paths)?;
    let ordered: Vec<CheckpointSequence> = suite
        .iter()
        .filter_map(|t| sequences.get(&t.task_id).cloned())
        .collect();
    let combined = build_combined_dataset(&ordered, &vectors)?;
    std::fs::write(paths.latents(), latent_export_csv(&vae, &combined.entries)?)?;
    record(
        &mut manifest,
        &paths,
        STAGE_REPORT,
        vec!["report.csv".to_string(), "latents.csv".to_string()],
        started,
    )
}

/// Runs every stage in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cmd_pretrain(cfg, out, force)?;
    cmd_finetune(cfg, out, force)?;
    cmd_taskvec(cfg, out, force)?;
    cmd_train_vae(cfg, out, force)?;
    cmd_fuse(cfg, out, force)?;
    cmd_merge_baseline(cfg, out, None, force)?;
    cmd_eval(cfg, out, force)?;
    cmd_report(cfg, out, force)
}
