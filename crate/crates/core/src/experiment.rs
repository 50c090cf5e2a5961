//! Config-driven experiments: load or generate data, train per seed, pseudo-label,
//! fit the rotation, classify in- and out-of-sample, and aggregate metrics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assignment::ClusterAssignment;
use crate::dataio::{
    generate_union_of_subspaces, load_idx, read_dataset, read_tensors, sample_from_bases, write_tensors,
    BatchSampler, DataMatrix, SubspaceSpec, TensorFile,
};
use crate::edsc::{solve_edsc_closed_form_with_budget, CoefficientMatrix, CoefficientSource, DEFAULT_DENSE_BUDGET};
use crate::error::{domain, Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::numerics::{numerical_rank, Matrix, RngState};
use crate::siamese::{analytic_optimum, train_linear, LinearEmbeddingModel, LinearTrainConfig, RotationChoice};
use crate::spectral::{pseudo_labels, PseudoLabelConfig, SpectralSummary};
use crate::sscn::{train_stage, Architecture, Lambdas, LossTrace, SscnModel, Stage, TrainSchedule};
use crate::stiefel::{default_block_dim, train_rotation, AxisAlignedSubspaces, Classifier, Embedder, RotationTrainConfig};

/// MNIST-style IDX image/label pair, optionally filtered to some digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only these classes, relabeled `0..len` in this order.
    #[serde(default)]
    pub digits: Option<Vec<usize>>,
    /// Skip this many (filtered) images first.
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SubspaceSpec),
    Idx(IdxSource),
    /// A dataset container written by `generate`.
    File { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SubspaceSpec::default())
    }
}

/// Fresh points for inductive evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OutOfSample {
    /// New coefficients on the training data's subspaces (synthetic data only).
    Synthetic {
        points_per_cluster: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    Idx(IdxSource),
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Edsc,
    #[default]
    SiameseLinear,
    Sscn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMode {
    /// Closed-form global optimum with a seed-dependent rotation.
    #[default]
    Analytic,
    /// Gradient training from a seed-dependent start.
    Gradient,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSettings {
    pub mode: LinearMode,
    pub train: LinearTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SscnSettings {
    pub architecture: Architecture,
    pub lambdas: Lambdas,
    pub schedule: TrainSchedule,
    /// Points per mini-batch; `None` trains on all points at once.
    pub batch_size: Option<usize>,
    /// Seed of the shared pre-trained auto-encoder.
    pub pretrain_seed: u64,
    pub embedding_init: EmbeddingInit,
}

/// Starting point of the embedding layer before joint training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    /// Small Gaussian draw from the run seed.
    #[default]
    Random,
    /// Closed-form linear optimum on the pre-trained latent codes, with λ = λ₁.
    Analytic,
}

impl Default for SscnSettings {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            lambdas: Lambdas::default(),
            schedule: TrainSchedule::default(),
            batch_size: None,
            pretrain_seed: 0,
            embedding_init: EmbeddingInit::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub out_of_sample: Option<OutOfSample>,
    pub model: ModelKind,
    /// Self-expression weight of EDSC and the linear siamese model.
    pub lambda: f64,
    /// Cluster count `K`; defaults to the number of label classes.
    pub clusters: Option<usize>,
    /// Block dimension `q`; defaults from `embed_dim`, then from the data rank.
    pub block_dim: Option<usize>,
    /// `d_H`; must equal `K · q` when both are given.
    pub embed_dim: Option<usize>,
    pub linear: LinearSettings,
    pub sscn: SscnSettings,
    pub rotation: RotationTrainConfig,
    pub pseudo_labels: PseudoLabelConfig,
    /// At most this many points get a dense `Q` for pseudo-labels.
    pub pseudo_label_points: usize,
    /// Column chunk size for classifying.
    pub cluster_batch: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Stage-(a) checkpoint to start from instead of pre-training.
    pub resume_from: Option<PathBuf>,
    pub save_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            out_of_sample: None,
            model: ModelKind::default(),
            lambda: 100.0,
            clusters: None,
            block_dim: None,
            embed_dim: None,
            linear: LinearSettings::default(),
            sscn: SscnSettings::default(),
            rotation: RotationTrainConfig::default(),
            pseudo_labels: PseudoLabelConfig::default(),
            pseudo_label_points: 2000,
            cluster_batch: 1000,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/experiment"),
            resume_from: None,
            save_artifacts: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| domain(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loaded training data plus the generating bases when synthetic.
pub struct LoadedData {
    pub data: DataMatrix,
    pub bases: Option<Vec<Matrix>>,
    pub noise_sigma: f64,
}

pub fn load_idx_source(src: &IdxSource) -> Result<DataMatrix> {
    let all = load_idx(&src.images, &src.labels)?;
    let labels = all.labels().unwrap_or_default();
    let mut keep: Vec<usize> = (0..all.len()).collect();
    let mut relabel: Option<Vec<Option<usize>>> = None;
    if let Some(digits) = &src.digits {
        let max = labels.iter().copied().max().unwrap_or(0).max(digits.iter().copied().max().unwrap_or(0));
        let mut map = vec![None; max + 1];
        for (i, &d) in digits.iter().enumerate() {
            map[d] = Some(i);
        }
        keep.retain(|&i| map[labels[i]].is_some());
        relabel = Some(map);
    }
    let keep: Vec<usize> = keep
        .into_iter()
        .skip(src.offset)
        .take(src.limit.unwrap_or(usize::MAX))
        .collect();
    if keep.is_empty() {
        return Err(domain(format!("no images selected from {}", src.images.display())));
    }
    let picked = all.select(&keep);
    match relabel {
        Some(map) => {
            let (x, l) = picked.into_parts();
            let l = l.map(|l| l.into_iter().map(|v| map[v].unwrap_or(0)).collect());
            DataMatrix::new(x, l)
        }
        None => Ok(picked),
    }
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    match source {
        DataSource::Synthetic(spec) => {
            let (data, bases) = generate_union_of_subspaces(spec)?;
            Ok(LoadedData {
                data,
                bases: Some(bases),
                noise_sigma: spec.noise_sigma,
            })
        }
        DataSource::Idx(src) => Ok(LoadedData {
            data: load_idx_source(src)?,
            bases: None,
            noise_sigma: 0.0,
        }),
        DataSource::File { path } => Ok(LoadedData {
            data: read_dataset(path)?.0,
            bases: None,
            noise_sigma: 0.0,
        }),
    }
}

pub fn load_out_of_sample(oos: &OutOfSample, train: &LoadedData) -> Result<DataMatrix> {
    match oos {
        OutOfSample::Synthetic {
            points_per_cluster,
            seed,
        } => {
            let bases = train
                .bases
                .as_ref()
                .ok_or_else(|| domain("synthetic out-of-sample points need synthetic training data"))?;
            sample_from_bases(bases, points_per_cluster, train.noise_sigma, &mut RngState::new(*seed))
        }
        OutOfSample::Idx(src) => load_idx_source(src),
        OutOfSample::File { path } => Ok(read_dataset(path)?.0),
    }
}

/// A model ready to classify new points.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Linear {
        model: LinearEmbeddingModel,
        rotation: Matrix,
        subspaces: AxisAlignedSubspaces,
    },
    Sscn(SscnModel),
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Linear { model, .. } => model.input_dim(),
            TrainedModel::Sscn(m) => m.input_dim(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            TrainedModel::Linear { model, .. } => model.parameter_count(),
            TrainedModel::Sscn(m) => m.parameter_count(),
        }
    }

    /// Streams `x` through the model in chunks of `batch` columns.
    pub fn classify(&self, x: &Matrix, batch: usize) -> Result<ClusterAssignment> {
        if x.nrows() != self.input_dim() {
            return Err(domain(format!(
                "checkpoint expects d_X = {}, data has {} rows",
                self.input_dim(),
                x.nrows()
            )));
        }
        match self {
            TrainedModel::Linear {
                model,
                rotation,
                subspaces,
            } => Classifier::new(model, rotation, *subspaces)?.classify_streaming(x, batch),
            TrainedModel::Sscn(m) => Classifier::new(m, &m.rotation, m.subspaces)?.classify_streaming(x, batch),
        }
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let file = match self {
            TrainedModel::Linear {
                model,
                rotation,
                subspaces,
            } => {
                let mut f = TensorFile::default();
                f.push("w", model.w.clone());
                f.push("lambda", Matrix::from_element(1, 1, model.lambda));
                f.push("rotation", rotation.clone());
                f.push("blocks", Matrix::from_row_slice(1, 2, &[subspaces.k as f64, subspaces.q as f64]));
                f.metadata = serde_json::json!({ "kind": "siamese_linear", "metadata": metadata });
                f
            }
            TrainedModel::Sscn(m) => m.to_tensor_file(serde_json::json!({ "kind": "sscn", "metadata": metadata })),
        };
        write_tensors(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensors(path)?;
        match file.metadata.get("kind").and_then(|k| k.as_str()) {
            Some("siamese_linear") => {
                let b = file.require("blocks")?;
                Ok(TrainedModel::Linear {
                    model: LinearEmbeddingModel::new(file.require("w")?.clone(), file.require("lambda")?[(0, 0)])?,
                    rotation: file.require("rotation")?.clone(),
                    subspaces: AxisAlignedSubspaces::new(b[0] as usize, b[1] as usize)?,
                })
            }
            Some("sscn") => Ok(TrainedModel::Sscn(SscnModel::from_tensor_file(&file)?)),
            other => Err(domain(format!(
                "{} is not a classifier checkpoint (kind {other:?})",
                path.display()
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub pseudo_label_s: f64,
    pub rotation_s: f64,
    pub classify_s: f64,
    pub out_of_sample_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    /// Final in-sample labels: the classifier's, or spectral for EDSC.
    pub metrics: Option<MetricReport>,
    /// Spectral pseudo-labels on the points that got a dense `Q`.
    pub pseudo_label_metrics: Option<MetricReport>,
    pub out_of_sample: Option<MetricReport>,
    pub rotation_train_accuracy: Option<f64>,
    pub spectral: Option<SpectralSummary>,
    pub timings: Timings,
    pub artifacts: Vec<PathBuf>,
}

impl SeedReport {
    fn failed(seed: u64, err: &Error, timings: Timings) -> Self {
        Self {
            seed,
            ok: false,
            error: Some(err.to_string()),
            metrics: None,
            pseudo_label_metrics: None,
            out_of_sample: None,
            rotation_train_accuracy: None,
            spectral: None,
            timings,
            artifacts: Vec::new(),
        }
    }
}

/// Sample mean and sample standard deviation (`n − 1` denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: Option<MeanStd>,
    pub ari: Option<MeanStd>,
    pub nmi: Option<MeanStd>,
    pub out_of_sample_acc: Option<MeanStd>,
    pub succeeded: usize,
    pub failed: usize,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedReport]) -> Self {
        let pick = |f: &dyn Fn(&SeedReport) -> Option<f64>| MeanStd::of(&seeds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            acc: pick(&|s| s.metrics.as_ref().map(|m| m.acc)),
            ari: pick(&|s| s.metrics.as_ref().map(|m| m.ari)),
            nmi: pick(&|s| s.metrics.as_ref().map(|m| m.nmi)),
            out_of_sample_acc: pick(&|s| s.out_of_sample.as_ref().map(|m| m.acc)),
            succeeded: seeds.iter().filter(|s| s.ok).count(),
            failed: seeds.iter().filter(|s| !s.ok).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub n_points: usize,
    pub input_dim: usize,
    pub clusters: usize,
    pub block_dim: usize,
    pub parameter_count: Option<usize>,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub pretrain_s: f64,
    pub pretrain_skipped: bool,
    pub total_s: f64,
    pub config: ExperimentConfig,
}

pub fn write_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_soft_csv(path: &Path, assignment: &ClusterAssignment) -> Result<()> {
    let Some(soft) = &assignment.soft else {
        return Ok(());
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..soft.num_clusters()).map(|j| format!("p{j}")).collect();
    writeln!(f, "index,{}", header.join(","))?;
    for (i, row) in soft.y.row_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{i},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Everything fixed before the per-seed loop.
struct Plan {
    k: usize,
    q: usize,
}

fn plan(config: &ExperimentConfig, data: &DataMatrix) -> Result<Plan> {
    let k = match (config.clusters, data.num_classes(), &config.data) {
        (Some(k), ..) => k,
        (None, _, DataSource::Synthetic(spec)) => spec.num_clusters(),
        (None, Some(k), _) => k,
        (None, None, _) => return Err(domain("cluster count is not configured and the data has no labels")),
    };
    if k == 0 || k > data.len() {
        return Err(domain(format!("cluster count {k} is invalid for {} points", data.len())));
    }
    let q = match (config.block_dim, config.embed_dim) {
        (Some(q), Some(d)) if q * k != d => {
            return Err(domain(format!("embed_dim {d} is not clusters·block_dim = {k}·{q}")));
        }
        (Some(q), _) => q,
        (None, Some(d)) if d % k == 0 => d / k,
        (None, Some(d)) => return Err(domain(format!("embed_dim {d} is not a multiple of {k} clusters"))),
        (None, None) => match config.model {
            ModelKind::Sscn => config.sscn.architecture.latent_dim.div_ceil(k).max(1),
            _ => default_block_dim(numerical_rank(data.x())?, k),
        },
    };
    if q == 0 {
        return Err(domain("block dimension must be positive"));
    }
    Ok(Plan { k, q })
}

fn seed_dir(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let dir = config.out_dir.join(format!("seed-{seed}"));
    if config.save_artifacts {
        std::fs::create_dir_all(&dir)?;
    }
    Ok(dir)
}

/// Points that receive a dense coefficient matrix.
fn pseudo_label_subset(n: usize, limit: usize, rng: &mut RngState) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..limit {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(limit);
    idx.sort_unstable();
    idx
}

fn metrics_for(labels: &[usize], data: &DataMatrix, seed: u64) -> Result<Option<MetricReport>> {
    match data.labels() {
        Some(truth) if truth.len() >= 2 => Ok(Some(evaluate(labels, truth, Some(seed))?)),
        _ => Ok(None),
    }
}

/// Pre-trains the shared auto-encoder, or loads it from `resume_from`.
pub fn pretrained_autoencoder(
    config: &ExperimentConfig,
    data: &DataMatrix,
    k: usize,
    q: usize,
) -> Result<(SscnModel, LossTrace, bool)> {
    let s = &config.sscn;
    if let Some(path) = &config.resume_from {
        let (model, _) = SscnModel::load(path)?;
        if model.input_dim() != data.dim() {
            return Err(domain(format!(
                "checkpoint {} expects d_X = {}, data has {}",
                path.display(),
                model.input_dim(),
                data.dim()
            )));
        }
        if model.subspaces != AxisAlignedSubspaces::new(k, q)? {
            return Err(domain("checkpoint block layout differs from the configured clusters and block_dim"));
        }
        return Ok((model, LossTrace::default(), true));
    }
    let mut rng = RngState::new(s.pretrain_seed);
    let mut model = SscnModel::new(data.dim(), &s.architecture, AxisAlignedSubspaces::new(k, q)?, s.lambdas, &mut rng)?;
    let batch = s.batch_size.unwrap_or(data.len()).min(data.len());
    let mut sampler = BatchSampler::for_clusters(batch, data.len(), k, rng.split(1))?;
    let trace = train_stage(
        &mut model,
        data.x(),
        &mut sampler,
        Stage::Pretrain,
        s.schedule.pretrain_epochs,
        &s.schedule,
    )?;
    Ok((model, trace, false))
}

struct SeedContext<'a> {
    config: &'a ExperimentConfig,
    data: &'a DataMatrix,
    oos: Option<&'a DataMatrix>,
    plan: &'a Plan,
    pretrained: Option<&'a SscnModel>,
}

fn run_seed(ctx: &SeedContext, seed: u64, timings: &mut Timings) -> Result<SeedReport> {
    let config = ctx.config;
    let data = ctx.data;
    let subspaces = AxisAlignedSubspaces::new(ctx.plan.k, ctx.plan.q)?;
    let dir = seed_dir(config, seed)?;
    let mut artifacts = Vec::new();
    let root = RngState::new(seed);
    let t0 = Instant::now();

    if config.model == ModelKind::Edsc {
        let c = solve_edsc_closed_form_with_budget(data, config.lambda, DEFAULT_DENSE_BUDGET)?;
        timings.train_s = t0.elapsed().as_secs_f64();
        let t = Instant::now();
        let sc = pseudo_labels(&c, ctx.plan.k, ctx.plan.q, &config.pseudo_labels, &mut root.split(3))?;
        timings.pseudo_label_s = t.elapsed().as_secs_f64();
        let metrics = metrics_for(&sc.assignment.labels, data, seed)?;
        if config.save_artifacts {
            let p = dir.join("labels.csv");
            write_labels_csv(&p, &sc.assignment.labels)?;
            artifacts.push(p);
        }
        return Ok(SeedReport {
            seed,
            ok: true,
            error: None,
            pseudo_label_metrics: metrics.clone(),
            metrics,
            out_of_sample: None,
            rotation_train_accuracy: None,
            spectral: Some(sc.summary()),
            timings: timings.clone(),
            artifacts,
        });
    }

    // Stage (b): the embedding model.
    let mut trace = None;
    let mut trained = match config.model {
        ModelKind::SiameseLinear => {
            let d_h = subspaces.dim();
            let model = match config.linear.mode {
                LinearMode::Analytic => analytic_optimum(data, config.lambda, d_h, RotationChoice::Random { seed })?,
                LinearMode::Gradient => {
                    let cfg = LinearTrainConfig {
                        seed,
                        ..config.linear.train.clone()
                    };
                    train_linear(data, d_h, config.lambda, &cfg)?.model
                }
            };
            TrainedModel::Linear {
                model,
                rotation: Matrix::identity(d_h, d_h),
                subspaces,
            }
        }
        ModelKind::Sscn => {
            let s = &config.sscn;
            let mut model = ctx
                .pretrained
                .cloned()
                .ok_or_else(|| domain("sscn runs need a pre-trained auto-encoder"))?;
            model.lambdas = s.lambdas;
            match s.embedding_init {
                EmbeddingInit::Random => model.reset_embedding(&mut root.split(1)),
                EmbeddingInit::Analytic => model.warm_start_embedding(data.x(), seed)?,
            }
            let batch = s.batch_size.unwrap_or(data.len()).min(data.len());
            let mut sampler = BatchSampler::new(batch, data.len(), root.split(2))?;
            let t = train_stage(&mut model, data.x(), &mut sampler, Stage::Joint, s.schedule.joint_epochs, &s.schedule)?;
            trace = Some(t);
            TrainedModel::Sscn(model)
        }
        ModelKind::Edsc => unreachable!(),
    };
    timings.train_s = t0.elapsed().as_secs_f64();

    // Pseudo-labels from Q on at most `pseudo_label_points` points.
    let t = Instant::now();
    let subset = pseudo_label_subset(data.len(), config.pseudo_label_points.min(DEFAULT_DENSE_BUDGET), &mut root.split(4));
    let sub = if subset.len() == data.len() {
        data.clone()
    } else {
        data.select(&subset)
    };
    let h = match &trained {
        TrainedModel::Linear { model, .. } => model.embed(sub.x())?,
        TrainedModel::Sscn(m) => m.embed(sub.x())?,
    };
    let lambda = match &trained {
        TrainedModel::Linear { model, .. } => model.lambda,
        TrainedModel::Sscn(m) => m.lambdas.l1,
    };
    let source = match config.model {
        ModelKind::Sscn => CoefficientSource::Sscn,
        _ => CoefficientSource::SiameseAnalytic,
    };
    let q_mat = CoefficientMatrix::new(h.tr_mul(&h), lambda, source)?;
    let sc = pseudo_labels(&q_mat, ctx.plan.k, ctx.plan.q, &config.pseudo_labels, &mut root.split(3))?;
    drop(q_mat);
    timings.pseudo_label_s = t.elapsed().as_secs_f64();
    let pseudo_label_metrics = metrics_for(&sc.assignment.labels, &sub, seed)?;

    // Stage (c): rotation.
    let t = Instant::now();
    let rot_cfg = RotationTrainConfig {
        seed,
        ..config.rotation.clone()
    };
    let fit = train_rotation(&h, &sc.assignment.labels, &subspaces, &rot_cfg)?;
    match &mut trained {
        TrainedModel::Linear { rotation, .. } => *rotation = fit.rotation.clone(),
        TrainedModel::Sscn(m) => m.rotation = fit.rotation.clone(),
    }
    timings.rotation_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let assignment = trained.classify(data.x(), config.cluster_batch)?;
    timings.classify_s = t.elapsed().as_secs_f64();
    let metrics = metrics_for(&assignment.labels, data, seed)?;

    let mut out_of_sample = None;
    if let Some(oos) = ctx.oos {
        let t = Instant::now();
        let a = trained.classify(oos.x(), config.cluster_batch)?;
        timings.out_of_sample_s = t.elapsed().as_secs_f64();
        out_of_sample = metrics_for(&a.labels, oos, seed)?;
        if config.save_artifacts {
            let p = dir.join("oos_labels.csv");
            write_labels_csv(&p, &a.labels)?;
            artifacts.push(p);
        }
    }

    if config.save_artifacts {
        let p = dir.join("model.bin");
        trained.save(&p, serde_json::json!({ "seed": seed }))?;
        artifacts.push(p);
        let p = dir.join("labels.csv");
        write_labels_csv(&p, &assignment.labels)?;
        artifacts.push(p);
        let p = dir.join("soft.csv");
        write_soft_csv(&p, &assignment)?;
        artifacts.push(p);
        let p = dir.join("pseudo_labels.csv");
        write_labels_csv(&p, &sc.assignment.labels)?;
        artifacts.push(p);
        let mut full = trace.unwrap_or_default();
        full.rows.extend(fit.trace.iter().enumerate().map(|(i, &l)| crate::sscn::TraceRow {
            epoch: i,
            stage: Stage::Classifier,
            terms: crate::sscn::LossTerms {
                clf: l,
                total: l,
                ..Default::default()
            },
        }));
        let p = dir.join("trace.csv");
        full.write_csv(&p)?;
        artifacts.push(p);
    }
    timings.total_s = t0.elapsed().as_secs_f64();
    Ok(SeedReport {
        seed,
        ok: true,
        error: None,
        metrics,
        pseudo_label_metrics,
        out_of_sample,
        rotation_train_accuracy: Some(fit.train_accuracy),
        spectral: Some(sc.summary()),
        timings: timings.clone(),
        artifacts,
    })
}

/// Runs every configured seed. A seed that fails (for example by
/// diverging) is reported and skipped; the aggregate covers the rest.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    if config.seeds.is_empty() {
        return Err(domain("at least one seed is required"));
    }
    let loaded = load_data(&config.data)?;
    let oos = match &config.out_of_sample {
        Some(o) => Some(load_out_of_sample(o, &loaded)?),
        None => None,
    };
    let data = &loaded.data;
    let plan = plan(config, data)?;
    if config.save_artifacts {
        std::fs::create_dir_all(&config.out_dir)?;
    }

    let mut pretrain_s = 0.0;
    let mut pretrain_skipped = false;
    let pretrained = if config.model == ModelKind::Sscn {
        let t = Instant::now();
        let (model, trace, skipped) = pretrained_autoencoder(config, data, plan.k, plan.q)?;
        pretrain_s = t.elapsed().as_secs_f64();
        pretrain_skipped = skipped;
        if config.save_artifacts && !skipped {
            model.save(&config.out_dir.join("pretrained.bin"), serde_json::json!({ "stage": "pretrain" }))?;
            trace.write_csv(&config.out_dir.join("pretrain_trace.csv"))?;
        }
        Some(model)
    } else {
        None
    };

    let ctx = SeedContext {
        config,
        data,
        oos: oos.as_ref(),
        plan: &plan,
        pretrained: pretrained.as_ref(),
    };
    let mut seeds = Vec::new();
    let mut parameter_count = None;
    for &seed in &config.seeds {
        let mut timings = Timings::default();
        let report = match run_seed(&ctx, seed, &mut timings) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                SeedReport::failed(seed, &e, timings)
            }
        };
        if config.save_artifacts {
            write_json(&seed_dir(config, seed)?.join("report.json"), &report)?;
        }
        if report.ok && parameter_count.is_none() {
            parameter_count = match config.model {
                ModelKind::Edsc => None,
                ModelKind::SiameseLinear => Some(plan.k * plan.q * data.dim()),
                ModelKind::Sscn => pretrained.as_ref().map(SscnModel::parameter_count),
            };
        }
        seeds.push(report);
    }
    let report = RunReport {
        model: config.model,
        n_points: data.len(),
        input_dim: data.dim(),
        clusters: plan.k,
        block_dim: plan.q,
        parameter_count,
        aggregate: Aggregate::from_seeds(&seeds),
        seeds,
        pretrain_s,
        pretrain_skipped,
        total_s: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    if config.save_artifacts {
        write_json(&config.out_dir.join("run_report.json"), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let mut c = ExperimentConfig::default();
        c.model = ModelKind::Sscn;
        c.seeds = vec![1, 2, 3];
        c.out_of_sample = Some(OutOfSample::Synthetic {
            points_per_cluster: vec![10; 3],
            seed: 4,
        });
        c.data = DataSource::Idx(IdxSource {
            images: "a".into(),
            labels: "b".into(),
            digits: Some(vec![0, 1, 2]),
            offset: 3,
            limit: Some(10),
        });
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"lamda": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sscn": {"lr": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"synthetic": {"ambient_dim": 4, "cluster_dims": [1], "points_per_cluster": [3], "extra": 1}}}"#).is_err());
    }

    #[test]
    fn mean_std_uses_sample_formula() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn subset_is_sorted_and_unique() {
        let s = pseudo_label_subset(100, 30, &mut RngState::new(1));
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pseudo_label_subset(5, 30, &mut RngState::new(1)), vec![0, 1, 2, 3, 4]);
    }
}
