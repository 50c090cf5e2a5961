//! Nonlinear siamese subspace clustering network.
//!
//! `Z = enc(X)`, `H = W_h Z`, `Q = HᵀH`, `X̂ = dec(ZQ)`, trained on
//!
//! `½‖Q‖² + λ₁/2 ‖Z − ZQ‖² + λ₂/2 ‖X − X̂‖² + λ₃ L_clf`
//!
//! over mini-batches, so `Q` is only ever `batch × batch`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, AdamConfig, Mlp, Tape, Var};
use crate::dataio::{read_tensors, write_tensors, BatchSampler, DataMatrix, TensorFile};
use crate::edsc::DEFAULT_DENSE_BUDGET;
use crate::error::{domain, Error, Result};
use crate::numerics::{orthonormality_error, Matrix, RngState};
use crate::siamese::{analytic_optimum, RotationChoice};
use crate::stiefel::{AxisAlignedSubspaces, Embedder, MANIFOLD_TOL};

/// Loss weights `λ₁` (latent self-expression), `λ₂` (reconstruction) and
/// `λ₃` (classifier).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            l3: 0.1,
        }
    }
}

/// Shape of the auto-encoder and embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub output_activation: Activation,
    /// Biases shift every point by a shared offset, which turns linear
    /// subspaces into affine ones; off keeps the encoder odd.
    pub bias: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            latent_dim: 9,
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SscnModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `d_H × d_Z`.
    pub embed_w: Matrix,
    /// `d_H × d_H`, orthonormal.
    pub rotation: Matrix,
    pub lambdas: Lambdas,
    pub subspaces: AxisAlignedSubspaces,
}

impl SscnModel {
    pub fn new(
        input_dim: usize,
        arch: &Architecture,
        subspaces: AxisAlignedSubspaces,
        lambdas: Lambdas,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(&arch.hidden);
        sizes.push(arch.latent_dim);
        let mut encoder = Mlp::new(&sizes, arch.activation, Activation::Identity, rng)?;
        sizes.reverse();
        let mut decoder = Mlp::new(&sizes, arch.activation, arch.output_activation, rng)?;
        if !arch.bias {
            encoder = encoder.without_bias();
            decoder = decoder.without_bias();
        }
        let embed_w = init_embedding(subspaces.dim(), arch.latent_dim, rng);
        let rotation = Matrix::identity(subspaces.dim(), subspaces.dim());
        Self::from_parts(encoder, decoder, embed_w, rotation, lambdas, subspaces)
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        embed_w: Matrix,
        rotation: Matrix,
        lambdas: Lambdas,
        subspaces: AxisAlignedSubspaces,
    ) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
            return Err(domain(format!(
                "encoder {}→{} and decoder {}→{} are not mirrored",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        if embed_w.ncols() != encoder.output_dim() || embed_w.nrows() != subspaces.dim() {
            return Err(domain(format!(
                "embedding layer is {}×{}, expected {}×{}",
                embed_w.nrows(),
                embed_w.ncols(),
                subspaces.dim(),
                encoder.output_dim()
            )));
        }
        if rotation.shape() != (subspaces.dim(), subspaces.dim()) {
            return Err(domain("rotation must be d_H × d_H"));
        }
        let err = orthonormality_error(&rotation);
        if err > MANIFOLD_TOL {
            return Err(domain(format!("rotation is not orthonormal (‖RᵀR − I‖ = {err:.3e})")));
        }
        Ok(Self {
            encoder,
            decoder,
            embed_w,
            rotation,
            lambdas,
            subspaces,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.parameter_count() + self.embed_w.len() + self.rotation.len()
    }

    /// Draws a fresh embedding layer, keeping the auto-encoder.
    pub fn reset_embedding(&mut self, rng: &mut RngState) {
        self.embed_w = init_embedding(self.embed_w.nrows(), self.embed_w.ncols(), rng);
        self.rotation = Matrix::identity(self.subspaces.dim(), self.subspaces.dim());
    }

    /// Sets the embedding layer to the closed-form linear optimum on `enc(x)`
    /// with `λ = λ₁`, so the first two loss terms start at their minimum for
    /// the current encoder. Needs `λ₁ > 0` and `d_H ≥ rank(enc(x))`.
    pub fn warm_start_embedding(&mut self, x: &Matrix, seed: u64) -> Result<()> {
        let z = DataMatrix::unlabeled(self.encode(x))?;
        let lin = analytic_optimum(&z, self.lambdas.l1, self.embed_w.nrows(), RotationChoice::Random { seed })?;
        self.embed_w = lin.w;
        self.rotation = Matrix::identity(self.subspaces.dim(), self.subspaces.dim());
        Ok(())
    }

    pub fn encode(&self, x: &Matrix) -> Matrix {
        self.encoder.forward(x)
    }

    /// Trainable matrices in optimizer order: encoder, decoder, embedding.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.push(&mut self.embed_w);
        out
    }

    pub fn to_tensor_file(&self, metadata: serde_json::Value) -> TensorFile {
        let mut file = TensorFile {
            tensors: Vec::new(),
            metadata,
        };
        for (prefix, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                file.push(format!("{prefix}.{i}.w"), l.w.clone());
                file.push(format!("{prefix}.{i}.b"), l.b.clone());
            }
        }
        file.push("embed_w", self.embed_w.clone());
        file.push("rotation", self.rotation.clone());
        file.push(
            "lambdas",
            Matrix::from_row_slice(1, 3, &[self.lambdas.l1, self.lambdas.l2, self.lambdas.l3]),
        );
        file.push("blocks", Matrix::from_row_slice(1, 2, &[self.subspaces.k as f64, self.subspaces.q as f64]));
        let acts: Vec<_> = [&self.encoder, &self.decoder]
            .iter()
            .map(|m| m.layers.iter().map(|l| l.activation).collect::<Vec<_>>())
            .collect();
        let biases: Vec<_> = [&self.encoder, &self.decoder]
            .iter()
            .map(|m| m.layers.iter().map(|l| l.use_bias).collect::<Vec<_>>())
            .collect();
        if !file.metadata.is_object() {
            file.metadata = serde_json::json!({ "metadata": file.metadata });
        }
        if let serde_json::Value::Object(map) = &mut file.metadata {
            map.insert("activations".into(), serde_json::json!(acts));
            map.insert("biases".into(), serde_json::json!(biases));
        }
        file
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let acts: Vec<Vec<Activation>> = serde_json::from_value(
            file.metadata
                .get("activations")
                .cloned()
                .ok_or_else(|| domain("checkpoint metadata lacks layer activations"))?,
        )?;
        let biases: Vec<Vec<bool>> = match file.metadata.get("biases") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => acts.iter().map(|a| vec![true; a.len()]).collect(),
        };
        if acts.len() != 2 || biases.len() != 2 || acts[0].len() != biases[0].len() || acts[1].len() != biases[1].len() {
            return Err(domain("checkpoint must describe encoder and decoder layers"));
        }
        let mut mlps = Vec::new();
        for ((prefix, acts), biases) in ["encoder", "decoder"].iter().zip(&acts).zip(&biases) {
            let layers = acts
                .iter()
                .zip(biases)
                .enumerate()
                .map(|(i, (&activation, &use_bias))| {
                    Ok(crate::autodiff::Dense {
                        w: file.require(&format!("{prefix}.{i}.w"))?.clone(),
                        b: file.require(&format!("{prefix}.{i}.b"))?.clone(),
                        activation,
                        use_bias,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mlps.push(Mlp { layers });
        }
        let decoder = mlps.pop().unwrap_or(Mlp { layers: vec![] });
        let encoder = mlps.pop().unwrap_or(Mlp { layers: vec![] });
        let l = file.require("lambdas")?;
        let b = file.require("blocks")?;
        if l.len() != 3 || b.len() != 2 {
            return Err(domain("malformed lambdas or blocks tensor"));
        }
        Self::from_parts(
            encoder,
            decoder,
            file.require("embed_w")?.clone(),
            file.require("rotation")?.clone(),
            Lambdas {
                l1: l[0],
                l2: l[1],
                l3: l[2],
            },
            AxisAlignedSubspaces::new(b[0] as usize, b[1] as usize)?,
        )
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        write_tensors(path, &self.to_tensor_file(metadata))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = read_tensors(path)?;
        let model = Self::from_tensor_file(&file)?;
        Ok((model, file.metadata))
    }
}

impl Embedder for SscnModel {
    fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn embed_dim(&self) -> usize {
        self.embed_w.nrows()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.input_dim() {
            return Err(domain(format!(
                "model expects {}-dimensional inputs, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(&self.embed_w * self.encoder.forward(x))
    }
}

fn init_embedding(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    rng.gaussian_matrix(rows, cols) * (0.1 / (cols as f64).sqrt())
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct SscnForward {
    pub z: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub x_hat: Matrix,
}

fn check_batch(model: &SscnModel, x: &Matrix) -> Result<()> {
    if x.nrows() != model.input_dim() {
        return Err(domain(format!(
            "model expects {}-dimensional inputs, got {}",
            model.input_dim(),
            x.nrows()
        )));
    }
    if x.ncols() > DEFAULT_DENSE_BUDGET {
        return Err(Error::Resource(format!(
            "batch of {} points would need a {0}×{0} coefficient block; use mini-batches of at most {}",
            x.ncols(),
            DEFAULT_DENSE_BUDGET
        )));
    }
    Ok(())
}

pub fn forward_sscn(model: &SscnModel, x: &Matrix) -> Result<SscnForward> {
    check_batch(model, x)?;
    let z = model.encoder.forward(x);
    let h = &model.embed_w * &z;
    let q = h.tr_mul(&h);
    let x_hat = model.decoder.forward(&(&z * &q));
    Ok(SscnForward { z, h, q, x_hat })
}

/// Individual loss terms, already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub self_expr: f64,
    pub latent: f64,
    pub recon: f64,
    pub clf: f64,
    pub total: f64,
}

/// Which terms a training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `λ₂/2 ‖X − dec(enc(X))‖²` only.
    Pretrain,
    /// Self-expression and reconstruction.
    Joint,
    /// Rotation fit to pseudo-labels.
    Classifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
            Stage::Classifier => "classifier",
        }
    }
}

/// Gradients in optimizer order, plus the rotation's when the classifier
/// term was active.
#[derive(Clone, Debug)]
pub struct SscnGradients {
    pub params: Vec<Matrix>,
    pub rotation: Option<Matrix>,
}

struct Recorded {
    terms: LossTerms,
    loss: Var,
    params: Vec<Var>,
    rotation: Option<Var>,
}

fn record(
    tape: &mut Tape,
    model: &SscnModel,
    x: &Matrix,
    stage: Stage,
    targets: Option<&[usize]>,
) -> Result<Recorded> {
    check_batch(model, x)?;
    let lam = model.lambdas;
    let enc_params = model.encoder.register(tape, "encoder");
    let dec_params = model.decoder.register(tape, "decoder");
    let w = tape.param("embed_w", model.embed_w.clone());
    let mut params = enc_params.clone();
    params.extend(&dec_params);
    params.push(w);
    let vx = tape.constant(x.clone());
    let z = model.encoder.forward_on(tape, &enc_params, vx)?;
    let mut terms = LossTerms::default();

    if stage == Stage::Pretrain {
        let x_hat = model.decoder.forward_on(tape, &dec_params, z)?;
        let r = tape.sub(vx, x_hat)?;
        let ss = tape.sum_squares(r);
        let loss = tape.scale(ss, lam.l2 / 2.0);
        terms.recon = tape.scalar(loss);
        terms.total = terms.recon;
        return Ok(Recorded {
            terms,
            loss,
            params,
            rotation: None,
        });
    }

    let h = tape.matmul(w, z)?;
    let q = tape.gram(h);
    let zq = tape.matmul(z, q)?;
    let x_hat = model.decoder.forward_on(tape, &dec_params, zq)?;

    let qq = tape.sum_squares(q);
    let se = tape.scale(qq, 0.5);
    let dz = tape.sub(z, zq)?;
    let dz2 = tape.sum_squares(dz);
    let lat = tape.scale(dz2, lam.l1 / 2.0);
    let dx = tape.sub(vx, x_hat)?;
    let dx2 = tape.sum_squares(dx);
    let rec = tape.scale(dx2, lam.l2 / 2.0);
    let mut loss = tape.add(se, lat)?;
    loss = tape.add(loss, rec)?;
    terms.self_expr = tape.scalar(se);
    terms.latent = tape.scalar(lat);
    terms.recon = tape.scalar(rec);

    let mut rotation = None;
    if let Some(t) = targets {
        if lam.l3 != 0.0 {
            let r = tape.param("rotation", model.rotation.clone());
            let h_rot = tape.matmul(r, h)?;
            let ce = tape.softmin_cross_entropy(h_rot, t.to_vec(), model.subspaces)?;
            let clf = tape.scale(ce, lam.l3);
            terms.clf = tape.scalar(clf);
            loss = tape.add(loss, clf)?;
            rotation = Some(r);
        }
    }
    terms.total = tape.scalar(loss);
    Ok(Recorded {
        terms,
        loss,
        params,
        rotation,
    })
}

/// Loss of one batch. The classifier term is included only when `targets`
/// (block ids per column) are given and `λ₃ ≠ 0`.
pub fn sscn_loss(model: &SscnModel, x: &Matrix, targets: Option<&[usize]>) -> Result<LossTerms> {
    let mut tape = Tape::new();
    Ok(record(&mut tape, model, x, Stage::Joint, targets)?.terms)
}

/// Loss and parameter gradients for one batch.
pub fn sscn_gradients(
    model: &SscnModel,
    x: &Matrix,
    stage: Stage,
    targets: Option<&[usize]>,
) -> Result<(LossTerms, SscnGradients)> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, model, x, stage, targets)?;
    tape.backward(rec.loss)?;
    let params = rec.params.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let rotation = rec.rotation.map(|v| tape.grad_or_zeros(v));
    Ok((rec.terms, SscnGradients { params, rotation }))
}

/// Epoch counts and optimizer settings for [`train_sscn`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub adam: AdamConfig,
    /// Learning rate of the joint stage; `None` uses `adam.lr`. Fine-tuning a
    /// converged auto-encoder at full rate can wreck it in a few steps.
    pub joint_lr: Option<f64>,
    /// Abort once a batch loss exceeds this multiple of the stage's first one.
    pub divergence_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 300,
            joint_epochs: 300,
            adam: AdamConfig::default(),
            joint_lr: None,
            divergence_factor: 1e3,
        }
    }
}

/// One CSV row of the loss trace: batch-averaged terms for an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub stage: Stage,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.terms.total).collect()
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,stage,self_expr,latent,recon,clf,total")?;
        for r in &self.rows {
            let t = r.terms;
            writeln!(
                f,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch,
                r.stage.name(),
                t.self_expr,
                t.latent,
                t.recon,
                t.clf,
                t.total
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Runs one stage for `epochs` passes over `data` (`d_X × N`).
pub fn train_stage(
    model: &mut SscnModel,
    data: &Matrix,
    sampler: &mut BatchSampler,
    stage: Stage,
    epochs: usize,
    schedule: &TrainSchedule,
) -> Result<LossTrace> {
    if stage == Stage::Classifier {
        return Err(domain("the classifier stage is fitted with stiefel::train_rotation"));
    }
    if sampler.len() != data.ncols() {
        return Err(domain(format!(
            "sampler covers {} points but the data has {}",
            sampler.len(),
            data.ncols()
        )));
    }
    let n = data.ncols();
    let batches_per_epoch = n.div_ceil(sampler.batch_size());
    let mut cfg = schedule.adam.clone();
    if stage == Stage::Joint {
        cfg.lr = schedule.joint_lr.unwrap_or(cfg.lr);
    }
    let mut adam = Adam::new(cfg);
    let mut trace = LossTrace::default();
    let mut totals = Vec::new();
    let mut first: Option<f64> = None;
    let mut step = 0;
    for epoch in 0..epochs {
        let mut acc = LossTerms::default();
        for _ in 0..batches_per_epoch {
            let idx = sampler.sample_batch();
            let batch = if idx.len() == n {
                data.clone()
            } else {
                data.select_columns(idx.iter())
            };
            let (terms, grads) = sscn_gradients(model, &batch, stage, None)?;
            let limit = schedule.divergence_factor * first.unwrap_or(terms.total).abs().max(f64::MIN_POSITIVE);
            if !terms.total.is_finite() || terms.total > limit {
                totals.push(terms.total);
                return Err(Error::Diverged {
                    step,
                    loss: terms.total,
                    limit,
                    trace: totals,
                });
            }
            first.get_or_insert(terms.total);
            totals.push(terms.total);
            let mut params = model.params_mut();
            if stage == Stage::Pretrain {
                // The embedding layer plays no part in reconstruction.
                params.pop();
                adam.step(&mut params, &grads.params[..grads.params.len() - 1])?;
            } else {
                adam.step(&mut params, &grads.params)?;
            }
            acc.self_expr += terms.self_expr;
            acc.latent += terms.latent;
            acc.recon += terms.recon;
            acc.total += terms.total;
            step += 1;
        }
        let b = batches_per_epoch as f64;
        trace.rows.push(TraceRow {
            epoch,
            stage,
            terms: LossTerms {
                self_expr: acc.self_expr / b,
                latent: acc.latent / b,
                recon: acc.recon / b,
                clf: 0.0,
                total: acc.total / b,
            },
        });
        log::debug!("{} epoch {epoch}: loss {:.6e}", stage.name(), acc.total / b);
    }
    Ok(trace)
}

/// Auto-encoder pre-training followed by joint self-expressive training.
/// The classifier stage runs afterwards on pseudo-labels.
pub fn train_sscn(
    model: &mut SscnModel,
    data: &Matrix,
    sampler: &mut BatchSampler,
    schedule: &TrainSchedule,
) -> Result<LossTrace> {
    let mut trace = train_stage(model, data, sampler, Stage::Pretrain, schedule.pretrain_epochs, schedule)?;
    trace.extend(train_stage(model, data, sampler, Stage::Joint, schedule.joint_epochs, schedule)?);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edsc::solve_edsc_closed_form;
    use crate::siamese::siamese_objective;

    fn small_model(seed: u64) -> SscnModel {
        let arch = Architecture {
            hidden: vec![6],
            latent_dim: 3,
            ..Default::default()
        };
        let mut rng = RngState::new(seed);
        SscnModel::new(5, &arch, AxisAlignedSubspaces::new(2, 2).unwrap(), Lambdas::default(), &mut rng).unwrap()
    }

    #[test]
    fn singleton_batch_gives_scalar_q() {
        let model = small_model(1);
        let x = RngState::new(2).gaussian_matrix(5, 1);
        let f = forward_sscn(&model, &x).unwrap();
        assert_eq!(f.q.shape(), (1, 1));
        assert!((f.q[(0, 0)] - f.h.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn zero_input_is_driven_by_biases() {
        let mut model = small_model(3);
        for l in model.encoder.layers.iter_mut().chain(model.decoder.layers.iter_mut()) {
            l.b.fill(0.0);
        }
        let f = forward_sscn(&model, &Matrix::zeros(5, 4)).unwrap();
        assert_eq!(f.z.amax(), 0.0);
        assert_eq!(f.q.amax(), 0.0);
        assert_eq!(f.x_hat.amax(), 0.0);
    }

    #[test]
    fn term_isolation() {
        let mut model = small_model(4);
        let x = RngState::new(5).gaussian_matrix(5, 6);
        model.lambdas = Lambdas { l1: 0.0, l2: 0.0, l3: 0.0 };
        let t = sscn_loss(&model, &x, None).unwrap();
        let f = forward_sscn(&model, &x).unwrap();
        assert!((t.total - 0.5 * f.q.norm_squared()).abs() < 1e-12);

        // Q = 0 and a decoder that passes zero to the data exactly is not
        // available, so check the λ₁ term with W_h = 0 directly.
        model.lambdas = Lambdas { l1: 2.0, l2: 0.0, l3: 0.0 };
        model.embed_w.fill(0.0);
        let t = sscn_loss(&model, &x, None).unwrap();
        let z = model.encode(&x);
        assert!((t.total - z.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn identity_network_reduces_to_the_linear_model() {
        let spec = crate::dataio::SubspaceSpec::default();
        let (data, _) = crate::dataio::generate_union_of_subspaces(&spec).unwrap();
        let lambda = 10.0;
        let lin = analytic_optimum(&data, lambda, 6, RotationChoice::IdentityPadded).unwrap();
        let d = data.dim();
        let model = SscnModel::from_parts(
            Mlp::identity(d),
            Mlp::identity(d),
            lin.w.clone(),
            Matrix::identity(6, 6),
            Lambdas { l1: lambda, l2: 0.7, l3: 0.0 },
            AxisAlignedSubspaces::new(3, 2).unwrap(),
        )
        .unwrap();
        let t = sscn_loss(&model, data.x(), None).unwrap();
        let q = lin.embed(data.x()).unwrap();
        let q = q.tr_mul(&q);
        let recon = 0.35 * (data.x() - data.x() * q).norm_squared();
        let expected = siamese_objective(&DataMatrix::unlabeled(data.x().clone()).unwrap(), &lin).unwrap() + recon;
        assert!((t.total - expected).abs() <= 1e-10 * expected.max(1.0), "{} vs {expected}", t.total);
    }

    #[test]
    fn warm_start_reproduces_latent_closed_form() {
        let mut model = small_model(8);
        model.lambdas.l1 = 5.0;
        let x = RngState::new(9).gaussian_matrix(5, 12);
        model.warm_start_embedding(&x, 3).unwrap();
        let f = forward_sscn(&model, &x).unwrap();
        let z = DataMatrix::unlabeled(model.encode(&x)).unwrap();
        let c = solve_edsc_closed_form(&z, 5.0).unwrap().c;
        assert!((&f.q - &c).amax() <= 1e-9 * c.amax().max(1.0));

        model.lambdas.l1 = 0.0;
        assert!(model.warm_start_embedding(&x, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = small_model(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path, serde_json::json!({ "seed": 6 })).unwrap();
        let (back, meta) = SscnModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta["seed"], 6);
    }

    #[test]
    fn oversized_batch_is_refused() {
        let model = small_model(7);
        let x = Matrix::zeros(5, DEFAULT_DENSE_BUDGET + 1);
        assert!(matches!(forward_sscn(&model, &x), Err(Error::Resource(_))));
    }
}
