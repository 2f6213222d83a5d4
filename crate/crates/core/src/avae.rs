//! The action-conditioned autoencoder with freely parameterized action
//! matrices `A_g = tanh(P_g)`.
//!
//! Per transition `(x, g, x')` the loss is
//! `‖x' − μθ(μφ(x') + σϵ)‖² + λ_ACT ‖A_g μφ(x) − μφ(x')‖²`, averaged over the
//! batch, with one noise sample per transition.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{read_tensor, write_tensor, EnvError, Transition, TransitionDataset};
use crate::nn::{
    batch_matvec, derive_seed, rng, standard_normal, Adam, Mlp, MlpVars, NnError, OutputActivation, Real, Rng, Tape,
    Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("unknown action id {0}")]
    UnknownAction(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_latent_dim() -> usize {
    13
}
fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}
fn default_sigma() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_steps() -> usize {
    20_000
}

/// Hyperparameters shared by both models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvaeConfig {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_one")]
    pub lambda_act: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// The action weight is 0 for this many steps, then ramps linearly to
    /// `lambda_act` over as many again.
    #[serde(default)]
    pub act_warmup: usize,
    /// Fraction of training after which the learning rate decays linearly
    /// to 0 at the last step.
    #[serde(default)]
    pub lr_decay_start: Option<f64>,
}

impl Default for AvaeConfig {
    fn default() -> Self {
        AvaeConfig {
            latent_dim: default_latent_dim(),
            hidden: default_hidden(),
            sigma: default_sigma(),
            lambda_act: default_one(),
            lr: default_lr(),
            batch_size: default_batch(),
            steps: default_steps(),
            act_warmup: 0,
            lr_decay_start: None,
        }
    }
}

impl AvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.lr_decay_start.is_some_and(|f| !(0.0..1.0).contains(&f)) {
            return bad("lr_decay_start must lie in [0, 1)");
        }
        if !(self.sigma >= 0.0 && self.lr > 0.0 && self.lambda_act >= 0.0) {
            return bad("sigma and lambda_act must be non-negative and lr positive");
        }
        Ok(())
    }
}

/// Anything that encodes observations, decodes latents and maps action ids
/// to evaluation matrices.
pub trait LatentModel: Sync {
    fn latent_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn encode(&self, x: &[f32], rows: usize) -> Vec<f32>;
    fn decode(&self, z: &[f32], rows: usize) -> Vec<f32>;
    /// `d x d` matrix used for prediction and metrics.
    fn eval_matrix(&self, action: usize) -> Result<Tensor>;

    fn eval_matrices(&self) -> Vec<Tensor> {
        (0..self.n_actions()).map(|g| self.eval_matrix(g).expect("ids in range")).collect()
    }

    /// Latents of every state, `[|W|, d]` row-major.
    fn encode_states(&self, ds: &TransitionDataset) -> Vec<f32> {
        self.encode(ds.observations.data(), ds.n_states())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvaeModel<T: Real = f32> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    /// Raw action parameters `P`, one flattened `d x d` row per action.
    pub action_params: Tensor<T>,
    pub sigma: f64,
    pub lambda_act: f64,
}

impl<T: Real> AvaeModel<T> {
    pub fn init(obs_dim: usize, n_actions: usize, cfg: &AvaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if n_actions == 0 || obs_dim == 0 {
            return Err(ModelError::Config("need at least one action and one input dimension".into()));
        }
        let d = cfg.latent_dim;
        let mut enc = vec![obs_dim];
        enc.extend(&cfg.hidden);
        enc.push(d);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        let encoder = Mlp::init(&enc, OutputActivation::Identity, rng);
        let decoder = Mlp::init(&dec, OutputActivation::Sigmoid, rng);
        let a = (6.0 / (2 * d) as f64).sqrt();
        let action_params = Tensor::from_fn(&[n_actions, d * d], |_| T::of(rng.gen_range(-a..a)));
        Ok(AvaeModel { encoder, decoder, action_params, sigma: cfg.sigma, lambda_act: cfg.lambda_act })
    }

    pub fn d(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.action_params.shape()[0]
    }

    /// `A_g = tanh(P_g)` as a `d x d` matrix.
    pub fn action_matrix(&self, g: usize) -> Result<Tensor<T>> {
        if g >= self.num_actions() {
            return Err(ModelError::UnknownAction(g));
        }
        let d = self.d();
        let row = self.action_params.row(g).iter().map(|v| v.tanh()).collect();
        Ok(Tensor::new(row, vec![d, d])?)
    }

    /// Parameters in checkpoint order: encoder, decoder, action parameters.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.push(&self.action_params);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(&mut self.action_params);
        p
    }

    pub fn cast<U: Real>(&self) -> AvaeModel<U> {
        AvaeModel {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            action_params: self.action_params.cast(),
            sigma: self.sigma,
            lambda_act: self.lambda_act,
        }
    }

    /// Rebuilds a model of the same architecture from a flat parameter list.
    pub fn with_params(&self, params: &[Tensor<T>]) -> Self {
        let mut m = self.clone();
        for (dst, src) in m.params_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        m
    }

}

impl AvaeModel {
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        save_bundle(dir.as_ref(), "avae", self, seed, &[])
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (m, _) = load_bundle(dir.as_ref(), "avae")?;
        Ok(m)
    }
}

impl LatentModel for AvaeModel<f32> {
    fn latent_dim(&self) -> usize {
        self.d()
    }

    fn n_actions(&self) -> usize {
        self.num_actions()
    }

    fn encode(&self, x: &[f32], rows: usize) -> Vec<f32> {
        self.encoder.forward(x, rows)
    }

    fn decode(&self, z: &[f32], rows: usize) -> Vec<f32> {
        self.decoder.forward(z, rows)
    }

    fn eval_matrix(&self, action: usize) -> Result<Tensor> {
        self.action_matrix(action)
    }
}

/// Observations and action ids for a batch of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    pub x: Tensor<T>,
    pub x_next: Tensor<T>,
    pub actions: Vec<usize>,
}

impl Batch {
    pub fn from_transitions(ds: &TransitionDataset, ts: &[Transition]) -> Result<Self> {
        if ts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let dim = ds.obs_dim();
        let gather = |f: fn(&Transition) -> usize| {
            let data: Vec<f32> = ts.iter().flat_map(|t| ds.observation(f(t)).iter().copied()).collect();
            Tensor::new(data, vec![ts.len(), dim]).expect("rows have the observation size")
        };
        Ok(Batch { x: gather(|t| t.src), x_next: gather(|t| t.dst), actions: ts.iter().map(|t| t.action).collect() })
    }
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch { x: self.x.cast(), x_next: self.x_next.cast(), actions: self.actions.clone() }
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub act: f64,
    pub rec: f64,
    pub dis: f64,
}

/// Tape handles for an [`AvaeModel`].
pub(crate) struct ModelVars {
    pub enc: MlpVars,
    pub dec: MlpVars,
    pub p: Var,
}

impl ModelVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, m: &AvaeModel<T>) -> Self {
        let enc = MlpVars::register(tape, &m.encoder);
        let dec = MlpVars::register(tape, &m.decoder);
        let p = tape.leaf(m.action_params.clone());
        ModelVars { enc, dec, p }
    }

    /// Same order as [`AvaeModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.enc.vars();
        v.extend(self.dec.vars());
        v.push(self.p);
        v
    }

    /// Per-transition `tanh(P_g)` rows, `[B, d*d]`.
    pub fn action_rows<T: Real>(&self, tape: &mut Tape<T>, actions: &[usize]) -> Result<Var> {
        let n = tape.shape(self.p)[0];
        if let Some(&bad) = actions.iter().find(|&&a| a >= n) {
            return Err(ModelError::UnknownAction(bad));
        }
        let a = tape.tanh(self.p)?;
        Ok(tape.gather_rows(a, actions)?)
    }
}

pub(crate) struct TapeLoss {
    pub total: Var,
    pub act: Var,
    pub rec: Var,
}

/// Builds the action and reconstruction terms given per-transition matrices.
pub(crate) fn transition_loss<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    batch: &Batch<T>,
    noise: &Tensor<T>,
    matrices: Var,
    sigma: f64,
    lambda_act: f64,
) -> Result<TapeLoss> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let x = tape.constant(batch.x.clone());
    let xn = tape.constant(batch.x_next.clone());
    let z = vars.enc.forward(tape, x)?;
    let zn = vars.enc.forward(tape, xn)?;
    let pred = tape.batch_matvec(matrices, z)?;
    let diff = tape.sub(pred, zn)?;
    let sq = tape.row_sq_norm(diff)?;
    let act = tape.mean(sq)?;

    let scaled = noise.map(|e| T::of(sigma) * e);
    let zs = tape.add_const(zn, &scaled)?;
    let recon = vars.dec.forward(tape, zs)?;
    let rdiff = tape.sub(recon, xn)?;
    let rsq = tape.row_sq_norm(rdiff)?;
    let rec = tape.mean(rsq)?;

    let weighted = tape.affine(act, T::of(lambda_act), T::zero())?;
    let total = tape.add(rec, weighted)?;
    Ok(TapeLoss { total, act, rec })
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().expect("finite")
}

/// Loss value and gradients (in [`AvaeModel::params`] order) for fixed noise.
pub fn avae_loss_and_grad<T: Real>(model: &AvaeModel<T>, batch: &Batch<T>, noise: &Tensor<T>) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model);
    let mats = vars.action_rows(&mut tape, &batch.actions)?;
    let l = transition_loss(&mut tape, &vars, batch, noise, mats, model.sigma, model.lambda_act)?;
    let mut g = tape.backward(l.total)?;
    let params = model.params();
    let grads = vars.vars().iter().zip(&params).map(|(&v, p)| g.take_or_zeros(v, p)).collect();
    let parts = LossParts { total: scalar(&tape, l.total), act: scalar(&tape, l.act), rec: scalar(&tape, l.rec), dis: 0.0 };
    Ok((parts, grads))
}

/// Loss terms with noise drawn from `rng`.
pub fn avae_loss<T: Real>(model: &AvaeModel<T>, batch: &Batch<T>, rng: &mut Rng) -> Result<LossParts> {
    let noise = Tensor::new(standard_normal(rng, batch.len() * model.d()), vec![batch.len(), model.d()])?;
    Ok(avae_loss_and_grad(model, batch, &noise)?.0)
}

/// One training step's loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub l_act: f64,
    pub l_rec: f64,
    pub l_dis: f64,
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurvePoint], with_dis: bool) -> Result<()> {
    let mut s = String::from(if with_dis { "step,l_act,l_rec,l_dis\n" } else { "step,l_act,l_rec\n" });
    for p in curve {
        if with_dis {
            writeln!(s, "{},{},{},{}", p.step, p.l_act, p.l_rec, p.l_dis).expect("string write");
        } else {
            writeln!(s, "{},{},{}", p.step, p.l_act, p.l_rec).expect("string write");
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Draws a batch of transitions uniformly with replacement.
pub(crate) fn sample_batch(ds: &TransitionDataset, size: usize, rng: &mut Rng) -> Result<Batch> {
    let ts: Vec<Transition> = (0..size).map(|_| ds.transitions[rng.gen_range(0..ds.len())]).collect();
    Batch::from_transitions(ds, &ts)
}

pub(crate) fn diverged(step: usize, e: ModelError) -> ModelError {
    match e {
        ModelError::Nn(NnError::NonFinite(op)) => ModelError::Diverged { step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Trains from a seeded initialization, recording every step's losses.
pub fn train_avae(cfg: &AvaeConfig, ds: &TransitionDataset, seed: u64) -> Result<(AvaeModel, Vec<CurvePoint>)> {
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut init_rng = rng(derive_seed(seed, "avae/init"));
    let mut model = AvaeModel::init(ds.obs_dim(), ds.catalog.len(), cfg, &mut init_rng)?;
    let mut data_rng = rng(derive_seed(seed, "avae/data"));
    let mut adam = Adam::new(&model.params(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(ds, cfg.batch_size, &mut data_rng)?;
        let noise = Tensor::new(standard_normal(&mut data_rng, batch.len() * cfg.latent_dim), vec![batch.len(), cfg.latent_dim])?;
        model.lambda_act = warmup_weight(cfg.lambda_act, step, cfg.act_warmup);
        adam.lr = scheduled_lr(cfg, step);
        let (parts, grads) = avae_loss_and_grad(&model, &batch, &noise).map_err(|e| diverged(step, e))?;
        curve.push(CurvePoint { step, l_act: parts.act, l_rec: parts.rec, l_dis: 0.0 });
        adam.step(&mut model.params_mut(), &grads)?;
        if !model.params().iter().all(|p| p.all_finite()) {
            return Err(ModelError::Diverged { step, detail: "non-finite parameters after update".into() });
        }
    }
    model.lambda_act = cfg.lambda_act;
    Ok((model, curve))
}

/// Learning rate at `step` under the optional linear decay.
pub(crate) fn scheduled_lr(cfg: &AvaeConfig, step: usize) -> f64 {
    match cfg.lr_decay_start {
        Some(f) => {
            let start = f * cfg.steps as f64;
            let s = step as f64;
            if s < start {
                cfg.lr
            } else {
                cfg.lr * (cfg.steps as f64 - s) / (cfg.steps as f64 - start)
            }
        }
        None => cfg.lr,
    }
}

/// Zero for the first `warmup` steps, then a linear ramp to `lambda` over
/// the next `warmup` steps.
pub(crate) fn warmup_weight(lambda: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        lambda
    } else {
        lambda * ((step as f64 - warmup as f64) / warmup as f64).clamp(0.0, 1.0)
    }
}

/// Mean over transitions of `‖x' − decode(A_g encode(x))‖² / dim(x)`.
pub fn prediction_error(model: &dyn LatentModel, ds: &TransitionDataset, matrices: &[Tensor]) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let d = model.latent_dim();
    let z = model.encode_states(ds);
    let dim = ds.obs_dim();
    const CHUNK: usize = 256;
    let sums: Vec<f64> = ds
        .transitions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let m: Vec<f32> = chunk.iter().flat_map(|t| matrices[t.action].data().iter().copied()).collect();
            let zs: Vec<f32> = chunk.iter().flat_map(|t| z[t.src * d..(t.src + 1) * d].iter().copied()).collect();
            let pred = batch_matvec(&m, &zs, chunk.len(), d);
            let xhat = model.decode(&pred, chunk.len());
            chunk
                .iter()
                .enumerate()
                .map(|(r, t)| {
                    let target = ds.observation(t.dst);
                    xhat[r * dim..(r + 1) * dim].iter().zip(target).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    sums.iter().sum::<f64>() / (ds.len() * dim) as f64
}

/// JSON manifest stored next to the parameter tensors of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Manifest {
    pub kind: String,
    pub encoder_sizes: Vec<usize>,
    pub decoder_sizes: Vec<usize>,
    pub n_actions: usize,
    pub sigma: f64,
    pub lambda_act: f64,
    pub seed: u64,
    pub tensors: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub(crate) fn save_bundle(dir: &Path, kind: &str, m: &AvaeModel, seed: u64, extra_tensors: &[(&str, &Tensor)]) -> Result<()> {
    save_bundle_with(dir, kind, m, seed, extra_tensors, serde_json::Value::Null)
}

pub(crate) fn save_bundle_with(
    dir: &Path,
    kind: &str,
    m: &AvaeModel,
    seed: u64,
    extra_tensors: &[(&str, &Tensor)],
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    let mut put = |name: String, t: &Tensor| -> Result<()> {
        write_tensor(dir.join(format!("{name}.gmat")), t.data(), t.shape())?;
        names.push(name);
        Ok(())
    };
    for (prefix, mlp) in [("encoder", &m.encoder), ("decoder", &m.decoder)] {
        for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
            put(format!("{prefix}_w{l}"), w)?;
            put(format!("{prefix}_b{l}"), b)?;
        }
    }
    put("action_params".into(), &m.action_params)?;
    for (name, t) in extra_tensors {
        put((*name).into(), t)?;
    }
    let manifest = Manifest {
        kind: kind.into(),
        encoder_sizes: m.encoder.sizes(),
        decoder_sizes: m.decoder.sizes(),
        n_actions: m.num_actions(),
        sigma: m.sigma,
        lambda_act: m.lambda_act,
        seed,
        tensors: names,
        extra,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub(crate) fn read_named(dir: &Path, name: &str) -> Result<Tensor> {
    let (data, dims) = read_tensor(dir.join(format!("{name}.gmat")))?;
    Ok(Tensor::new(data, dims)?)
}

pub(crate) fn load_bundle(dir: &Path, kind: &str) -> Result<(AvaeModel, Manifest)> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.kind != kind {
        return Err(ModelError::Checkpoint(format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    let load_mlp = |prefix: &str, sizes: &[usize], output| -> Result<Mlp> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len().saturating_sub(1) {
            let w = read_named(dir, &format!("{prefix}_w{l}"))?;
            let b = read_named(dir, &format!("{prefix}_b{l}"))?;
            if w.shape() != [sizes[l + 1], sizes[l]] || b.shape() != [sizes[l + 1]] {
                return Err(ModelError::Checkpoint(format!("{prefix} layer {l} has the wrong shape")));
            }
            weights.push(w);
            biases.push(b);
        }
        if weights.is_empty() {
            return Err(ModelError::Checkpoint(format!("{prefix} has no layers")));
        }
        Ok(Mlp { weights, biases, output })
    };
    let encoder = load_mlp("encoder", &manifest.encoder_sizes, OutputActivation::Identity)?;
    let decoder = load_mlp("decoder", &manifest.decoder_sizes, OutputActivation::Sigmoid)?;
    let action_params = read_named(dir, "action_params")?;
    let d = encoder.output_dim();
    if action_params.shape() != [manifest.n_actions, d * d] || decoder.input_dim() != d {
        return Err(ModelError::Checkpoint("action parameters do not match the latent dimension".into()));
    }
    let model = AvaeModel { encoder, decoder, action_params, sigma: manifest.sigma, lambda_act: manifest.lambda_act };
    Ok((model, manifest))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::{gen_full_transitions, Renderer};
    use crate::group::{ActionCatalog, FactorSpec, GroupSpec};
    use crate::nn::grad_check;

    pub(crate) fn four_state_world() -> TransitionDataset {
        let g = GroupSpec::new(vec![FactorSpec::Cyclic(2), FactorSpec::Cyclic(2)]).unwrap();
        let c = ActionCatalog::plus_minus(&g, 2).unwrap();
        gen_full_transitions(&g, &c, &Renderer::OneHot {}).unwrap()
    }

    pub(crate) fn small_cfg() -> AvaeConfig {
        AvaeConfig { latent_dim: 3, hidden: vec![6, 5], steps: 50, ..AvaeConfig::default() }
    }

    fn fixture() -> (AvaeModel<f64>, Batch<f64>, Tensor<f64>) {
        let ds = four_state_world();
        let m = AvaeModel::<f64>::init(4, 2, &small_cfg(), &mut rng(3)).unwrap();
        let batch = Batch::from_transitions(&ds, &ds.transitions).unwrap().cast::<f64>();
        let noise = Tensor::new(standard_normal(&mut rng(8), batch.len() * 3), vec![batch.len(), 3]).unwrap();
        (m, batch, noise)
    }

    /// Plain loops, no shared kernels.
    pub(crate) fn reference_mlp(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, (w, bias)) in net.weights.iter().zip(&net.biases).enumerate() {
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let mut y = vec![0.0; out];
            for o in 0..out {
                let mut acc = bias.data()[o];
                for i in 0..inp {
                    acc += w.data()[o * inp + i] * h[i];
                }
                y[o] = if l + 1 < net.weights.len() {
                    acc.max(0.0)
                } else if net.output == OutputActivation::Sigmoid {
                    1.0 / (1.0 + (-acc).exp())
                } else {
                    acc
                };
            }
            h = y;
        }
        h
    }

    /// Straight-line loops with no shared kernels.
    fn reference_loss(m: &AvaeModel<f64>, b: &Batch<f64>, noise: &Tensor<f64>) -> (f64, f64, f64) {
        let d = m.d();
        let n = b.len();
        let (mut act, mut rec) = (0.0, 0.0);
        for r in 0..n {
            let z = reference_mlp(&m.encoder, b.x.row(r));
            let zn = reference_mlp(&m.encoder, b.x_next.row(r));
            let p = m.action_params.row(b.actions[r]);
            for i in 0..d {
                let mut az = 0.0;
                for j in 0..d {
                    az += p[i * d + j].tanh() * z[j];
                }
                act += (az - zn[i]).powi(2);
            }
            let zs: Vec<f64> = (0..d).map(|i| zn[i] + m.sigma * noise.data()[r * d + i]).collect();
            let xhat = reference_mlp(&m.decoder, &zs);
            rec += xhat.iter().zip(b.x_next.row(r)).map(|(a, t)| (a - t).powi(2)).sum::<f64>();
        }
        let (act, rec) = (act / n as f64, rec / n as f64);
        (rec + m.lambda_act * act, act, rec)
    }

    #[test]
    fn schedules() {
        assert_eq!(warmup_weight(2.0, 5, 0), 2.0);
        assert_eq!(warmup_weight(2.0, 100, 100), 0.0);
        assert_eq!(warmup_weight(2.0, 150, 100), 1.0);
        assert_eq!(warmup_weight(2.0, 900, 100), 2.0);
        let cfg = AvaeConfig { lr: 1e-3, steps: 100, lr_decay_start: Some(0.8), ..AvaeConfig::default() };
        assert_eq!(scheduled_lr(&cfg, 79), 1e-3);
        assert_eq!(scheduled_lr(&cfg, 80), 1e-3);
        assert!((scheduled_lr(&cfg, 90) - 5e-4).abs() < 1e-15);
        assert!(scheduled_lr(&cfg, 99) > 0.0);
        assert_eq!(scheduled_lr(&AvaeConfig { lr_decay_start: None, ..cfg.clone() }, 99), 1e-3);
        assert!(AvaeConfig { lr_decay_start: Some(1.0), ..cfg }.validate().is_err());
    }

    #[test]
    fn loss_matches_straight_line_reference() {
        let (m, b, noise) = fixture();
        let (parts, _) = avae_loss_and_grad(&m, &b, &noise).unwrap();
        let (total, act, rec) = reference_loss(&m, &b, &noise);
        assert!((parts.total - total).abs() < 1e-6);
        assert!((parts.act - act).abs() < 1e-6);
        assert!((parts.rec - rec).abs() < 1e-6);
        assert_eq!(parts.total, parts.rec + m.lambda_act * parts.act);
    }

    #[test]
    fn loss_gradient_passes_check() {
        let (m, b, noise) = fixture();
        let report = grad_check(
            |p| {
                let (parts, g) = avae_loss_and_grad(&m.with_params(p), &b, &noise).unwrap();
                (parts.total, g)
            },
            &m.params().into_iter().cloned().collect::<Vec<_>>(),
            1e-6,
            1,
            1e-4,
        );
        assert!(report.passed(), "worst {:?}", report.max_rel_error);
    }

    #[test]
    fn tanh_action_path_passes_check() {
        let (m, b, noise) = fixture();
        let p_idx = m.params().len() - 1;
        let report = grad_check(
            |p| {
                let mut params: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
                params[p_idx] = p[0].clone();
                let (parts, g) = avae_loss_and_grad(&m.with_params(&params), &b, &noise).unwrap();
                (parts.act, vec![g[p_idx].clone()])
            },
            &[m.action_params.map(|v| 3.0 * v)],
            1e-6,
            1,
            1e-4,
        );
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn action_loss_examples() {
        // A = I (large P saturates tanh only approximately, so set matrices directly).
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![1.0, 0.0], vec![1, 2]).unwrap());
        let zn = tape.constant(Tensor::new(vec![0.0, 1.0], vec![1, 2]).unwrap());
        let eye = tape.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![1, 4]).unwrap());
        let pred = tape.batch_matvec(eye, z).unwrap();
        let diff = tape.sub(pred, zn).unwrap();
        let sq = tape.row_sq_norm(diff).unwrap();
        assert_eq!(tape.value(sq).item(), 2.0);
        let same = tape.sub(pred, z).unwrap();
        let sq = tape.row_sq_norm(same).unwrap();
        assert_eq!(tape.value(sq).item(), 0.0);
    }

    #[test]
    fn action_matrix_is_tanh_of_params() {
        let mut m = AvaeModel::<f32>::init(4, 2, &small_cfg(), &mut rng(1)).unwrap();
        m.action_params = Tensor::zeros(&[2, 9]);
        assert_eq!(m.action_matrix(1).unwrap(), Tensor::zeros(&[3, 3]));
        assert!(matches!(m.action_matrix(2), Err(ModelError::UnknownAction(2))));
        let m = AvaeModel::<f32>::init(4, 2, &small_cfg(), &mut rng(1)).unwrap();
        assert_eq!(m.action_matrix(0).unwrap(), m.action_matrix(0).unwrap());
        assert!(m.action_matrix(0).unwrap().data().iter().all(|v| v.abs() < 1.0));
        let x = vec![0.0, 1.0, 0.0, 0.0];
        assert_eq!(m.decode(&m.encode(&x, 1), 1).len(), 4);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let (m, b, noise) = fixture();
        let n = b.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pick = |t: &Tensor<f64>, cols: usize| {
            Tensor::new(perm.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect(), vec![n, cols]).unwrap()
        };
        let rb = Batch { x: pick(&b.x, 4), x_next: pick(&b.x_next, 4), actions: perm.iter().map(|&r| b.actions[r]).collect() };
        let (a, _) = avae_loss_and_grad(&m, &b, &noise).unwrap();
        let (r, _) = avae_loss_and_grad(&m, &rb, &pick(&noise, 3)).unwrap();
        assert!((a.act - r.act).abs() < 1e-12 && (a.rec - r.rec).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let ds = four_state_world();
        assert!(matches!(Batch::from_transitions(&ds, &[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = four_state_world();
        let cfg = AvaeConfig { steps: 0, ..small_cfg() };
        let (m, curve) = train_avae(&cfg, &ds, 5).unwrap();
        let init = AvaeModel::<f32>::init(4, 2, &cfg, &mut rng(derive_seed(5, "avae/init"))).unwrap();
        assert_eq!(m, init);
        assert!(curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_action_loss() {
        let ds = four_state_world();
        let cfg = AvaeConfig { steps: 600, lr: 3e-3, ..small_cfg() };
        let (a, ca) = train_avae(&cfg, &ds, 11).unwrap();
        let (b, cb) = train_avae(&cfg, &ds, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let median = |s: &[CurvePoint]| {
            let mut v: Vec<f64> = s.iter().map(|p| p.l_act + p.l_rec).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let tenth = ca.len() / 10;
        assert!(median(&ca[ca.len() - tenth..]) < median(&ca[..tenth]));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = four_state_world();
        let cfg = AvaeConfig { steps: 5, lr: 1e30, ..small_cfg() };
        assert!(matches!(train_avae(&cfg, &ds, 1), Err(ModelError::Diverged { .. })));
    }

    #[test]
    fn prediction_error_of_exact_model_is_zero() {
        struct Exact;
        impl LatentModel for Exact {
            fn latent_dim(&self) -> usize {
                4
            }
            fn n_actions(&self) -> usize {
                3
            }
            fn encode(&self, x: &[f32], _: usize) -> Vec<f32> {
                x.to_vec()
            }
            fn decode(&self, z: &[f32], _: usize) -> Vec<f32> {
                z.to_vec()
            }
            fn eval_matrix(&self, _: usize) -> Result<Tensor> {
                unreachable!()
            }
        }
        let ds = four_state_world();
        let perms: Vec<Tensor> = ds
            .catalog
            .actions
            .iter()
            .map(|a| {
                let mut m = vec![0.0; 16];
                for s in 0..4 {
                    let dst = ds.spec.state_index(&ds.spec.apply(&a.element, &ds.spec.state_at(s)).unwrap());
                    m[dst * 4 + s] = 1.0;
                }
                Tensor::new(m, vec![4, 4]).unwrap()
            })
            .collect();
        assert_eq!(prediction_error(&Exact, &ds, &perms), 0.0);
        let wrong = vec![Tensor::eye(4); 2];
        assert!(prediction_error(&Exact, &ds, &wrong) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = AvaeModel::<f32>::init(4, 2, &small_cfg(), &mut rng(2)).unwrap();
        m.save(dir.path(), 2).unwrap();
        assert_eq!(AvaeModel::<f32>::load(dir.path()).unwrap(), m);
        assert!(matches!(AvaeModel::<f32>::load(dir.path().join("missing")), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn config_defaults_match_documented_values() {
        let c: AvaeConfig = serde_json::from_str("{}").unwrap();
        assert_eq!((c.latent_dim, c.batch_size, c.sigma, c.lr, c.lambda_act), (13, 16, 0.1, 1e-3, 1.0));
        assert_eq!(c.hidden, vec![128, 64]);
        assert!(serde_json::from_str::<AvaeConfig>(r#"{"latentdim":3}"#).is_err());
    }
}
