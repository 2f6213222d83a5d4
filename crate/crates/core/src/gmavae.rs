//! Group-masked variant of the action autoencoder.
//!
//! Each recovered subgroup `k` owns a soft mask `π_k ∈ [0, 1]^d`, the rows of
//! `Π = softmax(L)` taken over subgroups for every latent dimension. Action
//! `g` in subgroup `k(g)` acts through
//! `Ã_g = (π πᵀ) ⊙ A_g + (1 − π πᵀ) ⊙ I` with `π = π_{k(g)}`, and an entropy
//! penalty `Σ_i |H(Π[:, i]) − C|` with a target `C` annealed from `ln K` to 0
//! drives the masks to binary.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::avae::{
    diverged, load_bundle, read_named, sample_batch, save_bundle_with, scheduled_lr, transition_loss, warmup_weight, AvaeConfig,
    AvaeModel, Batch, CurvePoint, LatentModel, LossParts, ModelError, ModelVars, Result,
};
use crate::cluster::ActionPartition;
use crate::env::TransitionDataset;
use crate::nn::{derive_seed, rng, standard_normal, Adam, Real, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmavaeConfig {
    /// Network, noise and optimizer settings shared with the unmasked model.
    #[serde(default)]
    pub model: AvaeConfig,
    #[serde(default = "default_lambda_dis")]
    pub lambda_dis: f64,
    /// Number of masks; defaults to the number of recovered clusters.
    #[serde(default)]
    pub n_masks: Option<usize>,
    /// Start from the trained unmasked network instead of a fresh one.
    #[serde(default)]
    pub warm_start: bool,
    /// Learning-rate multiplier for the mask logits.
    #[serde(default = "default_mask_lr_scale")]
    pub mask_lr_scale: f64,
}

fn default_mask_lr_scale() -> f64 {
    1.0
}

fn default_lambda_dis() -> f64 {
    1.0
}

impl Default for GmavaeConfig {
    fn default() -> Self {
        GmavaeConfig { model: AvaeConfig::default(), lambda_dis: default_lambda_dis(), n_masks: None, warm_start: false, mask_lr_scale: 1.0 }
    }
}

impl GmavaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda_dis >= 0.0) {
            return Err(ModelError::Config("lambda_dis must be non-negative".into()));
        }
        if !(self.mask_lr_scale > 0.0) {
            return Err(ModelError::Config("mask_lr_scale must be positive".into()));
        }
        if self.n_masks == Some(0) {
            return Err(ModelError::Config("n_masks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear target-entropy schedule reaching zero at 80% of training.
pub fn anneal_c(step: usize, total_steps: usize, k: usize) -> f64 {
    if total_steps == 0 || k == 0 {
        return 0.0;
    }
    let frac = step as f64 / (0.8 * total_steps as f64);
    (k as f64).ln() * (1.0 - frac).max(0.0)
}

/// `(π πᵀ) ⊙ A + (1 − π πᵀ) ⊙ I`.
pub fn masked_matrix<T: Real>(a: &Tensor<T>, pi: &[T]) -> Result<Tensor<T>> {
    let d = pi.len();
    if a.shape() != [d, d] {
        return Err(ModelError::Config(format!("mask of length {d} for a matrix of shape {:?}", a.shape())));
    }
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let w = pi[i] * pi[j];
            let eye = if i == j { T::one() } else { T::zero() };
            out.push(w * a.data()[i * d + j] + (T::one() - w) * eye);
        }
    }
    Ok(Tensor::new(out, vec![d, d])?)
}

/// Column-wise softmax of `[K, d]` logits.
pub fn mask_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (k, d) = logits.rows_cols();
    let mut out = vec![T::zero(); k * d];
    for i in 0..d {
        let col: Vec<T> = (0..k).map(|r| logits.data()[r * d + i]).collect();
        let m = col.iter().copied().fold(col[0], |a, b| if b > a { b } else { a });
        let e: Vec<T> = col.iter().map(|&v| (v - m).exp()).collect();
        let s = e.iter().fold(T::zero(), |a, &b| a + b);
        for r in 0..k {
            out[r * d + i] = e[r] / s;
        }
    }
    Tensor::new(out, vec![k, d]).expect("same shape")
}

fn entropy(col: impl Iterator<Item = f64>) -> f64 {
    col.map(|p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

/// Natural-log entropy of every column of `Π`.
pub fn column_entropies<T: Real>(pi: &Tensor<T>) -> Vec<f64> {
    let (k, d) = pi.rows_cols();
    (0..d).map(|i| entropy((0..k).map(|r| pi.data()[r * d + i].to_f64().expect("finite")))).collect()
}

/// `Σ_i |H(Π[:, i]) − C|`.
pub fn dis_loss<T: Real>(pi: &Tensor<T>, c: f64) -> f64 {
    column_entropies(pi).iter().map(|h| (h - c).abs()).sum()
}

/// Binary assignment of latent dimensions to masks: `owner[i]` is the mask
/// that dimension `i` belongs to. Starts from the per-dimension argmax, then
/// gives every empty mask the dimension it values most among those whose
/// owner would keep at least one.
pub fn harden_masks<T: Real>(pi: &Tensor<T>) -> Result<Vec<usize>> {
    let (k, d) = pi.rows_cols();
    if k > d {
        return Err(ModelError::Config(format!("{k} masks cannot each own one of {d} dimensions")));
    }
    let p = |r: usize, i: usize| pi.data()[r * d + i];
    let mut owner: Vec<usize> = (0..d).map(|i| (0..k).fold(0, |best, r| if p(r, i) > p(best, i) { r } else { best })).collect();
    for r in 0..k {
        let mut counts = vec![0usize; k];
        owner.iter().for_each(|&o| counts[o] += 1);
        if counts[r] > 0 {
            continue;
        }
        let pick = (0..d)
            .filter(|&i| counts[owner[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if p(r, b) >= p(r, i) => Some(b),
                _ => Some(i),
            })
            .expect("k <= d leaves a donor");
        owner[pick] = r;
    }
    Ok(owner)
}

/// `[K, d]` indicator rows from an ownership vector.
pub fn hard_mask_tensor(owner: &[usize], k: usize) -> Tensor {
    let d = owner.len();
    Tensor::from_fn(&[k, d], |idx| if owner[idx % d] == idx / d { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmavaeModel<T: Real = f32> {
    pub base: AvaeModel<T>,
    /// Mask logits, `[K, d]`.
    pub logits: Tensor<T>,
    /// Mask index of every action id.
    pub cluster_of: Vec<usize>,
    pub lambda_dis: f64,
    /// Dimension owners after hardening; evaluation uses hard masks once set.
    pub owner: Option<Vec<usize>>,
}

impl<T: Real> GmavaeModel<T> {
    pub fn new(base: AvaeModel<T>, logits: Tensor<T>, cluster_of: Vec<usize>, lambda_dis: f64) -> Result<Self> {
        let (k, d) = logits.rows_cols();
        if d != base.d() || logits.shape().len() != 2 {
            return Err(ModelError::Config(format!("mask logits {:?} for latent size {}", logits.shape(), base.d())));
        }
        if cluster_of.len() != base.num_actions() {
            return Err(ModelError::Config(format!("{} cluster labels for {} actions", cluster_of.len(), base.num_actions())));
        }
        if let Some(&bad) = cluster_of.iter().find(|&&c| c >= k) {
            return Err(ModelError::Config(format!("cluster index {bad} with only {k} masks")));
        }
        Ok(GmavaeModel { base, logits, cluster_of, lambda_dis, owner: None })
    }

    pub fn n_masks(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn probs(&self) -> Tensor<T> {
        mask_probs(&self.logits)
    }

    /// Soft masked matrix of action `g`.
    pub fn soft_matrix(&self, g: usize) -> Result<Tensor<T>> {
        let a = self.base.action_matrix(g)?;
        let pi = self.probs();
        masked_matrix(&a, pi.row(self.cluster_of[g]))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.base.params();
        p.push(&self.logits);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.base.params_mut();
        p.push(&mut self.logits);
        p
    }

    pub fn with_params(&self, params: &[Tensor<T>]) -> Self {
        let mut m = self.clone();
        for (dst, src) in m.params_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        m
    }

    pub fn cast<U: Real>(&self) -> GmavaeModel<U> {
        GmavaeModel {
            base: self.base.cast(),
            logits: self.logits.cast(),
            cluster_of: self.cluster_of.clone(),
            lambda_dis: self.lambda_dis,
            owner: self.owner.clone(),
        }
    }
}

impl GmavaeModel {
    /// Fixes the hard masks from the current soft ones.
    pub fn harden(&mut self) -> Result<()> {
        self.owner = Some(harden_masks(&self.probs())?);
        Ok(())
    }

    pub fn hard_masks(&self) -> Option<Tensor> {
        self.owner.as_ref().map(|o| hard_mask_tensor(o, self.n_masks()))
    }

    /// Hard masked matrix of action `g`; requires [`GmavaeModel::harden`].
    pub fn hard_matrix(&self, g: usize) -> Result<Tensor> {
        let masks = self.hard_masks().ok_or_else(|| ModelError::Config("masks have not been hardened".into()))?;
        let a = self.base.action_matrix(g)?;
        masked_matrix(&a, masks.row(self.cluster_of[g]))
    }

    /// Latent dimensions owned by every mask.
    pub fn blocks(&self) -> Option<Vec<Vec<usize>>> {
        let owner = self.owner.as_ref()?;
        let mut blocks = vec![Vec::new(); self.n_masks()];
        for (i, &o) in owner.iter().enumerate() {
            blocks[o].push(i);
        }
        Some(blocks)
    }

    pub fn save(&self, dir: impl AsRef<Path>, seed: u64, partition: &ActionPartition) -> Result<()> {
        let dir = dir.as_ref();
        let masks = self.hard_masks().unwrap_or_else(|| self.probs());
        let extra = serde_json::json!({
            "cluster_of": self.cluster_of,
            "lambda_dis": self.lambda_dis,
            "owner": self.owner,
        });
        save_bundle_with(dir, "gmavae", &self.base, seed, &[("mask_logits", &self.logits), ("masks", &masks)], extra)?;
        fs::write(dir.join("partition.json"), serde_json::to_string_pretty(partition)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ActionPartition)> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Extra {
            cluster_of: Vec<usize>,
            lambda_dis: f64,
            owner: Option<Vec<usize>>,
        }
        let dir = dir.as_ref();
        let (base, manifest) = load_bundle(dir, "gmavae")?;
        let extra: Extra = serde_json::from_value(manifest.extra)?;
        let logits = read_named(dir, "mask_logits")?;
        let mut m = GmavaeModel::new(base, logits, extra.cluster_of, extra.lambda_dis)?;
        if let Some(o) = extra.owner {
            if o.len() != m.base.d() || o.iter().any(|&k| k >= m.n_masks()) {
                return Err(ModelError::Checkpoint("hard mask owners do not fit the model".into()));
            }
            m.owner = Some(o);
        }
        let text = fs::read_to_string(dir.join("partition.json"))
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.join("partition.json").display())))?;
        Ok((m, serde_json::from_str(&text)?))
    }
}

impl LatentModel for GmavaeModel<f32> {
    fn latent_dim(&self) -> usize {
        self.base.d()
    }

    fn n_actions(&self) -> usize {
        self.base.num_actions()
    }

    fn encode(&self, x: &[f32], rows: usize) -> Vec<f32> {
        self.base.encode(x, rows)
    }

    fn decode(&self, z: &[f32], rows: usize) -> Vec<f32> {
        self.base.decode(z, rows)
    }

    fn eval_matrix(&self, action: usize) -> Result<Tensor> {
        if self.owner.is_some() {
            self.hard_matrix(action)
        } else {
            self.soft_matrix(action)
        }
    }
}

/// Loss terms and gradients in [`GmavaeModel::params`] order; `c` is the
/// current target entropy.
pub fn gmavae_loss_and_grad<T: Real>(
    model: &GmavaeModel<T>,
    batch: &Batch<T>,
    noise: &Tensor<T>,
    c: f64,
) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let d = model.base.d();
    let n = batch.len();
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, &model.base);
    let logits = tape.leaf(model.logits.clone());
    let raw = vars.action_rows(&mut tape, &batch.actions)?;
    let pi = tape.softmax(logits, 0)?;
    let outer = tape.outer_rows(pi)?;
    let ks: Vec<usize> = batch.actions.iter().map(|&g| model.cluster_of[g]).collect();
    let weights = tape.gather_rows(outer, &ks)?;
    let eye: Tensor<T> = Tensor::from_fn(&[n, d * d], |idx| if (idx % (d * d)) % (d + 1) == 0 { T::one() } else { T::zero() });
    let a_minus_i = tape.add_const(raw, &eye.map(|v| -v))?;
    let masked = tape.mul(weights, a_minus_i)?;
    let mats = tape.add_const(masked, &eye)?;
    let l = transition_loss(&mut tape, &vars, batch, noise, mats, model.base.sigma, model.base.lambda_act)?;

    let h_terms = tape.neg_xlogx(pi)?;
    let h = tape.sum_axis(h_terms, 0)?;
    let gap = tape.affine(h, T::one(), T::of(-c))?;
    let gap = tape.abs(gap)?;
    let dis = tape.sum(gap)?;
    let weighted = tape.affine(dis, T::of(model.lambda_dis), T::zero())?;
    let total = tape.add(l.total, weighted)?;

    let mut g = tape.backward(total)?;
    let mut all = vars.vars();
    all.push(logits);
    let grads = all.iter().zip(model.params()).map(|(&v, p)| g.take_or_zeros(v, p)).collect();
    let val = |v| tape.value(v).item().to_f64().expect("finite");
    Ok((LossParts { total: val(total), act: val(l.act), rec: val(l.rec), dis: val(dis) }, grads))
}

/// Loss terms with noise drawn from `rng`.
pub fn gmavae_loss<T: Real>(model: &GmavaeModel<T>, batch: &Batch<T>, rng: &mut Rng, c: f64) -> Result<LossParts> {
    let d = model.base.d();
    let noise = Tensor::new(standard_normal(rng, batch.len() * d), vec![batch.len(), d])?;
    Ok(gmavae_loss_and_grad(model, batch, &noise, c)?.0)
}

/// Mask index of every action id from a partition.
pub fn cluster_labels(partition: &ActionPartition, n_actions: usize) -> Result<Vec<usize>> {
    let mut labels = vec![usize::MAX; n_actions];
    for (k, c) in partition.clusters.iter().enumerate() {
        for &a in c {
            if a >= n_actions || labels[a] != usize::MAX {
                return Err(ModelError::Config(format!("partition lists action {a} out of range or twice")));
            }
            labels[a] = k;
        }
    }
    if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(ModelError::Config(format!("partition does not cover action {missing}")));
    }
    Ok(labels)
}

/// Trains the masked model and hardens its masks. `warm` supplies the
/// unmasked network when `cfg.warm_start` is set.
pub fn train_gmavae(
    cfg: &GmavaeConfig,
    ds: &TransitionDataset,
    partition: &ActionPartition,
    seed: u64,
    warm: Option<&AvaeModel>,
) -> Result<(GmavaeModel, Vec<CurvePoint>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mc = &cfg.model;
    let labels = cluster_labels(partition, ds.catalog.len())?;
    let k = cfg.n_masks.unwrap_or(partition.clusters.len());
    if k > mc.latent_dim {
        return Err(ModelError::Config(format!("{k} masks cannot each own one of {} dimensions", mc.latent_dim)));
    }
    let mut init_rng = rng(derive_seed(seed, "gmavae/init"));
    let base = match (cfg.warm_start, warm) {
        (true, Some(m)) => {
            if m.d() != mc.latent_dim || m.num_actions() != ds.catalog.len() || m.encoder.input_dim() != ds.obs_dim() {
                return Err(ModelError::Config("warm-start model does not match the dataset and config".into()));
            }
            AvaeModel { sigma: mc.sigma, lambda_act: mc.lambda_act, ..m.clone() }
        }
        (true, None) => return Err(ModelError::Config("warm_start needs a trained model".into())),
        (false, _) => AvaeModel::init(ds.obs_dim(), ds.catalog.len(), mc, &mut init_rng)?,
    };
    let logits = Tensor::from_fn(&[k, mc.latent_dim], |_| init_rng.gen_range(-0.01..0.01));
    let mut model = GmavaeModel::new(base, logits, labels, cfg.lambda_dis)?;
    let mut data_rng = rng(derive_seed(seed, "gmavae/data"));
    let mut adam = Adam::new(&model.params(), mc.lr);
    adam.set_lr_scale(model.params().len() - 1, cfg.mask_lr_scale);
    let mut curve = Vec::with_capacity(mc.steps);
    for step in 0..mc.steps {
        let batch = sample_batch(ds, mc.batch_size, &mut data_rng)?;
        let noise = Tensor::new(standard_normal(&mut data_rng, batch.len() * mc.latent_dim), vec![batch.len(), mc.latent_dim])?;
        model.base.lambda_act = warmup_weight(mc.lambda_act, step, mc.act_warmup);
        adam.lr = scheduled_lr(mc, step);
        let c = anneal_c(step, mc.steps, k);
        let (parts, grads) = gmavae_loss_and_grad(&model, &batch, &noise, c).map_err(|e| diverged(step, e))?;
        curve.push(CurvePoint { step, l_act: parts.act, l_rec: parts.rec, l_dis: parts.dis });
        adam.step(&mut model.params_mut(), &grads)?;
        if !model.params().iter().all(|p| p.all_finite()) {
            return Err(ModelError::Diverged { step, detail: "non-finite parameters after update".into() });
        }
    }
    model.base.lambda_act = mc.lambda_act;
    model.harden()?;
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avae::tests::{four_state_world, reference_mlp, small_cfg};
    use crate::nn::grad_check;
    use proptest::prelude::*;

    fn t(d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), vec![d, d]).unwrap()
    }

    #[test]
    fn masked_matrix_examples() {
        let a = t(2, &[0.3, -0.7, 0.2, 0.9]);
        assert_eq!(masked_matrix(&a, &[1.0, 1.0]).unwrap(), a);
        assert_eq!(masked_matrix(&a, &[0.0, 0.0]).unwrap(), Tensor::eye(2));
        assert_eq!(masked_matrix(&a, &[1.0, 0.0]).unwrap(), t(2, &[0.3, 0.0, 0.0, 1.0]));
        let half = masked_matrix(&a, &[0.5, 1.0]).unwrap();
        assert!((half.data()[0] - (0.25 * 0.3 + 0.75)).abs() < 1e-12);
        assert!((half.data()[1] - 0.5 * -0.7).abs() < 1e-12);
        assert!(masked_matrix(&a, &[1.0]).is_err());
    }

    #[test]
    fn dis_loss_examples() {
        let uniform3 = Tensor::<f64>::full(&[3, 5], 1.0 / 3.0);
        assert!(dis_loss(&uniform3, 3f64.ln()).abs() < 1e-12);
        let onehot = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        assert_eq!(dis_loss(&onehot, 0.0), 0.0);
        let half = Tensor::<f64>::full(&[2, 4], 0.5);
        assert!((dis_loss(&half, 0.0) - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        let k = 3;
        assert_eq!(anneal_c(0, 1000, k), 3f64.ln());
        assert_eq!(anneal_c(1000, 1000, k), 0.0);
        assert!((anneal_c(400, 1000, k) - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(anneal_c(900, 1000, k), 0.0);
        assert!(anneal_c(799, 1000, k) > 0.0);
    }

    #[test]
    fn mask_probs_are_column_distributions() {
        let l = Tensor::<f64>::new(vec![0.3, -2.0, 5.0, 1.0, 0.0, -1.0], vec![2, 3]).unwrap();
        let p = mask_probs(&l);
        for i in 0..3 {
            let s = p.data()[i] + p.data()[3 + i];
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn harden_examples() {
        let pi = Tensor::<f64>::new(vec![0.9, 0.6, 0.1, 0.4], vec![2, 2]).unwrap();
        assert_eq!(harden_masks(&pi).unwrap(), vec![0, 1]);
        let binary = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0], vec![2, 3]).unwrap();
        assert_eq!(harden_masks(&binary).unwrap(), vec![0, 1, 1]);
        assert!(harden_masks(&Tensor::<f64>::full(&[3, 2], 1.0 / 3.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn hardened_masks_partition_dimensions(k in 1usize..6, extra in 0usize..6, seed in any::<u64>()) {
            let d = k + extra;
            let mut r = rng(seed);
            let logits = Tensor::<f64>::from_fn(&[k, d], |_| r.gen_range(-3.0..3.0));
            let owner = harden_masks(&mask_probs(&logits)).unwrap();
            prop_assert_eq!(owner.len(), d);
            for c in 0..k {
                prop_assert!(owner.contains(&c));
            }
            prop_assert!(owner.iter().all(|&o| o < k));
        }
    }

    fn fixture() -> (GmavaeModel<f64>, Batch<f64>, Tensor<f64>) {
        let ds = four_state_world();
        let base = AvaeModel::<f64>::init(4, 2, &small_cfg(), &mut rng(3)).unwrap();
        let mut r = rng(4);
        let logits = Tensor::from_fn(&[2, 3], |_| r.gen_range(-1.0..1.0));
        let m = GmavaeModel::new(base, logits, vec![1, 0], 0.7).unwrap();
        let batch = Batch::from_transitions(&ds, &ds.transitions).unwrap().cast::<f64>();
        let noise = Tensor::new(standard_normal(&mut rng(8), batch.len() * 3), vec![batch.len(), 3]).unwrap();
        (m, batch, noise)
    }

    /// Plain loops over the masked loss.
    fn reference(m: &GmavaeModel<f64>, b: &Batch<f64>, noise: &Tensor<f64>, c: f64) -> (f64, f64, f64, f64) {
        let d = m.base.d();
        let k = m.n_masks();
        let mut pi = vec![vec![0.0; d]; k];
        for i in 0..d {
            let e: Vec<f64> = (0..k).map(|r| m.logits.data()[r * d + i].exp()).collect();
            let s: f64 = e.iter().sum();
            for r in 0..k {
                pi[r][i] = e[r] / s;
            }
        }
        let n = b.len();
        let (mut act, mut rec) = (0.0, 0.0);
        for r in 0..n {
            let z = reference_mlp(&m.base.encoder, b.x.row(r));
            let zn = reference_mlp(&m.base.encoder, b.x_next.row(r));
            let g = b.actions[r];
            let p = &pi[m.cluster_of[g]];
            let raw = m.base.action_params.row(g);
            for i in 0..d {
                let mut az = 0.0;
                for j in 0..d {
                    let w = p[i] * p[j];
                    let eye = if i == j { 1.0 } else { 0.0 };
                    az += (w * raw[i * d + j].tanh() + (1.0 - w) * eye) * z[j];
                }
                act += (az - zn[i]).powi(2);
            }
            let zs: Vec<f64> = (0..d).map(|i| zn[i] + m.base.sigma * noise.data()[r * d + i]).collect();
            let xhat = reference_mlp(&m.base.decoder, &zs);
            rec += xhat.iter().zip(b.x_next.row(r)).map(|(a, t)| (a - t).powi(2)).sum::<f64>();
        }
        let (act, rec) = (act / n as f64, rec / n as f64);
        let mut dis = 0.0;
        for i in 0..d {
            let h: f64 = (0..k).map(|r| -pi[r][i] * pi[r][i].ln()).sum();
            dis += (h - c).abs();
        }
        (rec + m.base.lambda_act * act + m.lambda_dis * dis, act, rec, dis)
    }

    #[test]
    fn loss_matches_straight_line_reference() {
        let (m, b, noise) = fixture();
        for c in [0.0, 0.3, 2f64.ln()] {
            let (parts, _) = gmavae_loss_and_grad(&m, &b, &noise, c).unwrap();
            let (total, act, rec, dis) = reference(&m, &b, &noise, c);
            assert!((parts.total - total).abs() < 1e-6);
            assert!((parts.act - act).abs() < 1e-6);
            assert!((parts.rec - rec).abs() < 1e-6);
            assert!((parts.dis - dis).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradient_passes_check_including_masks() {
        let (m, b, noise) = fixture();
        let report = grad_check(
            |p| {
                let (parts, g) = gmavae_loss_and_grad(&m.with_params(p), &b, &noise, 0.2).unwrap();
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
    fn zero_dis_weight_gives_masked_avae_loss() {
        let (mut m, b, noise) = fixture();
        m.lambda_dis = 0.0;
        let (parts, _) = gmavae_loss_and_grad(&m, &b, &noise, 0.0).unwrap();
        assert_eq!(parts.total, parts.rec + m.base.lambda_act * parts.act);
    }

    #[test]
    fn hard_masks_with_block_matrices_reduce_to_block_loss() {
        let (mut m, b, noise) = fixture();
        // Saturated logits: dims {0, 1} to mask 0, dim 2 to mask 1.
        m.logits = Tensor::new(vec![60.0, 60.0, -60.0, -60.0, -60.0, 60.0], vec![2, 3]).unwrap();
        let (parts, _) = gmavae_loss_and_grad(&m, &b, &noise, 0.0).unwrap();
        assert!(parts.dis < 1e-20);
        let mut blocked = m.base.clone();
        let d = 3;
        for g in 0..2 {
            let keep: &[usize] = if m.cluster_of[g] == 0 { &[0, 1] } else { &[2] };
            for i in 0..d {
                for j in 0..d {
                    let v = if keep.contains(&i) && keep.contains(&j) {
                        m.base.action_params.row(g)[i * d + j]
                    } else if i == j {
                        40.0
                    } else {
                        0.0
                    };
                    blocked.action_params.data_mut()[g * d * d + i * d + j] = v;
                }
            }
        }
        let (plain, _) = crate::avae::avae_loss_and_grad(&blocked, &b, &noise).unwrap();
        assert!((plain.act - parts.act).abs() < 1e-9);
    }

    #[test]
    fn binary_masks_are_identity_off_block_and_commute() {
        let mut r = rng(11);
        let d = 5;
        let a1 = Tensor::<f64>::from_fn(&[d, d], |_| r.gen_range(-1.0..1.0));
        let a2 = Tensor::<f64>::from_fn(&[d, d], |_| r.gen_range(-1.0..1.0));
        let m1 = masked_matrix(&a1, &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let m2 = masked_matrix(&a2, &[0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        for i in 0..d {
            for j in 0..d {
                let in1 = [0, 2].contains(&i) && [0, 2].contains(&j);
                let expected = if in1 { a1.data()[i * d + j] } else if i == j { 1.0 } else { 0.0 };
                assert_eq!(m1.data()[i * d + j], expected);
            }
        }
        let mul = |x: &Tensor<f64>, y: &Tensor<f64>| {
            Tensor::from_fn(&[d, d], |idx| (0..d).map(|k| x.data()[idx / d * d + k] * y.data()[k * d + idx % d]).sum::<f64>())
        };
        assert_eq!(mul(&m1, &m2), mul(&m2, &m1));
        assert_eq!(mul(&m1, &m2).data()[3 * d + 3], 1.0);
    }

    #[test]
    fn training_is_deterministic_and_hardens() {
        let ds = four_state_world();
        let p = ActionPartition::from_clusters(vec![vec![0], vec![1]]);
        let cfg = GmavaeConfig { model: AvaeConfig { steps: 30, ..small_cfg() }, ..GmavaeConfig::default() };
        let (a, ca) = train_gmavae(&cfg, &ds, &p, 5, None).unwrap();
        let (b, cb) = train_gmavae(&cfg, &ds, &p, 5, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let blocks = a.blocks().unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| !b.is_empty()));
        assert!(cb.iter().all(|c| c.l_dis >= 0.0));
    }

    #[test]
    fn warm_start_copies_the_network() {
        let ds = four_state_world();
        let p = ActionPartition::from_clusters(vec![vec![0, 1]]);
        let warm = AvaeModel::init(4, 2, &small_cfg(), &mut rng(9)).unwrap();
        let cfg = GmavaeConfig { model: AvaeConfig { steps: 0, ..small_cfg() }, warm_start: true, ..GmavaeConfig::default() };
        let (m, _) = train_gmavae(&cfg, &ds, &p, 1, Some(&warm)).unwrap();
        assert_eq!(m.base, warm);
        assert!(train_gmavae(&cfg, &ds, &p, 1, None).is_err());
    }

    #[test]
    fn partition_must_cover_catalog() {
        let ds = four_state_world();
        let cfg = GmavaeConfig { model: AvaeConfig { steps: 1, ..small_cfg() }, ..GmavaeConfig::default() };
        let partial = ActionPartition::from_clusters(vec![vec![0]]);
        assert!(matches!(train_gmavae(&cfg, &ds, &partial, 1, None), Err(ModelError::Config(_))));
        let too_many = GmavaeConfig { n_masks: Some(4), ..cfg };
        let p = ActionPartition::from_clusters(vec![vec![0], vec![1]]);
        assert!(train_gmavae(&too_many, &ds, &p, 1, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = four_state_world();
        let p = ActionPartition::from_clusters(vec![vec![0], vec![1]]);
        let cfg = GmavaeConfig { model: AvaeConfig { steps: 5, ..small_cfg() }, ..GmavaeConfig::default() };
        let (m, _) = train_gmavae(&cfg, &ds, &p, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), 2, &p).unwrap();
        let (back, bp) = GmavaeModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(bp, p);
        assert!(AvaeModel::load(dir.path()).is_err());
    }
}
