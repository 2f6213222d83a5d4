//! Evaluation of recovered partitions and learned representations.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avae::{prediction_error, LatentModel, ModelError};
use crate::cluster::ActionPartition;
use crate::env::TransitionDataset;
use crate::gmavae::harden_masks;
use crate::nn::{batch_matvec, rng, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("partitions cover different elements")]
    ElementMismatch,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index between two partitions of the same elements. Defined
/// as 1 for identical partitions and 0 whenever the expected-index
/// correction leaves a zero denominator otherwise.
pub fn ari(p: &ActionPartition, q: &ActionPartition) -> Result<f64> {
    let (lp, lq) = (labels_of(p)?, labels_of(q)?);
    if lp.len() != lq.len() || lp.keys().any(|k| !lq.contains_key(k)) {
        return Err(MetricsError::ElementMismatch);
    }
    let n = lp.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    for (e, &a) in &lp {
        *table.entry((a, lq[e])).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let a: f64 = p.clusters.iter().map(|c| choose2(c.len() as u64)).sum();
    let b: f64 = q.clusters.iter().map(|c| choose2(c.len() as u64)).sum();
    let expected = a * b / choose2(n).max(1.0);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if same_partition(p, q) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn labels_of(p: &ActionPartition) -> Result<HashMap<usize, usize>> {
    let mut m = HashMap::new();
    for (k, c) in p.clusters.iter().enumerate() {
        for &e in c {
            if m.insert(e, k).is_some() {
                return Err(MetricsError::Invalid(format!("element {e} appears twice")));
            }
        }
    }
    Ok(m)
}

fn same_partition(p: &ActionPartition, q: &ActionPartition) -> bool {
    let canon = |p: &ActionPartition| {
        let mut c: Vec<Vec<usize>> = p.clusters.iter().map(|c| {
            let mut c = c.clone();
            c.sort_unstable();
            c
        }).collect();
        c.sort();
        c
    };
    canon(p) == canon(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equivariance {
    pub max: f64,
    pub mean: f64,
}

/// `‖A_g f(w) − f(w')‖` over every transition, with the model's evaluation
/// matrices.
pub fn equivariance_error(model: &dyn LatentModel, ds: &TransitionDataset) -> Equivariance {
    if ds.is_empty() {
        return Equivariance { max: 0.0, mean: 0.0 };
    }
    let d = model.latent_dim();
    let z = model.encode_states(ds);
    let mats = model.eval_matrices();
    let (mut max, mut sum) = (0.0f64, 0.0);
    for t in &ds.transitions {
        let a = mats[t.action].data();
        let zs = &z[t.src * d..(t.src + 1) * d];
        let zd = &z[t.dst * d..(t.dst + 1) * d];
        let mut sq = 0.0;
        for i in 0..d {
            let y: f64 = (0..d).map(|j| a[i * d + j] as f64 * zs[j] as f64).sum();
            sq += (y - zd[i] as f64).powi(2);
        }
        let e = sq.sqrt();
        max = max.max(e);
        sum += e;
    }
    Equivariance { max, mean: sum / ds.len() as f64 }
}

/// Share of latent displacement energy that stays inside the block owned by
/// the acting cluster: `1 − off-block / total`, or 1 when nothing moves.
pub fn block_independence(model: &dyn LatentModel, ds: &TransitionDataset, cluster_of: &[usize], owner: &[usize]) -> Result<f64> {
    let d = model.latent_dim();
    if owner.len() != d {
        return Err(MetricsError::Invalid(format!("{} dimension owners for latent size {d}", owner.len())));
    }
    if cluster_of.len() != ds.catalog.len() {
        return Err(MetricsError::Invalid("cluster labels do not cover the catalog".into()));
    }
    let z = model.encode_states(ds);
    let (mut off, mut total) = (0.0f64, 0.0f64);
    for t in &ds.transitions {
        for i in 0..d {
            let e = (z[t.dst * d + i] as f64 - z[t.src * d + i] as f64).powi(2);
            total += e;
            if owner[i] != cluster_of[t.action] {
                off += e;
            }
        }
    }
    Ok(if total == 0.0 { 1.0 } else { 1.0 - off / total })
}

/// Dimension owners for a model without masks: each latent dimension goes to
/// the cluster whose transitions move it most, then every cluster is given
/// at least one dimension.
pub fn infer_owner(model: &dyn LatentModel, ds: &TransitionDataset, cluster_of: &[usize], k: usize) -> Result<Vec<usize>> {
    let d = model.latent_dim();
    if cluster_of.len() != ds.catalog.len() || cluster_of.iter().any(|&c| c >= k) {
        return Err(MetricsError::Invalid("cluster labels do not fit".into()));
    }
    let z = model.encode_states(ds);
    let mut energy = vec![0.0f64; k * d];
    for t in &ds.transitions {
        let c = cluster_of[t.action];
        for i in 0..d {
            energy[c * d + i] += (z[t.dst * d + i] as f64 - z[t.src * d + i] as f64).powi(2);
        }
    }
    for i in 0..d {
        let s: f64 = (0..k).map(|c| energy[c * d + i]).sum();
        for c in 0..k {
            energy[c * d + i] = if s > 0.0 { energy[c * d + i] / s } else { 1.0 / k as f64 };
        }
    }
    let probs = Tensor::new(energy, vec![k, d]).map_err(ModelError::from)?;
    Ok(harden_masks(&probs)?)
}

/// Factor coordinates and latent codes of every world state.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactorTable {
    /// `factors[s][k]`: value index of factor `k` in state `s`.
    pub factors: Vec<Vec<usize>>,
    pub cardinalities: Vec<usize>,
    /// `[|W|, d]` latent codes.
    pub latents: Tensor,
}

impl LatentFactorTable {
    pub fn new(factors: Vec<Vec<usize>>, cardinalities: Vec<usize>, latents: Tensor) -> Result<Self> {
        let (n, _) = latents.rows_cols();
        if factors.len() != n || latents.shape().len() != 2 {
            return Err(MetricsError::Invalid(format!("{} factor rows for {n} latent rows", factors.len())));
        }
        for row in &factors {
            if row.len() != cardinalities.len() || row.iter().zip(&cardinalities).any(|(v, c)| v >= c) {
                return Err(MetricsError::Invalid("factor value out of range".into()));
            }
        }
        Ok(LatentFactorTable { factors, cardinalities, latents })
    }

    pub fn from_model(model: &dyn LatentModel, ds: &TransitionDataset) -> Result<Self> {
        let spec = &ds.spec;
        let factors =
            (0..ds.n_states()).map(|s| spec.state_at(s).coords.iter().zip(&spec.factors).map(|(c, f)| f.rank(c)).collect()).collect();
        let cards = spec.factors.iter().map(|f| f.order() as usize).collect();
        let z = Tensor::new(model.encode_states(ds), vec![ds.n_states(), model.latent_dim()]).map_err(ModelError::from)?;
        Self::new(factors, cards, z)
    }

    fn n(&self) -> usize {
        self.factors.len()
    }

    fn d(&self) -> usize {
        self.latents.shape()[1]
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|s| self.latents.row(s)[j] as f64).collect()
    }
}

/// Uniform bins over the observed range; a constant column maps to bin 0.
fn discretize(col: &[f64], bins: usize) -> Vec<usize> {
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    col.iter()
        .map(|&v| if hi > lo { (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1) } else { 0 })
        .collect()
}

fn entropy_of(labels: &[usize]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
    let n = labels.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let joint: Vec<usize> = a.iter().zip(b).map(|(&x, &y)| x * (1 + b.iter().max().copied().unwrap_or(0)) + y).collect();
    (entropy_of(a) + entropy_of(b) - entropy_of(&joint)).max(0.0)
}

fn top_two(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0], s.get(1).copied().unwrap_or(0.0))
}

fn check_table(t: &LatentFactorTable) -> Result<()> {
    if t.d() < 2 {
        return Err(MetricsError::Invalid("need at least two latent dimensions".into()));
    }
    if t.n() == 0 {
        return Err(MetricsError::Invalid("empty table".into()));
    }
    Ok(())
}

/// Mutual information gap with `bins` uniform bins per latent dimension,
/// averaged over factors that take more than one value.
pub fn mig(table: &LatentFactorTable, bins: usize) -> Result<f64> {
    check_table(table)?;
    if bins == 0 {
        return Err(MetricsError::Invalid("bins must be positive".into()));
    }
    let codes: Vec<Vec<usize>> = (0..table.d()).map(|j| discretize(&table.column(j), bins)).collect();
    let mut gaps = Vec::new();
    for k in 0..table.cardinalities.len() {
        let v: Vec<usize> = table.factors.iter().map(|r| r[k]).collect();
        let h = entropy_of(&v);
        if h <= 0.0 {
            continue;
        }
        let mi: Vec<f64> = codes.iter().map(|c| mutual_information(c, &v)).collect();
        let (a, b) = top_two(&mi);
        gaps.push(((a - b) / h).clamp(0.0, 1.0));
    }
    Ok(if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 })
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    }
}

/// Separated attribute predictability from one-dimensional least-squares fits.
pub fn sap(table: &LatentFactorTable) -> Result<f64> {
    check_table(table)?;
    let cols: Vec<Vec<f64>> = (0..table.d()).map(|j| table.column(j)).collect();
    let mut gaps = Vec::new();
    for k in 0..table.cardinalities.len() {
        let v: Vec<f64> = table.factors.iter().map(|r| r[k] as f64).collect();
        if v.iter().all(|&x| x == v[0]) {
            continue;
        }
        let scores: Vec<f64> = cols.iter().map(|c| r_squared(c, &v)).collect();
        let (a, b) = top_two(&scores);
        gaps.push(a - b);
    }
    Ok(if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 })
}

/// Open-loop prediction from one start state.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Latent after each step.
    pub latents: Vec<Vec<f32>>,
    /// Per-pixel squared error after each step.
    pub errors: Vec<f64>,
    /// First step whose latent is not finite; later steps are not evaluated.
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn final_error(&self) -> f64 {
        if self.diverged_at.is_some() {
            f64::NAN
        } else {
            self.errors.last().copied().unwrap_or(f64::NAN)
        }
    }
}

/// Encodes `start`, applies the model's matrices for `actions` in order and
/// decodes after every step, comparing with the rendered true state.
pub fn rollout(model: &dyn LatentModel, ds: &TransitionDataset, start: usize, actions: &[usize]) -> Result<Rollout> {
    if actions.is_empty() {
        return Err(MetricsError::Invalid("empty action sequence".into()));
    }
    if start >= ds.n_states() {
        return Err(MetricsError::Invalid(format!("state {start} out of range")));
    }
    if let Some(&bad) = actions.iter().find(|&&a| a >= ds.catalog.len()) {
        return Err(ModelError::UnknownAction(bad).into());
    }
    let d = model.latent_dim();
    let dim = ds.obs_dim();
    let mats = model.eval_matrices();
    let mut z = model.encode(ds.observation(start), 1);
    let mut w = ds.spec.state_at(start);
    let mut out = Rollout { latents: Vec::new(), errors: Vec::new(), diverged_at: None };
    for (t, &g) in actions.iter().enumerate() {
        z = batch_matvec(mats[g].data(), &z, 1, d);
        w = ds.spec.apply(&ds.catalog.actions[g].element, &w).map_err(|e| MetricsError::Invalid(e.to_string()))?;
        if !z.iter().all(|v| v.is_finite()) {
            out.diverged_at = Some(t + 1);
            break;
        }
        let xhat = model.decode(&z, 1);
        let target = ds.observation(ds.spec.state_index(&w));
        let err = xhat.iter().zip(target).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / dim as f64;
        out.latents.push(z.clone());
        out.errors.push(err);
    }
    Ok(out)
}

/// Mean rollout error curve over random start states and action sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutCurve {
    /// `error[t - 1]` is the mean error after `t` steps over sequences that
    /// have not diverged by then, NaN once any has.
    pub error: Vec<f64>,
    pub n_sequences: usize,
    pub n_diverged: usize,
    /// Earliest divergence step over all sequences.
    pub first_divergence: Option<usize>,
}

impl RolloutCurve {
    pub fn at(&self, t: usize) -> f64 {
        self.error.get(t.wrapping_sub(1)).copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,error\n");
        for (i, e) in self.error.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, e));
        }
        s
    }
}

pub fn rollout_curve(model: &dyn LatentModel, ds: &TransitionDataset, horizon: usize, n_sequences: usize, seed: u64) -> Result<RolloutCurve> {
    if horizon == 0 || n_sequences == 0 {
        return Err(MetricsError::Invalid("horizon and sequence count must be positive".into()));
    }
    let mut r = rng(seed);
    let mut sums = vec![0.0f64; horizon];
    let mut first: Option<usize> = None;
    let mut n_diverged = 0;
    for _ in 0..n_sequences {
        let start = r.gen_range(0..ds.n_states());
        let actions: Vec<usize> = (0..horizon).map(|_| r.gen_range(0..ds.catalog.len())).collect();
        let ro = rollout(model, ds, start, &actions)?;
        for (s, e) in sums.iter_mut().zip(&ro.errors) {
            *s += e;
        }
        if let Some(t) = ro.diverged_at {
            n_diverged += 1;
            first = Some(first.map_or(t, |f: usize| f.min(t)));
        }
    }
    let error = (0..horizon)
        .map(|i| match first {
            Some(f) if i + 1 >= f => f64::NAN,
            _ => sums[i] / n_sequences as f64,
        })
        .collect();
    Ok(RolloutCurve { error, n_sequences, n_diverged, first_divergence: first })
}

/// Index of the candidate with the lowest one-step prediction error on
/// `held_out`; non-finite errors rank last and ties go to the lowest index.
pub fn select_model(candidates: &[&dyn LatentModel], held_out: &TransitionDataset) -> Result<usize> {
    if candidates.is_empty() {
        return Err(MetricsError::Invalid("no candidates".into()));
    }
    let errs: Vec<f64> = candidates
        .iter()
        .map(|m| {
            let e = prediction_error(*m, held_out, &m.eval_matrices());
            if e.is_finite() { e } else { f64::INFINITY }
        })
        .collect();
    Ok((0..errs.len()).fold(0, |best, i| if errs[i] < errs[best] { i } else { best }))
}
