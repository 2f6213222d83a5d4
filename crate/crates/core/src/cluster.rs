//! Recovering the subgroup decomposition from learned action matrices.
//!
//! Two actions belong to the same subgroup when one is close to a
//! composition of the other with a small power of some available action,
//! measured in the data-dependent semi-norm `‖A‖_h = E_x ‖A h(x)‖`.
//! Complete-linkage agglomeration merges clusters until the smallest
//! linkage exceeds the threshold `η`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avae::{LatentModel, ModelError};
use crate::env::TransitionDataset;
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Square matrix in f64, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Mat {
    d: usize,
    v: Vec<f64>,
}

impl Mat {
    fn from_tensor(t: &Tensor) -> Self {
        Mat { d: t.shape()[0], v: t.data().iter().map(|&x| x as f64).collect() }
    }

    fn mul(&self, other: &Mat) -> Mat {
        let d = self.d;
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.v[i * d + k];
                for j in 0..d {
                    v[i * d + j] += a * other.v[k * d + j];
                }
            }
        }
        Mat { d, v }
    }

    fn sub(&self, other: &Mat) -> Mat {
        Mat { d: self.d, v: self.v.iter().zip(&other.v).map(|(a, b)| a - b).collect() }
    }
}

fn check_square(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(ClusterError::Invalid(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Largest singular value by power iteration on `AᵀA`, started from the
/// normalized all-ones vector.
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    spectral_norm_with(a, 1e-8, 10_000)
}

pub fn spectral_norm_with(a: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    let d = check_square(a)?;
    let m = Mat::from_tensor(a);
    let ata = |x: &[f64]| -> Vec<f64> {
        let ax: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m.v[i * d + j] * x[j]).sum()).collect();
        (0..d).map(|j| (0..d).map(|i| m.v[i * d + j] * ax[i]).sum()).collect()
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut w = ata(&v);
    if norm(&w) == 0.0 {
        // The all-ones direction lies in the kernel; restart off-axis.
        v = (0..d).map(|i| (i + 1) as f64).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        w = ata(&v);
        if norm(&w) == 0.0 {
            return Ok(0.0);
        }
    }
    let mut lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        let n = norm(&w);
        if n == 0.0 {
            return Ok(0.0);
        }
        v = w.iter().map(|x| x / n).collect();
        w = ata(&v);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(ClusterError::NoConvergence { iterations: max_iter, estimate: lambda.max(0.0).sqrt() })
}

/// Encodings flattened to f64 rows.
#[derive(Clone, Debug)]
pub struct Encodings {
    d: usize,
    z: Vec<f64>,
}

impl Encodings {
    pub fn new(z: &[f32], d: usize) -> Result<Self> {
        if d == 0 || z.is_empty() || z.len() % d != 0 {
            return Err(ClusterError::Invalid(format!("{} values do not form non-empty rows of {d}", z.len())));
        }
        Ok(Encodings { d, z: z.iter().map(|&v| v as f64).collect() })
    }

    pub fn of_states(model: &dyn LatentModel, ds: &TransitionDataset) -> Result<Self> {
        Self::new(&model.encode_states(ds), model.latent_dim())
    }

    pub fn len(&self) -> usize {
        self.z.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

fn seminorm(m: &Mat, enc: &Encodings) -> f64 {
    let d = m.d;
    let mut total = 0.0;
    for zr in enc.z.chunks_exact(d) {
        let mut sq = 0.0;
        for i in 0..d {
            let row = &m.v[i * d..(i + 1) * d];
            let y: f64 = row.iter().zip(zr).map(|(a, b)| a * b).sum();
            sq += y * y;
        }
        total += sq.sqrt();
    }
    total / enc.len() as f64
}

/// `‖A‖_h`: mean of `‖A z‖` over the encodings.
pub fn seminorm_h(a: &Tensor, enc: &Encodings) -> Result<f64> {
    let d = check_square(a)?;
    if d != enc.d {
        return Err(ClusterError::Invalid(format!("matrix of size {d} vs encodings of size {}", enc.d)));
    }
    Ok(seminorm(&Mat::from_tensor(a), enc))
}

fn check_inputs(matrices: &[Tensor], enc: &Encodings, m: usize) -> Result<Vec<Mat>> {
    if m == 0 {
        return Err(ClusterError::Invalid("M must be at least 1".into()));
    }
    if matrices.is_empty() {
        return Err(ClusterError::Invalid("no action matrices".into()));
    }
    for a in matrices {
        if check_square(a)? != enc.d {
            return Err(ClusterError::Invalid(format!("matrix {:?} vs latent size {}", a.shape(), enc.d)));
        }
    }
    Ok(matrices.iter().map(Mat::from_tensor).collect())
}

/// Powers `A_u^m` for `m = 1..=M`, built by right multiplication.
fn powers(a: &Mat, m: usize) -> Vec<Mat> {
    let mut out = vec![a.clone()];
    for _ in 1..m {
        let next = out.last().expect("non-empty").mul(a);
        out.push(next);
    }
    out
}

/// The smallest of the four residual forms for one `(u, m)` power.
fn form_min(enc: &Encodings, ag: &Mat, agp: &Mat, p_agp: &Mat, agp_p: &Mat, p_ag: &Mat, ag_p: &Mat) -> f64 {
    let a = seminorm(&ag.sub(p_agp), enc);
    let b = seminorm(&ag.sub(agp_p), enc);
    let c = seminorm(&agp.sub(p_ag), enc);
    let e = seminorm(&agp.sub(ag_p), enc);
    a.min(b).min(c).min(e)
}

/// Precomputed `A_u^m A_h` and `A_h A_u^m` for every `u, m, h`.
struct Products {
    mats: Vec<Mat>,
    left: Vec<Vec<Vec<Mat>>>,
    right: Vec<Vec<Vec<Mat>>>,
}

impl Products {
    fn new(mats: Vec<Mat>, m: usize) -> Self {
        let pw: Vec<Vec<Mat>> = mats.iter().map(|a| powers(a, m)).collect();
        let left = pw.iter().map(|ps| ps.iter().map(|p| mats.iter().map(|h| p.mul(h)).collect()).collect()).collect();
        let right = pw.iter().map(|ps| ps.iter().map(|p| mats.iter().map(|h| h.mul(p)).collect()).collect()).collect();
        Products { mats, left, right }
    }

    fn dg(&self, g: usize, gp: usize, enc: &Encodings) -> f64 {
        let mut best = f64::INFINITY;
        for u in 0..self.mats.len() {
            for k in 0..self.left[u].len() {
                let v = form_min(
                    enc,
                    &self.mats[g],
                    &self.mats[gp],
                    &self.left[u][k][gp],
                    &self.right[u][k][gp],
                    &self.left[u][k][g],
                    &self.right[u][k][g],
                );
                best = best.min(v);
            }
        }
        best
    }
}

/// Pseudo-distance between actions `g` and `gp`: the smallest residual over
/// every available action `u`, power `1 <= m <= M` and the four forms
/// `A_g − A_u^m A_g'`, `A_g − A_g' A_u^m`, `A_g' − A_u^m A_g`, `A_g' − A_g A_u^m`.
pub fn dg(g: usize, gp: usize, matrices: &[Tensor], enc: &Encodings, m: usize) -> Result<f64> {
    if g >= matrices.len() || gp >= matrices.len() {
        return Err(ClusterError::Invalid(format!("action index out of range: {g}, {gp}")));
    }
    let mats = check_inputs(matrices, enc, m)?;
    Ok(Products::new(mats, m).dg(g, gp, enc))
}

/// Direct evaluation of every candidate without shared products.
pub fn dg_brute_force(g: usize, gp: usize, matrices: &[Tensor], enc: &Encodings, m: usize) -> Result<f64> {
    let mats = check_inputs(matrices, enc, m)?;
    let (ag, agp) = (&mats[g], &mats[gp]);
    let mut best = f64::INFINITY;
    for au in &mats {
        let mut p = au.clone();
        for k in 1..=m {
            if k > 1 {
                p = p.mul(au);
            }
            let v = form_min(enc, ag, agp, &p.mul(agp), &agp.mul(&p), &p.mul(ag), &ag.mul(&p));
            best = best.min(v);
        }
    }
    Ok(best)
}

/// Symmetric `|G| x |G|` matrix of pseudo-distances with a zero diagonal.
pub fn distance_matrix(matrices: &[Tensor], enc: &Encodings, m: usize) -> Result<Vec<Vec<f64>>> {
    let mats = check_inputs(matrices, enc, m)?;
    let n = mats.len();
    let products = Products::new(mats, m);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| products.dg(i, j, enc)).collect();
    let mut dist = vec![vec![0.0; n]; n];
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        dist[i][j] = v;
        dist[j][i] = v;
    }
    Ok(dist)
}

/// Theoretical threshold ingredients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest action residual `‖A_g f(w) − f(w')‖` over transitions.
    pub epsilon: f64,
    /// Largest spectral norm of an action matrix.
    pub r: f64,
    pub eta: f64,
}

/// `η = ε (1 + Σ_{i=0}^{M} r^i)`.
pub fn eta_theoretical(epsilon: f64, r: f64, m: usize) -> f64 {
    let sum: f64 = (0..=m as i32).map(|i| r.powi(i)).sum();
    epsilon * (1.0 + sum)
}

/// Largest equivariance residual over the dataset's transitions.
pub fn max_action_residual(model: &dyn LatentModel, ds: &TransitionDataset, matrices: &[Tensor]) -> f64 {
    let d = model.latent_dim();
    let z = model.encode_states(ds);
    ds.transitions
        .iter()
        .map(|t| {
            let a = matrices[t.action].data();
            let zs = &z[t.src * d..(t.src + 1) * d];
            let zd = &z[t.dst * d..(t.dst + 1) * d];
            (0..d)
                .map(|i| {
                    let y: f64 = (0..d).map(|j| a[i * d + j] as f64 * zs[j] as f64).sum();
                    (y - zd[i] as f64).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn threshold_theoretical(model: &dyn LatentModel, ds: &TransitionDataset, m: usize) -> Result<Thresholds> {
    if ds.is_empty() {
        return Err(ClusterError::Invalid("dataset has no transitions".into()));
    }
    let mats = model.eval_matrices();
    let epsilon = max_action_residual(model, ds, &mats);
    let r = mats.iter().map(spectral_norm).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok(Thresholds { epsilon, r, eta: eta_theoretical(epsilon, r, m) })
}

/// How the stopping threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `η = σ`, the fixed latent noise level.
    PracticalSigma,
    Theoretical,
    Manual(f64),
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::PracticalSigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub epsilon: f32,
    pub r: f32,
    pub eta_theoretical: f32,
    pub max_power: usize,
}

/// Recovered clusters of action ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPartition {
    /// Sorted clusters, ordered by their smallest id.
    pub clusters: Vec<Vec<usize>>,
    pub threshold_used: f32,
    pub distance_matrix: Vec<Vec<f32>>,
    pub diagnostics: Diagnostics,
}

impl ActionPartition {
    /// A partition without distance information, e.g. the ground truth.
    pub fn from_clusters(mut clusters: Vec<Vec<usize>>) -> Self {
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.retain(|c| !c.is_empty());
        clusters.sort();
        ActionPartition {
            clusters,
            threshold_used: 0.0,
            distance_matrix: Vec::new(),
            diagnostics: Diagnostics { epsilon: 0.0, r: 0.0, eta_theoretical: 0.0, max_power: 0 },
        }
    }

    pub fn n_elements(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Cluster index of every action id.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![usize::MAX; self.n_elements()];
        for (k, c) in self.clusters.iter().enumerate() {
            for &a in c {
                labels[a] = k;
            }
        }
        labels
    }

    /// Distance matrix as CSV, divided by the threshold when `normalize` is
    /// set so that the merge cutoff sits at 1.
    pub fn distance_csv(&self, normalize: bool) -> String {
        let n = self.distance_matrix.len();
        let scale = if normalize && self.threshold_used > 0.0 { self.threshold_used } else { 1.0 };
        let mut s = String::from("action");
        for j in 0..n {
            write!(s, ",{j}").expect("string write");
        }
        s.push('\n');
        for (i, row) in self.distance_matrix.iter().enumerate() {
            write!(s, "{i}").expect("string write");
            for v in row {
                write!(s, ",{}", v / scale).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Complete-linkage agglomeration from singletons. Merges the pair with the
/// smallest linkage, ties going to the lexicographically lowest pair, and
/// stops once that linkage exceeds `eta`.
pub fn complete_linkage(dist: &[Vec<f64>], eta: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..dist.len()).map(|i| vec![i]).collect();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let link = clusters[i]
                    .iter()
                    .flat_map(|&a| clusters[j].iter().map(move |&b| dist[a][b]))
                    .fold(f64::NEG_INFINITY, f64::max);
                if best.map_or(true, |(b, _, _)| link < b) {
                    best = Some((link, i, j));
                }
            }
        }
        let (link, i, j) = best.expect("at least two clusters");
        if link > eta {
            break;
        }
        let merged = clusters.remove(j);
        clusters[i].extend(merged);
        clusters[i].sort_unstable();
    }
    clusters
}

/// Clusters actions from a distance matrix and threshold diagnostics.
pub fn partition_from_distances(dist: &[Vec<f64>], eta: f64, thresholds: Thresholds, m: usize) -> ActionPartition {
    ActionPartition {
        clusters: complete_linkage(dist, eta),
        threshold_used: eta as f32,
        distance_matrix: dist.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect(),
        diagnostics: Diagnostics {
            epsilon: thresholds.epsilon as f32,
            r: thresholds.r as f32,
            eta_theoretical: thresholds.eta as f32,
            max_power: m,
        },
    }
}

/// Full clustering step for a trained model. `sigma` is the model's latent
/// noise level, used by [`ThresholdMode::PracticalSigma`].
pub fn cluster_actions(model: &dyn LatentModel, ds: &TransitionDataset, m: usize, mode: ThresholdMode, sigma: f64) -> Result<ActionPartition> {
    let enc = Encodings::of_states(model, ds)?;
    let mats = model.eval_matrices();
    let thresholds = threshold_theoretical(model, ds, m)?;
    let eta = match mode {
        ThresholdMode::PracticalSigma => sigma,
        ThresholdMode::Theoretical => thresholds.eta,
        ThresholdMode::Manual(v) => v,
    };
    let dist = distance_matrix(&mats, &enc, m)?;
    Ok(partition_from_distances(&dist, eta, thresholds, m))
}
