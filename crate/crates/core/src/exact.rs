//! An exactly equivariant reference model over one-hot observations.
//!
//! Each cyclic factor `Z/n` acts on its own plane by rotation through
//! `2π/n`, and each symmetric factor `S_n` permutes its own `n` coordinates.
//! The latent of state `w` is `ρ(w) z0`, so every action satisfies
//! `A_g f(w) = f(g·w)` up to rounding.

use crate::avae::{LatentModel, ModelError, Result};
use crate::env::TransitionDataset;
use crate::group::{Component, FactorSpec, GroupSpec};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactModel {
    pub matrices: Vec<Tensor>,
    /// `[|W|, d]` latents in state order.
    pub latents: Tensor,
    /// Latent dimensions owned by each factor.
    pub blocks: Vec<Vec<usize>>,
}

impl ExactModel {
    pub fn new(ds: &TransitionDataset) -> Result<Self> {
        let spec = &ds.spec;
        if ds.obs_dim() != ds.n_states() {
            return Err(ModelError::Config("the exact model needs one-hot observations".into()));
        }
        let mut blocks = Vec::new();
        let mut d = 0;
        for f in &spec.factors {
            let width = block_width(*f);
            blocks.push((d..d + width).collect::<Vec<_>>());
            d += width;
        }
        let matrices = ds.catalog.actions.iter().map(|a| representation(spec, &a.element.parts, d)).collect();
        let mut latents = Vec::with_capacity(ds.n_states() * d);
        for s in 0..ds.n_states() {
            latents.extend(latent_of(spec, &spec.state_at(s).coords));
        }
        let latents = Tensor::new(latents, vec![ds.n_states(), d])?;
        Ok(ExactModel { matrices, latents, blocks })
    }

    pub fn d(&self) -> usize {
        self.latents.shape()[1]
    }
}

fn block_width(f: FactorSpec) -> usize {
    match f {
        FactorSpec::Cyclic(_) => 2,
        FactorSpec::Symmetric(n) => n,
    }
}

fn representation(spec: &GroupSpec, parts: &[Component], d: usize) -> Tensor {
    let mut m = vec![0.0f32; d * d];
    let mut o = 0;
    for (f, c) in spec.factors.iter().zip(parts) {
        match (f, c) {
            (FactorSpec::Cyclic(n), Component::Cyclic(k)) => {
                let t = std::f64::consts::TAU * *k as f64 / *n as f64;
                let (cs, sn) = (t.cos() as f32, t.sin() as f32);
                m[o * d + o] = cs;
                m[o * d + o + 1] = -sn;
                m[(o + 1) * d + o] = sn;
                m[(o + 1) * d + o + 1] = cs;
            }
            (FactorSpec::Symmetric(n), Component::Perm(p)) => {
                for i in 0..*n {
                    m[(o + p[i]) * d + o + i] = 1.0;
                }
            }
            _ => unreachable!("elements are validated against the spec"),
        }
        o += block_width(*f);
    }
    Tensor::new(m, vec![d, d]).expect("square")
}

fn latent_of(spec: &GroupSpec, coords: &[Component]) -> Vec<f32> {
    let mut z = Vec::new();
    for (f, c) in spec.factors.iter().zip(coords) {
        match (f, c) {
            (FactorSpec::Cyclic(n), Component::Cyclic(k)) => {
                let t = std::f64::consts::TAU * *k as f64 / *n as f64;
                z.extend([t.cos() as f32, t.sin() as f32]);
            }
            (FactorSpec::Symmetric(n), Component::Perm(p)) => {
                // Object i sits at slot p[i]; the slot coordinate stores i + 1.
                let mut block = vec![0.0; *n];
                for i in 0..*n {
                    block[p[i]] = (i + 1) as f32 / *n as f32;
                }
                z.extend(block);
            }
            _ => unreachable!("states are validated against the spec"),
        }
    }
    z
}

impl LatentModel for ExactModel {
    fn latent_dim(&self) -> usize {
        self.d()
    }

    fn n_actions(&self) -> usize {
        self.matrices.len()
    }

    /// Looks up the latent of the hot index of each row.
    fn encode(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let n = self.latents.shape()[0];
        (0..rows)
            .flat_map(|r| {
                let row = &x[r * n..(r + 1) * n];
                let hot = (0..n).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                self.latents.row(hot).to_vec()
            })
            .collect()
    }

    /// One-hot of the nearest stored latent.
    fn decode(&self, z: &[f32], rows: usize) -> Vec<f32> {
        let (n, d) = (self.latents.shape()[0], self.d());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let zr = &z[r * d..(r + 1) * d];
            let dist = |s: usize| -> f32 { self.latents.row(s).iter().zip(zr).map(|(a, b)| (a - b) * (a - b)).sum() };
            let best = (0..n).fold(0, |best, s| if dist(s) < dist(best) { s } else { best });
            out[r * n + best] = 1.0;
        }
        out
    }

    fn eval_matrix(&self, action: usize) -> Result<Tensor> {
        self.matrices.get(action).cloned().ok_or(ModelError::UnknownAction(action))
    }
}
