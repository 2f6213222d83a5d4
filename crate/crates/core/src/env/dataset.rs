use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::render::Renderer;
use super::tensor_file::{read_tensor, write_tensor};
use super::{EnvError, Result};
use crate::group::{ActionCatalog, Component, GroupSpec, ORDER_LIMIT};
use crate::nn::{rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub src: usize,
    pub action: usize,
    pub dst: usize,
}

/// Rendered observations for every state plus a list of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub spec: GroupSpec,
    pub catalog: ActionCatalog,
    pub renderer: Renderer,
    pub obs_shape: Vec<usize>,
    /// `[|W|, obs_dim]`, row `i` renders state `i`.
    pub observations: Tensor,
    pub transitions: Vec<Transition>,
}

/// Contents of `catalog.json` in an exported dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: GroupSpec,
    renderer: Renderer,
    catalog: ActionCatalog,
}

impl TransitionDataset {
    pub fn n_states(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.shape()[1]
    }

    pub fn observation(&self, state: usize) -> &[f32] {
        self.observations.row(state)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Same environment, different transition list.
    pub fn with_transitions(&self, transitions: Vec<Transition>) -> Self {
        TransitionDataset { transitions, ..self.clone() }
    }

    /// Re-applies every action and compares with the stored destination.
    pub fn check_consistency(&self) -> Result<()> {
        for t in &self.transitions {
            if t.src >= self.n_states() || t.action >= self.catalog.len() {
                return Err(EnvError::Inconsistent(format!("{t:?} is out of range")));
            }
            let w = self.spec.state_at(t.src);
            let next = self.spec.apply(&self.catalog.actions[t.action].element, &w)?;
            if self.spec.state_index(&next) != t.dst {
                return Err(EnvError::Inconsistent(format!("{t:?} does not match the group action")));
            }
        }
        Ok(())
    }

    /// Writes `observations.gmat`, `transitions.csv` and `catalog.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut dims = vec![self.n_states()];
        dims.extend(&self.obs_shape);
        write_tensor(dir.join("observations.gmat"), self.observations.data(), &dims)?;
        let mut csv = String::from("src,action,dst\n");
        for t in &self.transitions {
            writeln!(csv, "{},{},{}", t.src, t.action, t.dst).expect("string write");
        }
        fs::write(dir.join("transitions.csv"), csv)?;
        let manifest = Manifest { spec: self.spec.clone(), renderer: self.renderer.clone(), catalog: self.catalog.clone() };
        fs::write(dir.join("catalog.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("catalog.json"))?)?;
        manifest.spec.validate()?;
        manifest.catalog.validate(&manifest.spec)?;
        let obs_shape = manifest.renderer.obs_shape(&manifest.spec)?;
        let (data, dims) = read_tensor(dir.join("observations.gmat"))?;
        let n = manifest.spec.enumerable_order()?;
        if dims.first() != Some(&n) || dims[1..] != obs_shape[..] {
            return Err(EnvError::Inconsistent(format!("observation dims {dims:?} vs {n} states of {obs_shape:?}")));
        }
        let dim = obs_shape.iter().product();
        let observations = Tensor::new(data, vec![n, dim]).expect("dims checked");
        let text = fs::read_to_string(dir.join("transitions.csv"))?;
        let mut lines = text.lines();
        if lines.next() != Some("src,action,dst") {
            return Err(EnvError::Format("transitions.csv must start with the header src,action,dst".into()));
        }
        let transitions = lines
            .enumerate()
            .map(|(i, line)| parse_transition(line).ok_or_else(|| EnvError::Format(format!("transitions.csv line {}: {line:?}", i + 2))))
            .collect::<Result<Vec<_>>>()?;
        let ds = TransitionDataset {
            spec: manifest.spec,
            catalog: manifest.catalog,
            renderer: manifest.renderer,
            obs_shape,
            observations,
            transitions,
        };
        ds.check_consistency()?;
        Ok(ds)
    }
}

fn parse_transition(line: &str) -> Option<Transition> {
    let mut it = line.split(',').map(|s| s.trim().parse::<usize>().ok());
    let t = Transition { src: it.next()??, action: it.next()??, dst: it.next()?? };
    it.next().is_none().then_some(t)
}

/// One transition per `(state, action)` pair, state-major.
pub fn gen_full_transitions(spec: &GroupSpec, catalog: &ActionCatalog, renderer: &Renderer) -> Result<TransitionDataset> {
    catalog.validate(spec)?;
    let n = spec.enumerable_order()?;
    if n.saturating_mul(catalog.len()) > ORDER_LIMIT {
        return Err(EnvError::Limit(format!("{n} states × {} actions exceeds {ORDER_LIMIT}", catalog.len())));
    }
    let obs_shape = renderer.obs_shape(spec)?;
    let observations = renderer.render_all(spec)?;
    let mut transitions = Vec::with_capacity(n * catalog.len());
    for src in 0..n {
        let w = spec.state_at(src);
        for a in &catalog.actions {
            let dst = spec.state_index(&spec.apply(&a.element, &w)?);
            transitions.push(Transition { src, action: a.id, dst });
        }
    }
    Ok(TransitionDataset { spec: spec.clone(), catalog: catalog.clone(), renderer: renderer.clone(), obs_shape, observations, transitions })
}

/// Keeps `n_a` uniformly chosen distinct actions per source state.
pub fn subsample_iid(ds: &TransitionDataset, n_a: usize, seed: u64) -> Result<TransitionDataset> {
    if n_a == 0 || n_a > ds.catalog.len() {
        return Err(EnvError::InvalidArgument(format!("n_a = {n_a} must lie in 1..={}", ds.catalog.len())));
    }
    let mut by_src: Vec<Vec<Transition>> = vec![Vec::new(); ds.n_states()];
    for t in &ds.transitions {
        by_src[t.src].push(*t);
    }
    let mut r = rng(seed);
    let mut kept = Vec::with_capacity(ds.n_states() * n_a);
    for (src, group) in by_src.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if group.len() < n_a {
            return Err(EnvError::InvalidArgument(format!("state {src} has only {} transitions", group.len())));
        }
        let mut idx = sample(&mut r, group.len(), n_a).into_vec();
        idx.sort_unstable();
        kept.extend(idx.into_iter().map(|i| group[i]));
    }
    Ok(ds.with_transitions(kept))
}

/// Splits by action id: allowed actions train, the rest are held out.
pub fn ood_split(ds: &TransitionDataset, allowed: &BTreeSet<usize>) -> Result<(TransitionDataset, TransitionDataset)> {
    if allowed.is_empty() {
        return Err(EnvError::InvalidArgument("allowed action set is empty".into()));
    }
    if let Some(bad) = allowed.iter().find(|&&a| a >= ds.catalog.len()) {
        return Err(EnvError::InvalidArgument(format!("action {bad} is not in the catalog")));
    }
    Ok(ood_split_where(ds, |t| allowed.contains(&t.action)))
}

/// Splits by an arbitrary transition predicate, preserving order.
pub fn ood_split_where(ds: &TransitionDataset, keep: impl Fn(&Transition) -> bool) -> (TransitionDataset, TransitionDataset) {
    let (train, held): (Vec<_>, Vec<_>) = ds.transitions.iter().partition(|t| keep(t));
    (ds.with_transitions(train), ds.with_transitions(held))
}

/// Dials split where an object may rotate only while it occupies the
/// rightmost tile. Permutation actions are always kept.
pub fn ood_split_rightmost(ds: &TransitionDataset) -> Result<(TransitionDataset, TransitionDataset)> {
    let n = match &ds.renderer {
        Renderer::Dials { angles, .. } => angles.len(),
        other => return Err(EnvError::Mismatch(format!("rightmost split needs a dials renderer, got {other:?}"))),
    };
    let states = ds.spec.states()?;
    Ok(ood_split_where(ds, |t| {
        let factor = ds.catalog.actions[t.action].true_factor;
        if factor == 0 {
            return true;
        }
        match &states[t.src].coords[0] {
            Component::Perm(slots) => slots[factor - 1] == n - 1,
            Component::Cyclic(_) => false,
        }
    }))
}
