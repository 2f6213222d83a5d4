//! Finite group algebra for direct products of cyclic and symmetric factors.
//!
//! Elements are stored componentwise. Cyclic parts are residues, symmetric
//! parts are permutations in image form (`p[i]` is the image of `i`).
//! Composition follows the right-to-left convention `(a∘b)(i) = a[b[i]]`.
//!
//! World states use the same representation as elements: the environments
//! built on top of this module are regular actions of the group on itself,
//! so every state has a dense enumeration index shared with the elements.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest group order that may be enumerated.
pub const ORDER_LIMIT: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("structure mismatch: {0}")]
    Mismatch(String),
    #[error("invalid component: {0}")]
    InvalidComponent(String),
    #[error("group order {order} exceeds the enumeration limit {limit}")]
    OrderLimit { order: u128, limit: usize },
    #[error("minimal dimension is ambiguous: either {lower} or {upper}")]
    AmbiguousDimension { lower: usize, upper: usize },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
}

pub type Result<T> = std::result::Result<T, GroupError>;

/// One direct factor of a [`GroupSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorSpec {
    Cyclic(usize),
    Symmetric(usize),
}

impl FactorSpec {
    pub fn order(&self) -> u128 {
        match *self {
            FactorSpec::Cyclic(n) => n as u128,
            FactorSpec::Symmetric(n) => (1..=n as u128).fold(1u128, |acc, k| acc.saturating_mul(k)),
        }
    }

    pub fn degree(&self) -> usize {
        match *self {
            FactorSpec::Cyclic(n) | FactorSpec::Symmetric(n) => n,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.degree();
        if n < 2 {
            return Err(GroupError::InvalidComponent(format!(
                "{self:?}: factor size must be at least 2"
            )));
        }
        if let FactorSpec::Symmetric(n) = self {
            // 20! already overflows any enumerable range.
            if *n > 20 {
                return Err(GroupError::OrderLimit {
                    order: u128::MAX,
                    limit: ORDER_LIMIT,
                });
            }
        }
        Ok(())
    }

    pub fn identity(&self) -> Component {
        match *self {
            FactorSpec::Cyclic(_) => Component::Cyclic(0),
            FactorSpec::Symmetric(n) => Component::Perm((0..n).collect()),
        }
    }

    /// Checks that `c` is a valid part for this factor.
    pub fn check(&self, c: &Component) -> Result<()> {
        match (self, c) {
            (FactorSpec::Cyclic(n), Component::Cyclic(v)) if v < n => Ok(()),
            (FactorSpec::Symmetric(n), Component::Perm(p)) if p.len() == *n => {
                let mut seen = vec![false; *n];
                for &x in p {
                    if x >= *n || seen[x] {
                        return Err(GroupError::InvalidComponent(format!(
                            "{p:?} is not a permutation of 0..{n}"
                        )));
                    }
                    seen[x] = true;
                }
                Ok(())
            }
            _ => Err(GroupError::Mismatch(format!("{c:?} is not a part of {self:?}"))),
        }
    }

    pub fn compose(&self, a: &Component, b: &Component) -> Component {
        match (self, a, b) {
            (FactorSpec::Cyclic(n), Component::Cyclic(x), Component::Cyclic(y)) => {
                Component::Cyclic((x + y) % n)
            }
            (FactorSpec::Symmetric(_), Component::Perm(p), Component::Perm(q)) => {
                Component::Perm(q.iter().map(|&i| p[i]).collect())
            }
            _ => unreachable!("components checked against the factor"),
        }
    }

    pub fn inverse(&self, a: &Component) -> Component {
        match (self, a) {
            (FactorSpec::Cyclic(n), Component::Cyclic(x)) => Component::Cyclic((n - x) % n),
            (FactorSpec::Symmetric(_), Component::Perm(p)) => {
                let mut inv = vec![0; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                Component::Perm(inv)
            }
            _ => unreachable!("components checked against the factor"),
        }
    }

    /// Dense rank of a part in `0..order`. Permutations use lexicographic rank.
    pub fn rank(&self, c: &Component) -> usize {
        match c {
            Component::Cyclic(v) => *v,
            Component::Perm(p) => {
                let n = p.len();
                let mut rank = 0usize;
                for i in 0..n {
                    let smaller = p[i + 1..].iter().filter(|&&x| x < p[i]).count();
                    rank = rank * (n - i) + smaller;
                }
                rank
            }
        }
    }

    pub fn unrank(&self, mut r: usize) -> Component {
        match *self {
            FactorSpec::Cyclic(_) => Component::Cyclic(r),
            FactorSpec::Symmetric(n) => {
                let mut digits = vec![0; n];
                for i in (0..n).rev() {
                    let base = n - i;
                    digits[i] = r % base;
                    r /= base;
                }
                let mut pool: Vec<usize> = (0..n).collect();
                Component::Perm(digits.into_iter().map(|d| pool.remove(d)).collect())
            }
        }
    }
}

/// One componentwise part of an element or state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Component {
    Cyclic(usize),
    Perm(Vec<usize>),
}

/// Ordered direct product of factors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub factors: Vec<FactorSpec>,
}

/// A group element, one component per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupElement {
    pub parts: Vec<Component>,
}

/// A world state, one coordinate per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorldState {
    pub coords: Vec<Component>,
}

impl GroupSpec {
    pub fn new(factors: Vec<FactorSpec>) -> Result<Self> {
        let spec = GroupSpec { factors };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(GroupError::InvalidComponent("a group needs at least one factor".into()));
        }
        self.factors.iter().try_for_each(FactorSpec::validate)
    }

    /// Exact order, saturating at `u128::MAX`.
    pub fn order(&self) -> u128 {
        self.factors
            .iter()
            .fold(1u128, |acc, f| acc.saturating_mul(f.order()))
    }

    /// Order as `usize`, failing beyond [`ORDER_LIMIT`].
    pub fn enumerable_order(&self) -> Result<usize> {
        let order = self.order();
        if order > ORDER_LIMIT as u128 {
            return Err(GroupError::OrderLimit { order, limit: ORDER_LIMIT });
        }
        Ok(order as usize)
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement { parts: self.factors.iter().map(FactorSpec::identity).collect() }
    }

    pub fn check_element(&self, g: &GroupElement) -> Result<()> {
        self.check_parts(&g.parts)
    }

    pub fn check_state(&self, w: &WorldState) -> Result<()> {
        self.check_parts(&w.coords)
    }

    fn check_parts(&self, parts: &[Component]) -> Result<()> {
        if parts.len() != self.factors.len() {
            return Err(GroupError::Mismatch(format!(
                "expected {} components, found {}",
                self.factors.len(),
                parts.len()
            )));
        }
        self.factors.iter().zip(parts).try_for_each(|(f, c)| f.check(c))
    }

    pub fn compose(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
        self.check_element(a)?;
        self.check_element(b)?;
        Ok(self.compose_unchecked(a, b))
    }

    pub(crate) fn compose_unchecked(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement {
            parts: self
                .factors
                .iter()
                .zip(a.parts.iter().zip(&b.parts))
                .map(|(f, (x, y))| f.compose(x, y))
                .collect(),
        }
    }

    pub fn inverse(&self, g: &GroupElement) -> GroupElement {
        GroupElement {
            parts: self.factors.iter().zip(&g.parts).map(|(f, x)| f.inverse(x)).collect(),
        }
    }

    /// `g^m` for `m >= 0`.
    pub fn power(&self, g: &GroupElement, m: usize) -> GroupElement {
        (0..m).fold(self.identity(), |acc, _| self.compose_unchecked(g, &acc))
    }

    /// Left action on states: cyclic coordinates shift, slot arrays are
    /// composed on the left (`slots' = g ∘ slots`).
    pub fn apply(&self, g: &GroupElement, w: &WorldState) -> Result<WorldState> {
        self.check_element(g)?;
        self.check_state(w)?;
        Ok(self.apply_unchecked(g, w))
    }

    pub(crate) fn apply_unchecked(&self, g: &GroupElement, w: &WorldState) -> WorldState {
        WorldState {
            coords: self
                .factors
                .iter()
                .zip(g.parts.iter().zip(&w.coords))
                .map(|(f, (x, y))| f.compose(x, y))
                .collect(),
        }
    }

    /// Mixed-radix index, first factor most significant.
    pub fn index_of_parts(&self, parts: &[Component]) -> usize {
        self.factors
            .iter()
            .zip(parts)
            .fold(0usize, |acc, (f, c)| acc * f.order() as usize + f.rank(c))
    }

    pub fn index_of(&self, g: &GroupElement) -> usize {
        self.index_of_parts(&g.parts)
    }

    pub fn state_index(&self, w: &WorldState) -> usize {
        self.index_of_parts(&w.coords)
    }

    pub fn parts_at(&self, mut idx: usize) -> Vec<Component> {
        let mut parts = Vec::with_capacity(self.factors.len());
        for f in self.factors.iter().rev() {
            let n = f.order() as usize;
            parts.push(f.unrank(idx % n));
            idx /= n;
        }
        parts.reverse();
        parts
    }

    pub fn element_at(&self, idx: usize) -> GroupElement {
        GroupElement { parts: self.parts_at(idx) }
    }

    pub fn state_at(&self, idx: usize) -> WorldState {
        WorldState { coords: self.parts_at(idx) }
    }

    pub fn elements(&self) -> Result<Vec<GroupElement>> {
        let n = self.enumerable_order()?;
        Ok((0..n).map(|i| self.element_at(i)).collect())
    }

    pub fn states(&self) -> Result<Vec<WorldState>> {
        let n = self.enumerable_order()?;
        Ok((0..n).map(|i| self.state_at(i)).collect())
    }

    /// The element whose only non-identity part is `part` in factor `k`.
    pub fn embed(&self, k: usize, part: Component) -> Result<GroupElement> {
        let f = self
            .factors
            .get(k)
            .ok_or_else(|| GroupError::Mismatch(format!("no factor {k}")))?;
        f.check(&part)?;
        let mut g = self.identity();
        g.parts[k] = part;
        Ok(g)
    }

    /// Factors in which `g` is not the identity.
    pub fn support(&self, g: &GroupElement) -> Vec<usize> {
        self.factors
            .iter()
            .zip(&g.parts)
            .enumerate()
            .filter(|(_, (f, c))| f.identity() != **c)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn is_identity(&self, g: &GroupElement) -> bool {
        self.support(g).is_empty()
    }

    /// Closure of `generators` under composition. Returned elements are
    /// sorted by enumeration index.
    pub fn generated_subgroup(&self, generators: &[GroupElement]) -> Result<Vec<GroupElement>> {
        let order = self.enumerable_order()?;
        for g in generators {
            self.check_element(g)?;
        }
        let mut seen = vec![false; order];
        let e = self.identity();
        seen[self.index_of(&e)] = true;
        let mut queue = VecDeque::from([e]);
        while let Some(x) = queue.pop_front() {
            for s in generators {
                let y = self.compose_unchecked(s, &x);
                let idx = self.index_of(&y);
                if !seen[idx] {
                    seen[idx] = true;
                    queue.push_back(y);
                }
            }
        }
        Ok(seen
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| self.element_at(i))
            .collect())
    }
}

/// One available action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    pub id: usize,
    pub element: GroupElement,
    /// Ground-truth factor label, used for evaluation only.
    pub true_factor: usize,
}

/// The agent's action set together with the composition depth bound `M`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionCatalog {
    pub actions: Vec<Action>,
    pub max_power: usize,
}

impl ActionCatalog {
    /// Builds a catalog with dense ids from `(element, true_factor)` pairs.
    pub fn new(spec: &GroupSpec, elements: Vec<(GroupElement, usize)>, max_power: usize) -> Result<Self> {
        if elements.is_empty() {
            return Err(GroupError::InvalidCatalog("catalog has no actions".into()));
        }
        if max_power == 0 {
            return Err(GroupError::InvalidCatalog("M must be at least 1".into()));
        }
        let mut actions = Vec::with_capacity(elements.len());
        for (id, (element, true_factor)) in elements.into_iter().enumerate() {
            spec.check_element(&element)?;
            if true_factor >= spec.factors.len() {
                return Err(GroupError::InvalidCatalog(format!(
                    "action {id}: factor label {true_factor} out of range"
                )));
            }
            actions.push(Action { id, element, true_factor });
        }
        Ok(ActionCatalog { actions, max_power })
    }

    pub fn validate(&self, spec: &GroupSpec) -> Result<()> {
        for (i, a) in self.actions.iter().enumerate() {
            if a.id != i {
                return Err(GroupError::InvalidCatalog(format!("ids must be dense, found {} at {i}", a.id)));
            }
            spec.check_element(&a.element)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `+1`/`-1` on every cyclic factor (a single action when `n = 2`), and
    /// every non-identity permutation on every symmetric factor.
    pub fn plus_minus(spec: &GroupSpec, max_power: usize) -> Result<Self> {
        let mut elements = Vec::new();
        for (k, f) in spec.factors.iter().enumerate() {
            match *f {
                FactorSpec::Cyclic(n) => {
                    elements.push((spec.embed(k, Component::Cyclic(1))?, k));
                    if n > 2 {
                        elements.push((spec.embed(k, Component::Cyclic(n - 1))?, k));
                    }
                }
                FactorSpec::Symmetric(_) => {
                    for r in 1..f.order() as usize {
                        elements.push((spec.embed(k, f.unrank(r))?, k));
                    }
                }
            }
        }
        Self::new(spec, elements, max_power)
    }

    /// Draws a random catalog with one or two distinct non-identity actions
    /// per factor, resampling until the composition assumption holds.
    pub fn random_compliant<R: Rng>(
        spec: &GroupSpec,
        rng: &mut R,
        max_per_factor: usize,
        max_power: usize,
        include_identity: bool,
    ) -> Result<Self> {
        const ATTEMPTS: usize = 10_000;
        let max_per_factor = max_per_factor.max(1);
        for _ in 0..ATTEMPTS {
            let mut elements = Vec::new();
            for (k, f) in spec.factors.iter().enumerate() {
                let order = f.order() as usize;
                let count = rng.gen_range(1..=max_per_factor.min(order - 1));
                let mut ranks: Vec<usize> = (1..order).collect();
                ranks.shuffle(rng);
                ranks.truncate(count);
                ranks.sort_unstable();
                for r in ranks {
                    elements.push((spec.embed(k, f.unrank(r))?, k));
                }
            }
            if include_identity {
                elements.push((spec.identity(), 0));
            }
            let catalog = Self::new(spec, elements, max_power)?;
            if check_assumption_compo(&catalog, spec) {
                return Ok(catalog);
            }
        }
        Err(GroupError::InvalidCatalog(format!(
            "no compliant catalog found in {ATTEMPTS} draws"
        )))
    }

    /// Ground-truth partition of action ids by factor label.
    pub fn ground_truth_partition(&self) -> Vec<Vec<usize>> {
        let labels: BTreeSet<usize> = self.actions.iter().map(|a| a.true_factor).collect();
        labels
            .into_iter()
            .map(|k| self.actions.iter().filter(|a| a.true_factor == k).map(|a| a.id).collect())
            .collect()
    }
}

/// Every non-identity action is non-identity in exactly one factor.
pub fn check_assumption_disentangled(catalog: &ActionCatalog, spec: &GroupSpec) -> bool {
    catalog.actions.iter().all(|a| spec.support(&a.element).len() <= 1)
}

/// Brute-force check that every same-factor pair is related through a
/// power `u^m` (`1 <= m <= M`) of some available action, in one of the four
/// left/right forms.
pub fn check_assumption_compo(catalog: &ActionCatalog, spec: &GroupSpec) -> bool {
    let m_max = catalog.max_power;
    let powers: Vec<GroupElement> = catalog
        .actions
        .iter()
        .flat_map(|u| (1..=m_max).map(move |m| (u, m)))
        .map(|(u, m)| spec.power(&u.element, m))
        .collect();
    let same_factor = |a: &GroupElement, b: &GroupElement| {
        let (sa, sb) = (spec.support(a), spec.support(b));
        sa.is_empty() || sb.is_empty() || sa == sb
    };
    for (i, a) in catalog.actions.iter().enumerate() {
        for b in &catalog.actions[i + 1..] {
            let (g, h) = (&a.element, &b.element);
            if g == h || !same_factor(g, h) {
                continue;
            }
            let related = powers.iter().any(|p| {
                *g == spec.compose_unchecked(p, h)
                    || *g == spec.compose_unchecked(h, p)
                    || *h == spec.compose_unchecked(g, p)
                    || *h == spec.compose_unchecked(p, g)
            });
            if !related {
                return false;
            }
        }
    }
    true
}

/// Minimal dimension of a faithful real linear (`orthogonal = false`) or
/// special-orthogonal (`orthogonal = true`) representation.
pub fn minimal_dim(factor: FactorSpec, orthogonal: bool) -> Result<usize> {
    factor.validate()?;
    match (factor, orthogonal) {
        (FactorSpec::Cyclic(2), false) => Ok(1),
        (FactorSpec::Cyclic(_), _) => Ok(2),
        (FactorSpec::Symmetric(2), false) => Ok(1),
        (FactorSpec::Symmetric(2), true) => Ok(2),
        (FactorSpec::Symmetric(3), false) => Ok(2),
        (FactorSpec::Symmetric(3), true) => Ok(3),
        (FactorSpec::Symmetric(4), _) => Ok(3),
        (FactorSpec::Symmetric(n), false) => Ok(n - 1),
        (FactorSpec::Symmetric(n), true) => Err(GroupError::AmbiguousDimension { lower: n - 1, upper: n }),
    }
}
