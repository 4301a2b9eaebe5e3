//! Nested Clenshaw–Curtis rules, admissible multi-index sets and the
//! combination-technique assembly of anisotropic sparse quadratures.
//!
//! All rules integrate against the uniform probability density on
//! `[-1, 1]^n`, so the weights of every rule sum to one. Nodes are identified
//! by a [`NodeKey`]: the integer position of the node on the finest supported
//! Clenshaw–Curtis level. Keys are exact, so nodes shared between levels are
//! merged without any floating-point comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error as StdError;
use std::fmt;
use std::sync::OnceLock;

use serde::Serialize;
use thiserror::Error;

/// Finest level representable by a [`NodeKey`].
pub const KEY_LEVEL: u32 = 20;

/// Default per-dimension level cap for multi-index sets.
pub const DEFAULT_MAX_LEVEL: u32 = 10;

#[derive(Debug, Error)]
pub enum SparseGridError {
    #[error("quadrature levels are 1-based; level 0 is invalid")]
    ZeroLevel,
    #[error("level {level} exceeds the cap {cap}")]
    LevelCapExceeded { level: u32, cap: u32 },
    #[error("multi-index has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stochastic dimension must be at least 1")]
    ZeroDimension,
    #[error("operation requires a nonempty index set")]
    EmptySet,
    #[error("index set is not admissible")]
    NotAdmissible,
    #[error("multi-index {0} is not a forward neighbor of the set")]
    NotANeighbor(MultiIndex),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Failure of an integrand evaluation at a quadrature node.
#[derive(Debug, Error)]
#[error("integrand evaluation failed at node {coords:?}: {source}")]
pub struct IntegrationError {
    pub coords: Vec<f64>,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

/// Refinement levels `(i_1, ..., i_n)`, one per stochastic dimension, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(levels: Vec<u32>) -> Result<Self, SparseGridError> {
        if levels.is_empty() {
            return Err(SparseGridError::ZeroDimension);
        }
        if levels.contains(&0) {
            return Err(SparseGridError::ZeroLevel);
        }
        Ok(Self(levels))
    }

    pub fn unit(dim: usize) -> Self {
        Self(vec![1; dim])
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn max_level(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(1)
    }

    /// `self + e_j`.
    pub fn forward(&self, j: usize) -> Self {
        let mut levels = self.0.clone();
        levels[j] += 1;
        Self(levels)
    }

    /// `self - e_j`, or `None` when that would leave level 1.
    pub fn backward(&self, j: usize) -> Option<Self> {
        if self.0[j] <= 1 {
            return None;
        }
        let mut levels = self.0.clone();
        levels[j] -= 1;
        Some(Self(levels))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (j, l) in self.0.iter().enumerate() {
            if j > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, ")")
    }
}

/// A finite set of multi-indices of a fixed dimension.
///
/// Sets built through [`MultiIndexSet::unit`] and grown only through
/// [`MultiIndexSet::insert_neighbor`] are admissible by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiIndexSet {
    dim: usize,
    max_level: u32,
    indices: BTreeSet<MultiIndex>,
}

impl MultiIndexSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            max_level: DEFAULT_MAX_LEVEL,
            indices: BTreeSet::new(),
        }
    }

    /// The level-one set `{(1, ..., 1)}`.
    pub fn unit(dim: usize) -> Self {
        let mut set = Self::empty(dim);
        set.indices.insert(MultiIndex::unit(dim));
        set
    }

    /// The full rectangular set `{1..=levels[0]} x ... x {1..=levels[n-1]}`.
    pub fn rectangular(levels: &[u32]) -> Result<Self, SparseGridError> {
        if levels.is_empty() {
            return Err(SparseGridError::ZeroDimension);
        }
        if levels.contains(&0) {
            return Err(SparseGridError::ZeroLevel);
        }
        let mut set = Self::empty(levels.len());
        set.max_level = set.max_level.max(levels.iter().copied().max().unwrap_or(1));
        for levels in tensor_indices(levels) {
            set.indices.insert(MultiIndex(levels));
        }
        Ok(set)
    }

    /// Builds a set from arbitrary indices. Admissibility is not enforced.
    pub fn from_indices<I>(dim: usize, indices: I) -> Result<Self, SparseGridError>
    where
        I: IntoIterator<Item = MultiIndex>,
    {
        if dim == 0 {
            return Err(SparseGridError::ZeroDimension);
        }
        let mut set = Self::empty(dim);
        for index in indices {
            if index.dim() != dim {
                return Err(SparseGridError::DimensionMismatch {
                    expected: dim,
                    got: index.dim(),
                });
            }
            set.max_level = set.max_level.max(index.max_level());
            set.indices.insert(index);
        }
        Ok(set)
    }

    pub fn with_max_level(mut self, max_level: u32) -> Self {
        self.max_level = max_level.min(KEY_LEVEL);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: &MultiIndex) -> bool {
        self.indices.contains(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.indices.iter()
    }

    /// True iff every backward neighbor of every member is a member.
    pub fn is_admissible(&self) -> bool {
        self.indices.iter().all(|k| self.backward_closed(k))
    }

    fn backward_closed(&self, k: &MultiIndex) -> bool {
        (0..k.dim()).all(|j| match k.backward(j) {
            Some(b) => self.indices.contains(&b),
            None => true,
        })
    }

    /// Forward neighbors `N(I) = { i not in I | I + {i} admissible }`.
    pub fn neighbors(&self) -> Result<BTreeSet<MultiIndex>, SparseGridError> {
        if self.indices.is_empty() {
            return Err(SparseGridError::EmptySet);
        }
        let mut out = BTreeSet::new();
        for k in &self.indices {
            for j in 0..self.dim {
                let cand = k.forward(j);
                if !self.indices.contains(&cand) && self.backward_closed(&cand) {
                    out.insert(cand);
                }
            }
        }
        Ok(out)
    }

    /// Adds a forward neighbor, preserving admissibility.
    pub fn insert_neighbor(&mut self, index: MultiIndex) -> Result<(), SparseGridError> {
        if index.dim() != self.dim {
            return Err(SparseGridError::DimensionMismatch {
                expected: self.dim,
                got: index.dim(),
            });
        }
        if index.max_level() > self.max_level {
            return Err(SparseGridError::LevelCapExceeded {
                level: index.max_level(),
                cap: self.max_level,
            });
        }
        if self.indices.contains(&index) || !self.backward_closed(&index) {
            return Err(SparseGridError::NotANeighbor(index));
        }
        self.indices.insert(index);
        Ok(())
    }

    /// `I ∪ N(I)`, which is again admissible.
    pub fn with_neighbors(&self) -> Result<Self, SparseGridError> {
        let mut out = self.clone();
        for n in self.neighbors()? {
            out.max_level = out.max_level.max(n.max_level());
            out.indices.insert(n);
        }
        Ok(out)
    }

    /// One multi-index per line, levels separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in &self.indices {
            let line: Vec<String> = k.levels().iter().map(|l| l.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the format written by [`MultiIndexSet::to_text`]. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self, SparseGridError> {
        let mut indices = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let levels = line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SparseGridError::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            let index = MultiIndex::new(levels).map_err(|e| SparseGridError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            match dim {
                None => dim = Some(index.dim()),
                Some(d) if d != index.dim() => {
                    return Err(SparseGridError::Parse {
                        line: lineno + 1,
                        msg: format!("expected {d} levels, found {}", index.dim()),
                    })
                }
                _ => {}
            }
            indices.push(index);
        }
        let dim = dim.ok_or(SparseGridError::EmptySet)?;
        Self::from_indices(dim, indices)
    }
}

/// Free-function form of [`MultiIndexSet::is_admissible`].
pub fn is_admissible(set: &MultiIndexSet) -> bool {
    set.is_admissible()
}

/// Free-function form of [`MultiIndexSet::neighbors`].
pub fn neighbors(set: &MultiIndexSet) -> Result<BTreeSet<MultiIndex>, SparseGridError> {
    set.neighbors()
}

fn tensor_indices(levels: &[u32]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![Vec::new()];
    for &l in levels {
        let mut next = Vec::with_capacity(out.len() * l as usize);
        for prefix in &out {
            for v in 1..=l {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// A one-dimensional quadrature rule for the uniform density on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule1D {
    pub level: u32,
    /// Ascending.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Number of Clenshaw–Curtis nodes at `level`: 1, then `2^(level-1) + 1`.
pub fn cc_node_count(level: u32) -> usize {
    if level <= 1 {
        1
    } else {
        (1usize << (level - 1)) + 1
    }
}

/// Clenshaw–Curtis node `j` (ascending order) of a rule with `n + 1` nodes.
///
/// Written as a sine so that the center is exactly `0` and the node set is
/// exactly antisymmetric.
fn cc_node(j: usize, n: usize) -> f64 {
    let num = 2.0 * j as f64 - n as f64;
    (std::f64::consts::PI * num / (2.0 * n as f64)).sin()
}

fn compute_cc_rule(level: u32) -> Rule1D {
    if level == 1 {
        return Rule1D {
            level,
            nodes: vec![0.0],
            weights: vec![1.0],
        };
    }
    let m = cc_node_count(level);
    let n = m - 1;
    let half = n / 2;
    let nodes: Vec<f64> = (0..m).map(|j| cc_node(j, n)).collect();
    let mut weights = vec![0.0; m];
    for j in 0..=half {
        let theta = std::f64::consts::PI * j as f64 / n as f64;
        let mut s = 0.0;
        for k in 1..=half {
            let b = if k == half { 1.0 } else { 2.0 };
            let kk = k as f64;
            s += b / (4.0 * kk * kk - 1.0) * (2.0 * kk * theta).cos();
        }
        let c = if j == 0 { 1.0 } else { 2.0 };
        // 0.5: uniform density on [-1, 1]
        let w = 0.5 * c / n as f64 * (1.0 - s);
        weights[j] = w;
        weights[n - j] = w;
    }
    Rule1D { level, nodes, weights }
}

fn cc_rule_cached(level: u32) -> &'static Rule1D {
    static RULES: [OnceLock<Rule1D>; KEY_LEVEL as usize + 1] = [const { OnceLock::new() }; KEY_LEVEL as usize + 1];
    RULES[level as usize].get_or_init(|| compute_cc_rule(level))
}

/// The nested Clenshaw–Curtis rule of the given level.
pub fn cc_rule(level: u32) -> Result<Rule1D, SparseGridError> {
    check_level(level)?;
    Ok(cc_rule_cached(level).clone())
}

fn check_level(level: u32) -> Result<(), SparseGridError> {
    if level == 0 {
        return Err(SparseGridError::ZeroLevel);
    }
    if level > KEY_LEVEL {
        return Err(SparseGridError::LevelCapExceeded { level, cap: KEY_LEVEL });
    }
    Ok(())
}

/// Position of node `j` of a level-`level` rule on the finest key level.
fn key_position(level: u32, j: usize) -> u32 {
    if level == 1 {
        1 << (KEY_LEVEL - 2)
    } else {
        (j as u32) << (KEY_LEVEL - level)
    }
}

/// Coordinate of a key position.
pub fn key_coordinate(position: u32) -> f64 {
    cc_node(position as usize, 1usize << (KEY_LEVEL - 1))
}

/// One-dimensional difference `Δ^level[h]`: `E^1[h]` at level one and
/// `E^level[h] - E^(level-1)[h]` above.
pub fn difference_apply<R, H>(level: u32, rule: R, mut h: H) -> Result<f64, SparseGridError>
where
    R: Fn(u32) -> Result<Rule1D, SparseGridError>,
    H: FnMut(f64) -> f64,
{
    let fine = rule(level)?;
    let mut value: f64 = fine.nodes.iter().zip(&fine.weights).map(|(&x, &w)| w * h(x)).sum();
    if level > 1 {
        let coarse = rule(level - 1)?;
        value -= coarse
            .nodes
            .iter()
            .zip(&coarse.weights)
            .map(|(&x, &w)| w * h(x))
            .sum::<f64>();
    }
    Ok(value)
}

/// Exact identity of a sparse-grid node.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey(Vec<u32>);

impl NodeKey {
    pub fn positions(&self) -> &[u32] {
        &self.0
    }

    pub fn coords(&self) -> Vec<f64> {
        self.0.iter().map(|&p| key_coordinate(p)).collect()
    }

    /// Key of an arbitrary point, if it lies on the finest key level.
    pub fn from_coords(coords: &[f64]) -> Option<Self> {
        let n = 1usize << (KEY_LEVEL - 1);
        let mut out = Vec::with_capacity(coords.len());
        for &x in coords {
            if !(-1.0..=1.0).contains(&x) {
                return None;
            }
            let j = (n as f64 * (1.0 + 2.0 / std::f64::consts::PI * x.asin()) / 2.0).round();
            let j = j as usize;
            if cc_node(j, n).to_bits() != x.to_bits() {
                return None;
            }
            out.push(j as u32);
        }
        Some(Self(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadPoint {
    pub coords: Vec<f64>,
    pub weight: f64,
}

/// A signed node → weight map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseQuadrature {
    dim: usize,
    points: BTreeMap<NodeKey, QuadPoint>,
}

impl SparseQuadrature {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            points: BTreeMap::new(),
        }
    }

    /// Tensor product of Clenshaw–Curtis rules at the given levels.
    pub fn tensor(levels: &[u32]) -> Result<Self, SparseGridError> {
        let mut q = Self::new(levels.len());
        q.add_tensor(levels, 1.0)?;
        Ok(q)
    }

    /// The tensor difference `Δ^i` expanded by the combination technique.
    pub fn difference(index: &MultiIndex) -> Result<Self, SparseGridError> {
        let mut q = Self::new(index.dim());
        q.add_difference(index, 1.0)?;
        Ok(q)
    }

    /// `E_I = Σ_{i ∈ I} Δ^i`.
    pub fn assemble(set: &MultiIndexSet) -> Result<Self, SparseGridError> {
        if set.is_empty() {
            return Err(SparseGridError::EmptySet);
        }
        let mut q = Self::new(set.dim());
        for i in set.iter() {
            q.add_difference(i, 1.0)?;
        }
        Ok(q)
    }

    /// `E_N(I) = Σ_{i ∈ N(I)} Δ^i`, the forward-neighbor truncation estimate.
    pub fn neighbor_sum(set: &MultiIndexSet) -> Result<Self, SparseGridError> {
        let mut q = Self::new(set.dim());
        for i in set.neighbors()? {
            q.add_difference(&i, 1.0)?;
        }
        Ok(q)
    }

    fn add_difference(&mut self, index: &MultiIndex, scale: f64) -> Result<(), SparseGridError> {
        let active: Vec<usize> = (0..index.dim()).filter(|&j| index.levels()[j] > 1).collect();
        for mask in 0u32..(1u32 << active.len()) {
            let mut levels = index.levels().to_vec();
            let mut sign = 1.0;
            for (b, &j) in active.iter().enumerate() {
                if mask & (1 << b) != 0 {
                    levels[j] -= 1;
                    sign = -sign;
                }
            }
            self.add_tensor(&levels, sign * scale)?;
        }
        Ok(())
    }

    fn add_tensor(&mut self, levels: &[u32], scale: f64) -> Result<(), SparseGridError> {
        if levels.len() != self.dim {
            return Err(SparseGridError::DimensionMismatch {
                expected: self.dim,
                got: levels.len(),
            });
        }
        for &l in levels {
            check_level(l)?;
        }
        let rules: Vec<&Rule1D> = levels.iter().map(|&l| cc_rule_cached(l)).collect();
        let mut counters = vec![0usize; levels.len()];
        loop {
            let mut positions = Vec::with_capacity(levels.len());
            let mut coords = Vec::with_capacity(levels.len());
            let mut w = scale;
            for (d, rule) in rules.iter().enumerate() {
                let j = counters[d];
                positions.push(key_position(rule.level, j));
                coords.push(rule.nodes[j]);
                w *= rule.weights[j];
            }
            self.points
                .entry(NodeKey(positions))
                .and_modify(|p| p.weight += w)
                .or_insert(QuadPoint { coords, weight: w });
            // odometer increment
            let mut d = 0;
            loop {
                if d == levels.len() {
                    return Ok(());
                }
                counters[d] += 1;
                if counters[d] < rules[d].nodes.len() {
                    break;
                }
                counters[d] = 0;
                d += 1;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points in canonical key order.
    pub fn iter(&self) -> impl Iterator<Item = (&NodeKey, &QuadPoint)> {
        self.points.iter()
    }

    pub fn get(&self, key: &NodeKey) -> Option<&QuadPoint> {
        self.points.get(key)
    }

    pub fn contains(&self, key: &NodeKey) -> bool {
        self.points.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &NodeKey> {
        self.points.keys()
    }

    pub fn weight_sum(&self) -> f64 {
        self.points.values().map(|p| p.weight).sum()
    }

    /// `Σ_j w_j h(y_j)`, reduced in canonical key order.
    pub fn integrate<F, E>(&self, mut h: F) -> Result<f64, IntegrationError>
    where
        F: FnMut(&NodeKey, &[f64]) -> Result<f64, E>,
        E: Into<Box<dyn StdError + Send + Sync>>,
    {
        let mut acc = 0.0;
        for (key, p) in &self.points {
            let v = h(key, &p.coords).map_err(|e| IntegrationError {
                coords: p.coords.clone(),
                source: e.into(),
            })?;
            acc += p.weight * v;
        }
        Ok(acc)
    }

    /// Componentwise version of [`SparseQuadrature::integrate`].
    pub fn integrate_vector<F, E>(&self, len: usize, mut h: F) -> Result<Vec<f64>, IntegrationError>
    where
        F: FnMut(&NodeKey, &[f64]) -> Result<Vec<f64>, E>,
        E: Into<Box<dyn StdError + Send + Sync>>,
    {
        let mut acc = vec![0.0; len];
        for (key, p) in &self.points {
            let v = h(key, &p.coords).map_err(|e| IntegrationError {
                coords: p.coords.clone(),
                source: e.into(),
            })?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += p.weight * x;
            }
        }
        Ok(acc)
    }

    /// One node per line: coordinates followed by the weight.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in self.points.values() {
            for x in &p.coords {
                s.push_str(&format!("{x:e} "));
            }
            s.push_str(&format!("{:e}\n", p.weight));
        }
        s
    }
}

/// `|Δ^i[h]|` for every forward neighbor `i` of `set`.
///
/// `h` is evaluated once per distinct node.
pub fn truncation_terms<F, E>(set: &MultiIndexSet, mut h: F) -> Result<BTreeMap<MultiIndex, f64>, IntegrationError>
where
    F: FnMut(&NodeKey, &[f64]) -> Result<f64, E>,
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    let neighbors = set.neighbors().map_err(|e| IntegrationError {
        coords: Vec::new(),
        source: Box::new(e),
    })?;
    let mut memo: BTreeMap<NodeKey, f64> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for i in neighbors {
        let diff = SparseQuadrature::difference(&i).map_err(|e| IntegrationError {
            coords: Vec::new(),
            source: Box::new(e),
        })?;
        let v = diff.integrate(|key, coords| -> Result<f64, Box<dyn StdError + Send + Sync>> {
            if let Some(&v) = memo.get(key) {
                return Ok(v);
            }
            let v = h(key, coords).map_err(Into::into)?;
            memo.insert(key.clone(), v);
            Ok(v)
        })?;
        out.insert(i, v.abs());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mi(v: &[u32]) -> MultiIndex {
        MultiIndex::new(v.to_vec()).unwrap()
    }

    fn set(dim: usize, v: &[&[u32]]) -> MultiIndexSet {
        MultiIndexSet::from_indices(dim, v.iter().map(|l| mi(l))).unwrap()
    }

    #[test]
    fn admissibility_examples() {
        assert!(set(2, &[&[1, 1]]).is_admissible());
        assert!(set(2, &[&[1, 1], &[2, 1], &[1, 2]]).is_admissible());
        assert!(!set(2, &[&[1, 1], &[3, 1]]).is_admissible());
    }

    #[test]
    fn neighbor_examples() {
        let n: Vec<_> = set(2, &[&[1, 1]]).neighbors().unwrap().into_iter().collect();
        assert_eq!(n, vec![mi(&[1, 2]), mi(&[2, 1])]);

        let n: Vec<_> = set(2, &[&[1, 1], &[2, 1]]).neighbors().unwrap().into_iter().collect();
        assert_eq!(n, vec![mi(&[1, 2]), mi(&[3, 1])]);

        let n: Vec<_> = set(1, &[&[1], &[2]]).neighbors().unwrap().into_iter().collect();
        assert_eq!(n, vec![mi(&[3])]);

        assert!(matches!(
            MultiIndexSet::empty(2).neighbors(),
            Err(SparseGridError::EmptySet)
        ));
    }

    #[test]
    fn neighbors_of_l_shape_require_both_parents() {
        // (2,2) needs (1,2) and (2,1) present
        let s = set(2, &[&[1, 1], &[2, 1], &[1, 2]]);
        let n = s.neighbors().unwrap();
        assert!(n.contains(&mi(&[2, 2])));
        let s = set(2, &[&[1, 1], &[2, 1], &[3, 1]]);
        assert!(!s.neighbors().unwrap().contains(&mi(&[2, 2])));
    }

    #[test]
    fn insert_neighbor_checks() {
        let mut s = MultiIndexSet::unit(2).with_max_level(2);
        assert!(matches!(
            s.insert_neighbor(mi(&[2, 2])),
            Err(SparseGridError::NotANeighbor(_))
        ));
        s.insert_neighbor(mi(&[2, 1])).unwrap();
        assert!(matches!(
            s.insert_neighbor(mi(&[3, 1])),
            Err(SparseGridError::LevelCapExceeded { level: 3, cap: 2 })
        ));
        assert!(s.is_admissible());
    }

    #[test]
    fn cc_rule_examples() {
        let r1 = cc_rule(1).unwrap();
        assert_eq!(r1.nodes, vec![0.0]);
        assert_eq!(r1.weights, vec![1.0]);

        let r2 = cc_rule(2).unwrap();
        assert_eq!(r2.nodes, vec![-1.0, 0.0, 1.0]);
        for (w, e) in r2.weights.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!((w - e).abs() < 1e-15);
        }

        let r3 = cc_rule(3).unwrap();
        assert_eq!(r3.nodes.len(), 5);
        for x in &r2.nodes {
            assert!(r3.nodes.contains(x));
        }
        assert!(matches!(cc_rule(0), Err(SparseGridError::ZeroLevel)));
    }

    #[test]
    fn cc_rules_are_nested_and_normalized() {
        for level in 1..=10 {
            let r = cc_rule(level).unwrap();
            assert_eq!(r.nodes.len(), cc_node_count(level));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            if level > 1 {
                let coarse = cc_rule(level - 1).unwrap();
                for x in &coarse.nodes {
                    assert!(r.nodes.iter().any(|y| y.to_bits() == x.to_bits()));
                }
            }
        }
    }

    #[test]
    fn cc_rule_exact_for_low_degree_moments() {
        // a rule with m nodes is exact for degree m-1 (m odd: degree m)
        for level in 2..=7 {
            let r = cc_rule(level).unwrap();
            let m = r.nodes.len();
            for p in 0..m {
                let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 1.0 / (p as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "level {level} degree {p}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn difference_examples() {
        let c = 3.5;
        assert_eq!(difference_apply(1, cc_rule, |_| c).unwrap(), c);
        assert!(difference_apply(2, cc_rule, |_| c).unwrap().abs() < 1e-15);
        let d = difference_apply(2, cc_rule, |x| x * x).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unit_set_assembles_to_origin() {
        let q = SparseQuadrature::assemble(&MultiIndexSet::unit(3)).unwrap();
        assert_eq!(q.len(), 1);
        let (_, p) = q.iter().next().unwrap();
        assert_eq!(p.coords, vec![0.0, 0.0, 0.0]);
        assert_eq!(p.weight, 1.0);
    }

    #[test]
    fn rectangular_sets_match_tensor_rules() {
        for l1 in 1..=4 {
            for l2 in 1..=4 {
                let s = MultiIndexSet::rectangular(&[l1, l2]).unwrap();
                let sparse = SparseQuadrature::assemble(&s).unwrap();
                let tensor = SparseQuadrature::tensor(&[l1, l2]).unwrap();
                assert_eq!(sparse.len(), tensor.len());
                for (k, p) in tensor.iter() {
                    let q = sparse.get(k).unwrap();
                    assert!((q.weight - p.weight).abs() < 1e-12);
                    assert_eq!(q.coords, p.coords);
                }
            }
        }
    }

    #[test]
    fn integrate_examples() {
        let s = MultiIndexSet::rectangular(&[2, 2]).unwrap();
        let q = SparseQuadrature::assemble(&s).unwrap();
        let one = q.integrate(|_, _| Ok::<_, std::convert::Infallible>(1.0)).unwrap();
        assert!((one - 1.0).abs() < 1e-15);
        let odd = q.integrate(|_, y| Ok::<_, std::convert::Infallible>(y[0])).unwrap();
        assert!(odd.abs() < 1e-15);
        let v = q
            .integrate(|_, y| Ok::<_, std::convert::Infallible>(y[0] * y[0] * y[1] * y[1]))
            .unwrap();
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_reports_failing_node() {
        let q = SparseQuadrature::tensor(&[2]).unwrap();
        let err = q
            .integrate(|_, y| if y[0] > 0.5 { Err("boom") } else { Ok(1.0) })
            .unwrap_err();
        assert_eq!(err.coords, vec![1.0]);
    }

    #[test]
    fn truncation_term_examples() {
        let unit = MultiIndexSet::unit(2);
        let t = truncation_terms(&unit, |_, _| Ok::<_, std::convert::Infallible>(2.0)).unwrap();
        assert!(t.values().all(|v| v.abs() < 1e-15));

        let t = truncation_terms(&unit, |_, y| Ok::<_, std::convert::Infallible>(y[0] * y[0])).unwrap();
        assert!((t[&mi(&[2, 1])] - 1.0 / 3.0).abs() < 1e-15);
        assert!(t[&mi(&[1, 2])].abs() < 1e-15);

        let t = truncation_terms(&unit, |_, y| {
            Ok::<_, std::convert::Infallible>((5.0 * y[0]).exp() + 0.01 * y[1])
        })
        .unwrap();
        assert!(t[&mi(&[2, 1])] > t[&mi(&[1, 2])]);
    }

    #[test]
    fn node_keys_round_trip_coordinates() {
        let q = SparseQuadrature::tensor(&[4, 3]).unwrap();
        for (k, p) in q.iter() {
            assert_eq!(&k.coords(), &p.coords);
            assert_eq!(NodeKey::from_coords(&p.coords).as_ref(), Some(k));
        }
        assert!(NodeKey::from_coords(&[0.3]).is_none());
    }

    #[test]
    fn text_round_trip() {
        let s = set(2, &[&[1, 1], &[2, 1], &[1, 2], &[3, 1]]);
        let t = s.to_text();
        assert_eq!(t, "1 1\n1 2\n2 1\n3 1\n");
        let back = MultiIndexSet::from_text(&t).unwrap();
        assert_eq!(back.to_text(), t);
        assert!(MultiIndexSet::from_text("1 1\n2\n").is_err());
        assert!(MultiIndexSet::from_text("1 0\n").is_err());
    }
}
