//! Error indicators for the trust-region model and the two refinement
//! drivers that grow a sparse grid and reduced basis until the gradient and
//! objective conditions hold.
//!
//! All residual-based indicators use absolute quadrature weights, so they
//! stay nonnegative even though sparse-grid weights can be negative.
//! Truncation indicators are sums of `|Δ^i[h]|` over the forward neighbors.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::hdm::{solve_adjoint, solve_primal, HdmError, ModelProblem, NewtonOptions};
use crate::rom::{
    evaluate_rom, rom_qoi, solve_rom_primal, ReducedBasis, RomAdjoint, RomError, RomOptions, RomPrimal, SnapshotKind,
};
use crate::sparse_grid::{MultiIndex, MultiIndexSet, NodeKey, SparseGridError, SparseQuadrature};

/// Below this, `min{‖∇m‖, Δ}` is treated as zero and no refinement happens.
pub const MACHINE_FLOOR: f64 = 1e-14;

/// Multiple of machine epsilon used for the round-off level of a quadrature
/// of computed values.
const ROUNDOFF_FACTOR: f64 = 1e3;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    SparseGrid(#[from] SparseGridError),
    #[error("reduced solve failed at y = {y:?}: {source}")]
    Rom {
        y: Vec<f64>,
        #[source]
        source: RomError,
    },
    #[error("full-order solve failed at y = {y:?}: {source}")]
    Hdm {
        y: Vec<f64>,
        #[source]
        source: HdmError,
    },
    #[error("{driver} refinement did not finish within {steps} steps")]
    Budget { driver: &'static str, steps: usize },
    #[error("gradient condition cannot be met: every candidate node is sampled and the grid cannot grow ({0})")]
    Exhausted(String),
    #[error("model decrease must be positive, got {0:e}")]
    NonPositiveDecrease(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOptions {
    pub rom: RomOptions,
    pub newton: NewtonOptions,
    /// `(β1, β3, β4)`.
    pub betas: [f64; 3],
    /// `(α1, α2)`.
    pub alphas: [f64; 2],
    /// Refinement steps allowed per driver call.
    pub max_steps: usize,
    pub parallel: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            rom: RomOptions::default(),
            newton: NewtonOptions::default(),
            betas: [1.0, 1.0, 1.0],
            alphas: [1e-2, 1e-2],
            max_steps: 2000,
            parallel: true,
        }
    }
}

/// Query counters for the cost model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub hdm_primal: u64,
    /// Adjoint and sensitivity solves: one linear solve each.
    pub hdm_adjoint: u64,
    pub hdm_newton_iters: u64,
    pub rom_primal: u64,
    pub rom_adjoint: u64,
    pub rom_gn_iters: u64,
}

impl Counters {
    /// Average Newton iterations per primal HDM solve, at least one.
    pub fn mean_newton_iters(&self) -> f64 {
        mean_at_least_one(self.hdm_newton_iters, self.hdm_primal)
    }

    /// Average Gauss–Newton iterations per primal ROM solve, at least one.
    pub fn mean_gn_iters(&self) -> f64 {
        mean_at_least_one(self.rom_gn_iters, self.rom_primal)
    }
}

fn mean_at_least_one(total: u64, count: u64) -> f64 {
    if count == 0 {
        1.0
    } else {
        (total as f64 / count as f64).max(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    Gradient,
    Objective,
}

impl DriverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriverKind::Gradient => "gradient",
            DriverKind::Objective => "objective",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// A forward neighbor was added to the index set.
    Grid,
    /// HDM snapshots were added at the node with the largest primal residual.
    GreedyPrimal,
    /// HDM snapshots were added at the node with the largest adjoint residual.
    GreedyAdjoint,
    /// Every candidate node was already sampled, so the grid was refined.
    ExhaustedGrid,
    /// The requested tolerance lies below the round-off level of the indicator.
    Saturated,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Grid => "grid",
            EventKind::GreedyPrimal => "greedy-primal",
            EventKind::GreedyAdjoint => "greedy-adjoint",
            EventKind::ExhaustedGrid => "exhausted-grid",
            EventKind::Saturated => "saturated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementEvent {
    pub iteration: usize,
    pub driver: DriverKind,
    pub kind: EventKind,
    pub index: Option<MultiIndex>,
    pub node: Option<Vec<f64>>,
    /// 0 for the trust-region center, 1 for the trial point.
    pub mu_slot: Option<usize>,
    /// Indicator being reduced, before the event.
    pub before: f64,
    /// Same indicator after the event, once it has been re-evaluated.
    pub after: Option<f64>,
    pub threshold: f64,
    pub grid_size: usize,
    pub basis_size: usize,
}

/// Counters and the refinement log shared by all drivers of a run.
#[derive(Clone, Debug, Default)]
pub struct Tracker {
    pub iteration: usize,
    pub counters: Counters,
    pub events: Vec<RefinementEvent>,
    pending: Option<usize>,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, event: RefinementEvent) {
        self.events.push(event);
        self.pending = Some(self.events.len() - 1);
    }

    fn resolve(&mut self, value: impl Fn(EventKind) -> f64) {
        if let Some(i) = self.pending.take() {
            let e = &mut self.events[i];
            e.after = Some(value(e.kind));
        }
    }
}

/// Uniform density of `[-1, 1]^n`. Constant, kept explicit in the greedy
/// scores so that non-uniform densities only touch this function.
pub fn density(y: &[f64]) -> f64 {
    0.5f64.powi(y.len() as i32)
}

/// ROM results at one `(y, μ)`.
#[derive(Clone, Debug)]
pub struct NodeEval {
    pub primal: RomPrimal,
    pub qoi: f64,
    pub adjoint: Option<AdjointEval>,
}

#[derive(Clone, Debug)]
pub struct AdjointEval {
    pub adjoint: RomAdjoint,
    /// Gradient estimate `g^λ(Φη, Φq)`.
    pub gradient: DVector<f64>,
}

impl NodeEval {
    fn adjoint(&self) -> &AdjointEval {
        self.adjoint.as_ref().expect("adjoint evaluation requested")
    }
}

#[derive(Clone, Debug)]
struct CacheEntry {
    mu: DVector<f64>,
    version: u64,
    eval: Arc<NodeEval>,
}

#[derive(Clone, Debug)]
struct NodeSlot {
    coords: Vec<f64>,
    entries: Vec<CacheEntry>,
}

/// A sparse grid and reduced basis that together define a trust-region
/// model, with a cache of ROM solves at grid nodes.
///
/// Cached solves are tagged with the basis version. Entries from older
/// versions are never returned as results; they only seed warm starts,
/// which is valid because the basis grows by appending orthonormal columns.
#[derive(Clone, Debug)]
pub struct SgRomPair {
    grid: MultiIndexSet,
    basis: ReducedBasis,
    cache: BTreeMap<NodeKey, NodeSlot>,
    last_snapshot: Option<DVector<f64>>,
}

impl SgRomPair {
    pub fn new(grid: MultiIndexSet, basis: ReducedBasis) -> Self {
        Self {
            grid,
            basis,
            cache: BTreeMap::new(),
            last_snapshot: None,
        }
    }

    pub fn grid(&self) -> &MultiIndexSet {
        &self.grid
    }

    pub fn basis(&self) -> &ReducedBasis {
        &self.basis
    }

    /// Adds a forward neighbor to the index set.
    pub fn refine_grid(&mut self, index: MultiIndex) -> Result<(), SparseGridError> {
        self.grid.insert_neighbor(index)
    }

    /// Appends a snapshot outside the greedy loops (e.g. seeding).
    pub fn append_snapshot(&mut self, v: &DVector<f64>, y: &[f64], mu: &DVector<f64>, kind: SnapshotKind) -> bool {
        if kind == SnapshotKind::Primal {
            self.last_snapshot = Some(v.clone());
        }
        self.basis.append(v, y, mu, kind)
    }

    pub fn mark_sampled(&mut self, y: &[f64], mu: &DVector<f64>) {
        self.basis.mark_sampled(y, mu);
    }

    /// Number of cached ROM solves, fresh or stale.
    pub fn cache_len(&self) -> usize {
        self.cache.values().map(|s| s.entries.len()).sum()
    }

    /// Drops cached solves at parameters other than `keep`, retaining the
    /// latest entry of each node as a warm-start seed.
    pub fn prune(&mut self, keep: &[&DVector<f64>]) {
        for slot in self.cache.values_mut() {
            let last = slot.entries.pop();
            slot.entries.retain(|e| keep.iter().any(|m| same_point(&e.mu, m)));
            if let Some(last) = last {
                slot.entries.push(last);
            }
        }
    }

    fn fresh(&self, key: &NodeKey, mu: &DVector<f64>, need_adjoint: bool) -> Option<Arc<NodeEval>> {
        let version = self.basis.version();
        self.cache.get(key).and_then(|slot| {
            slot.entries
                .iter()
                .find(|e| e.version == version && same_point(&e.mu, mu) && (!need_adjoint || e.eval.adjoint.is_some()))
                .map(|e| e.eval.clone())
        })
    }

    fn warm_start(&self, key: &NodeKey, mu: &DVector<f64>) -> Option<DVector<f64>> {
        let k = self.basis.dim();
        let pad = |q: &DVector<f64>| {
            let mut out = DVector::zeros(k);
            let n = q.len().min(k);
            out.rows_mut(0, n).copy_from(&q.rows(0, n));
            out
        };
        if let Some(slot) = self.cache.get(key) {
            let mut best: Option<(&CacheEntry, f64)> = None;
            for e in &slot.entries {
                let d = (&e.mu - mu).norm();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((e, d));
                }
            }
            if let Some((e, _)) = best {
                return Some(pad(&e.eval.primal.q));
            }
        }
        let coords = key.coords();
        let mut best: Option<(&CacheEntry, f64)> = None;
        for slot in self.cache.values() {
            for e in slot.entries.iter().filter(|e| same_point(&e.mu, mu)) {
                let d: f64 = slot.coords.iter().zip(&coords).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((e, d));
                }
            }
        }
        if let Some((e, _)) = best {
            return Some(pad(&e.eval.primal.q));
        }
        self.last_snapshot.as_ref().map(|u| self.basis.project(u))
    }

    /// ROM solves at the given nodes, from the cache where possible.
    pub fn evaluate<P: ModelProblem + ?Sized>(
        &mut self,
        problem: &P,
        quad: &SparseQuadrature,
        mu: &DVector<f64>,
        need_adjoint: bool,
        opts: &AdaptOptions,
        tracker: &mut Tracker,
    ) -> Result<BTreeMap<NodeKey, Arc<NodeEval>>, AdaptError> {
        let mut out = BTreeMap::new();
        let mut missing = Vec::new();
        for (key, pt) in quad.iter() {
            match self.fresh(key, mu, need_adjoint) {
                Some(e) => {
                    out.insert(key.clone(), e);
                }
                None => missing.push((key.clone(), pt.coords.clone(), self.warm_start(key, mu))),
            }
        }
        if missing.is_empty() {
            return Ok(out);
        }
        let basis = &self.basis;
        let solve = |(key, coords, q0): &(NodeKey, Vec<f64>, Option<DVector<f64>>)| {
            let res = if need_adjoint {
                evaluate_rom(problem, basis, coords, mu, q0.as_ref(), &opts.rom).map(|ev| NodeEval {
                    primal: ev.primal,
                    qoi: ev.qoi,
                    adjoint: Some(AdjointEval {
                        adjoint: ev.adjoint,
                        gradient: ev.gradient,
                    }),
                })
            } else {
                solve_rom_primal(problem, basis, coords, mu, q0.as_ref(), &opts.rom).map(|primal| NodeEval {
                    qoi: rom_qoi(problem, basis, &primal.q, coords, mu),
                    primal,
                    adjoint: None,
                })
            };
            (key.clone(), coords.clone(), res)
        };
        let results: Vec<_> = if opts.parallel {
            missing.par_iter().map(solve).collect()
        } else {
            missing.iter().map(solve).collect()
        };
        let version = self.basis.version();
        for (key, coords, res) in results {
            let eval = res.map_err(|source| AdaptError::Rom {
                y: coords.clone(),
                source,
            })?;
            tracker.counters.rom_primal += 1;
            tracker.counters.rom_gn_iters += eval.primal.gn_iters as u64;
            if eval.adjoint.is_some() {
                tracker.counters.rom_adjoint += 1;
            }
            let eval = Arc::new(eval);
            let slot = self.cache.entry(key.clone()).or_insert_with(|| NodeSlot {
                coords,
                entries: Vec::new(),
            });
            slot.entries.retain(|e| !same_point(&e.mu, mu));
            slot.entries.push(CacheEntry {
                mu: mu.clone(),
                version,
                eval: eval.clone(),
            });
            out.insert(key, eval);
        }
        Ok(out)
    }

    /// Full-order primal and adjoint solves at `(y, μ)`, both appended to the
    /// basis. The ROM reconstruction at that point seeds Newton.
    pub fn sample_hdm<P: ModelProblem + ?Sized>(
        &mut self,
        problem: &P,
        y: &[f64],
        mu: &DVector<f64>,
        u0: Option<&DVector<f64>>,
        opts: &AdaptOptions,
        tracker: &mut Tracker,
    ) -> Result<(), AdaptError> {
        let hdm_err = |source| AdaptError::Hdm { y: y.to_vec(), source };
        let primal = match solve_primal(problem, y, mu, u0, &opts.newton) {
            Ok(s) => s,
            Err(_) if u0.is_some() => solve_primal(problem, y, mu, None, &opts.newton).map_err(hdm_err)?,
            Err(e) => return Err(hdm_err(e)),
        };
        tracker.counters.hdm_primal += 1;
        tracker.counters.hdm_newton_iters += primal.newton_iters as u64;
        let adjoint = solve_adjoint(problem, &primal.u, y, mu).map_err(hdm_err)?;
        tracker.counters.hdm_adjoint += 1;
        self.append_snapshot(&primal.u, y, mu, SnapshotKind::Primal);
        self.basis.append(&adjoint.lambda, y, mu, SnapshotKind::Adjoint);
        self.basis.mark_sampled(y, mu);
        Ok(())
    }
}

fn same_point(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientIndicator {
    pub e1: f64,
    pub e3: f64,
    pub e4: f64,
    pub phi: f64,
    pub betas: [f64; 3],
    /// `∇m(μ) = E_I[ĝ]`.
    pub model_gradient: Vec<f64>,
    pub model_gradient_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveIndicator {
    /// `E'_1` at `(μ_k, μ̂)`.
    pub e1_at: [f64; 2],
    /// `E'_2` at `(μ_k, μ̂)`.
    pub e2_at: [f64; 2],
    pub theta: f64,
    pub alphas: [f64; 2],
}

/// Quadratures that define the indicators for the current index set.
struct GridQuads {
    /// `E_I`.
    model: SparseQuadrature,
    /// `E_{I ∪ N(I)}`, absolute weights used.
    extended: SparseQuadrature,
    /// `Δ^i` for each `i ∈ N(I)`.
    neighbors: Vec<(MultiIndex, SparseQuadrature)>,
}

impl GridQuads {
    fn new(grid: &MultiIndexSet) -> Result<Self, SparseGridError> {
        let neighbors = grid
            .neighbors()?
            .into_iter()
            .map(|i| SparseQuadrature::difference(&i).map(|q| (i, q)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model: SparseQuadrature::assemble(grid)?,
            extended: SparseQuadrature::assemble(&grid.with_neighbors()?)?,
            neighbors,
        })
    }

    fn abs_sum(&self, evals: &BTreeMap<NodeKey, Arc<NodeEval>>, h: impl Fn(&NodeEval) -> f64) -> f64 {
        self.extended.iter().map(|(k, p)| p.weight.abs() * h(&evals[k])).sum()
    }

    /// `|Δ^i[h]|` per neighbor, with the round-off level of each term.
    fn truncation(&self, evals: &BTreeMap<NodeKey, Arc<NodeEval>>, h: impl Fn(&NodeEval) -> f64) -> Vec<(f64, f64)> {
        self.neighbors
            .iter()
            .map(|(_, q)| {
                let mut s = 0.0;
                let mut scale = 0.0;
                for (k, p) in q.iter() {
                    let v = h(&evals[k]);
                    s += p.weight * v;
                    scale += (p.weight * v).abs();
                }
                (s.abs(), ROUNDOFF_FACTOR * f64::EPSILON * scale)
            })
            .collect()
    }
}

/// First index with the strictly largest value; ties go to the earlier
/// (lexicographically smaller) index.
fn argmax_index(neighbors: &[(MultiIndex, SparseQuadrature)], values: &[f64]) -> Option<MultiIndex> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| neighbors[j].0.clone())
}

struct GradientSweep {
    indicator: GradientIndicator,
    evals: BTreeMap<NodeKey, Arc<NodeEval>>,
    quads: GridQuads,
    terms: Vec<f64>,
}

fn gradient_sweep<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu: &DVector<f64>,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<GradientSweep, AdaptError> {
    let quads = GridQuads::new(&pair.grid)?;
    let evals = pair.evaluate(problem, &quads.extended, mu, true, opts, tracker)?;
    let mut grad = DVector::zeros(problem.n_mu());
    for (k, p) in quads.model.iter() {
        grad += &evals[k].adjoint().gradient * p.weight;
    }
    let e1 = quads.abs_sum(&evals, |e| e.primal.residual_norm);
    let e3 = quads.abs_sum(&evals, |e| e.adjoint().adjoint.residual_norm);
    let terms: Vec<f64> = quads
        .truncation(&evals, |e| e.adjoint().gradient.norm())
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    let e4: f64 = terms.iter().sum();
    let [b1, b3, b4] = opts.betas;
    let indicator = GradientIndicator {
        e1,
        e3,
        e4,
        phi: b1 * e1 + b3 * e3 + b4 * e4,
        betas: opts.betas,
        model_gradient_norm: grad.norm(),
        model_gradient: grad.iter().copied().collect(),
    };
    Ok(GradientSweep {
        indicator,
        evals,
        quads,
        terms,
    })
}

/// `φ(μ) = β1 E1 + β3 E3 + β4 E4` for the pair at `μ`.
pub fn eval_gradient_indicator<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu: &DVector<f64>,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<GradientIndicator, AdaptError> {
    Ok(gradient_sweep(problem, pair, mu, opts, tracker)?.indicator)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientOutcome {
    pub indicator: GradientIndicator,
    /// `κ_φ/(3β_i) min{‖∇m‖, Δ}` for `(E1, E3, E4)` at exit.
    pub thresholds: [f64; 3],
    pub steps: usize,
    /// True when `min{‖∇m‖, Δ}` was below [`MACHINE_FLOOR`].
    pub skipped: bool,
}

impl GradientOutcome {
    /// The split gradient condition as evaluated at exit.
    pub fn condition_holds(&self) -> bool {
        self.skipped
            || (self.indicator.e1 <= self.thresholds[0]
                && self.indicator.e3 <= self.thresholds[1]
                && self.indicator.e4 <= self.thresholds[2])
    }
}

/// Refines the pair at `μ_k` until
/// `β1 E1, β3 E3, β4 E4 ≤ (κ_φ/3) min{‖∇m(μ_k)‖, Δ}` each hold.
pub fn refine_for_gradient<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu: &DVector<f64>,
    delta: f64,
    kappa_phi: f64,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<GradientOutcome, AdaptError> {
    let [b1, b3, b4] = opts.betas;
    let mut steps = 0;
    loop {
        let sweep = gradient_sweep(problem, pair, mu, opts, tracker)?;
        let ind = &sweep.indicator;
        tracker.resolve(|kind| match kind {
            EventKind::GreedyPrimal => ind.e1,
            EventKind::GreedyAdjoint => ind.e3,
            _ => ind.e4,
        });
        let m = ind.model_gradient_norm.min(delta);
        let thresholds = [
            kappa_phi / (3.0 * b1) * m,
            kappa_phi / (3.0 * b3) * m,
            kappa_phi / (3.0 * b4) * m,
        ];
        if m <= MACHINE_FLOOR {
            return Ok(GradientOutcome {
                indicator: sweep.indicator,
                thresholds,
                steps,
                skipped: true,
            });
        }
        let iteration = tracker.iteration;
        let event = |kind, before, threshold, index: Option<MultiIndex>, node: Option<Vec<f64>>, pair: &SgRomPair| {
            RefinementEvent {
                iteration,
                driver: DriverKind::Gradient,
                kind,
                index,
                node,
                mu_slot: node_slot(kind),
                before,
                after: None,
                threshold,
                grid_size: pair.grid.len(),
                basis_size: pair.basis.dim(),
            }
        };
        if ind.e4 > thresholds[2] {
            let i = argmax_index(&sweep.quads.neighbors, &sweep.terms).expect("nonempty neighbor set");
            let ev = event(EventKind::Grid, ind.e4, thresholds[2], Some(i.clone()), None, pair);
            pair.refine_grid(i)?;
            tracker.push(ev);
        } else if ind.e1 > thresholds[0] || ind.e3 > thresholds[1] {
            let (kind, before, threshold) = if ind.e1 > thresholds[0] {
                (EventKind::GreedyPrimal, ind.e1, thresholds[0])
            } else {
                (EventKind::GreedyAdjoint, ind.e3, thresholds[1])
            };
            let score = |e: &NodeEval| match kind {
                EventKind::GreedyPrimal => e.primal.residual_norm,
                _ => e.adjoint().adjoint.residual_norm,
            };
            let mut best: Option<(&NodeKey, f64)> = None;
            for (k, p) in sweep.quads.extended.iter() {
                if pair.basis.is_sampled(&p.coords, mu) {
                    continue;
                }
                let s = density(&p.coords) * score(&sweep.evals[k]);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            match best {
                Some((k, _)) => {
                    let y = sweep.quads.extended.get(k).expect("node in quadrature").coords.clone();
                    let u0 = pair.basis.reconstruct(&sweep.evals[k].primal.q);
                    let ev = event(kind, before, threshold, None, Some(y.clone()), pair);
                    pair.sample_hdm(problem, &y, mu, Some(&u0), opts, tracker)?;
                    tracker.push(ev);
                }
                None => {
                    let i = argmax_index(&sweep.quads.neighbors, &sweep.terms).expect("nonempty neighbor set");
                    let ev = event(EventKind::ExhaustedGrid, before, threshold, Some(i.clone()), None, pair);
                    pair.refine_grid(i).map_err(|e| AdaptError::Exhausted(e.to_string()))?;
                    tracker.push(ev);
                }
            }
        } else {
            return Ok(GradientOutcome {
                indicator: sweep.indicator,
                thresholds,
                steps,
                skipped: false,
            });
        }
        steps += 1;
        if steps >= opts.max_steps {
            return Err(AdaptError::Budget {
                driver: "gradient",
                steps,
            });
        }
    }
}

fn node_slot(kind: EventKind) -> Option<usize> {
    match kind {
        EventKind::GreedyPrimal | EventKind::GreedyAdjoint => Some(0),
        _ => None,
    }
}

struct ObjectiveSweep {
    indicator: ObjectiveIndicator,
    evals: [BTreeMap<NodeKey, Arc<NodeEval>>; 2],
    quads: GridQuads,
    /// `max over μ of |Δ^i[f]|` per neighbor.
    terms: Vec<f64>,
    e1_floor: f64,
    e2_floor: f64,
}

fn objective_sweep<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mus: [&DVector<f64>; 2],
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<ObjectiveSweep, AdaptError> {
    let quads = GridQuads::new(&pair.grid)?;
    let ev0 = pair.evaluate(problem, &quads.extended, mus[0], false, opts, tracker)?;
    let ev1 = pair.evaluate(problem, &quads.extended, mus[1], false, opts, tracker)?;
    let evals = [ev0, ev1];
    let mut e1_at = [0.0; 2];
    let mut e2_at = [0.0; 2];
    let mut terms = vec![0.0; quads.neighbors.len()];
    let mut e1_floor = 0.0;
    let mut e2_floor = 0.0;
    for s in 0..2 {
        e1_at[s] = quads.abs_sum(&evals[s], |e| e.primal.residual_norm);
        e1_floor += quads.abs_sum(&evals[s], |e| e.primal.residual_floor);
        for (j, (t, floor)) in quads.truncation(&evals[s], |e| e.qoi.abs()).into_iter().enumerate() {
            e2_at[s] += t;
            e2_floor += floor;
            terms[j] = f64::max(terms[j], t);
        }
    }
    let [a1, a2] = opts.alphas;
    let indicator = ObjectiveIndicator {
        e1_at,
        e2_at,
        theta: a1 * (e1_at[0] + e1_at[1]) + a2 * (e2_at[0] + e2_at[1]),
        alphas: opts.alphas,
    };
    Ok(ObjectiveSweep {
        indicator,
        evals,
        quads,
        terms,
        e1_floor,
        e2_floor,
    })
}

/// `θ = α1 (E'1(μ) + E'1(μ_k)) + α2 (E'2(μ) + E'2(μ_k))`.
pub fn eval_objective_indicator<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu_center: &DVector<f64>,
    mu_trial: &DVector<f64>,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<ObjectiveIndicator, AdaptError> {
    Ok(objective_sweep(problem, pair, [mu_center, mu_trial], opts, tracker)?.indicator)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveOutcome {
    pub indicator: ObjectiveIndicator,
    /// `(1/2α_i)(η min{m_k(μ_k) - m_k(μ̂), r_k})^(1/ω)` for `(E'1, E'2)`.
    pub thresholds: [f64; 2],
    pub steps: usize,
    /// Both split conditions hold as evaluated. False when a threshold lies
    /// below the round-off level of its indicator, in which case the driver
    /// stops refining that indicator.
    pub certified: bool,
}

impl ObjectiveOutcome {
    pub fn condition_holds(&self) -> bool {
        let ind = &self.indicator;
        ind.e1_at[0] + ind.e1_at[1] <= self.thresholds[0] && ind.e2_at[0] + ind.e2_at[1] <= self.thresholds[1]
    }
}

/// Parameters of the objective condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTarget {
    /// `m_k(μ_k) - m_k(μ̂)`.
    pub model_decrease: f64,
    /// Forcing term `r_k`.
    pub forcing: f64,
    pub eta: f64,
    pub omega: f64,
}

impl ObjectiveTarget {
    pub fn thresholds(&self, alphas: [f64; 2]) -> [f64; 2] {
        let base = (self.eta * self.model_decrease.min(self.forcing)).powf(1.0 / self.omega);
        [base / (2.0 * alphas[0]), base / (2.0 * alphas[1])]
    }
}

/// Refines the pair at `{μ_k, μ̂}` until
/// `α_i (E'_i(μ_k) + E'_i(μ̂)) ≤ ½ (η min{m_k(μ_k) - m_k(μ̂), r_k})^(1/ω)`.
pub fn refine_for_objective<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu_center: &DVector<f64>,
    mu_trial: &DVector<f64>,
    target: ObjectiveTarget,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<ObjectiveOutcome, AdaptError> {
    if !(target.model_decrease > 0.0) {
        return Err(AdaptError::NonPositiveDecrease(target.model_decrease));
    }
    let thresholds = target.thresholds(opts.alphas);
    let mus = [mu_center, mu_trial];
    let mut steps = 0;
    loop {
        let sweep = objective_sweep(problem, pair, mus, opts, tracker)?;
        let ind = &sweep.indicator;
        let e1 = ind.e1_at[0] + ind.e1_at[1];
        let e2 = ind.e2_at[0] + ind.e2_at[1];
        tracker.resolve(|kind| match kind {
            EventKind::Grid => e2,
            _ => e1,
        });
        let e2_open = e2 > thresholds[1];
        let e1_open = e1 > thresholds[0];
        let e2_resolvable = thresholds[1] > sweep.e2_floor;
        let e1_resolvable = thresholds[0] > sweep.e1_floor;
        let iteration = tracker.iteration;
        let event = |kind, before, threshold, index, node, mu_slot, pair: &SgRomPair| RefinementEvent {
            iteration,
            driver: DriverKind::Objective,
            kind,
            index,
            node,
            mu_slot,
            before,
            after: None,
            threshold,
            grid_size: pair.grid.len(),
            basis_size: pair.basis.dim(),
        };

        let mut acted = false;
        if e2_open && e2_resolvable {
            let i = argmax_index(&sweep.quads.neighbors, &sweep.terms).expect("nonempty neighbor set");
            let ev = event(EventKind::Grid, e2, thresholds[1], Some(i.clone()), None, None, pair);
            pair.refine_grid(i)?;
            tracker.push(ev);
            acted = true;
        } else if e1_open && e1_resolvable {
            let mut best: Option<(&NodeKey, usize, f64)> = None;
            for (k, p) in sweep.quads.extended.iter() {
                for (s, mu) in mus.iter().enumerate() {
                    if pair.basis.is_sampled(&p.coords, mu) {
                        continue;
                    }
                    let e = &sweep.evals[s][k];
                    if e.primal.residual_norm <= e.primal.residual_floor {
                        continue;
                    }
                    let score = density(&p.coords) * e.primal.residual_norm;
                    if best.is_none_or(|(_, _, b)| score > b) {
                        best = Some((k, s, score));
                    }
                }
            }
            if let Some((k, s, _)) = best {
                let y = sweep.quads.extended.get(k).expect("node in quadrature").coords.clone();
                let u0 = pair.basis.reconstruct(&sweep.evals[s][k].primal.q);
                let ev = event(
                    EventKind::GreedyPrimal,
                    e1,
                    thresholds[0],
                    None,
                    Some(y.clone()),
                    Some(s),
                    pair,
                );
                pair.sample_hdm(problem, &y, mus[s], Some(&u0), opts, tracker)?;
                tracker.push(ev);
                acted = true;
            }
        }
        if !acted {
            let certified = !e1_open && !e2_open;
            if !certified {
                let (before, threshold) = if e2_open {
                    (e2, thresholds[1])
                } else {
                    (e1, thresholds[0])
                };
                tracker
                    .events
                    .push(event(EventKind::Saturated, before, threshold, None, None, None, pair));
            }
            return Ok(ObjectiveOutcome {
                indicator: sweep.indicator,
                thresholds,
                steps,
                certified,
            });
        }
        steps += 1;
        if steps >= opts.max_steps {
            return Err(AdaptError::Budget {
                driver: "objective",
                steps,
            });
        }
    }
}
