//! Inexact trust-region method driven by sparse-grid ROM models.
//!
//! Each iteration refines the gradient model until the gradient condition
//! holds, computes a Steihaug–Toint step on a quadratic model of it, refines
//! a copy of the model until the objective condition holds at the center and
//! trial points, and accepts or rejects the step from the ratio of the two
//! models' decreases. The full-order objective is never evaluated.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::adapt::{
    eval_gradient_indicator, refine_for_gradient, refine_for_objective, AdaptError, AdaptOptions, Counters,
    GradientOutcome, ObjectiveTarget, SgRomPair, Tracker,
};
use crate::hdm::{primal_sensitivity, solve_adjoint, solve_primal, HdmError, ModelProblem};
use crate::rom::{ReducedBasis, SnapshotKind};
use crate::sparse_grid::{MultiIndexSet, SparseQuadrature};

#[derive(Debug, Error)]
pub enum TrError {
    #[error("invalid trust-region configuration: {0}")]
    Config(String),
    #[error("seed solve failed: {0}")]
    Seed(#[source] HdmError),
    #[error("iteration {iteration} failed at mu = {mu:?} (radius {delta:e}): {source}")]
    Iteration {
        iteration: usize,
        mu: Vec<f64>,
        delta: f64,
        #[source]
        source: AdaptError,
    },
}

/// Forcing sequence `r_k` of the objective condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Forcing {
    /// `r_k = scale / (k + 1)`.
    Harmonic {
        scale: f64,
    },
    Constant {
        value: f64,
    },
}

impl Forcing {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Forcing::Harmonic { scale } => scale / (k as f64 + 1.0),
            Forcing::Constant { value } => value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub gamma: f64,
    pub eta: f64,
    pub omega: f64,
    pub kappa_phi: f64,
    pub kappa_s: f64,
    pub forcing: Forcing,
    pub delta0: f64,
    pub delta_max: f64,
    pub growth: f64,
    pub gtol: f64,
    pub max_iters: usize,
    /// Relative residual at which truncated CG stops.
    pub cg_tol: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 0.75,
            gamma: 0.5,
            eta: 0.1,
            omega: 0.1,
            kappa_phi: 1.0,
            kappa_s: 1e-4,
            forcing: Forcing::Harmonic { scale: 1.0 },
            delta0: 1.0,
            delta_max: 1e3,
            growth: 2.0,
            gtol: 1e-6,
            max_iters: 30,
            cg_tol: 1e-8,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<(), TrError> {
        let fail = |msg: &str| Err(TrError::Config(msg.to_string()));
        if !(0.0 < self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return fail("need 0 < eta1 < eta2 < 1");
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return fail("need 0 < gamma < 1");
        }
        // the standard defaults put eta exactly on min{eta1, 1 - eta2}
        if !(0.0 < self.eta && self.eta <= self.eta1.min(1.0 - self.eta2)) {
            return fail("need 0 < eta <= min{eta1, 1 - eta2}");
        }
        if !(0.0 < self.omega && self.omega < 1.0) {
            return fail("need 0 < omega < 1");
        }
        if !(self.kappa_phi > 0.0) {
            return fail("need kappa_phi > 0");
        }
        if !(0.0 < self.kappa_s && self.kappa_s < 1.0) {
            return fail("need 0 < kappa_s < 1");
        }
        match self.forcing {
            Forcing::Harmonic { scale } if !(scale > 0.0) => return fail("forcing scale must be positive"),
            Forcing::Constant { value } if !(value > 0.0) => return fail("forcing value must be positive"),
            _ => {}
        }
        if !(self.delta0 > 0.0 && self.delta_max >= self.delta0) {
            return fail("need 0 < delta0 <= delta_max");
        }
        if !(self.growth >= 1.0) {
            return fail("need growth >= 1");
        }
        if !(self.gtol >= 0.0) {
            return fail("need gtol >= 0");
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return fail("need 0 < cg_tol < 1");
        }
        Ok(())
    }
}

/// `m(μ) = E_I[f(Φq(·, μ), ·, μ)]`.
pub fn model_value<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu: &DVector<f64>,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<f64, AdaptError> {
    let quad = SparseQuadrature::assemble(pair.grid())?;
    let evals = pair.evaluate(problem, &quad, mu, false, opts, tracker)?;
    Ok(quad.iter().map(|(k, p)| p.weight * evals[k].qoi).sum())
}

/// `∇m(μ) = E_I[g^λ(Φη, Φq)]`.
pub fn model_gradient<P: ModelProblem + ?Sized>(
    problem: &P,
    pair: &mut SgRomPair,
    mu: &DVector<f64>,
    opts: &AdaptOptions,
    tracker: &mut Tracker,
) -> Result<DVector<f64>, AdaptError> {
    let quad = SparseQuadrature::assemble(pair.grid())?;
    let evals = pair.evaluate(problem, &quad, mu, true, opts, tracker)?;
    let mut g = DVector::zeros(problem.n_mu());
    for (k, p) in quad.iter() {
        let a = evals[k].adjoint.as_ref().expect("adjoint evaluated");
        g += &a.gradient * p.weight;
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustStep {
    pub step: DVector<f64>,
    /// Decrease of the quadratic model, `-(gᵀs + ½ sᵀHs)`.
    pub decrease: f64,
    /// `1 + ` largest `|dᵀHd| / ‖d‖²` seen.
    pub beta: f64,
    pub cg_iters: usize,
    pub hit_boundary: bool,
}

impl TrustStep {
    /// `decrease ≥ κ_s ‖g‖ min{‖g‖/β, Δ}`.
    pub fn fraction_of_cauchy(&self, grad_norm: f64, delta: f64, kappa_s: f64) -> bool {
        self.decrease >= kappa_s * grad_norm * (grad_norm / self.beta).min(delta)
    }
}

fn boundary_tau(s: &DVector<f64>, d: &DVector<f64>, delta: f64) -> f64 {
    let a = d.norm_squared();
    let b = 2.0 * s.dot(d);
    let c = s.norm_squared() - delta * delta;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    // c <= 0, so this root is the nonnegative one; written to avoid cancellation
    if b >= 0.0 {
        -2.0 * c / (b + disc.sqrt())
    } else {
        (-b + disc.sqrt()) / (2.0 * a)
    }
}

/// Steihaug–Toint truncated conjugate gradients on
/// `min gᵀs + ½ sᵀHs` subject to `‖s‖ ≤ Δ`.
pub fn steihaug_toint<F, E>(gradient: &DVector<f64>, mut hessvec: F, delta: f64, rel_tol: f64) -> Result<TrustStep, E>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let n = gradient.len();
    let gnorm = gradient.norm();
    let mut s = DVector::zeros(n);
    let mut hs = DVector::zeros(n);
    let mut beta: f64 = 1.0;
    if gnorm == 0.0 {
        return Ok(TrustStep {
            step: s,
            decrease: 0.0,
            beta,
            cg_iters: 0,
            hit_boundary: false,
        });
    }
    let mut r = gradient.clone();
    let mut d = -gradient;
    let mut hit_boundary = false;
    let mut iters = 0;
    for _ in 0..(2 * n).max(1) {
        iters += 1;
        let hd = hessvec(&d)?;
        let curv = d.dot(&hd);
        let dd = d.norm_squared();
        beta = beta.max(1.0 + (curv / dd).abs());
        if curv <= 0.0 {
            let tau = boundary_tau(&s, &d, delta);
            s += &d * tau;
            hs += &hd * tau;
            hit_boundary = true;
            break;
        }
        let rr = r.norm_squared();
        let alpha = rr / curv;
        let s_next = &s + &d * alpha;
        if s_next.norm() >= delta {
            let tau = boundary_tau(&s, &d, delta);
            s += &d * tau;
            hs += &hd * tau;
            hit_boundary = true;
            break;
        }
        s = s_next;
        hs += &hd * alpha;
        r += &hd * alpha;
        if r.norm() <= rel_tol * gnorm {
            break;
        }
        let rr_next = r.norm_squared();
        d = -&r + &d * (rr_next / rr);
    }
    let decrease = -(gradient.dot(&s) + 0.5 * s.dot(&hs));
    Ok(TrustStep {
        step: s,
        decrease,
        beta,
        cg_iters: iters,
        hit_boundary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusUpdate {
    Shrink,
    Keep,
    Grow,
}

impl RadiusUpdate {
    pub fn as_str(self) -> &'static str {
        match self {
            RadiusUpdate::Shrink => "shrink",
            RadiusUpdate::Keep => "keep",
            RadiusUpdate::Grow => "grow",
        }
    }
}

/// Step assessment of one trust-region iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step_norm: f64,
    pub cg_iters: usize,
    pub beta: f64,
    /// `m_k(μ_k)`, `m_k(μ̂)`.
    pub m_center: f64,
    pub m_trial: f64,
    /// `ψ_k(μ_k)`, `ψ_k(μ̂)`.
    pub psi_center: f64,
    pub psi_trial: f64,
    pub rho: f64,
    pub accepted: bool,
    pub radius_update: RadiusUpdate,
    pub fraction_of_cauchy: bool,
    /// Whether the Cauchy point replaced the CG step.
    pub cauchy_fallback: bool,
    pub theta: f64,
    pub objective_thresholds: [f64; 2],
    pub objective_condition: bool,
    pub objective_certified: bool,
    pub objective_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub mu: Vec<f64>,
    pub delta: f64,
    pub grad_norm: f64,
    pub phi: f64,
    pub gradient_condition: bool,
    pub gradient_steps: usize,
    pub grid_size: usize,
    pub basis_size: usize,
    pub step: Option<StepRecord>,
    pub counters: Counters,
}

pub struct TrustRegionState {
    pub k: usize,
    pub mu: DVector<f64>,
    pub delta: f64,
    pub pair: SgRomPair,
    pub tracker: Tracker,
    pub history: Vec<IterationRecord>,
    /// Gradient norm at iteration 0 after refinement.
    pub initial_grad_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
}

/// Grid `{(1, ..., 1)}` and a basis from the primal, adjoint and all primal
/// sensitivities at `y = 0`, `μ = μ0`.
pub fn tr_init<P: ModelProblem + ?Sized>(
    problem: &P,
    config: &TrustRegionConfig,
    opts: &AdaptOptions,
    mu0: &DVector<f64>,
) -> Result<TrustRegionState, TrError> {
    config.validate()?;
    if mu0.len() != problem.n_mu() || mu0.iter().any(|v| !v.is_finite()) {
        return Err(TrError::Config(format!(
            "mu0 must be finite with length {}",
            problem.n_mu()
        )));
    }
    let mut tracker = Tracker::new();
    let y0 = vec![0.0; problem.n_y()];
    let primal = solve_primal(problem, &y0, mu0, None, &opts.newton).map_err(TrError::Seed)?;
    tracker.counters.hdm_primal += 1;
    tracker.counters.hdm_newton_iters += primal.newton_iters as u64;
    let adjoint = solve_adjoint(problem, &primal.u, &y0, mu0).map_err(TrError::Seed)?;
    tracker.counters.hdm_adjoint += 1;
    let mut pair = SgRomPair::new(MultiIndexSet::unit(problem.n_y()), ReducedBasis::new(problem.n_u()));
    pair.append_snapshot(&primal.u, &y0, mu0, SnapshotKind::Primal);
    pair.append_snapshot(&adjoint.lambda, &y0, mu0, SnapshotKind::Adjoint);
    for j in 0..problem.n_mu() {
        let s = primal_sensitivity(problem, &primal.u, &y0, mu0, j).map_err(TrError::Seed)?;
        tracker.counters.hdm_adjoint += 1;
        pair.append_snapshot(&s, &y0, mu0, SnapshotKind::Sensitivity);
    }
    pair.mark_sampled(&y0, mu0);
    Ok(TrustRegionState {
        k: 0,
        mu: mu0.clone(),
        delta: config.delta0,
        pair,
        tracker,
        history: Vec::new(),
        initial_grad_norm: None,
    })
}

/// One iteration. Returns `true` when the stopping test fired.
pub fn tr_iterate<P: ModelProblem + ?Sized>(
    problem: &P,
    state: &mut TrustRegionState,
    config: &TrustRegionConfig,
    opts: &AdaptOptions,
) -> Result<bool, TrError> {
    let k = state.k;
    let wrap = |state: &TrustRegionState, source| TrError::Iteration {
        iteration: k,
        mu: state.mu.iter().copied().collect(),
        delta: state.delta,
        source,
    };
    state.tracker.iteration = k;
    let mu = state.mu.clone();
    state.pair.prune(&[&mu]);

    // once Δ ≤ gtol the stopping test holds for any gradient, so the model
    // is only evaluated, not refined
    let grad_out = if state.delta <= config.gtol {
        let indicator = eval_gradient_indicator(problem, &mut state.pair, &mu, opts, &mut state.tracker)
            .map_err(|e| wrap(state, e))?;
        let m = indicator.model_gradient_norm.min(state.delta);
        let thresholds = opts.betas.map(|b| config.kappa_phi / (3.0 * b) * m);
        GradientOutcome {
            indicator,
            thresholds,
            steps: 0,
            skipped: false,
        }
    } else {
        refine_for_gradient(
            problem,
            &mut state.pair,
            &mu,
            state.delta,
            config.kappa_phi,
            opts,
            &mut state.tracker,
        )
        .map_err(|e| wrap(state, e))?
    };
    let g = DVector::from_vec(grad_out.indicator.model_gradient.clone());
    let gnorm = grad_out.indicator.model_gradient_norm;
    if k == 0 {
        state.initial_grad_norm = Some(gnorm);
    }
    let mut record = IterationRecord {
        k,
        mu: mu.iter().copied().collect(),
        delta: state.delta,
        grad_norm: gnorm,
        phi: grad_out.indicator.phi,
        gradient_condition: grad_out.condition_holds(),
        gradient_steps: grad_out.steps,
        grid_size: state.pair.grid().len(),
        basis_size: state.pair.basis().dim(),
        step: None,
        counters: state.tracker.counters,
    };
    if gnorm.min(state.delta) <= config.gtol {
        state.history.push(record);
        return Ok(true);
    }

    let delta = state.delta;
    let step = {
        let pair = &mut state.pair;
        let tracker = &mut state.tracker;
        let mu_norm = mu.norm();
        let hv = |v: &DVector<f64>| -> Result<DVector<f64>, AdaptError> {
            let vn = v.norm();
            let h = f64::EPSILON.sqrt() * (1.0 + mu_norm) / vn;
            let gp = model_gradient(problem, pair, &(&mu + v * h), opts, tracker)?;
            let gm = model_gradient(problem, pair, &(&mu - v * h), opts, tracker)?;
            Ok((gp - gm) / (2.0 * h))
        };
        steihaug_toint(&g, hv, delta, config.cg_tol).map_err(|e| wrap(state, e))?
    };

    let m_center = model_value(problem, &mut state.pair, &mu, opts, &mut state.tracker).map_err(|e| wrap(state, e))?;
    let fcd_rhs = config.kappa_s * gnorm * (gnorm / step.beta).min(delta);
    let mut chosen = step.step.clone();
    let mut m_trial = model_value(problem, &mut state.pair, &(&mu + &chosen), opts, &mut state.tracker)
        .map_err(|e| wrap(state, e))?;
    let mut cauchy_fallback = false;
    if m_center - m_trial < fcd_rhs {
        let cauchy = &g * (-(gnorm / step.beta).min(delta) / gnorm);
        let m_cauchy = model_value(problem, &mut state.pair, &(&mu + &cauchy), opts, &mut state.tracker)
            .map_err(|e| wrap(state, e))?;
        if m_center - m_cauchy > m_center - m_trial {
            chosen = cauchy;
            m_trial = m_cauchy;
            cauchy_fallback = true;
        }
    }
    let m_decrease = m_center - m_trial;
    let fcd_ok = m_decrease >= fcd_rhs;
    let trial = &mu + &chosen;
    let step_norm = chosen.norm();

    let mut record_step = StepRecord {
        step_norm,
        cg_iters: step.cg_iters,
        beta: step.beta,
        m_center,
        m_trial,
        psi_center: m_center,
        psi_trial: m_trial,
        rho: 0.0,
        accepted: false,
        radius_update: RadiusUpdate::Shrink,
        fraction_of_cauchy: fcd_ok,
        cauchy_fallback,
        theta: f64::NAN,
        objective_thresholds: [f64::NAN; 2],
        objective_condition: false,
        objective_certified: false,
        objective_steps: 0,
    };

    if fcd_ok {
        let mut pair_obj = state.pair.clone();
        let target = ObjectiveTarget {
            model_decrease: m_decrease,
            forcing: config.forcing.at(k),
            eta: config.eta,
            omega: config.omega,
        };
        let obj = refine_for_objective(problem, &mut pair_obj, &mu, &trial, target, opts, &mut state.tracker)
            .map_err(|e| wrap(state, e))?;
        let psi_center =
            model_value(problem, &mut pair_obj, &mu, opts, &mut state.tracker).map_err(|e| wrap(state, e))?;
        let psi_trial =
            model_value(problem, &mut pair_obj, &trial, opts, &mut state.tracker).map_err(|e| wrap(state, e))?;
        let rho = (psi_center - psi_trial) / m_decrease;
        record_step.psi_center = psi_center;
        record_step.psi_trial = psi_trial;
        record_step.rho = rho;
        record_step.theta = obj.indicator.theta;
        record_step.objective_thresholds = obj.thresholds;
        record_step.objective_condition = obj.condition_holds();
        record_step.objective_certified = obj.certified;
        record_step.objective_steps = obj.steps;
        record_step.accepted = rho >= config.eta1;
        record_step.radius_update = if rho <= config.eta1 {
            RadiusUpdate::Shrink
        } else if rho < config.eta2 {
            RadiusUpdate::Keep
        } else {
            RadiusUpdate::Grow
        };
        state.pair = pair_obj;
    }

    state.delta = match record_step.radius_update {
        RadiusUpdate::Shrink => config.gamma * step_norm.min(state.delta),
        RadiusUpdate::Keep => state.delta,
        RadiusUpdate::Grow => (config.growth * state.delta).min(config.delta_max),
    };
    if record_step.accepted {
        state.mu = trial;
    }
    record.step = Some(record_step);
    record.grid_size = state.pair.grid().len();
    record.basis_size = state.pair.basis().dim();
    record.counters = state.tracker.counters;
    state.history.push(record);
    state.k += 1;
    Ok(false)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mu: DVector<f64>,
    pub status: RunStatus,
    pub history: Vec<IterationRecord>,
    pub counters: Counters,
    pub events: Vec<crate::adapt::RefinementEvent>,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
}

/// Runs to `min{‖∇m_k(μ_k)‖, Δ_k} ≤ gtol` or `max_iters`, calling `observe`
/// after every iteration.
pub fn tr_run<P, F>(
    problem: &P,
    config: &TrustRegionConfig,
    opts: &AdaptOptions,
    mu0: &DVector<f64>,
    mut observe: F,
) -> Result<RunOutcome, TrError>
where
    P: ModelProblem + ?Sized,
    F: FnMut(&IterationRecord, &TrustRegionState),
{
    let mut state = tr_init(problem, config, opts, mu0)?;
    let mut status = RunStatus::MaxIterations;
    while state.k <= config.max_iters {
        let done = tr_iterate(problem, &mut state, config, opts)?;
        observe(state.history.last().expect("iteration recorded"), &state);
        if done {
            status = RunStatus::Converged;
            break;
        }
        if state.k == config.max_iters {
            break;
        }
    }
    let last = state.history.last().expect("at least one iteration");
    Ok(RunOutcome {
        mu: state.mu.clone(),
        status,
        final_grad_norm: last.grad_norm,
        initial_grad_norm: state.initial_grad_norm.unwrap_or(last.grad_norm),
        counters: state.tracker.counters,
        events: state.tracker.events,
        history: state.history,
    })
}
