use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgrom_core::hdm::{BurgersControl, BurgersParams, DiffusionParams, LinearDiffusion, ModelProblem, NewtonOptions};
use sgrom_core::oracle::{BaselineOptions, MAX_REFERENCE_LEVEL};
use sgrom_core::{AdaptOptions, RomOptions, TrustRegionConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ProblemConfig {
    LinearDiffusion(DiffusionParams),
    BurgersControl(BurgersParams),
}

/// Optimizer driven by `optimize`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    SgRomTr,
    SgIso,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SgRomTr => "sg-rom-tr",
            Method::SgIso => "sg-iso",
        }
    }
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::BurgersControl(BurgersParams::default())
    }
}

impl ProblemConfig {
    pub fn n_y(&self) -> usize {
        match self {
            ProblemConfig::LinearDiffusion(p) => p.n_y,
            ProblemConfig::BurgersControl(_) => 2,
        }
    }

    pub fn n_mu(&self) -> usize {
        match self {
            ProblemConfig::LinearDiffusion(p) => p.n_mu,
            ProblemConfig::BurgersControl(p) => p.n_mu,
        }
    }

    pub fn build(&self) -> Result<Box<dyn ModelProblem>, CliError> {
        Ok(match self {
            ProblemConfig::LinearDiffusion(p) => Box::new(LinearDiffusion::new(p.clone())),
            ProblemConfig::BurgersControl(p) => {
                Box::new(BurgersControl::new(p.clone()).map_err(|e| CliError::Solver(format!("reference state: {e}")))?)
            }
        })
    }

    /// Default finite-difference agreement tolerance for the problem.
    fn fd_tol(&self) -> f64 {
        match self {
            ProblemConfig::LinearDiffusion(_) => 1e-6,
            ProblemConfig::BurgersControl(_) => 1e-5,
        }
    }

    fn check(&self) -> Result<(), String> {
        let (n_u, n_mu, alpha) = match self {
            ProblemConfig::LinearDiffusion(p) => {
                if !(1..=2).contains(&p.n_y) {
                    return Err("problem.n_y: must be 1 or 2".into());
                }
                (p.n_u, p.n_mu, p.alpha)
            }
            ProblemConfig::BurgersControl(p) => {
                if !(1..=MAX_REFERENCE_LEVEL).contains(&p.reference_level) {
                    return Err(format!("problem.reference_level: must be in 1..={MAX_REFERENCE_LEVEL}"));
                }
                if !(p.inv_nu_left > 0.0 && p.inv_nu_right > 0.0) {
                    return Err("problem.inv_nu_left, problem.inv_nu_right: must be positive".into());
                }
                (p.n_u, p.n_mu, p.alpha)
            }
        };
        if n_u < 3 {
            return Err("problem.n_u: must be at least 3".into());
        }
        if !(1..=n_u).contains(&n_mu) {
            return Err("problem.n_mu: must be in 1..=n_u".into());
        }
        if !(alpha >= 0.0) {
            return Err("problem.alpha: must be nonnegative".into());
        }
        Ok(())
    }
}

/// Indicator weights and the refinement budget of the adaptive drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    /// `(β1, β3, β4)` of the gradient indicator.
    pub betas: [f64; 3],
    /// `(α1, α2)` of the objective indicator.
    pub alphas: [f64; 2],
    pub max_steps: usize,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        let a = AdaptOptions::default();
        Self {
            betas: a.betas,
            alphas: a.alphas,
            max_steps: a.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomConfig {
    pub stationarity_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub rank_tol: f64,
    pub second_order: bool,
}

impl Default for RomConfig {
    fn default() -> Self {
        let r = RomOptions::default();
        Self {
            stationarity_tol: r.stationarity_tol,
            max_iters: r.max_iters,
            max_halvings: r.max_halvings,
            rank_tol: r.rank_tol,
            second_order: r.second_order,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub ptc_max_iters: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        let n = NewtonOptions::default();
        Self {
            tol_abs: n.tol_abs,
            tol_rel: n.tol_rel,
            max_iters: n.max_iters,
            max_halvings: n.max_halvings,
            ptc_max_iters: n.ptc_max_iters,
        }
    }
}

/// Full-tensor BFGS baseline. `gtol` defaults to the trust-region `gtol`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub level: u32,
    pub max_iters: usize,
    pub gtol: Option<f64>,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let b = BaselineOptions::default();
        Self {
            level: b.level,
            max_iters: b.max_iters,
            gtol: None,
            armijo: b.armijo,
            max_backtracks: b.max_backtracks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub fd_samples: usize,
    pub fd_step: f64,
    /// Defaults to 1e-6 on linear-diffusion and 1e-5 on burgers-control.
    pub fd_tol: Option<f64>,
    pub rom_nodes: usize,
    pub rom_appends: usize,
    pub bound_samples: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            fd_samples: 20,
            fd_step: 1e-5,
            fd_tol: None,
            rom_nodes: 5,
            rom_appends: 10,
            bound_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub problem: ProblemConfig,
    /// Initial control; all ones when absent.
    pub mu0: Option<Vec<f64>>,
    pub trust_region: TrustRegionConfig,
    pub indicators: IndicatorConfig,
    pub rom: RomConfig,
    pub newton: NewtonConfig,
    pub baseline: BaselineConfig,
    pub validate: ValidateConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            problem: ProblemConfig::default(),
            mu0: None,
            trust_region: TrustRegionConfig::default(),
            indicators: IndicatorConfig::default(),
            rom: RomConfig::default(),
            newton: NewtonConfig::default(),
            baseline: BaselineConfig::default(),
            validate: ValidateConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks, with errors naming the offending key.
    pub fn check(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if let Err(msg) = self.problem.check() {
            return fail(msg);
        }
        if let Err(e) = self.trust_region.validate() {
            return fail(format!("trust_region: {e}"));
        }
        if let Some(mu0) = &self.mu0 {
            if mu0.len() != self.problem.n_mu() || mu0.iter().any(|v| !v.is_finite()) {
                return fail(format!("mu0: must hold {} finite values", self.problem.n_mu()));
            }
        }
        if self
            .indicators
            .betas
            .iter()
            .chain(&self.indicators.alphas)
            .any(|w| !(*w > 0.0))
        {
            return fail("indicators.betas, indicators.alphas: must be positive".into());
        }
        if self.indicators.max_steps == 0 {
            return fail("indicators.max_steps: must be positive".into());
        }
        if !(self.rom.stationarity_tol > 0.0) || !(self.rom.rank_tol > 0.0 && self.rom.rank_tol < 1.0) {
            return fail("rom.stationarity_tol, rom.rank_tol: need tol > 0 and 0 < rank_tol < 1".into());
        }
        if !(self.newton.tol_abs >= 0.0 && self.newton.tol_rel >= 0.0) || self.newton.max_iters == 0 {
            return fail("newton: tolerances must be nonnegative and max_iters positive".into());
        }
        if !(1..=MAX_REFERENCE_LEVEL).contains(&self.baseline.level) {
            return fail(format!("baseline.level: must be in 1..={MAX_REFERENCE_LEVEL}"));
        }
        if !(0.0 < self.baseline.armijo && self.baseline.armijo < 1.0) {
            return fail("baseline.armijo: must be in (0, 1)".into());
        }
        if self.baseline.gtol.is_some_and(|g| !(g >= 0.0)) {
            return fail("baseline.gtol: must be nonnegative".into());
        }
        if !(self.validate.fd_step > 0.0) || self.validate.fd_tol.is_some_and(|t| !(t > 0.0)) {
            return fail("validate.fd_step, validate.fd_tol: must be positive".into());
        }
        Ok(())
    }

    pub fn mu0(&self) -> Vec<f64> {
        self.mu0.clone().unwrap_or_else(|| vec![1.0; self.problem.n_mu()])
    }

    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            tol_abs: self.newton.tol_abs,
            tol_rel: self.newton.tol_rel,
            max_iters: self.newton.max_iters,
            max_halvings: self.newton.max_halvings,
            ptc_max_iters: self.newton.ptc_max_iters,
            ..NewtonOptions::default()
        }
    }

    pub fn rom_options(&self) -> RomOptions {
        RomOptions {
            stationarity_tol: self.rom.stationarity_tol,
            max_iters: self.rom.max_iters,
            max_halvings: self.rom.max_halvings,
            rank_tol: self.rom.rank_tol,
            second_order: self.rom.second_order,
            ..RomOptions::default()
        }
    }

    pub fn adapt_options(&self) -> AdaptOptions {
        AdaptOptions {
            rom: self.rom_options(),
            newton: self.newton_options(),
            betas: self.indicators.betas,
            alphas: self.indicators.alphas,
            max_steps: self.indicators.max_steps,
            parallel: self.threads != 1,
        }
    }

    pub fn baseline_options(&self) -> BaselineOptions {
        BaselineOptions {
            level: self.baseline.level,
            max_iters: self.baseline.max_iters,
            gtol: self.baseline.gtol.unwrap_or(self.trust_region.gtol),
            armijo: self.baseline.armijo,
            max_backtracks: self.baseline.max_backtracks,
        }
    }

    pub fn fd_tol(&self) -> f64 {
        self.validate.fd_tol.unwrap_or_else(|| self.problem.fd_tol())
    }
}
