//! Observation model, scale hierarchy, priors and the joint log-posterior.
//!
//! Densities carry their full normalizing constants. Positive parameters
//! (τ², φ, σ², Λ diagonals) are densities over the parameter itself, so a
//! random walk on the log scale needs the usual Jacobian.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::data::CoreDataset;
use crate::error::{Error, Result};
use crate::model::{PhysicalConstants, Profile, N_THETA};
use crate::smoothing::{orthogonalize, SplineBasis, SplineSpec};
use crate::spatial::{CrossCovKind, ScalarField, ThetaCovariance};
use crate::state::ModelState;

pub const N_GAMMA: usize = 8;

pub const GAMMA_NAMES: [&str; N_GAMMA] = [
    "gamma_alpha", "gamma_log_A1", "gamma_log_A2", "gamma_log_E1", "gamma_log_E2", "gamma_t_rho1",
    "gamma_t_rho2", "gamma_t_rho3",
];

/// Hierarchical-mean index of each site parameter; stages 2 to 4 share.
pub const GAMMA_OF_THETA: [usize; N_THETA] = [0, 1, 2, 2, 2, 3, 4, 4, 4, 5, 6, 7];

/// `Mγ`.
pub fn hierarchical_mean_map(gamma: &[f64; N_GAMMA]) -> [f64; N_THETA] {
    std::array::from_fn(|a| gamma[GAMMA_OF_THETA[a]])
}

/// The 12 × 8 repeat matrix `M`.
pub fn mean_map_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(N_THETA, N_GAMMA, |a, g| if GAMMA_OF_THETA[a] == g { 1.0 } else { 0.0 })
}

/// Pairwise (tree) summation; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// Inverse-gamma log density, `∝ x^{−a−1} e^{−b/x}`.
pub fn log_inv_gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// `ln Γ_p(a)`.
pub fn ln_multigamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln() + (0..p).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// Inverse-Wishart log density,
/// `∝ |V|^{−(ν+p+1)/2} exp(−½ tr(S V⁻¹))`.
pub fn log_inv_wishart_pdf(v: &DMatrix<f64>, df: f64, s: &DMatrix<f64>) -> f64 {
    let p = v.nrows();
    let pf = p as f64;
    let Some(vc) = v.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let Some(sc) = s.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let ld_v = crate::spatial::chol_log_det(&vc);
    let ld_s = crate::spatial::chol_log_det(&sc);
    let tr = (s * vc.inverse()).trace();
    0.5 * df * ld_s - 0.5 * df * pf * 2f64.ln() - ln_multigamma(p, 0.5 * df)
        - 0.5 * (df + pf + 1.0) * ld_v
        - 0.5 * tr
}

/// Student-t with cached normalizing constants.
#[derive(Clone, Copy, Debug)]
pub struct StudentT {
    pub nu: f64,
    log_norm: f64,
    ln_beta: f64,
}

impl StudentT {
    pub fn new(nu: f64) -> Self {
        let log_norm = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln();
        let ln_beta = ln_gamma(0.5 * nu) + ln_gamma(0.5) - ln_gamma(0.5 * (nu + 1.0));
        Self { nu, log_norm, ln_beta }
    }

    #[inline]
    pub fn log_pdf(&self, z: f64) -> f64 {
        self.log_norm - 0.5 * (self.nu + 1.0) * (z * z / self.nu).ln_1p()
    }

    /// `P(T ≤ −|t|)`.
    pub fn tail(&self, t: f64) -> f64 {
        let t2 = t * t;
        let a = 0.5 * self.nu;
        let b = 0.5;
        let w = self.nu / (self.nu + t2);
        if w < (a + 1.0) / (a + b + 2.0) {
            0.5 * beta_reg_cf(a, b, w, t2 / (self.nu + t2), self.ln_beta)
        } else {
            0.5 - 0.5 * beta_reg_cf(b, a, t2 / (self.nu + t2), w, self.ln_beta)
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            self.tail(t)
        } else {
            1.0 - self.tail(t)
        }
    }

    /// `ln P(T ≤ t)`, accurate in both tails.
    pub fn ln_cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            self.tail(t).ln()
        } else {
            (-self.tail(t)).ln_1p()
        }
    }
}

/// Regularized incomplete beta `I_x(a, b)` by its continued fraction, for
/// `x` below the mean; `y = 1 − x` is passed separately to avoid
/// cancellation.
fn beta_reg_cf(a: f64, b: f64, x: f64, y: f64, ln_beta: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let front = (a * x.ln() + b * y.ln() - ln_beta).exp() / a;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..400 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    front * h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorFamily {
    StudentT,
    Normal,
}

/// Error distribution and scale-model options.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    pub family: ErrorFamily,
    /// Let the scale depend on the averaging length through `dx^η`.
    pub weighted: bool,
    /// Give each core its own scale around the expedition-level mean.
    pub hierarchical: bool,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            family: ErrorFamily::StudentT,
            weighted: true,
            hierarchical: true,
        }
    }
}

impl ErrorModel {
    pub fn label(&self) -> String {
        let yn = |b: bool| if b { "Y" } else { "N" };
        let fam = match self.family {
            ErrorFamily::StudentT => "t",
            ErrorFamily::Normal => "Normal",
        };
        format!("{fam} / weighted {} / hierarchical {}", yn(self.weighted), yn(self.hierarchical))
    }
}

/// Observation density with constants resolved for the current ν.
#[derive(Clone, Copy, Debug)]
pub enum ObsDensity {
    StudentT(StudentT),
    Normal,
}

impl ObsDensity {
    pub fn new(family: ErrorFamily, nu: f64) -> Self {
        match family {
            ErrorFamily::StudentT => ObsDensity::StudentT(StudentT::new(nu)),
            ErrorFamily::Normal => ObsDensity::Normal,
        }
    }

    /// Log density of `y` under the location-scale family truncated below
    /// at zero.
    #[inline]
    pub fn log_density(&self, y: f64, mu: f64, tau: f64) -> f64 {
        if !(y > 0.0) {
            return f64::NEG_INFINITY;
        }
        let z = (y - mu) / tau;
        match self {
            ObsDensity::StudentT(t) => t.log_pdf(z) - tau.ln() - t.ln_cdf(mu / tau),
            ObsDensity::Normal => {
                -0.5 * (2.0 * PI).ln() - 0.5 * z * z - tau.ln() - normal_ln_cdf(mu / tau)
            }
        }
    }
}

impl ObsDensity {
    /// Draw `y > 0` by rejection from the untruncated family.
    pub fn sample<R: rand::Rng + ?Sized>(&self, mu: f64, tau: f64, rng: &mut R) -> Result<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let t = match self {
            ObsDensity::StudentT(t) => Some(
                rand_distr::StudentT::new(t.nu).map_err(|e| Error::Domain(e.to_string()))?,
            ),
            ObsDensity::Normal => None,
        };
        for _ in 0..10_000 {
            let z: f64 = match &t {
                Some(t) => t.sample(rng),
                None => StandardNormal.sample(rng),
            };
            let y = mu + tau * z;
            if y > 0.0 {
                return Ok(y);
            }
        }
        Err(Error::Rejection {
            attempts: 10_000,
            detail: format!("no positive draw for location {mu}, scale {tau}"),
        })
    }
}

/// `ln Φ(x)`.
pub fn normal_ln_cdf(x: f64) -> f64 {
    let tail = 0.5 * erfc(x.abs() / std::f64::consts::SQRT_2);
    if x >= 0.0 {
        (-tail).ln_1p()
    } else {
        tail.ln()
    }
}

/// Truncated-below-at-zero Student-t log density.
pub fn log_trunc_t(y: f64, mu: f64, tau2: f64, nu: f64) -> f64 {
    ObsDensity::StudentT(StudentT::new(nu)).log_density(y, mu, tau2.sqrt())
}

/// Truncated-below-at-zero normal log density.
pub fn log_trunc_normal(y: f64, mu: f64, tau2: f64) -> f64 {
    ObsDensity::Normal.log_density(y, mu, tau2.sqrt())
}

/// `Σ_i log N(log τ²_i; log τ²_m + η_m log dx_i, σ²_τ)` over cores.
pub fn log_scale_hierarchy(
    tau2_core: &[f64],
    log_tau2_group: &[f64],
    eta_group: &[f64],
    sigma2_tau: f64,
    dx: &[f64],
    group: &[usize],
) -> f64 {
    let terms: Vec<f64> = tau2_core
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let m = group[i];
            log_normal_pdf(t.ln(), log_tau2_group[m] + eta_group[m] * dx[i].ln(), sigma2_tau)
        })
        .collect();
    pairwise_sum(&terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub var: f64,
}

impl NormalPrior {
    pub fn log_pdf(&self, x: f64) -> f64 {
        log_normal_pdf(x, self.mean, self.var)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaPrior {
    pub fn log_pdf(&self, x: f64) -> f64 {
        log_inv_gamma_pdf(x, self.shape, self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

impl UniformPrior {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if self.contains(x) {
            -(self.hi - self.lo).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Log density of a decay `φ` whose inverse has this uniform prior.
    pub fn log_pdf_of_inverse(&self, phi: f64) -> f64 {
        if phi > 0.0 && self.contains(1.0 / phi) {
            -(self.hi - self.lo).ln() - 2.0 * phi.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Inverse-Wishart prior with scale matrix `scale · I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvWishartPrior {
    pub df: f64,
    pub scale: f64,
}

impl InvWishartPrior {
    pub fn scale_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(N_THETA, N_THETA) * self.scale
    }
}

/// The complete prior specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTable {
    pub gamma_mean: [f64; N_GAMMA],
    pub gamma_var: [f64; N_GAMMA],
    pub nu: UniformPrior,
    pub log_tau2_group: NormalPrior,
    pub eta_group: NormalPrior,
    pub sigma2_tau: InvGammaPrior,
    pub v: InvWishartPrior,
    /// Uniform prior on `1/φ`, km.
    pub inv_phi: UniformPrior,
    pub sigma2_beta: InvGammaPrior,
    pub inv_phi_beta: UniformPrior,
    /// Standard deviation of free loadings (log scale for diagonals) in the
    /// non-separable kinds.
    pub loading_sd: f64,
}

impl Default for PriorTable {
    fn default() -> Self {
        Self {
            gamma_mean: [-0.5, 2.4, 6.35, 9.23, 9.97, 0.0, 0.0, 0.0],
            gamma_var: [0.25, 0.04, 0.04, 0.04, 0.0625, 1.0, 1.0, 1.0],
            nu: UniformPrior { lo: 4.0, hi: 30.0 },
            log_tau2_group: NormalPrior { mean: -7.0, var: 4.0 },
            eta_group: NormalPrior { mean: -8.0, var: 4.0 },
            sigma2_tau: InvGammaPrior { shape: 2.1, scale: 0.1 },
            v: InvWishartPrior { df: 13.0, scale: 1.0 },
            inv_phi: UniformPrior { lo: 10.0, hi: 1000.0 },
            sigma2_beta: InvGammaPrior { shape: 2.1, scale: 0.1 },
            inv_phi_beta: UniformPrior { lo: 10.0, hi: 1000.0 },
            loading_sd: 1.0,
        }
    }
}

impl PriorTable {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid prior: {what}")));
        if self.gamma_var.iter().any(|&v| !(v > 0.0)) {
            return bad("gamma variances must be positive");
        }
        if !(self.nu.lo > 0.0 && self.nu.hi > self.nu.lo) {
            return bad("nu bounds");
        }
        if !(self.log_tau2_group.var > 0.0 && self.eta_group.var > 0.0) {
            return bad("normal variances must be positive");
        }
        for ig in [self.sigma2_tau, self.sigma2_beta] {
            if !(ig.shape > 0.0 && ig.scale > 0.0) {
                return bad("inverse-gamma parameters must be positive");
            }
        }
        if !(self.v.df > (N_THETA - 1) as f64 && self.v.scale > 0.0) {
            return bad("inverse-Wishart needs df > 11 and positive scale");
        }
        for u in [self.inv_phi, self.inv_phi_beta] {
            if !(u.lo > 0.0 && u.hi > u.lo) {
                return bad("decay range bounds");
            }
        }
        if !(self.loading_sd > 0.0) {
            return bad("loading_sd must be positive");
        }
        Ok(())
    }
}

/// Smoothing term configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    Spline(SplineSpec),
}

impl Smoothing {
    pub fn spec(&self) -> Option<&SplineSpec> {
        match self {
            Smoothing::None => None,
            Smoothing::Spline(s) => Some(s),
        }
    }

    pub fn dim(&self) -> usize {
        self.spec().map_or(0, |s| s.dim())
    }

    pub fn label(&self) -> String {
        match self {
            Smoothing::None => "none".into(),
            Smoothing::Spline(s) => s.label(),
        }
    }
}

/// Model options shared by fitting, simulation and prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub constants: PhysicalConstants,
    pub error: ErrorModel,
    pub cross_covariance: CrossCovKind,
    pub smoothing: Smoothing,
    pub priors: PriorTable,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            constants: PhysicalConstants::default(),
            error: ErrorModel::default(),
            cross_covariance: CrossCovKind::Separable,
            smoothing: Smoothing::Spline(SplineSpec::default()),
            priors: PriorTable::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        self.cross_covariance.validate()?;
        if let Some(s) = self.smoothing.spec() {
            s.validate()?;
        }
        self.priors.validate()
    }
}

/// Fixed per-core smoothing design.
#[derive(Clone, Debug)]
pub struct CoreSpline {
    pub basis: SplineBasis,
    /// Basis evaluated at the core's depths.
    pub h: DMatrix<f64>,
}

/// Dataset plus everything about the model that does not change while
/// sampling.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub data: CoreDataset,
    pub spec: ModelSpec,
    pub splines: Vec<Option<CoreSpline>>,
    /// Whether `η_m` is a free parameter for each expedition.
    pub eta_free: Vec<bool>,
    pub log_dx: Vec<f64>,
    /// Treat every observation as uninformative, so the sampler targets the
    /// prior (restricted to the support).
    pub prior_only: bool,
}

impl ModelContext {
    pub fn new(data: CoreDataset, spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let splines = data
            .cores
            .iter()
            .map(|c| match spec.smoothing.spec() {
                None => Ok(None),
                Some(s) => {
                    if c.len() < crate::model::N_STAGES + s.dim() {
                        return Err(Error::DegenerateCore {
                            core: c.core_id.clone(),
                            detail: format!("{} measurements are too few for smoothing", c.len()),
                        });
                    }
                    let basis = SplineBasis::for_depths(s, &c.depths).map_err(|e| Error::DegenerateCore {
                        core: c.core_id.clone(),
                        detail: e.to_string(),
                    })?;
                    let h = basis.matrix(&c.depths);
                    Ok(Some(CoreSpline { basis, h }))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let eta_free = (0..data.n_expeditions())
            .map(|m| spec.error.weighted && data.dx_varies(m))
            .collect();
        let log_dx = data.cores.iter().map(|c| c.dx.ln()).collect();
        Ok(Self {
            data,
            spec,
            splines,
            eta_free,
            log_dx,
            prior_only: false,
        })
    }

    pub fn spline_dim(&self) -> usize {
        self.spec.smoothing.dim()
    }

    pub fn obs_density(&self, nu: f64) -> ObsDensity {
        ObsDensity::new(self.spec.error.family, nu)
    }

    /// Profile of core `c` under site parameters of its site.
    pub fn profile(&self, c: usize, theta: &crate::model::SiteTheta) -> Result<Profile> {
        Profile::new(theta, &self.data.cores[c].covariates, &self.spec.constants)
    }

    /// Mean density of core `c` at its measured depths.
    pub fn core_mean(&self, c: usize, profile: &Profile, beta: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let core = &self.data.cores[c];
        out.clear();
        let rho_ice = self.spec.constants.rho_ice;
        match &self.splines[c] {
            Some(sp) if beta.iter().any(|&b| b != 0.0) => {
                let ob = orthogonalize(profile, &core.depths, &sp.h)?;
                let smooth = ob.smooth_terms(beta);
                for (j, &x) in core.depths.iter().enumerate() {
                    out.push(rho_ice * crate::model::logistic(profile.logit(x) + smooth[j]));
                }
            }
            _ => {
                for &x in &core.depths {
                    out.push(rho_ice * crate::model::logistic(profile.logit(x)));
                }
            }
        }
        Ok(())
    }

    /// Pointwise log-likelihood of core `c` given its means.
    pub fn core_loglik(&self, c: usize, mu: &[f64], tau2: f64, obs: &ObsDensity, out: &mut Vec<f64>) {
        let tau = tau2.sqrt();
        out.clear();
        if self.prior_only {
            out.resize(mu.len(), 0.0);
            return;
        }
        for (&y, &m) in self.data.cores[c].density.iter().zip(mu) {
            out.push(obs.log_density(y, m, tau));
        }
    }

    /// Error variance of core `c`.
    pub fn tau2_of(&self, state: &ModelState, c: usize) -> f64 {
        if self.spec.error.hierarchical {
            state.tau2_core[c]
        } else {
            let m = self.data.expedition_of_core[c];
            (state.log_tau2_group[m] + state.eta_group[m] * self.log_dx[c]).exp()
        }
    }

    /// Per-observation log-likelihoods for all cores, in global order.
    /// `None` when some site is outside the support.
    pub fn pointwise_loglik(&self, state: &ModelState) -> Result<Option<Vec<f64>>> {
        let obs = self.obs_density(state.nu);
        let per_core: Vec<Result<Option<Vec<f64>>>> = (0..self.data.n_cores())
            .into_par_iter()
            .map(|c| {
                let s = self.data.site_of_core[c];
                let profile = match self.profile(c, &state.theta[s]) {
                    Ok(p) => p,
                    Err(Error::OutOfSupport(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let mut mu = Vec::new();
                self.core_mean(c, &profile, &state.beta[s], &mut mu)?;
                let mut ll = Vec::new();
                self.core_loglik(c, &mu, self.tau2_of(state, c), &obs, &mut ll);
                Ok(Some(ll))
            })
            .collect();
        let mut out = Vec::with_capacity(self.data.n_obs());
        for r in per_core {
            match r? {
                Some(ll) => out.extend(ll),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Log-likelihood summed per core, then across cores, both pairwise.
    pub fn log_likelihood(&self, state: &ModelState) -> Result<f64> {
        let Some(ll) = self.pointwise_loglik(state)? else {
            return Ok(f64::NEG_INFINITY);
        };
        let sums: Vec<f64> = (0..self.data.n_cores())
            .map(|c| pairwise_sum(&ll[self.data.obs_offset[c]..self.data.obs_offset[c + 1]]))
            .collect();
        Ok(pairwise_sum(&sums))
    }

    /// Site-major `θ − Mγ`.
    pub fn theta_residual(&self, state: &ModelState) -> Vec<f64> {
        let mean = hierarchical_mean_map(&state.gamma);
        let mut r = Vec::with_capacity(N_THETA * state.theta.len());
        for th in &state.theta {
            for a in 0..N_THETA {
                r.push(th.0[a] - mean[a]);
            }
        }
        r
    }

    /// Log prior of the cross-covariance parameters.
    pub fn log_cross_cov_prior(&self, state: &ModelState) -> f64 {
        let p = &self.spec.priors;
        let cc = &state.cross;
        let decays: f64 = cc.decays.iter().map(|&phi| p.inv_phi.log_pdf_of_inverse(phi)).sum();
        match cc.kind {
            CrossCovKind::Separable => {
                log_inv_wishart_pdf(&cc.point_covariance(), p.v.df, &p.v.scale_matrix()) + decays
            }
            kind => {
                let var = p.loading_sd * p.loading_sd;
                let mut lp = decays;
                for l in 0..kind.n_factors() {
                    for a in 0..N_THETA {
                        if !kind.is_free_loading(a, l) {
                            continue;
                        }
                        let v = cc.loadings[(a, l)];
                        lp += if a == l {
                            log_normal_pdf(v.ln(), 0.0, var) - v.ln()
                        } else {
                            log_normal_pdf(v, 0.0, var)
                        };
                    }
                }
                lp
            }
        }
    }

    /// Log prior of the error-scale parameters, including the per-core
    /// hierarchy when enabled.
    pub fn log_scale_prior(&self, state: &ModelState) -> f64 {
        let p = &self.spec.priors;
        let mut lp = 0.0;
        for m in 0..self.data.n_expeditions() {
            lp += p.log_tau2_group.log_pdf(state.log_tau2_group[m]);
            if self.eta_free[m] {
                lp += p.eta_group.log_pdf(state.eta_group[m]);
            }
        }
        if self.spec.error.hierarchical {
            let dx: Vec<f64> = self.data.cores.iter().map(|c| c.dx).collect();
            lp += log_scale_hierarchy(
                &state.tau2_core,
                &state.log_tau2_group,
                &state.eta_group,
                state.sigma2_tau,
                &dx,
                &self.data.expedition_of_core,
            );
            lp -= pairwise_sum(&state.tau2_core.iter().map(|t| t.ln()).collect::<Vec<_>>());
            lp += p.sigma2_tau.log_pdf(state.sigma2_tau);
        }
        lp
    }

    /// Log prior of the smoothing coefficient fields.
    pub fn log_beta_prior(&self, state: &ModelState) -> Result<f64> {
        let k = self.spline_dim();
        if k == 0 {
            return Ok(0.0);
        }
        let p = &self.spec.priors;
        let field = ScalarField::new(&self.data.sites.dist, state.phi_beta)?;
        let mut lp = p.inv_phi_beta.log_pdf_of_inverse(state.phi_beta);
        for j in 0..k {
            let col: Vec<f64> = state.beta.iter().map(|b| b[j]).collect();
            lp += field.log_density(&col, state.sigma2_beta[j]);
            lp += p.sigma2_beta.log_pdf(state.sigma2_beta[j]);
        }
        Ok(lp)
    }

    pub fn log_gamma_prior(&self, gamma: &[f64; N_GAMMA]) -> f64 {
        let p = &self.spec.priors;
        (0..N_GAMMA)
            .map(|g| log_normal_pdf(gamma[g], p.gamma_mean[g], p.gamma_var[g]))
            .sum()
    }

    /// Every prior term, `−∞` outside the support.
    pub fn log_prior(&self, state: &ModelState) -> Result<f64> {
        let p = &self.spec.priors;
        let mut lp = p.nu.log_pdf(state.nu);
        if self.spec.error.family == ErrorFamily::Normal {
            lp = 0.0;
        }
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        let cov = ThetaCovariance::from_spec(&state.cross, &self.data.sites)?;
        lp += cov.log_density(&self.theta_residual(state));
        lp += self.log_gamma_prior(&state.gamma);
        lp += self.log_cross_cov_prior(state);
        lp += self.log_scale_prior(state);
        lp += self.log_beta_prior(state)?;
        Ok(lp)
    }
}

/// Joint log-posterior (unnormalized in the data, normalized in every
/// density term). `−∞` outside the support, including a negative first
/// change depth at any core.
pub fn log_posterior(state: &ModelState, ctx: &ModelContext) -> Result<f64> {
    let lp = ctx.log_prior(state)?;
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(lp + ctx.log_likelihood(state)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn mean_map() {
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            hierarchical_mean_map(&g),
            [1.0, 2.0, 3.0, 3.0, 3.0, 4.0, 5.0, 5.0, 5.0, 6.0, 7.0, 8.0]
        );
        let m = mean_map_matrix();
        let sums: Vec<f64> = (0..N_GAMMA).map(|g| m.column(g).sum()).collect();
        assert_eq!(sums, vec![1.0, 1.0, 3.0, 1.0, 3.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn t_cdf_matches_statrs() {
        for nu in [4.0, 6.0, 11.3, 30.0] {
            let reference = StudentsT::new(0.0, 1.0, nu).unwrap();
            let ours = StudentT::new(nu);
            for &t in &[-40.0, -13.3, -5.0, -2.0, -0.7, -0.1, 0.0, 0.3, 1.0, 2.5, 9.0, 25.0] {
                let a = ours.cdf(t);
                let b = reference.cdf(t);
                assert!((a - b).abs() <= 1e-13 + 1e-11 * b.abs(), "nu {nu} t {t}: {a} vs {b}");
            }
            // Lower tail keeps relative accuracy where 1 − cdf would not.
            let far = ours.tail(-60.0);
            let refr = reference.cdf(-60.0);
            assert!((far / refr - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn t_log_pdf_matches_statrs() {
        use statrs::distribution::Continuous;
        let reference = StudentsT::new(0.0, 1.0, 7.5).unwrap();
        let ours = StudentT::new(7.5);
        for z in [-4.0, -1.0, 0.0, 0.5, 3.0] {
            assert!((ours.log_pdf(z) - reference.ln_pdf(z)).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_location_doubles_density() {
        use statrs::distribution::Continuous;
        let nu = 5.0;
        let tau2: f64 = 0.04;
        let reference = StudentsT::new(0.0, tau2.sqrt(), nu).unwrap();
        for y in [0.01, 0.1, 0.5] {
            let a = log_trunc_t(y, 0.0, tau2, nu);
            assert!((a - (2f64.ln() + reference.ln_pdf(y))).abs() < 1e-12);
        }
        assert_eq!(log_trunc_t(0.0, 0.4, 0.01, 6.0), f64::NEG_INFINITY);
        assert_eq!(log_trunc_t(-0.1, 0.4, 0.01, 6.0), f64::NEG_INFINITY);
    }

    #[test]
    fn far_truncation_is_negligible() {
        let t = StudentT::new(4.0);
        let correction = -t.ln_cdf(20.0);
        assert!(correction > 0.0 && correction < 1e-4);
        let t30 = StudentT::new(30.0);
        assert!(-t30.ln_cdf(20.0) < 1e-12);
        assert!(-normal_ln_cdf(20.0) < 1e-12);
    }

    /// Composite Gauss–Legendre on a substituted half-line.
    pub(crate) fn integrate_half_line(f: impl Fn(f64) -> f64, mu: f64, tau: f64) -> f64 {
        // Nodes/weights of 20-point Gauss–Legendre on [−1, 1].
        let (x, w) = gauss_legendre_20();
        let mut breaks = vec![0.0];
        for k in -60..=60 {
            let b = mu + tau * k as f64 * 0.25;
            if b > 0.0 {
                breaks.push(b);
            }
        }
        let mut total = 0.0;
        for win in breaks.windows(2) {
            let (a, b) = (win[0], win[1]);
            for i in 0..20 {
                let t = 0.5 * (b - a) * x[i] + 0.5 * (a + b);
                total += 0.5 * (b - a) * w[i] * f(t);
            }
        }
        // Remaining tail via y = last + s/(1−s).
        let last = *breaks.last().unwrap();
        for seg in 0..200 {
            let (a, b) = (seg as f64 / 200.0, (seg + 1) as f64 / 200.0);
            for i in 0..20 {
                let s = 0.5 * (b - a) * x[i] + 0.5 * (a + b);
                let y = last + tau * s / (1.0 - s);
                let jac = tau / (1.0 - s).powi(2);
                total += 0.5 * (b - a) * w[i] * f(y) * jac;
            }
        }
        total
    }

    pub(crate) fn gauss_legendre_20() -> ([f64; 20], [f64; 20]) {
        let n = 20;
        let mut x = [0.0; 20];
        let mut w = [0.0; 20];
        for i in 0..n {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p1, mut p2) = (1.0, 0.0);
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
                }
                let pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() < 1e-15 {
                    x[i] = z;
                    w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
                    break;
                }
            }
        }
        (x, w)
    }

    #[test]
    fn truncated_t_integrates_to_one() {
        let (mu, tau, nu) = (0.4, 0.03, 6.0);
        let total = integrate_half_line(|y| log_trunc_t(y, mu, tau * tau, nu).exp(), mu, tau);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let near = integrate_half_line(|y| log_trunc_t(y, 0.05, 0.01, 4.0).exp(), 0.05, 0.1);
        assert!((near - 1.0).abs() < 1e-6, "{near}");
        let normal = integrate_half_line(|y| log_trunc_normal(y, 0.02, 0.0025).exp(), 0.02, 0.05);
        assert!((normal - 1.0).abs() < 1e-6, "{normal}");
    }

    #[test]
    fn scale_hierarchy_examples() {
        let lp = |tau2: f64, s2: f64| log_scale_hierarchy(&[tau2], &[-7.0], &[0.0], s2, &[3.0], &[0]);
        let mode = (-7f64).exp();
        assert!(lp(mode, 1e-6) > lp(mode * 1.01, 1e-6));
        assert!(lp(mode, 1e-6) > lp(mode * 0.99, 1e-6));
        let a = log_scale_hierarchy(&[0.002], &[-6.0], &[-8.0], 0.3, &[1.0], &[0]);
        let b = log_scale_hierarchy(&[0.002], &[-6.0], &[3.0], 0.3, &[1.0], &[0]);
        assert_eq!(a, b);
        // Prior-median standard deviation of the expedition scale.
        let p = PriorTable::default();
        assert!(((p.log_tau2_group.mean / 2.0).exp() - 0.0302).abs() < 5e-5);
    }

    #[test]
    fn inverse_gamma_convention() {
        // Mean b/(a−1) by numerical integration on a log grid.
        let (a, b) = (2.1, 0.1);
        let n = 200_000;
        let (lo, hi) = ((1e-6f64).ln(), (1e6f64).ln());
        let h = (hi - lo) / n as f64;
        let (mut mass, mut mean) = (0.0, 0.0);
        for i in 0..n {
            let x = (lo + (i as f64 + 0.5) * h).exp();
            let d = log_inv_gamma_pdf(x, a, b).exp() * x * h;
            mass += d;
            mean += d * x;
        }
        assert!((mass - 1.0).abs() < 1e-6);
        assert!((mean - b / (a - 1.0)).abs() < 1e-3);
    }

    #[test]
    fn inverse_wishart_reduces_to_inverse_gamma() {
        // p = 1: IW(ν, s) is IG(ν/2, s/2).
        let v = DMatrix::from_element(1, 1, 0.7);
        let s = DMatrix::from_element(1, 1, 1.3);
        let a = log_inv_wishart_pdf(&v, 5.0, &s);
        let b = log_inv_gamma_pdf(0.7, 2.5, 0.65);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn decay_prior_density() {
        let u = UniformPrior { lo: 10.0, hi: 1000.0 };
        assert_eq!(u.log_pdf_of_inverse(1.0 / 5.0), f64::NEG_INFINITY);
        assert_eq!(u.log_pdf_of_inverse(1.0 / 2000.0), f64::NEG_INFINITY);
        // Integrates to one over (1/1000, 1/10).
        let n = 100_000;
        let (lo, hi) = (1e-3f64, 0.1f64);
        let h = (hi.ln() - lo.ln()) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let phi = (lo.ln() + (i as f64 + 0.5) * h).exp();
                u.log_pdf_of_inverse(phi).exp() * phi * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pairwise_sum_is_order_fixed() {
        let xs: Vec<f64> = (0..1000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ModelSpec::default();
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
        let none: ModelSpec = toml::from_str("[smoothing]\nkind = \"none\"\n").unwrap();
        assert_eq!(none.smoothing, Smoothing::None);
        assert!(toml::from_str::<ModelSpec>("bogus = 1\n").is_err());
        let lf: ModelSpec = toml::from_str("[cross_covariance]\nkind = \"latent-factor\"\nrank = 3\n").unwrap();
        assert_eq!(lf.cross_covariance, CrossCovKind::LatentFactor { rank: 3 });
    }
}
