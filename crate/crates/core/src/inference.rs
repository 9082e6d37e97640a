//! Posterior post-processing: WAIC, kriging, predictive draws, stage
//! comparisons and summaries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{hierarchical_mean_map, ModelContext, Smoothing, N_GAMMA};
use crate::model::{
    arrhenius, generalized_logistic, logistic, PhysicalConstants, Profile, SiteCovariates, SiteTheta,
    CRITICAL_BOUNDS, N_STAGES, N_THETA,
};
use crate::sampler::ChainArchive;
use crate::smoothing::{orthogonalize, quantile_sorted, SplineBasis};
use crate::spatial::{
    cholesky_jittered, distance_matrix, exp_correlation, great_circle, CrossCovKind, LatLon, SiteSet,
    EARTH_RADIUS_KM,
};
use crate::state::ModelState;

/// Pointwise variance above which WAIC is flagged as unreliable.
pub const WAIC_VARIANCE_WARNING: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    /// Deviance scale, `−2·elpd`.
    pub waic: f64,
    pub p_waic: f64,
    pub lppd: f64,
    pub se: f64,
    /// Per-observation `lppd_n − var_n`.
    pub elpd_pointwise: Vec<f64>,
    pub n_high_variance: usize,
    pub warnings: Vec<String>,
}

impl WaicReport {
    /// WAIC difference `self − other` and the standard error of the paired
    /// pointwise differences.
    pub fn difference(&self, other: &WaicReport) -> Result<(f64, f64)> {
        let n = self.elpd_pointwise.len();
        if n != other.elpd_pointwise.len() {
            return Err(Error::Validation("WAIC reports cover different observations".into()));
        }
        let d: Vec<f64> = self
            .elpd_pointwise
            .iter()
            .zip(&other.elpd_pointwise)
            .map(|(a, b)| -2.0 * (a - b))
            .collect();
        Ok((self.waic - other.waic, (n as f64 * sample_var(&d)).sqrt()))
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// WAIC from a `[draw][observation]` log-likelihood matrix.
pub fn waic(loglik: &[Vec<f64>]) -> Result<WaicReport> {
    let s = loglik.len();
    if s == 0 {
        return Err(Error::Validation("no draws with log-likelihoods".into()));
    }
    let n = loglik[0].len();
    if n == 0 || loglik.iter().any(|r| r.len() != n) {
        return Err(Error::Validation("log-likelihood rows are empty or ragged".into()));
    }
    let per_obs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = loglik.iter().map(|r| r[j]).collect();
            (log_sum_exp(&col) - (s as f64).ln(), sample_var(&col))
        })
        .collect();
    let lppd_n: Vec<f64> = per_obs.iter().map(|p| p.0).collect();
    let var_n: Vec<f64> = per_obs.iter().map(|p| p.1).collect();
    let elpd: Vec<f64> = lppd_n.iter().zip(&var_n).map(|(l, v)| l - v).collect();
    let lppd = crate::likelihood::pairwise_sum(&lppd_n);
    let p_waic = crate::likelihood::pairwise_sum(&var_n);
    let dev: Vec<f64> = elpd.iter().map(|e| -2.0 * e).collect();
    let n_high = var_n.iter().filter(|&&v| v > WAIC_VARIANCE_WARNING).count();
    let mut warnings = Vec::new();
    if n_high > 0 {
        warnings.push(format!(
            "{n_high} of {n} observations have log-likelihood variance above {WAIC_VARIANCE_WARNING}; WAIC may be unreliable"
        ));
    }
    Ok(WaicReport {
        waic: -2.0 * (lppd - p_waic),
        p_waic,
        lppd,
        se: (n as f64 * sample_var(&dev)).sqrt(),
        elpd_pointwise: elpd,
        n_high_variance: n_high,
        warnings,
    })
}

pub fn waic_archive(archive: &ChainArchive) -> Result<WaicReport> {
    waic(&archive.loglik)
}

/// Standard error of a mean from non-overlapping batch means with
/// `⌊√n⌋` batches.
pub fn batch_means_se(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return 0.0;
    }
    let size = n / b;
    let means: Vec<f64> = (0..b).map(|i| mean(&x[i * size..(i + 1) * size])).collect();
    (sample_var(&means) / b as f64).sqrt()
}

/// Monte Carlo standard error of the mean from Geyer's initial monotone
/// sequence estimate of the integrated autocorrelation time.
pub fn autocorrelation_se(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 0.0;
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let acov = |lag: usize| -> f64 { c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
    let g0 = acov(0);
    if g0 <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = acov(2 * k) + acov(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    let var_mean = (2.0 * sum - g0).max(g0) / n as f64;
    var_mean.sqrt()
}

/// Effective sample size implied by the batch-means standard error.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let se = batch_means_se(x);
    let v = sample_var(x);
    if se == 0.0 {
        x.len() as f64
    } else {
        (v / (se * se)).min(x.len() as f64)
    }
}

/// Symmetric square root factor of a covariance, with negative eigenvalues
/// from rounding clamped to zero.
fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(cov.clone());
    let mut q = e.eigenvectors;
    for (j, &l) in e.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        q.column_mut(j).scale_mut(s);
    }
    q
}

/// Conditional distribution of one new site given the observed sites.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteConditional {
    pub theta_mean: [f64; N_THETA],
    pub theta_cov: DMatrix<f64>,
    pub beta_mean: Vec<f64>,
    pub beta_var: Vec<f64>,
    /// Observed site at distance zero, if any.
    pub coincident: Option<usize>,
}

/// A kriged draw at one new site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDraw {
    pub theta: SiteTheta,
    pub beta: Vec<f64>,
}

enum ThetaSolver {
    /// `R⁻¹` factor and `W = R⁻¹X` with `X` the `n × 12` residual matrix.
    Separable {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        w: DMatrix<f64>,
        v: DMatrix<f64>,
        phi: f64,
    },
    Dense {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        w: DVector<f64>,
    },
}

/// Kriging machinery for one posterior draw.
pub struct Kriger<'a> {
    state: &'a ModelState,
    mean: [f64; N_THETA],
    theta: ThetaSolver,
    beta: Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)>,
}

impl<'a> Kriger<'a> {
    pub fn new(state: &'a ModelState, sites: &SiteSet) -> Result<Self> {
        let n = sites.len();
        if state.theta.len() != n {
            return Err(Error::Validation("state and site set sizes differ".into()));
        }
        let mean = hierarchical_mean_map(&state.gamma);
        let resid: Vec<f64> = state
            .theta
            .iter()
            .flat_map(|t| (0..N_THETA).map(move |a| t.0[a] - mean[a]))
            .collect();
        let theta = match state.cross.kind {
            CrossCovKind::Separable => {
                let phi = state.cross.decays[0];
                let (chol, _) = cholesky_jittered(&exp_correlation(&sites.dist, phi), "kriging correlation")?;
                let x = DMatrix::from_row_slice(n, N_THETA, &resid);
                ThetaSolver::Separable {
                    w: chol.solve(&x),
                    chol,
                    v: state.cross.point_covariance(),
                    phi,
                }
            }
            _ => {
                let sigma = state.cross.cross_block(&sites.dist);
                let (chol, _) = cholesky_jittered(&sigma, "kriging cross-covariance")?;
                ThetaSolver::Dense {
                    w: chol.solve(&DVector::from_vec(resid)),
                    chol,
                }
            }
        };
        let k = state.sigma2_beta.len();
        let beta = if k > 0 {
            let (chol, _) = cholesky_jittered(&exp_correlation(&sites.dist, state.phi_beta), "kriging smoothing correlation")?;
            let b = DMatrix::from_fn(n, k, |s, j| state.beta[s][j]);
            Some((chol.clone(), chol.solve(&b)))
        } else {
            None
        };
        Ok(Self {
            state,
            mean,
            theta,
            beta,
        })
    }

    /// Conditional of a new site from its distances (km) to the observed sites.
    pub fn conditional(&self, dist: &[f64]) -> Result<SiteConditional> {
        let n = self.state.theta.len();
        if dist.len() != n {
            return Err(Error::Validation("distance vector length differs from site count".into()));
        }
        let coincident = dist.iter().position(|&d| d == 0.0);
        let mut theta_mean = self.mean;
        let theta_cov = match &self.theta {
            ThetaSolver::Separable { chol, w, v, phi } => {
                let r = DVector::from_iterator(n, dist.iter().map(|&d| (-phi * d).exp()));
                for a in 0..N_THETA {
                    theta_mean[a] += r.dot(&w.column(a));
                }
                let shrink = (1.0 - r.dot(&chol.solve(&r))).max(0.0);
                v * shrink
            }
            ThetaSolver::Dense { chol, w } => {
                let d_no = DMatrix::from_row_slice(1, n, dist);
                let s_no = self.state.cross.cross_block(&d_no);
                let m = &s_no * w;
                for a in 0..N_THETA {
                    theta_mean[a] += m[a];
                }
                let s_nn = self.state.cross.point_covariance();
                let sol = chol.solve(&s_no.transpose());
                let c = s_nn - &s_no * sol;
                (&c + c.transpose()) * 0.5
            }
        };
        let (beta_mean, beta_var) = match &self.beta {
            Some((chol, w)) => {
                let phi = self.state.phi_beta;
                let r = DVector::from_iterator(n, dist.iter().map(|&d| (-phi * d).exp()));
                let shrink = (1.0 - r.dot(&chol.solve(&r))).max(0.0);
                (
                    (0..w.ncols()).map(|j| r.dot(&w.column(j))).collect(),
                    self.state.sigma2_beta.iter().map(|s2| s2 * shrink).collect(),
                )
            }
            None => (Vec::new(), Vec::new()),
        };
        Ok(SiteConditional {
            theta_mean,
            theta_cov,
            beta_mean,
            beta_var,
            coincident,
        })
    }

    /// One conditional draw. A site at distance zero from an observed site
    /// returns that site's values exactly.
    pub fn draw<R: Rng + ?Sized>(&self, dist: &[f64], rng: &mut R) -> Result<SiteDraw> {
        if let Some(s) = dist.iter().position(|&d| d == 0.0) {
            return Ok(SiteDraw {
                theta: self.state.theta[s],
                beta: self.state.beta[s].clone(),
            });
        }
        let c = self.conditional(dist)?;
        let f = psd_factor(&c.theta_cov);
        let z = DVector::from_iterator(N_THETA, (0..N_THETA).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = f * z;
        let theta = SiteTheta(std::array::from_fn(|a| c.theta_mean[a] + x[a]));
        let beta = c
            .beta_mean
            .iter()
            .zip(&c.beta_var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(SiteDraw { theta, beta })
    }
}

const MAX_SUPPORT_ATTEMPTS: usize = 1000;

/// Per-draw random stream independent of thread scheduling.
fn draw_rng(seed: u64, d: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(d as u64 + 1);
    rng
}

/// Kriged draws `[draw][location]` of θ and β at new locations, one per
/// selected archive draw. `dist_new_obs` is `new × observed`, km.
pub fn krige_theta(
    archive: &ChainArchive,
    sites: &SiteSet,
    dist_new_obs: &DMatrix<f64>,
    draws: &[usize],
    seed: u64,
) -> Result<Vec<Vec<SiteDraw>>> {
    if dist_new_obs.ncols() != sites.len() {
        return Err(Error::Validation("distance matrix columns differ from observed sites".into()));
    }
    draws
        .par_iter()
        .map(|&d| {
            let state = archive.state(d)?;
            let kr = Kriger::new(&state, sites)?;
            let mut rng = draw_rng(seed, d);
            (0..dist_new_obs.nrows())
                .map(|i| {
                    let row: Vec<f64> = dist_new_obs.row(i).iter().copied().collect();
                    kr.draw(&row, &mut rng)
                })
                .collect()
        })
        .collect()
}

/// Evenly spaced archive indices, at most `max` of them.
pub fn select_draws(n_draws: usize, max: usize) -> Vec<usize> {
    if max == 0 || n_draws <= max {
        return (0..n_draws).collect();
    }
    (0..max).map(|i| i * n_draws / max).collect()
}

/// How the smoothing term is formed at a location without a core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewSiteSmoothing {
    /// Project the spline basis out of the stage design over the requested depths.
    #[default]
    Projected,
    None,
}

/// Where to predict.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictTarget {
    /// An observed core: its own θ, β, τ² and projected basis.
    Core(usize),
    Location {
        location: LatLon,
        covariates: SiteCovariates,
        /// Expedition whose scale parameters set the error variance.
        expedition: usize,
        /// Averaging length, m; defaults to the depth spacing.
        dx: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDraws {
    pub depths: Vec<f64>,
    /// `[draw][depth]`.
    pub mu: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// Smoothing term at `depths` for one draw, or zeros.
fn smoothing_term(
    ctx: &ModelContext,
    target: &PredictTarget,
    profile: &Profile,
    depths: &[f64],
    beta: &[f64],
    mode: NewSiteSmoothing,
) -> Result<Vec<f64>> {
    let zero = vec![0.0; depths.len()];
    let Smoothing::Spline(spec) = &ctx.spec.smoothing else {
        return Ok(zero);
    };
    if beta.iter().all(|&b| b == 0.0) {
        return Ok(zero);
    }
    match target {
        PredictTarget::Core(c) => {
            let sp = ctx.splines[*c].as_ref().expect("spline context for every core");
            let core = &ctx.data.cores[*c];
            let ob = orthogonalize(profile, &core.depths, &sp.h)?;
            Ok(depths
                .iter()
                .map(|&x| ob.at(&sp.basis, profile, x).iter().zip(beta).map(|(h, b)| h * b).sum())
                .collect())
        }
        PredictTarget::Location { .. } => {
            if mode == NewSiteSmoothing::None || depths.len() < N_STAGES + spec.dim() {
                return Ok(zero);
            }
            let basis = SplineBasis::for_depths(spec, depths)?;
            let ob = orthogonalize(profile, depths, &basis.matrix(depths))?;
            Ok(ob.smooth_terms(beta))
        }
    }
}

/// Posterior predictive draws of the mean and of measurements at `depths`
/// by composition sampling over the selected archive draws.
pub fn predict_profile(
    archive: &ChainArchive,
    ctx: &ModelContext,
    target: &PredictTarget,
    depths: &[f64],
    draws: &[usize],
    mode: NewSiteSmoothing,
    seed: u64,
) -> Result<PredictiveDraws> {
    if depths.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::Domain("prediction depths must be finite and nonnegative".into()));
    }
    let dist_row = match target {
        PredictTarget::Core(c) => {
            if *c >= ctx.data.n_cores() {
                return Err(Error::Validation(format!("core index {c} out of range")));
            }
            None
        }
        PredictTarget::Location { location, expedition, .. } => {
            if *expedition >= ctx.data.n_expeditions() {
                return Err(Error::Validation(format!("expedition index {expedition} out of range")));
            }
            Some(distance_matrix(&[*location], &ctx.data.sites.locations))
        }
    };
    let rows: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .map(|&d| {
            let state = archive.state(d)?;
            let mut rng = draw_rng(seed, d);
            let (site, cov, tau2) = match target {
                PredictTarget::Core(c) => {
                    let s = ctx.data.site_of_core[*c];
                    (
                        SiteDraw {
                            theta: state.theta[s],
                            beta: state.beta[s].clone(),
                        },
                        ctx.data.cores[*c].covariates,
                        ctx.tau2_of(&state, *c),
                    )
                }
                PredictTarget::Location {
                    covariates,
                    expedition,
                    dx,
                    ..
                } => {
                    let row: Vec<f64> = dist_row.as_ref().unwrap().row(0).iter().copied().collect();
                    let kr = Kriger::new(&state, &ctx.data.sites)?;
                    let mut site = kr.draw(&row, &mut rng)?;
                    let mut attempts = 1;
                    // The site parameters are restricted to κ₁ ≥ 0, so
                    // conditional draws outside that region are redrawn.
                    while Profile::new(&site.theta, covariates, &ctx.spec.constants).is_err() {
                        if attempts == MAX_SUPPORT_ATTEMPTS {
                            return Err(Error::Rejection {
                                attempts,
                                detail: format!("kriged site parameters outside the support for draw {d}"),
                            });
                        }
                        site = kr.draw(&row, &mut rng)?;
                        attempts += 1;
                    }
                    let dx = dx.unwrap_or_else(|| crate::data::CoreRecord::default_dx(depths));
                    let m = *expedition;
                    let log_mean = state.log_tau2_group[m] + state.eta_group[m] * dx.ln();
                    let tau2 = if ctx.spec.error.hierarchical {
                        (log_mean + state.sigma2_tau.sqrt() * rng.sample::<f64, _>(StandardNormal)).exp()
                    } else {
                        log_mean.exp()
                    };
                    (site, *covariates, tau2)
                }
            };
            let profile = Profile::new(&site.theta, &cov, &ctx.spec.constants)?;
            let smooth = smoothing_term(ctx, target, &profile, depths, &site.beta, mode)?;
            let rho_ice = ctx.spec.constants.rho_ice;
            let mu: Vec<f64> = depths
                .iter()
                .zip(&smooth)
                .map(|(&x, s)| rho_ice * logistic(profile.logit(x) + s))
                .collect();
            let obs = ctx.obs_density(state.nu);
            let tau = tau2.sqrt();
            let y = mu.iter().map(|&m| obs.sample(m, tau, &mut rng)).collect::<Result<Vec<f64>>>()?;
            Ok((mu, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mu, y) = rows.into_iter().unzip();
    Ok(PredictiveDraws {
        depths: depths.to_vec(),
        mu,
        y,
    })
}

/// Posterior mean-density curves for an observed core under the hierarchical
/// mean only, the site parameters, and the site parameters plus smoothing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoreCurves {
    pub depths: Vec<f64>,
    pub hierarchical: Vec<Summary>,
    pub site: Vec<Summary>,
    pub smoothed: Vec<Summary>,
}

pub fn core_curves(archive: &ChainArchive, ctx: &ModelContext, c: usize, depths: &[f64], draws: &[usize]) -> Result<CoreCurves> {
    if c >= ctx.data.n_cores() {
        return Err(Error::Validation(format!("core index {c} out of range")));
    }
    let cov = ctx.data.cores[c].covariates;
    let consts = ctx.spec.constants;
    let rho_ice = consts.rho_ice;
    let per_draw: Vec<Option<[Vec<f64>; 3]>> = draws
        .par_iter()
        .map(|&d| {
            let state = archive.state(d)?;
            let s = ctx.data.site_of_core[c];
            let hier = match Profile::new(&SiteTheta(hierarchical_mean_map(&state.gamma)), &cov, &consts) {
                Ok(p) => p,
                Err(Error::OutOfSupport(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let site = Profile::new(&state.theta[s], &cov, &consts)?;
            let smooth = smoothing_term(ctx, &PredictTarget::Core(c), &site, depths, &state.beta[s], NewSiteSmoothing::Projected)?;
            Ok(Some([
                depths.iter().map(|&x| hier.density(x)).collect(),
                depths.iter().map(|&x| site.density(x)).collect(),
                depths
                    .iter()
                    .zip(&smooth)
                    .map(|(&x, s)| rho_ice * logistic(site.logit(x) + s))
                    .collect(),
            ]))
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<&[Vec<f64>; 3]> = per_draw.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Validation("no draw has a valid hierarchical-mean profile".into()));
    }
    let curve = |which: usize| -> Vec<Summary> {
        (0..depths.len())
            .map(|j| {
                let v: Vec<f64> = kept.iter().map(|k| k[which][j]).collect();
                Summary::of(format!("{}", depths[j]), &v)
            })
            .collect()
    };
    Ok(CoreCurves {
        depths: depths.to_vec(),
        hierarchical: curve(0),
        site: curve(1),
        smoothed: curve(2),
    })
}

/// Posterior probabilities that later-stage rate constants are smaller.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageProbabilities {
    /// `P[k₂>k₃]`, `P[k₂>k₄]`, `P[k₃>k₄]`.
    pub p: [f64; 3],
    /// Batch-means Monte Carlo standard errors.
    pub se: [f64; 3],
}

pub const STAGE_PAIRS: [(usize, usize); 3] = [(1, 2), (1, 3), (2, 3)];

/// Stage comparison at one location from θ draws in archive order.
pub fn stage_probabilities(
    thetas: &[SiteTheta],
    cov: &SiteCovariates,
    consts: &PhysicalConstants,
) -> Result<StageProbabilities> {
    if thetas.is_empty() {
        return Err(Error::Validation("no draws for stage comparison".into()));
    }
    let mut ind = [vec![], vec![], vec![]];
    for th in thetas {
        let p = crate::model::untransform_theta(th);
        let k: Vec<f64> = (0..N_STAGES)
            .map(|l| arrhenius(p.a[l], p.e[l], cov.temperature, consts))
            .collect::<Result<_>>()?;
        for (q, &(i, j)) in STAGE_PAIRS.iter().enumerate() {
            ind[q].push(if k[i] > k[j] { 1.0 } else { 0.0 });
        }
    }
    Ok(StageProbabilities {
        p: std::array::from_fn(|q| mean(&ind[q])),
        se: std::array::from_fn(|q| batch_means_se(&ind[q])),
    })
}

/// Stage comparison at every location of `[draw][location]` kriged draws.
pub fn stage_comparison(
    draws: &[Vec<SiteDraw>],
    covariates: &[SiteCovariates],
    consts: &PhysicalConstants,
) -> Result<Vec<StageProbabilities>> {
    (0..covariates.len())
        .into_par_iter()
        .map(|i| {
            let th: Vec<SiteTheta> = draws.iter().map(|d| d[i].theta).collect();
            stage_probabilities(&th, &covariates[i], consts)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(name: impl Into<String>, values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| quantile_sorted(&v, p);
        Self {
            name: name.into(),
            mean: mean(values),
            sd: sample_var(values).sqrt(),
            q05: q(0.05),
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            q95: q(0.95),
        }
    }
}

/// Mid-rank posterior quantile of a reference value.
pub fn reference_quantile(values: &[f64], reference: f64) -> f64 {
    let below = values.iter().filter(|&&v| v < reference).count() as f64;
    let ties = values.iter().filter(|&&v| v == reference).count() as f64;
    (below + 0.5 * ties) / values.len() as f64
}

/// Hierarchical parameter on its physical scale, with an optional published
/// point estimate to locate in the posterior.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhysicalSummary {
    pub summary: Summary,
    pub reference: Option<f64>,
    pub reference_quantile: Option<f64>,
}

pub const PHYSICAL_NAMES: [&str; N_GAMMA] = ["rho_surface", "A1", "A2", "E1", "E2", "rho_c1", "rho_c2", "rho_c3"];

/// Classic single-site point estimates for the rate constants and critical
/// densities.
pub const CLASSIC_ESTIMATES: [Option<f64>; N_GAMMA] = [
    None,
    Some(11.0),
    Some(575.0),
    Some(10160.0),
    Some(21400.0),
    Some(0.55),
    Some(0.73),
    Some(0.83),
];

/// `γ` mapped to surface density, pre-exponential factors, activation
/// energies and critical densities.
pub fn gamma_to_physical(gamma: &[f64; N_GAMMA], consts: &PhysicalConstants) -> [f64; N_GAMMA] {
    let mut out = [0.0; N_GAMMA];
    out[0] = consts.rho_ice * logistic(gamma[0]);
    for g in 1..5 {
        out[g] = gamma[g].exp();
    }
    for j in 0..3 {
        let (lo, hi) = CRITICAL_BOUNDS[j];
        out[5 + j] = generalized_logistic(gamma[5 + j], lo, hi);
    }
    out
}

pub fn summarize_physical(archive: &ChainArchive, consts: &PhysicalConstants) -> Result<Vec<PhysicalSummary>> {
    if archive.n_draws() == 0 {
        return Err(Error::Validation("archive has no draws".into()));
    }
    let phys: Vec<[f64; N_GAMMA]> = (0..archive.n_draws())
        .map(|d| gamma_to_physical(&archive.gamma(d), consts))
        .collect();
    Ok((0..N_GAMMA)
        .map(|g| {
            let v: Vec<f64> = phys.iter().map(|p| p[g]).collect();
            PhysicalSummary {
                summary: Summary::of(PHYSICAL_NAMES[g], &v),
                reference: CLASSIC_ESTIMATES[g],
                reference_quantile: CLASSIC_ESTIMATES[g].map(|r| reference_quantile(&v, r)),
            }
        })
        .collect())
}

/// Summaries of every archived column.
pub fn summarize_columns(archive: &ChainArchive) -> Result<Vec<Summary>> {
    if archive.n_draws() == 0 {
        return Err(Error::Validation("archive has no draws".into()));
    }
    Ok(archive
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let v: Vec<f64> = archive.draws.iter().map(|r| r[j]).collect();
            Summary::of(name.clone(), &v)
        })
        .collect())
}

/// Azimuthal equidistant projection about a fixed center, km.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AzimuthalEquidistant {
    pub center: LatLon,
}

impl AzimuthalEquidistant {
    /// Centered on the normalized mean of the points' unit vectors.
    pub fn centered_on(points: &[LatLon]) -> Self {
        let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
        for p in points {
            let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
            x += la.cos() * lo.cos();
            y += la.cos() * lo.sin();
            z += la.sin();
        }
        let h = x.hypot(y);
        Self {
            center: LatLon::new(z.atan2(h).to_degrees(), y.atan2(x).to_degrees()),
        }
    }

    pub fn forward(&self, p: LatLon) -> (f64, f64) {
        let (p0, l0) = (self.center.lat.to_radians(), self.center.lon.to_radians());
        let (p1, l1) = (p.lat.to_radians(), p.lon.to_radians());
        let c = great_circle(self.center, p) / EARTH_RADIUS_KM;
        if c == 0.0 {
            return (0.0, 0.0);
        }
        let az = ((l1 - l0).sin() * p1.cos()).atan2(p0.cos() * p1.sin() - p0.sin() * p1.cos() * (l1 - l0).cos());
        let rho = EARTH_RADIUS_KM * c;
        (rho * az.sin(), rho * az.cos())
    }

    pub fn inverse(&self, x: f64, y: f64) -> LatLon {
        let (p0, l0) = (self.center.lat.to_radians(), self.center.lon.to_radians());
        let rho = x.hypot(y);
        if rho == 0.0 {
            return self.center;
        }
        let c = rho / EARTH_RADIUS_KM;
        let lat = (c.cos() * p0.sin() + y * c.sin() * p0.cos() / rho).clamp(-1.0, 1.0).asin();
        let lon = l0 + (x * c.sin()).atan2(rho * p0.cos() * c.cos() - y * p0.sin() * c.sin());
        let mut lon = lon.to_degrees();
        while lon > 180.0 {
            lon -= 360.0;
        }
        while lon <= -180.0 {
            lon += 360.0;
        }
        LatLon::new(lat.to_degrees(), lon)
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Ray-casting point-in-polygon test.
pub fn point_in_polygon(pt: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > pt.1) != (yj > pt.1) && pt.0 < (xj - xi) * (pt.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    0.5 * a.abs()
}

/// Square lattice inside the convex hull of `sites`, in projected
/// coordinates, with spacing tuned toward `target` points.
pub fn hull_grid(sites: &[LatLon], target: usize) -> Result<Vec<LatLon>> {
    if target == 0 {
        return Err(Error::Validation("grid target must be positive".into()));
    }
    let proj = AzimuthalEquidistant::centered_on(sites);
    let xy: Vec<(f64, f64)> = sites.iter().map(|&p| proj.forward(p)).collect();
    let hull = convex_hull(&xy);
    let area = if hull.len() >= 3 { polygon_area(&hull) } else { 0.0 };
    if !(area > 0.0) {
        return Err(Error::Validation("sites are collinear; no hull to fill".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &hull {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let fill = |h: f64| -> Vec<(f64, f64)> {
        let nx = ((x1 - x0) / h).floor() as usize;
        let ny = ((y1 - y0) / h).floor() as usize;
        let ox = x0 + 0.5 * ((x1 - x0) - nx as f64 * h);
        let oy = y0 + 0.5 * ((y1 - y0) - ny as f64 * h);
        let mut pts = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                let p = (ox + i as f64 * h, oy + j as f64 * h);
                if point_in_polygon(p, &hull) {
                    pts.push(p);
                }
            }
        }
        pts
    };
    let mut h = (area / target as f64).sqrt();
    let mut pts = fill(h);
    for _ in 0..6 {
        if pts.is_empty() {
            h *= 0.5;
        } else {
            let ratio = pts.len() as f64 / target as f64;
            if (ratio - 1.0).abs() < 0.02 {
                break;
            }
            h *= ratio.sqrt();
        }
        pts = fill(h);
    }
    Ok(pts.into_iter().map(|(x, y)| proj.inverse(x, y)).collect())
}

/// Inverse-distance-weighted covariates at new locations; a location that
/// coincides with a site takes that site's values.
pub fn idw_covariates(sites: &[LatLon], covs: &[SiteCovariates], targets: &[LatLon], power: f64) -> Result<Vec<SiteCovariates>> {
    if sites.len() != covs.len() || sites.is_empty() {
        return Err(Error::Validation("need one covariate record per site".into()));
    }
    let d = distance_matrix(targets, sites);
    (0..targets.len())
        .map(|i| {
            if let Some(j) = (0..sites.len()).find(|&j| d[(i, j)] == 0.0) {
                return Ok(covs[j]);
            }
            let (mut wt, mut ws, mut w) = (0.0, 0.0, 0.0);
            for j in 0..sites.len() {
                let wj = d[(i, j)].powf(-power);
                wt += wj * covs[j].temperature;
                ws += wj * covs[j].smb;
                w += wj;
            }
            SiteCovariates::new(wt / w, ws / w)
        })
        .collect()
}

/// One row of a map table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapRow {
    pub lon: f64,
    pub lat: f64,
    pub quantity: String,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl MapRow {
    pub fn new(loc: LatLon, quantity: impl Into<String>, values: &[f64]) -> Self {
        let s = Summary::of("", values);
        Self {
            lon: loc.lon,
            lat: loc.lat,
            quantity: quantity.into(),
            q05: s.q05,
            q25: s.q25,
            q50: s.median,
            q75: s.q75,
            q95: s.q95,
        }
    }
}

/// Map rows for surface density, first change depth and stage-1/2 rates
/// from kriged draws.
pub fn parameter_map(
    grid: &[LatLon],
    covariates: &[SiteCovariates],
    draws: &[Vec<SiteDraw>],
    consts: &PhysicalConstants,
) -> Vec<MapRow> {
    let mut rows = Vec::new();
    for (i, (&loc, cov)) in grid.iter().zip(covariates).enumerate() {
        let mut rho0 = Vec::new();
        let mut kappa1 = Vec::new();
        let mut k = [vec![], vec![]];
        for d in draws {
            let th = &d[i].theta;
            rho0.push(consts.rho_ice * logistic(th.alpha()));
            if let Ok(p) = Profile::new(th, cov, consts) {
                kappa1.push(p.geometry.kappa[0]);
                k[0].push(p.geometry.k[0]);
                k[1].push(p.geometry.k[1]);
            }
        }
        rows.push(MapRow::new(loc, "rho_surface", &rho0));
        if !kappa1.is_empty() {
            rows.push(MapRow::new(loc, "kappa1", &kappa1));
            rows.push(MapRow::new(loc, "k1", &k[0]));
            rows.push(MapRow::new(loc, "k2", &k[1]));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn waic_hand_computation() {
        let ll = vec![vec![-1.0, -2.0], vec![-3.0, -2.0]];
        let r = waic(&ll).unwrap();
        // lppd₁ = ln((e⁻¹ + e⁻³)/2), var₁ = 2; lppd₂ = −2, var₂ = 0.
        let lppd1 = -1.5662191695169727;
        assert_relative_eq!(r.lppd, lppd1 - 2.0, epsilon = 1e-14);
        assert_relative_eq!(r.p_waic, 2.0, epsilon = 1e-14);
        assert_relative_eq!(r.waic, 11.132438339033946, epsilon = 1e-12);
        // Pointwise deviances 7.132438339033945 and 4, so SE = |d₁ − d₂|.
        assert_relative_eq!(r.se, 3.1324383390339454, epsilon = 1e-12);
        assert_eq!(r.n_high_variance, 1);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn waic_identical_draws_and_shift() {
        let row = vec![-0.3, -1.2, -0.7];
        let r = waic(&vec![row.clone(); 5]).unwrap();
        assert_eq!(r.p_waic, 0.0);
        assert_relative_eq!(r.waic, -2.0 * row.iter().sum::<f64>(), epsilon = 1e-14);

        let ll = vec![vec![-0.3, -1.0], vec![-0.5, -1.4], vec![-0.2, -0.9]];
        let base = waic(&ll).unwrap();
        let shifted: Vec<Vec<f64>> = ll.iter().map(|r| vec![r[0] + 0.75, r[1]]).collect();
        let s = waic(&shifted).unwrap();
        assert_relative_eq!(s.waic, base.waic - 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.p_waic, base.p_waic, epsilon = 1e-14);
        let reordered = vec![ll[2].clone(), ll[0].clone(), ll[1].clone()];
        assert_relative_eq!(waic(&reordered).unwrap().waic, base.waic, epsilon = 1e-12);
        assert!(waic(&[]).is_err());
        assert!(waic(&[vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn batch_means_on_constant_and_iid() {
        assert_eq!(batch_means_se(&[1.0; 100]), 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..10000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let se = batch_means_se(&x);
        assert!((se / 0.01 - 1.0).abs() < 0.3, "se {se}");
        let ess = effective_sample_size(&x);
        assert!(ess > 5000.0);
    }

    #[test]
    fn autocorrelation_se_matches_ar1_theory() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let rho: f64 = 0.9;
        let n = 200_000;
        let mut x = Vec::with_capacity(n);
        let mut v = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            v = rho * v + (1.0 - rho * rho).sqrt() * z;
            x.push(v);
        }
        let theory = ((1.0 + rho) / (1.0 - rho) / n as f64).sqrt();
        let se = autocorrelation_se(&x);
        assert!((se / theory - 1.0).abs() < 0.1, "{se} vs {theory}");
        assert_eq!(autocorrelation_se(&[2.0; 50]), 0.0);
    }

    #[test]
    fn summary_of_single_draw_and_reference_quantile() {
        let s = Summary::of("x", &[2.5]);
        assert_eq!((s.mean, s.median, s.sd), (2.5, 2.5, 0.0));
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        assert_eq!(reference_quantile(&v, 50.0), 0.5);
        assert_eq!(reference_quantile(&v, -1.0), 0.0);
    }

    #[test]
    fn physical_transforms() {
        let c = PhysicalConstants::default();
        let g = [0.0, 11f64.ln(), 575f64.ln(), 10160f64.ln(), 21400f64.ln(), 0.0, 0.0, 0.0];
        let p = gamma_to_physical(&g, &c);
        assert_relative_eq!(p[0], 0.4585, epsilon = 1e-12);
        assert_relative_eq!(p[1], 11.0, epsilon = 1e-12);
        assert_relative_eq!(p[4], 21400.0, epsilon = 1e-9);
        assert_relative_eq!(p[5], 0.55, epsilon = 1e-12);
        assert_relative_eq!(p[6], 0.73, epsilon = 1e-12);
        assert_relative_eq!(p[7], 0.83, epsilon = 1e-12);
    }

    fn toy_state(kind: CrossCovKind, n: usize) -> ModelState {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(N_THETA, N_THETA, |_, _| rng.random_range(-0.3..0.3));
        let v = &a * a.transpose() + DMatrix::identity(N_THETA, N_THETA) * 0.05;
        let cross = match kind {
            CrossCovKind::Separable => crate::spatial::CrossCovSpec::separable(&v, 1.0 / 400.0).unwrap(),
            CrossCovKind::Coregionalization => {
                let l = v.clone().cholesky().unwrap().l();
                crate::spatial::CrossCovSpec::new(kind, l, vec![1.0 / 400.0; N_THETA]).unwrap()
            }
            _ => unreachable!(),
        };
        ModelState {
            theta: (0..n)
                .map(|_| SiteTheta(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
                .collect(),
            beta: (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            gamma: std::array::from_fn(|g| 0.1 * g as f64),
            cross,
            phi_beta: 1.0 / 250.0,
            sigma2_beta: vec![0.3, 0.7],
            nu: 10.0,
            log_tau2_group: vec![-7.0],
            eta_group: vec![0.0],
            sigma2_tau: 0.1,
            tau2_core: vec![1e-3; n],
        }
    }

    fn toy_sites() -> SiteSet {
        SiteSet::new(vec![LatLon::new(-75.0, 100.0), LatLon::new(-76.0, 104.0), LatLon::new(-73.5, 98.0)])
    }

    /// Brute-force conditioning of the joint Gaussian over 4 sites.
    fn brute_force(state: &ModelState, sites: &SiteSet, new: LatLon) -> (DVector<f64>, DMatrix<f64>) {
        let mut all = sites.locations.clone();
        all.push(new);
        let d = distance_matrix(&all, &all);
        let v = state.cross.point_covariance();
        let n = all.len();
        let mut sigma = DMatrix::zeros(N_THETA * n, N_THETA * n);
        for i in 0..n {
            for j in 0..n {
                for a in 0..N_THETA {
                    for b in 0..N_THETA {
                        let r = if state.cross.kind == CrossCovKind::Separable {
                            (-state.cross.decays[0] * d[(i, j)]).exp() * v[(a, b)]
                        } else {
                            let lam = &state.cross.loadings;
                            (0..N_THETA)
                                .map(|l| (-state.cross.decays[l] * d[(i, j)]).exp() * lam[(a, l)] * lam[(b, l)])
                                .sum()
                        };
                        sigma[(i * N_THETA + a, j * N_THETA + b)] = r;
                    }
                }
            }
        }
        let no = N_THETA * (n - 1);
        let s_oo = sigma.view((0, 0), (no, no)).into_owned();
        let s_no = sigma.view((no, 0), (N_THETA, no)).into_owned();
        let s_nn = sigma.view((no, no), (N_THETA, N_THETA)).into_owned();
        let m = hierarchical_mean_map(&state.gamma);
        let resid = DVector::from_iterator(no, state.theta.iter().flat_map(|t| (0..N_THETA).map(move |a| t.0[a] - m[a])));
        let inv = s_oo.try_inverse().unwrap();
        let mean = DVector::from_column_slice(&m) + &s_no * &inv * resid;
        let cov = s_nn - &s_no * &inv * s_no.transpose();
        (mean, cov)
    }

    #[test]
    fn kriging_matches_brute_force_conditioning() {
        let sites = toy_sites();
        let new = LatLon::new(-74.8, 101.5);
        for kind in [CrossCovKind::Separable, CrossCovKind::Coregionalization] {
            let st = toy_state(kind, 3);
            let kr = Kriger::new(&st, &sites).unwrap();
            let d: Vec<f64> = sites.locations.iter().map(|&s| great_circle(s, new)).collect();
            let c = kr.conditional(&d).unwrap();
            let (mean, cov) = brute_force(&st, &sites, new);
            for a in 0..N_THETA {
                assert!((c.theta_mean[a] - mean[a]).abs() < 1e-8, "{kind:?} mean {a}");
                for b in 0..N_THETA {
                    assert!((c.theta_cov[(a, b)] - cov[(a, b)]).abs() < 1e-8, "{kind:?} cov {a},{b}");
                }
            }
        }
    }

    #[test]
    fn separable_and_dense_paths_agree() {
        let sites = toy_sites();
        let sep = toy_state(CrossCovKind::Separable, 3);
        let mut dense = sep.clone();
        let l = sep.cross.point_covariance().cholesky().unwrap().l();
        dense.cross = crate::spatial::CrossCovSpec::new(CrossCovKind::Coregionalization, l, vec![sep.cross.decays[0]; N_THETA]).unwrap();
        let d = [150.0, 320.0, 75.0];
        let a = Kriger::new(&sep, &sites).unwrap().conditional(&d).unwrap();
        let b = Kriger::new(&dense, &sites).unwrap().conditional(&d).unwrap();
        for i in 0..N_THETA {
            assert!((a.theta_mean[i] - b.theta_mean[i]).abs() < 1e-8);
            for j in 0..N_THETA {
                assert!((a.theta_cov[(i, j)] - b.theta_cov[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn coincident_sites_reproduce_stored_values() {
        let sites = toy_sites();
        for kind in [CrossCovKind::Separable, CrossCovKind::Coregionalization] {
            let st = toy_state(kind, 3);
            let kr = Kriger::new(&st, &sites).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            for s in 0..3 {
                let d: Vec<f64> = sites.locations.iter().map(|&o| great_circle(o, sites.locations[s])).collect();
                let draw = kr.draw(&d, &mut rng).unwrap();
                assert_eq!(draw.theta, st.theta[s]);
                assert_eq!(draw.beta, st.beta[s]);
                let c = kr.conditional(&d).unwrap();
                assert_eq!(c.coincident, Some(s));
                for a in 0..N_THETA {
                    assert!((c.theta_mean[a] - st.theta[s].0[a]).abs() < 1e-8);
                    assert!(c.theta_cov[(a, a)].abs() < 1e-8);
                }
                for k in 0..2 {
                    assert!((c.beta_mean[k] - st.beta[s][k]).abs() < 1e-8);
                    assert!(c.beta_var[k].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn far_site_reverts_to_marginal() {
        let sites = toy_sites();
        let st = toy_state(CrossCovKind::Separable, 3);
        let c = Kriger::new(&st, &sites).unwrap().conditional(&[1e6; 3]).unwrap();
        let m = hierarchical_mean_map(&st.gamma);
        let v = st.cross.point_covariance();
        for a in 0..N_THETA {
            assert!((c.theta_mean[a] - m[a]).abs() < 1e-6);
            for b in 0..N_THETA {
                assert!((c.theta_cov[(a, b)] - v[(a, b)]).abs() < 1e-12);
            }
        }
        assert!(c.beta_mean.iter().all(|b| b.abs() < 1e-6));
        assert_relative_eq!(c.beta_var[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn stage_probabilities_degenerate_and_dominant() {
        let c = PhysicalConstants::default();
        let cov = SiteCovariates::new(245.0, 0.2).unwrap();
        let tied = SiteTheta([0.0, 2.4, 6.35, 6.35, 6.35, 9.2, 10.0, 10.0, 10.0, 0.0, 0.0, 0.0]);
        let p = stage_probabilities(&[tied; 10], &cov, &c).unwrap();
        assert_eq!(p.p, [0.0; 3]);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let dominant: Vec<SiteTheta> = (0..400)
            .map(|_| {
                let mut t = tied;
                t.0[2] = 9.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                t.0[3] = 7.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                t.0[4] = 5.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                t
            })
            .collect();
        let p = stage_probabilities(&dominant, &cov, &c).unwrap();
        assert!(p.p.iter().all(|&x| x >= 0.95), "{:?}", p.p);
    }

    #[test]
    fn stage_probability_halves_agree() {
        let c = PhysicalConstants::default();
        let cov = SiteCovariates::new(245.0, 0.2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let draws: Vec<SiteTheta> = (0..4000)
            .map(|_| {
                let mut t = SiteTheta([0.0, 2.4, 6.35, 6.35, 6.35, 9.2, 10.0, 10.0, 10.0, 0.0, 0.0, 0.0]);
                for a in 2..5 {
                    t.0[a] += 0.2 * rng.sample::<f64, _>(StandardNormal);
                }
                t
            })
            .collect();
        let a = stage_probabilities(&draws[..2000], &cov, &c).unwrap();
        let b = stage_probabilities(&draws[2000..], &cov, &c).unwrap();
        for q in 0..3 {
            let se = (a.se[q].powi(2) + b.se[q].powi(2)).sqrt();
            assert!((a.p[q] - b.p[q]).abs() < 3.0 * se, "pair {q}");
        }
    }

    #[test]
    fn projection_round_trip_and_distance() {
        let pts = [LatLon::new(-75.0, 100.0), LatLon::new(-80.0, 140.0), LatLon::new(-70.0, 60.0)];
        let proj = AzimuthalEquidistant::centered_on(&pts);
        for &p in &pts {
            let (x, y) = proj.forward(p);
            let q = proj.inverse(x, y);
            assert!((q.lat - p.lat).abs() < 1e-9 && (q.lon - p.lon).abs() < 1e-9, "{q:?} vs {p:?}");
            assert_relative_eq!(x.hypot(y), great_circle(proj.center, p), epsilon = 1e-6);
        }
    }

    #[test]
    fn hull_and_grid() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5), (0.5, 0.0)];
        let h = convex_hull(&sq);
        assert_eq!(h.len(), 4);
        assert!(point_in_polygon((0.5, 0.5), &h));
        assert!(!point_in_polygon((1.5, 0.5), &h));
        assert_relative_eq!(polygon_area(&h), 1.0);

        let sites = [
            LatLon::new(-70.0, 80.0),
            LatLon::new(-70.0, 140.0),
            LatLon::new(-82.0, 140.0),
            LatLon::new(-82.0, 80.0),
            LatLon::new(-76.0, 110.0),
        ];
        let g = hull_grid(&sites, 2500).unwrap();
        assert!((g.len() as f64 - 2500.0).abs() < 0.1 * 2500.0, "{}", g.len());
        let proj = AzimuthalEquidistant::centered_on(&sites);
        let hull = convex_hull(&sites.iter().map(|&p| proj.forward(p)).collect::<Vec<_>>());
        assert!(g.iter().all(|&p| point_in_polygon(proj.forward(p), &hull)));
        assert!(hull_grid(&sites[..2], 100).is_err());
    }

    #[test]
    fn idw_exact_at_sites() {
        let sites = [LatLon::new(-75.0, 100.0), LatLon::new(-78.0, 110.0)];
        let covs = [SiteCovariates::new(240.0, 0.1).unwrap(), SiteCovariates::new(250.0, 0.3).unwrap()];
        let out = idw_covariates(&sites, &covs, &[sites[1], LatLon::new(-76.5, 105.0)], 2.0).unwrap();
        assert_eq!(out[0], covs[1]);
        assert!(out[1].temperature > 240.0 && out[1].temperature < 250.0);
    }
}
