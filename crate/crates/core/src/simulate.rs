//! Synthetic datasets drawn from the full generative model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CoreDataset, CoreRecord};
use crate::error::{Error, Result};
use crate::likelihood::{hierarchical_mean_map, ModelContext, ModelSpec, N_GAMMA};
use crate::model::{SiteCovariates, SiteTheta, N_THETA};
use crate::spatial::{cholesky_jittered, exp_correlation, CrossCovSpec, LatLon, SiteSet};
use crate::state::ModelState;

/// Ground truth for the quantities the generator does not draw from priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSpec {
    /// Fixed γ; drawn from its prior when absent.
    pub gamma: Option<[f64; N_GAMMA]>,
    /// Marginal standard deviation of each site parameter.
    pub theta_sd: [f64; N_THETA],
    /// Correlation between all pairs of site parameters.
    pub theta_corr: f64,
    pub phi: f64,
    /// Standard deviation of each smoothing coefficient field; empty for no
    /// smooth deviation.
    pub beta_sd: Vec<f64>,
    pub phi_beta: f64,
    pub nu: f64,
    pub log_tau2_group: f64,
    /// Averaging-length exponent for expeditions whose `dx` varies.
    pub eta_group: f64,
    pub sigma2_tau: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            gamma: None,
            theta_sd: [0.15, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01, 0.3, 0.3, 0.3],
            theta_corr: 0.0,
            phi: 1.0 / 300.0,
            beta_sd: Vec::new(),
            phi_beta: 1.0 / 300.0,
            nu: 8.0,
            log_tau2_group: -7.0,
            eta_group: -0.5,
            sigma2_tau: 0.05,
        }
    }
}

/// Layout of the synthetic cores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_sites: usize,
    /// Sites that receive a second core at identical coordinates.
    pub n_shared_sites: usize,
    pub n_obs_per_core: usize,
    pub n_expeditions: usize,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    /// Core bottom depths are drawn uniformly in this range, m.
    pub max_depth_range: (f64, f64),
    pub temperature_range: (f64, f64),
    pub smb_range: (f64, f64),
    pub truth: TruthSpec,
    pub max_attempts: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_sites: 20,
            n_shared_sites: 0,
            n_obs_per_core: 150,
            n_expeditions: 2,
            lat_range: (-82.0, -70.0),
            lon_range: (80.0, 140.0),
            max_depth_range: (60.0, 110.0),
            temperature_range: (228.0, 255.0),
            smb_range: (0.05, 0.4),
            truth: TruthSpec::default(),
            max_attempts: 1000,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_obs_per_core < 2 || self.n_expeditions == 0 {
            return Err(Error::Config("need sites, expeditions and at least two observations per core".into()));
        }
        if self.n_shared_sites > self.n_sites {
            return Err(Error::Config("more shared sites than sites".into()));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !(ordered(self.lat_range)
            && ordered(self.lon_range)
            && ordered(self.max_depth_range)
            && ordered(self.temperature_range)
            && ordered(self.smb_range))
        {
            return Err(Error::Config("ranges must be ordered (lo, hi)".into()));
        }
        if !(self.max_depth_range.0 > 0.0 && self.temperature_range.0 > 0.0 && self.smb_range.0 > 0.0) {
            return Err(Error::Config("depth, temperature and SMB ranges must be positive".into()));
        }
        if self.truth.theta_sd.iter().any(|&s| !(s > 0.0)) || self.truth.theta_corr.abs() >= 1.0 {
            return Err(Error::Config("site standard deviations must be positive, |corr| < 1".into()));
        }
        Ok(())
    }
}

/// Simulated cores plus the state that generated them.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub data: CoreDataset,
    pub truth: ModelState,
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Site layout and covariates, without measurements.
fn layout_cores<R: Rng>(cfg: &SimulationConfig, rng: &mut R) -> Result<Vec<CoreRecord>> {
    let mut cores = Vec::new();
    let mut locs = Vec::new();
    for _ in 0..cfg.n_sites {
        locs.push(LatLon::new(uniform(rng, cfg.lat_range), uniform(rng, cfg.lon_range)));
    }
    let (lat_lo, lat_hi) = cfg.lat_range;
    for (i, loc) in locs.iter().enumerate() {
        let copies = if i < cfg.n_shared_sites { 2 } else { 1 };
        // Colder and drier toward the pole, plus local noise.
        let frac = if lat_hi > lat_lo { (loc.lat - lat_lo) / (lat_hi - lat_lo) } else { 0.5 };
        let (t_lo, t_hi) = cfg.temperature_range;
        let (s_lo, s_hi) = cfg.smb_range;
        let temperature = (t_lo + frac * (t_hi - t_lo) + rng.sample::<f64, _>(StandardNormal) * 0.05 * (t_hi - t_lo))
            .clamp(t_lo, t_hi);
        let smb = (s_lo * (s_hi / s_lo).powf(frac) * (0.15 * rng.sample::<f64, _>(StandardNormal)).exp())
            .clamp(s_lo, s_hi);
        for k in 0..copies {
            let max_depth = uniform(rng, cfg.max_depth_range);
            let n = cfg.n_obs_per_core;
            let depths: Vec<f64> = (1..=n).map(|j| max_depth * j as f64 / n as f64).collect();
            cores.push(CoreRecord {
                core_id: format!("sim{i:03}{}", if k == 0 { String::new() } else { format!("-{k}") }),
                location: *loc,
                expedition: format!("E{}", (cores.len()) % cfg.n_expeditions),
                dx: CoreRecord::default_dx(&depths),
                density: vec![0.5; n],
                depths,
                covariates: SiteCovariates::new(temperature, smb)?,
            });
        }
    }
    Ok(cores)
}

/// Draw parameters for `ctx`'s cores from the generative model, rejecting
/// whole draws until every core has a nonnegative first change depth.
pub fn draw_parameters<R: Rng>(ctx: &ModelContext, truth: &TruthSpec, max_attempts: usize, rng: &mut R) -> Result<ModelState> {
    let p = &ctx.spec.priors;
    let n = ctx.data.n_sites();
    let v = DMatrix::from_fn(N_THETA, N_THETA, |a, b| {
        let c = if a == b { 1.0 } else { truth.theta_corr };
        c * truth.theta_sd[a] * truth.theta_sd[b]
    });
    let mut state = ModelState::initial(ctx)?;
    state.cross = match ctx.spec.cross_covariance {
        crate::spatial::CrossCovKind::Separable => CrossCovSpec::separable(&v, truth.phi)?,
        kind => {
            let (vc, _) = cholesky_jittered(&v, "truth covariance")?;
            let full = vc.l();
            let r = kind.n_factors();
            let lam = DMatrix::from_fn(N_THETA, r, |a, l| if kind.is_free_loading(a, l) { full[(a, l)] } else { 0.0 });
            CrossCovSpec::new(kind, lam, vec![truth.phi; kind.n_decays()])?
        }
    };
    // Separable draws use X = L_R Z L_Vᵀ; other kinds factor the full Σ.
    let factor = match ctx.spec.cross_covariance {
        crate::spatial::CrossCovKind::Separable => {
            let r = exp_correlation(&ctx.data.sites.dist, truth.phi);
            let (rc, _) = cholesky_jittered(&r, "truth correlation")?;
            let (vc, _) = cholesky_jittered(&v, "truth covariance")?;
            (rc.l(), Some(vc.l()))
        }
        _ => {
            let sigma = crate::spatial::build_cross_covariance(&state.cross, &ctx.data.sites)?;
            (cholesky_jittered(&sigma, "truth cross-covariance")?.0.l(), None)
        }
    };
    for attempt in 1..=max_attempts {
        let gamma = match truth.gamma {
            Some(g) => g,
            None => std::array::from_fn(|g| p.gamma_mean[g] + p.gamma_var[g].sqrt() * rng.sample::<f64, _>(StandardNormal)),
        };
        let mean = hierarchical_mean_map(&gamma);
        let z: Vec<f64> = (0..n * N_THETA).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = match &factor {
            (lr, Some(lv)) => {
                let zm = DMatrix::from_row_slice(n, N_THETA, &z);
                let xm = lr * zm * lv.transpose();
                (0..n * N_THETA).map(|i| xm[(i / N_THETA, i % N_THETA)]).collect()
            }
            (l, None) => (l * DVector::from_vec(z)).iter().copied().collect(),
        };
        let theta: Vec<SiteTheta> = (0..n)
            .map(|s| SiteTheta(std::array::from_fn(|a| mean[a] + x[s * N_THETA + a])))
            .collect();
        let ok = (0..ctx.data.n_cores()).all(|c| ctx.profile(c, &theta[ctx.data.site_of_core[c]]).is_ok());
        if ok {
            state.gamma = gamma;
            state.theta = theta;
            break;
        }
        if attempt == max_attempts {
            return Err(Error::Rejection {
                attempts: max_attempts,
                detail: "no draw kept every first change depth nonnegative".into(),
            });
        }
    }
    let k = ctx.spline_dim();
    if k > 0 {
        state.phi_beta = truth.phi_beta;
        let r = exp_correlation(&ctx.data.sites.dist, truth.phi_beta);
        let (rc, _) = cholesky_jittered(&r, "truth smoothing correlation")?;
        for j in 0..k {
            let sd = truth.beta_sd.get(j).copied().unwrap_or(0.0);
            state.sigma2_beta[j] = if sd > 0.0 { sd * sd } else { p.sigma2_beta.scale / (p.sigma2_beta.shape + 1.0) };
            let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let b = rc.l() * z * sd;
            for s in 0..n {
                state.beta[s][j] = b[s];
            }
        }
    }
    state.nu = truth.nu;
    state.sigma2_tau = truth.sigma2_tau;
    for m in 0..ctx.data.n_expeditions() {
        state.log_tau2_group[m] = truth.log_tau2_group;
        state.eta_group[m] = if ctx.eta_free[m] { truth.eta_group } else { 0.0 };
    }
    for c in 0..ctx.data.n_cores() {
        let m = ctx.data.expedition_of_core[c];
        let mean = state.log_tau2_group[m] + state.eta_group[m] * ctx.log_dx[c];
        state.tau2_core[c] = if ctx.spec.error.hierarchical {
            (mean + state.sigma2_tau.sqrt() * rng.sample::<f64, _>(StandardNormal)).exp()
        } else {
            mean.exp()
        };
    }
    state.sync_derived(ctx);
    Ok(state)
}

/// Draw the complete parameter state from the prior of `ctx`'s model,
/// rejecting whole draws until every core has a nonnegative first change
/// depth.
pub fn draw_prior_state<R: Rng>(ctx: &ModelContext, max_attempts: usize, rng: &mut R) -> Result<ModelState> {
    use crate::sampler::{draw_inv_gamma, draw_inv_wishart};
    let p = &ctx.spec.priors;
    let n = ctx.data.n_sites();
    let kind = ctx.spec.cross_covariance;
    let mut state = ModelState::initial(ctx)?;
    for attempt in 1..=max_attempts {
        let gamma: [f64; N_GAMMA] =
            std::array::from_fn(|g| p.gamma_mean[g] + p.gamma_var[g].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let cross = match kind {
            crate::spatial::CrossCovKind::Separable => {
                let phi = 1.0 / rng.random_range(p.inv_phi.lo..p.inv_phi.hi);
                let v = draw_inv_wishart(p.v.df, &p.v.scale_matrix(), rng)?;
                CrossCovSpec::separable(&v, phi)?
            }
            _ => {
                let decays: Vec<f64> =
                    (0..kind.n_decays()).map(|_| 1.0 / rng.random_range(p.inv_phi.lo..p.inv_phi.hi)).collect();
                let sd = p.loading_sd;
                let lam = DMatrix::from_fn(N_THETA, kind.n_factors(), |a, l| {
                    if !kind.is_free_loading(a, l) {
                        0.0
                    } else if a == l {
                        (sd * rng.sample::<f64, _>(StandardNormal)).exp()
                    } else {
                        sd * rng.sample::<f64, _>(StandardNormal)
                    }
                });
                CrossCovSpec::new(kind, lam, decays)?
            }
        };
        let sigma = crate::spatial::build_cross_covariance(&cross, &ctx.data.sites)?;
        let (sc, _) = cholesky_jittered(&sigma, "prior cross-covariance")?;
        let zv = DVector::from_iterator(n * N_THETA, (0..n * N_THETA).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = sc.l() * zv;
        let mean = hierarchical_mean_map(&gamma);
        let theta: Vec<SiteTheta> = (0..n)
            .map(|s| SiteTheta(std::array::from_fn(|a| mean[a] + x[s * N_THETA + a])))
            .collect();
        if (0..ctx.data.n_cores()).all(|c| ctx.profile(c, &theta[ctx.data.site_of_core[c]]).is_ok()) {
            state.gamma = gamma;
            state.cross = cross;
            state.theta = theta;
            break;
        }
        if attempt == max_attempts {
            return Err(Error::Rejection {
                attempts: max_attempts,
                detail: "no prior draw kept every first change depth nonnegative".into(),
            });
        }
    }
    let k = ctx.spline_dim();
    if k > 0 {
        state.phi_beta = 1.0 / rng.random_range(p.inv_phi_beta.lo..p.inv_phi_beta.hi);
        let r = exp_correlation(&ctx.data.sites.dist, state.phi_beta);
        let (rc, _) = cholesky_jittered(&r, "prior smoothing correlation")?;
        for j in 0..k {
            state.sigma2_beta[j] = draw_inv_gamma(p.sigma2_beta.shape, p.sigma2_beta.scale, rng);
            let zb = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let b = rc.l() * zb * state.sigma2_beta[j].sqrt();
            for s in 0..n {
                state.beta[s][j] = b[s];
            }
        }
    }
    if ctx.spec.error.family == crate::likelihood::ErrorFamily::StudentT {
        state.nu = rng.random_range(p.nu.lo..p.nu.hi);
    }
    for m in 0..ctx.data.n_expeditions() {
        state.log_tau2_group[m] = p.log_tau2_group.mean + p.log_tau2_group.var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        state.eta_group[m] = if ctx.eta_free[m] {
            p.eta_group.mean + p.eta_group.var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
    }
    if ctx.spec.error.hierarchical {
        state.sigma2_tau = draw_inv_gamma(p.sigma2_tau.shape, p.sigma2_tau.scale, rng);
        for c in 0..ctx.data.n_cores() {
            let m = ctx.data.expedition_of_core[c];
            let mean = state.log_tau2_group[m] + state.eta_group[m] * ctx.log_dx[c];
            state.tau2_core[c] = (mean + state.sigma2_tau.sqrt() * rng.sample::<f64, _>(StandardNormal)).exp();
        }
    }
    state.sync_derived(ctx);
    Ok(state)
}

/// Draw observations for every core of `ctx` given `state`.
pub fn draw_observations<R: Rng>(ctx: &ModelContext, state: &ModelState, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let obs = ctx.obs_density(state.nu);
    let mut out = Vec::with_capacity(ctx.data.n_cores());
    for c in 0..ctx.data.n_cores() {
        let s = ctx.data.site_of_core[c];
        let profile = ctx.profile(c, &state.theta[s])?;
        let mut mu = Vec::new();
        ctx.core_mean(c, &profile, &state.beta[s], &mut mu)?;
        let tau = state.tau2_core[c].sqrt();
        let y = mu
            .iter()
            .map(|&m| obs.sample(m, tau, rng))
            .collect::<Result<Vec<f64>>>()?;
        out.push(y);
    }
    Ok(out)
}

/// Simulate a dataset and its generating state.
pub fn simulate_dataset(cfg: &SimulationConfig, spec: &ModelSpec, seed: u64) -> Result<Simulated> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cores = layout_cores(cfg, &mut rng)?;
    let data = CoreDataset::new(cores)?;
    let ctx = ModelContext::new(data, spec.clone())?;
    let truth = draw_parameters(&ctx, &cfg.truth, cfg.max_attempts, &mut rng)?;
    let y = draw_observations(&ctx, &truth, &mut rng)?;
    let mut data = ctx.data;
    for (core, yc) in data.cores.iter_mut().zip(y) {
        core.density = yc;
    }
    Ok(Simulated { data, truth })
}

/// Sites of a simulated layout, for spatial diagnostics.
pub fn simulated_sites(cfg: &SimulationConfig, seed: u64) -> Result<SiteSet> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cores = layout_cores(cfg, &mut rng)?;
    Ok(CoreDataset::new(cores)?.sites)
}
