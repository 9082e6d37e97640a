#![allow(dead_code)]

//! Toy datasets and an independent, entry-by-entry reimplementation of the
//! log posterior used as an oracle.

pub mod conjugacy;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

use svsd_core::data::{CoreDataset, CoreRecord};
use svsd_core::likelihood::{ErrorFamily, ModelContext, ModelSpec, GAMMA_OF_THETA};
use svsd_core::model::{SiteCovariates, SiteTheta, N_THETA};
use svsd_core::spatial::{CrossCovKind, CrossCovSpec, LatLon};
use svsd_core::state::ModelState;

pub const RHO_I: f64 = 0.917;
pub const R_GAS: f64 = 8.314;
const BOUNDS: [(f64, f64); 3] = [(0.42, 0.68), (0.68, 0.78), (0.78, 0.88)];

pub struct ToyCore {
    pub lat: f64,
    pub lon: f64,
    pub expedition: &'static str,
    pub dx: f64,
    pub n_obs: usize,
    pub max_depth: f64,
}

/// Cores with densities along a plausible profile plus a deterministic wiggle.
pub fn toy_dataset(cores: &[ToyCore]) -> CoreDataset {
    let recs = cores
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let depths: Vec<f64> = (1..=t.n_obs).map(|j| t.max_depth * j as f64 / t.n_obs as f64).collect();
            let density = depths
                .iter()
                .enumerate()
                .map(|(j, &x)| 0.35 + 0.5 * (1.0 - (-x / 30.0).exp()) + 0.01 * ((i + 2 * j) as f64).sin())
                .collect();
            CoreRecord {
                core_id: format!("toy{i}"),
                location: LatLon::new(t.lat, t.lon),
                expedition: t.expedition.into(),
                dx: t.dx,
                depths,
                density,
                covariates: SiteCovariates::new(240.0 + 5.0 * i as f64, 0.1 + 0.05 * i as f64).unwrap(),
            }
        })
        .collect();
    CoreDataset::new(recs).unwrap()
}

/// Two sites; the second carries two cores from different expeditions,
/// and the first expedition's averaging lengths differ.
pub fn two_site_cores(n_obs: usize) -> Vec<ToyCore> {
    vec![
        ToyCore { lat: -75.0, lon: 100.0, expedition: "A", dx: 0.5, n_obs, max_depth: 40.0 },
        ToyCore { lat: -76.5, lon: 104.0, expedition: "A", dx: 1.5, n_obs, max_depth: 55.0 },
        ToyCore { lat: -76.5, lon: 104.0, expedition: "B", dx: 1.0, n_obs, max_depth: 30.0 },
    ]
}

pub fn randn(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A random positive-definite 12 × 12 matrix with eigenvalues bounded
/// away from zero.
pub fn random_spd(rng: &mut ChaCha20Rng, scale: f64) -> DMatrix<f64> {
    let w = DMatrix::from_fn(N_THETA, N_THETA, |_, _| randn(rng));
    (&w * w.transpose() / N_THETA as f64 + DMatrix::identity(N_THETA, N_THETA) * 0.5) * scale
}

/// Random state near the initial one that keeps every core in support.
pub fn perturbed_state(ctx: &ModelContext, rng: &mut ChaCha20Rng) -> ModelState {
    let mut s = ModelState::initial(ctx).unwrap();
    for g in 0..8 {
        s.gamma[g] += 0.1 * randn(rng);
    }
    for th in &mut s.theta {
        for a in 0..N_THETA {
            th.0[a] = s.gamma[GAMMA_OF_THETA[a]] + 0.05 * randn(rng);
        }
    }
    let kind = ctx.spec.cross_covariance;
    s.cross = match kind {
        CrossCovKind::Separable => CrossCovSpec::separable(&random_spd(rng, 0.1), 0.004).unwrap(),
        _ => {
            let r = kind.n_factors();
            let lam = DMatrix::from_fn(N_THETA, r, |a, l| {
                if a == l {
                    0.3 + 0.05 * randn(rng).abs()
                } else if kind.is_free_loading(a, l) {
                    0.05 * randn(rng)
                } else {
                    0.0
                }
            });
            let decays = (0..kind.n_decays()).map(|l| 0.002 + 0.0005 * l as f64).collect();
            CrossCovSpec::new(kind, lam, decays).unwrap()
        }
    };
    for b in &mut s.beta {
        for v in b.iter_mut() {
            *v = 0.2 * randn(rng);
        }
    }
    for v in &mut s.sigma2_beta {
        *v = 0.05 + 0.02 * randn(rng).abs();
    }
    s.phi_beta = 0.003;
    s.nu = 7.5;
    for m in 0..s.log_tau2_group.len() {
        s.log_tau2_group[m] = -6.0 + 0.3 * randn(rng);
        if ctx.eta_free[m] {
            s.eta_group[m] = 0.4 * randn(rng);
        }
    }
    s.sigma2_tau = 0.2;
    for t in &mut s.tau2_core {
        *t = (-6.0 + 0.3 * randn(rng)).exp();
    }
    s.sync_derived(ctx);
    s
}

pub fn haversine_free_distance(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dl = (a.lon - b.lon).to_radians();
    let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
    6371.0 * c.acos()
}

pub fn brute_distances(ctx: &ModelContext) -> DMatrix<f64> {
    let loc = &ctx.data.sites.locations;
    DMatrix::from_fn(loc.len(), loc.len(), |i, j| if i == j { 0.0 } else { haversine_free_distance(loc[i], loc[j]) })
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    Normal::new(mean, var.sqrt()).unwrap().ln_pdf(x)
}

fn ln_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

fn ln_mvn_zero(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let eig = cov.clone().symmetric_eigen();
    let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let inv = cov.clone().try_inverse().unwrap();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + (x.transpose() * inv * x)[(0, 0)])
}

fn ln_inv_wishart(v: &DMatrix<f64>, df: f64, s: &DMatrix<f64>) -> f64 {
    let p = v.nrows() as f64;
    let ln_det = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
    let mut ln_mgamma = p * (p - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..v.nrows() {
        ln_mgamma += ln_gamma(0.5 * df - 0.5 * j as f64);
    }
    let tr = (s * v.clone().try_inverse().unwrap()).trace();
    0.5 * df * ln_det(s) - 0.5 * df * p * 2f64.ln() - ln_mgamma - 0.5 * (df + p + 1.0) * ln_det(v) - 0.5 * tr
}

/// Stage covariates `(z₁..z₄)` and the logit profile at depth `x`.
pub fn profile_at(theta: &SiteTheta, cov: &SiteCovariates, x: f64) -> Option<([f64; 4], f64)> {
    let t = &theta.0;
    let alpha = t[0];
    let k: Vec<f64> = (0..4).map(|l| t[1 + l].exp() * (-t[5 + l].exp() / (R_GAS * cov.temperature)).exp()).collect();
    let l: Vec<f64> = (0..3)
        .map(|j| {
            let (lo, hi) = BOUNDS[j];
            let rho = lo + (hi - lo) / (1.0 + (-t[9 + j]).exp());
            (rho / (RHO_I - rho)).ln()
        })
        .collect();
    let s = cov.smb.sqrt();
    let kap1 = (l[0] - alpha) / (RHO_I * k[0]);
    if kap1 < 0.0 {
        return None;
    }
    let kap2 = kap1 + s * (l[1] - l[0]) / (RHO_I * k[1]);
    let kap3 = kap2 + s * (l[2] - l[1]) / (RHO_I * k[2]);
    let z = [
        RHO_I * x.min(kap1),
        RHO_I / s * (x - kap1).clamp(0.0, kap2 - kap1),
        RHO_I / s * (x - kap2).clamp(0.0, kap3 - kap2),
        RHO_I / s * (x - kap3).max(0.0),
    ];
    let logit = alpha + (0..4).map(|j| z[j] * k[j]).sum::<f64>();
    Some((z, logit))
}

/// Mean densities of core `c`; `None` outside the support.
pub fn brute_core_mean(ctx: &ModelContext, state: &ModelState, c: usize) -> Option<Vec<f64>> {
    let core = &ctx.data.cores[c];
    let site = ctx.data.site_of_core[c];
    let n = core.depths.len();
    let mut z = DMatrix::zeros(n, 4);
    let mut logit = vec![0.0; n];
    for (j, &x) in core.depths.iter().enumerate() {
        let (zj, lj) = profile_at(&state.theta[site], &core.covariates, x)?;
        for l in 0..4 {
            z[(j, l)] = zj[l];
        }
        logit[j] = lj;
    }
    if let Some(sp) = &ctx.splines[c] {
        let pinv = z.clone().pseudo_inverse(1e-10).unwrap();
        let h_perp = &sp.h - &z * (pinv * &sp.h);
        let beta = DVector::from_vec(state.beta[site].clone());
        let smooth = h_perp * beta;
        for j in 0..n {
            logit[j] += smooth[j];
        }
    }
    Some(logit.iter().map(|&v| RHO_I / (1.0 + (-v).exp())).collect())
}

pub fn brute_tau2(ctx: &ModelContext, state: &ModelState, c: usize) -> f64 {
    if ctx.spec.error.hierarchical {
        state.tau2_core[c]
    } else {
        let m = ctx.data.expedition_of_core[c];
        (state.log_tau2_group[m] + state.eta_group[m] * ctx.data.cores[c].dx.ln()).exp()
    }
}

pub fn brute_log_likelihood(ctx: &ModelContext, state: &ModelState) -> f64 {
    let mut total = 0.0;
    for c in 0..ctx.data.n_cores() {
        let Some(mu) = brute_core_mean(ctx, state, c) else {
            return f64::NEG_INFINITY;
        };
        let tau = brute_tau2(ctx, state, c).sqrt();
        for (&y, &m) in ctx.data.cores[c].density.iter().zip(&mu) {
            total += match ctx.spec.error.family {
                ErrorFamily::StudentT => {
                    let d = StudentsT::new(m, tau, state.nu).unwrap();
                    d.ln_pdf(y) - (1.0 - d.cdf(0.0)).ln()
                }
                ErrorFamily::Normal => {
                    let d = Normal::new(m, tau).unwrap();
                    d.ln_pdf(y) - (1.0 - d.cdf(0.0)).ln()
                }
            };
        }
    }
    total
}

/// Dense site-major cross-covariance assembled entry by entry.
pub fn brute_sigma(cross: &CrossCovSpec, dist: &DMatrix<f64>) -> DMatrix<f64> {
    let n = dist.nrows();
    let lam = &cross.loadings;
    DMatrix::from_fn(N_THETA * n, N_THETA * n, |p, q| {
        let (i, a) = (p / N_THETA, p % N_THETA);
        let (j, b) = (q / N_THETA, q % N_THETA);
        let mut v = 0.0;
        for l in 0..lam.ncols() {
            let phi = if cross.kind == CrossCovKind::Separable { cross.decays[0] } else { cross.decays[l] };
            v += lam[(a, l)] * lam[(b, l)] * (-phi * dist[(i, j)]).exp();
        }
        v
    })
}

pub fn brute_log_prior(ctx: &ModelContext, state: &ModelState) -> f64 {
    let p = &ctx.spec.priors;
    let dist = brute_distances(ctx);
    let n = ctx.data.n_sites();
    let mut lp = 0.0;
    if ctx.spec.error.family == ErrorFamily::StudentT {
        if !(state.nu >= p.nu.lo && state.nu <= p.nu.hi) {
            return f64::NEG_INFINITY;
        }
        lp -= (p.nu.hi - p.nu.lo).ln();
    }
    for g in 0..8 {
        lp += ln_normal(state.gamma[g], p.gamma_mean[g], p.gamma_var[g]);
    }
    let resid = DVector::from_fn(N_THETA * n, |q, _| state.theta[q / N_THETA].0[q % N_THETA] - state.gamma[GAMMA_OF_THETA[q % N_THETA]]);
    lp += ln_mvn_zero(&resid, &brute_sigma(&state.cross, &dist));
    let inv_u = |phi: f64, lo: f64, hi: f64| {
        if 1.0 / phi >= lo && 1.0 / phi <= hi {
            -(hi - lo).ln() - 2.0 * phi.ln()
        } else {
            f64::NEG_INFINITY
        }
    };
    for &phi in &state.cross.decays {
        lp += inv_u(phi, p.inv_phi.lo, p.inv_phi.hi);
    }
    let lam = &state.cross.loadings;
    match state.cross.kind {
        CrossCovKind::Separable => {
            let v = lam * lam.transpose();
            lp += ln_inv_wishart(&v, p.v.df, &(DMatrix::identity(N_THETA, N_THETA) * p.v.scale));
        }
        kind => {
            let var = p.loading_sd * p.loading_sd;
            for l in 0..lam.ncols() {
                for a in 0..N_THETA {
                    if a == l {
                        lp += ln_normal(lam[(a, l)].ln(), 0.0, var) - lam[(a, l)].ln();
                    } else if kind.is_free_loading(a, l) {
                        lp += ln_normal(lam[(a, l)], 0.0, var);
                    }
                }
            }
        }
    }
    for m in 0..ctx.data.n_expeditions() {
        lp += ln_normal(state.log_tau2_group[m], p.log_tau2_group.mean, p.log_tau2_group.var);
        if ctx.eta_free[m] {
            lp += ln_normal(state.eta_group[m], p.eta_group.mean, p.eta_group.var);
        }
    }
    if ctx.spec.error.hierarchical {
        for c in 0..ctx.data.n_cores() {
            let m = ctx.data.expedition_of_core[c];
            let t = state.tau2_core[c];
            let mean = state.log_tau2_group[m] + state.eta_group[m] * ctx.data.cores[c].dx.ln();
            lp += ln_normal(t.ln(), mean, state.sigma2_tau) - t.ln();
        }
        lp += ln_inv_gamma(state.sigma2_tau, p.sigma2_tau.shape, p.sigma2_tau.scale);
    }
    let k = ctx.spline_dim();
    if k > 0 {
        lp += inv_u(state.phi_beta, p.inv_phi_beta.lo, p.inv_phi_beta.hi);
        let r = dist.map(|d| (-state.phi_beta * d).exp());
        for j in 0..k {
            let col = DVector::from_fn(n, |i, _| state.beta[i][j]);
            lp += ln_mvn_zero(&col, &(&r * state.sigma2_beta[j]));
            lp += ln_inv_gamma(state.sigma2_beta[j], p.sigma2_beta.shape, p.sigma2_beta.scale);
        }
    }
    lp
}

pub fn brute_log_posterior(ctx: &ModelContext, state: &ModelState) -> f64 {
    let lp = brute_log_prior(ctx, state);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + brute_log_likelihood(ctx, state)
}

pub fn context(cores: &[ToyCore], spec: ModelSpec) -> ModelContext {
    ModelContext::new(toy_dataset(cores), spec).unwrap()
}
