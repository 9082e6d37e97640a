//! Adaptive Metropolis-within-Gibbs.
//!
//! One sweep updates, in order: each site's 12-vector (repeated
//! `site_repeats` times), the smoothing coefficients, the error scales, the
//! conjugate block (γ, scale hierarchy, σ²_β, and V for the separable kind),
//! then the decays, loadings, φ_β and ν.
//!
//! Every block draws from its own ChaCha20 stream. Proposal scales adapt
//! only during burn-in and are frozen afterwards.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    log_posterior, mean_map_matrix, pairwise_sum, ModelContext, ObsDensity, GAMMA_OF_THETA, N_GAMMA,
};
use crate::model::{SiteTheta, N_THETA};
use crate::smoothing::{orthogonalize, OrthogonalBasis};
use crate::spatial::{cholesky_jittered, exp_correlation, CrossCovKind, CrossCovSpec, ScalarField, ThetaCovariance};
use crate::state::{Layout, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Sweeps between adaptation steps during burn-in.
    pub adapt_window: usize,
    /// Site updates per sweep.
    pub site_repeats: usize,
    pub target_multivariate: f64,
    pub target_univariate: f64,
    /// Compare local acceptance ratios against full log-posterior
    /// differences every 1000 sweeps.
    pub check_locality: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 250_000,
            n_burn: 50_000,
            thin: 20,
            seed: 1,
            adapt_window: 50,
            site_repeats: 5,
            target_multivariate: 0.234,
            target_univariate: 0.44,
            check_locality: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(Error::Config(format!(
                "n_burn ({}) must be below n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 || self.adapt_window == 0 || self.site_repeats == 0 {
            return Err(Error::Config("thin, adapt_window and site_repeats must be positive".into()));
        }
        for t in [self.target_multivariate, self.target_univariate] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("acceptance target {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Random-walk step size with acceptance bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub log_scale: f64,
    window_acc: u64,
    window_tried: u64,
    n_adapt: u64,
    pub accepted: u64,
    pub tried: u64,
}

impl StepSize {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            window_acc: 0,
            window_tried: 0,
            n_adapt: 0,
            accepted: 0,
            tried: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool) {
        self.window_tried += 1;
        self.tried += 1;
        if accepted {
            self.window_acc += 1;
            self.accepted += 1;
        }
    }

    /// Robbins–Monro step on the log scale toward `target`.
    fn adapt(&mut self, target: f64) {
        if self.window_tried > 0 {
            self.n_adapt += 1;
            let rate = self.window_acc as f64 / self.window_tried as f64;
            let gain = (1.0 / (self.n_adapt as f64).sqrt()).min(0.5) * 2.0;
            self.log_scale += gain * (rate - target);
        }
        self.window_acc = 0;
        self.window_tried = 0;
    }

    fn reset_counts(&mut self) {
        self.accepted = 0;
        self.tried = 0;
        self.window_acc = 0;
        self.window_tried = 0;
    }

    pub fn rate(&self) -> f64 {
        if self.tried == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

const HAARIO_EPS: f64 = 1e-8;
const INITIAL_SITE_VAR: f64 = 1e-3;

/// Empirical-covariance proposal for one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteProposal {
    pub step: StepSize,
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    /// Lower Cholesky factor of `(2.38²/12)(Ĉ + εI)`, row-major.
    chol: Vec<f64>,
}

impl SiteProposal {
    fn new() -> Self {
        let base = (2.38f64.powi(2) / N_THETA as f64 * (INITIAL_SITE_VAR + HAARIO_EPS)).sqrt();
        let mut chol = vec![0.0; N_THETA * N_THETA];
        for a in 0..N_THETA {
            chol[a * N_THETA + a] = base;
        }
        Self {
            step: StepSize::new(1.0),
            n: 0,
            mean: vec![0.0; N_THETA],
            m2: vec![0.0; N_THETA * N_THETA],
            chol,
        }
    }

    fn observe(&mut self, x: &[f64; N_THETA]) {
        self.n += 1;
        let n = self.n as f64;
        let mut delta = [0.0; N_THETA];
        for a in 0..N_THETA {
            delta[a] = x[a] - self.mean[a];
            self.mean[a] += delta[a] / n;
        }
        for a in 0..N_THETA {
            for b in 0..N_THETA {
                self.m2[a * N_THETA + b] += delta[a] * (x[b] - self.mean[b]);
            }
        }
    }

    fn refresh(&mut self) {
        if self.n < 2 * N_THETA as u64 {
            return;
        }
        let c = 2.38f64.powi(2) / N_THETA as f64;
        let cov = DMatrix::from_fn(N_THETA, N_THETA, |a, b| {
            let v = 0.5 * (self.m2[a * N_THETA + b] + self.m2[b * N_THETA + a]) / (self.n as f64 - 1.0);
            c * (v + if a == b { HAARIO_EPS } else { 0.0 })
        });
        if let Some(ch) = cov.cholesky() {
            let l = ch.l();
            for a in 0..N_THETA {
                for b in 0..N_THETA {
                    self.chol[a * N_THETA + b] = l[(a, b)];
                }
            }
        }
    }

    fn propose<R: Rng>(&self, current: &SiteTheta, rng: &mut R) -> SiteTheta {
        let z: [f64; N_THETA] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let s = self.step.scale();
        let mut out = current.0;
        for a in 0..N_THETA {
            let mut dz = 0.0;
            for b in 0..=a {
                dz += self.chol[a * N_THETA + b] * z[b];
            }
            out[a] += s * dz;
        }
        SiteTheta(out)
    }
}

/// All adaptive proposal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalState {
    pub sites: Vec<SiteProposal>,
    /// `[site][k]`.
    pub beta: Vec<Vec<StepSize>>,
    pub tau2: Vec<StepSize>,
    pub log_tau2_group: Vec<StepSize>,
    pub eta_group: Vec<StepSize>,
    pub decays: Vec<StepSize>,
    pub loadings: Vec<StepSize>,
    pub phi_beta: StepSize,
    pub nu: StepSize,
}

impl ProposalState {
    fn new(ctx: &ModelContext) -> Self {
        let d = &ctx.data;
        let kind = ctx.spec.cross_covariance;
        Self {
            sites: vec![SiteProposal::new(); d.n_sites()],
            beta: vec![vec![StepSize::new(0.05); ctx.spline_dim()]; d.n_sites()],
            tau2: vec![StepSize::new(0.3); d.n_cores()],
            log_tau2_group: vec![StepSize::new(0.1); d.n_expeditions()],
            eta_group: vec![StepSize::new(0.1); d.n_expeditions()],
            decays: vec![StepSize::new(0.2); kind.n_decays()],
            loadings: if kind == CrossCovKind::Separable {
                Vec::new()
            } else {
                vec![StepSize::new(0.05); kind.n_factors()]
            },
            phi_beta: StepSize::new(0.2),
            nu: StepSize::new(2.0),
        }
    }

    fn for_each_step(&mut self, mut f: impl FnMut(&mut StepSize, bool)) {
        for s in &mut self.sites {
            f(&mut s.step, true);
        }
        for b in self.beta.iter_mut().flatten() {
            f(b, false);
        }
        for s in self
            .tau2
            .iter_mut()
            .chain(&mut self.log_tau2_group)
            .chain(&mut self.eta_group)
            .chain(&mut self.decays)
        {
            f(s, false);
        }
        for s in &mut self.loadings {
            f(s, true);
        }
        f(&mut self.phi_beta, false);
        f(&mut self.nu, false);
    }
}

/// Post-burn-in acceptance rate of one block, over its sub-proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRate {
    pub block: String,
    pub multivariate: bool,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize_steps<'a>(block: &str, multivariate: bool, steps: impl Iterator<Item = &'a StepSize>) -> Option<AcceptanceRate> {
    let rates: Vec<f64> = steps.filter(|s| s.tried > 0).map(|s| s.rate()).collect();
    if rates.is_empty() {
        return None;
    }
    Some(AcceptanceRate {
        block: block.into(),
        multivariate,
        mean: rates.iter().sum::<f64>() / rates.len() as f64,
        min: rates.iter().cloned().fold(f64::INFINITY, f64::min),
        max: rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Thinned draws with per-observation log-likelihoods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainArchive {
    pub layout: Layout,
    pub names: Vec<String>,
    pub iterations: Vec<usize>,
    pub draws: Vec<Vec<f64>>,
    /// `[draw][observation]`.
    pub loglik: Vec<Vec<f64>>,
    pub acceptance: Vec<AcceptanceRate>,
    pub config: ChainConfig,
}

impl ChainArchive {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn state(&self, d: usize) -> Result<ModelState> {
        self.layout.unflatten(&self.draws[d])
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.draws.iter().map(|r| r[j]).collect())
    }

    pub fn gamma(&self, d: usize) -> [f64; N_GAMMA] {
        self.draws[d][..N_GAMMA].try_into().unwrap()
    }

    /// Site parameters of `site` in draw `d`.
    pub fn theta(&self, d: usize, site: usize) -> SiteTheta {
        let o = self.layout.theta_offset() + site * N_THETA;
        SiteTheta(self.draws[d][o..o + N_THETA].try_into().unwrap())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u64)]
enum Stream {
    Theta = 1,
    Beta = 2,
    Scale = 3,
    Gibbs = 4,
    Decay = 5,
    Nu = 6,
}

const N_STREAMS: usize = 6;

#[derive(Clone, Debug)]
struct CoreCache {
    /// `α + zᵀk` at each depth.
    base: Vec<f64>,
    ortho: Option<OrthogonalBasis>,
    mu: Vec<f64>,
    ll: Vec<f64>,
    ll_sum: f64,
}

/// Evaluate one core from scratch; `None` outside the support.
fn eval_core(
    ctx: &ModelContext,
    c: usize,
    theta: &SiteTheta,
    beta: &[f64],
    tau2: f64,
    obs: &ObsDensity,
) -> Result<Option<CoreCache>> {
    let profile = match ctx.profile(c, theta) {
        Ok(p) => p,
        Err(Error::OutOfSupport(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let core = &ctx.data.cores[c];
    let base: Vec<f64> = core.depths.iter().map(|&x| profile.logit(x)).collect();
    let ortho = match &ctx.splines[c] {
        Some(sp) => Some(orthogonalize(&profile, &core.depths, &sp.h).map_err(|e| match e {
            Error::DegenerateCore { detail, .. } => Error::DegenerateCore {
                core: core.core_id.clone(),
                detail,
            },
            other => other,
        })?),
        None => None,
    };
    let mut cache = CoreCache {
        base,
        ortho,
        mu: Vec::new(),
        ll: Vec::new(),
        ll_sum: 0.0,
    };
    refresh_mean(ctx, &mut cache, beta);
    refresh_loglik(ctx, c, &mut cache, tau2, obs);
    Ok(Some(cache))
}

fn refresh_mean(ctx: &ModelContext, cache: &mut CoreCache, beta: &[f64]) {
    let rho_ice = ctx.spec.constants.rho_ice;
    cache.mu.clear();
    match &cache.ortho {
        Some(ob) if beta.iter().any(|&b| b != 0.0) => {
            let smooth = ob.smooth_terms(beta);
            cache
                .mu
                .extend(cache.base.iter().zip(&smooth).map(|(b, s)| rho_ice * crate::model::logistic(b + s)));
        }
        _ => cache
            .mu
            .extend(cache.base.iter().map(|&b| rho_ice * crate::model::logistic(b))),
    }
}

fn refresh_loglik(ctx: &ModelContext, c: usize, cache: &mut CoreCache, tau2: f64, obs: &ObsDensity) {
    let mut ll = std::mem::take(&mut cache.ll);
    ctx.core_loglik(c, &cache.mu, tau2, obs, &mut ll);
    cache.ll_sum = pairwise_sum(&ll);
    cache.ll = ll;
}

fn core_loglik_sum(ctx: &ModelContext, c: usize, mu: &[f64], tau2: f64, obs: &ObsDensity) -> f64 {
    if ctx.prior_only {
        return 0.0;
    }
    let tau = tau2.sqrt();
    let terms: Vec<f64> = ctx.data.cores[c]
        .density
        .iter()
        .zip(mu)
        .map(|(&y, &m)| obs.log_density(y, m, tau))
        .collect();
    pairwise_sum(&terms)
}

/// Resumable sampler state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub layout: Layout,
    pub state: ModelState,
    pub proposals: ProposalState,
    rngs: Vec<ChaCha20Rng>,
    pub archive: ChainArchive,
}

pub struct Sampler {
    ctx: ModelContext,
    cfg: ChainConfig,
    state: ModelState,
    cores: Vec<CoreCache>,
    theta_cov: ThetaCovariance,
    resid: Vec<f64>,
    beta_field: Option<ScalarField>,
    proposals: ProposalState,
    rngs: Vec<ChaCha20Rng>,
    iteration: usize,
    archive: ChainArchive,
}

fn with_block<T>(iteration: usize, block: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Sampler { .. } => e,
        e => Error::Sampler {
            iteration,
            block,
            source: Box::new(e),
        },
    })
}

impl Sampler {
    pub fn new(ctx: ModelContext, cfg: ChainConfig, init: Option<ModelState>) -> Result<Self> {
        cfg.validate()?;
        let mut state = match init {
            Some(s) => s,
            None => ModelState::initial(&ctx)?,
        };
        state.sync_derived(&ctx);
        let rngs = (0..N_STREAMS)
            .map(|i| {
                let mut r = ChaCha20Rng::seed_from_u64(cfg.seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        let layout = Layout::for_context(&ctx);
        let archive = ChainArchive {
            names: layout.names(),
            layout,
            iterations: Vec::new(),
            draws: Vec::new(),
            loglik: Vec::new(),
            acceptance: Vec::new(),
            config: cfg.clone(),
        };
        let proposals = ProposalState::new(&ctx);
        let theta_cov = ThetaCovariance::from_spec(&state.cross, &ctx.data.sites)?;
        let mut s = Self {
            theta_cov,
            resid: Vec::new(),
            beta_field: None,
            cores: Vec::new(),
            ctx,
            cfg,
            state,
            proposals,
            rngs,
            iteration: 0,
            archive,
        };
        s.rebuild_caches()?;
        Ok(s)
    }

    pub fn from_checkpoint(ctx: ModelContext, cp: Checkpoint) -> Result<Self> {
        let layout = Layout::for_context(&ctx);
        if layout != cp.layout {
            return Err(Error::Config("checkpoint does not match the model and dataset".into()));
        }
        let mut s = Self::new(ctx, cp.archive.config.clone(), Some(cp.state))?;
        s.proposals = cp.proposals;
        s.rngs = cp.rngs;
        s.iteration = cp.iteration;
        s.archive = cp.archive;
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            layout: self.archive.layout.clone(),
            state: self.state.clone(),
            proposals: self.proposals.clone(),
            rngs: self.rngs.clone(),
            archive: self.archive.clone(),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn context(&self) -> &ModelContext {
        &self.ctx
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn proposals(&self) -> &ProposalState {
        &self.proposals
    }

    /// Recompute every cache from the current state.
    fn rebuild_caches(&mut self) -> Result<()> {
        let ctx = &self.ctx;
        let state = &self.state;
        let obs = ctx.obs_density(state.nu);
        let cores: Vec<Result<Option<CoreCache>>> = (0..ctx.data.n_cores())
            .into_par_iter()
            .map(|c| {
                let s = ctx.data.site_of_core[c];
                eval_core(ctx, c, &state.theta[s], &state.beta[s], state.tau2_core[c], &obs)
            })
            .collect();
        let mut out = Vec::with_capacity(cores.len());
        for (c, r) in cores.into_iter().enumerate() {
            match r? {
                Some(cc) => out.push(cc),
                None => {
                    return Err(Error::OutOfSupport(format!(
                        "initial state puts core {} outside the support",
                        ctx.data.cores[c].core_id
                    )))
                }
            }
        }
        self.cores = out;
        self.theta_cov = ThetaCovariance::from_spec(&state.cross, &ctx.data.sites)?;
        self.resid = ctx.theta_residual(state);
        self.beta_field = if ctx.spline_dim() > 0 {
            Some(ScalarField::new(&ctx.data.sites.dist, state.phi_beta)?)
        } else {
            None
        };
        Ok(())
    }

    /// Replace the observed densities (same shapes) and refresh caches.
    pub fn replace_observations(&mut self, density: Vec<Vec<f64>>) -> Result<()> {
        for (core, y) in self.ctx.data.cores.iter_mut().zip(density) {
            if y.len() != core.density.len() {
                return Err(Error::Validation("replacement observations have the wrong shape".into()));
            }
            core.density = y;
        }
        let obs = self.ctx.obs_density(self.state.nu);
        for c in 0..self.cores.len() {
            let tau2 = self.state.tau2_core[c];
            refresh_loglik(&self.ctx, c, &mut self.cores[c], tau2, &obs);
        }
        Ok(())
    }

    /// Current mean densities of every core.
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.cores.iter().map(|c| c.mu.clone()).collect()
    }

    fn rng(&mut self, s: Stream) -> &mut ChaCha20Rng {
        &mut self.rngs[s as usize - 1]
    }

    /// One full sweep.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration;
        for _ in 0..self.cfg.site_repeats {
            for s in 0..self.ctx.data.n_sites() {
                with_block(it, "theta", self.update_site(s))?;
            }
        }
        if self.ctx.spline_dim() > 0 {
            with_block(it, "beta", self.update_beta())?;
        }
        if self.ctx.spec.error.hierarchical {
            self.update_tau2();
        } else {
            self.update_group_scales();
        }
        with_block(it, "gibbs", self.gibbs_block())?;
        with_block(it, "decay", self.update_decays())?;
        if self.ctx.spec.cross_covariance != CrossCovKind::Separable {
            with_block(it, "loadings", self.update_loadings())?;
        }
        if self.ctx.spline_dim() > 0 {
            with_block(it, "phi_beta", self.update_phi_beta())?;
        }
        if self.ctx.spec.error.family == crate::likelihood::ErrorFamily::StudentT {
            self.update_nu();
        }

        self.iteration += 1;
        if self.iteration <= self.cfg.n_burn {
            for s in 0..self.state.theta.len() {
                let th = self.state.theta[s].0;
                self.proposals.sites[s].observe(&th);
            }
            if self.iteration % self.cfg.adapt_window == 0 {
                let (tm, tu) = (self.cfg.target_multivariate, self.cfg.target_univariate);
                self.proposals.for_each_step(|s, multi| s.adapt(if multi { tm } else { tu }));
                for sp in &mut self.proposals.sites {
                    sp.refresh();
                }
            }
            if self.iteration == self.cfg.n_burn {
                self.proposals.for_each_step(|s, _| s.reset_counts());
            }
        } else if (self.iteration - self.cfg.n_burn) % self.cfg.thin == 0 {
            self.record();
        }
        Ok(())
    }

    fn record(&mut self) {
        self.archive.iterations.push(self.iteration);
        self.archive.draws.push(self.archive.layout.flatten(&self.state));
        let mut ll = Vec::with_capacity(self.ctx.data.n_obs());
        for c in &self.cores {
            ll.extend_from_slice(&c.ll);
        }
        self.archive.loglik.push(ll);
    }

    /// Run to `n_iter` and return the archive.
    pub fn run(mut self) -> Result<ChainArchive> {
        while self.iteration < self.cfg.n_iter {
            self.step()?;
        }
        Ok(self.finish())
    }

    /// Run at most `n` more sweeps.
    pub fn run_for(&mut self, n: usize) -> Result<()> {
        let end = (self.iteration + n).min(self.cfg.n_iter);
        while self.iteration < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.n_iter
    }

    pub fn finish(mut self) -> ChainArchive {
        self.archive.acceptance = self.acceptance_report();
        self.archive
    }

    pub fn acceptance_report(&self) -> Vec<AcceptanceRate> {
        let p = &self.proposals;
        [
            summarize_steps("theta", true, p.sites.iter().map(|s| &s.step)),
            summarize_steps("beta", false, p.beta.iter().flatten()),
            summarize_steps("tau2", false, p.tau2.iter()),
            summarize_steps("log_tau2_group", false, p.log_tau2_group.iter()),
            summarize_steps("eta_group", false, p.eta_group.iter()),
            summarize_steps("phi", false, p.decays.iter()),
            summarize_steps("loadings", true, p.loadings.iter()),
            summarize_steps("phi_beta", false, std::iter::once(&p.phi_beta)),
            summarize_steps("nu", false, std::iter::once(&p.nu)),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn accept(&mut self, log_ratio: f64, s: Stream) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        if log_ratio >= 0.0 {
            return true;
        }
        let u: f64 = self.rng(s).random();
        u.ln() < log_ratio
    }

    fn update_site(&mut self, s: usize) -> Result<()> {
        let current = self.state.theta[s];
        let proposal = {
            let sp = self.proposals.sites[s].clone();
            sp.propose(&current, self.rng(Stream::Theta))
        };
        let obs = self.ctx.obs_density(self.state.nu);
        let mut candidates = Vec::new();
        let mut d_ll = 0.0;
        let mut in_support = true;
        for &c in &self.ctx.data.cores_of_site[s] {
            match eval_core(&self.ctx, c, &proposal, &self.state.beta[s], self.state.tau2_core[c], &obs)? {
                Some(cc) => {
                    d_ll += cc.ll_sum - self.cores[c].ll_sum;
                    candidates.push((c, cc));
                }
                None => {
                    in_support = false;
                    break;
                }
            }
        }
        if !in_support {
            self.proposals.sites[s].step.record(false);
            return Ok(());
        }
        let mean = crate::likelihood::hierarchical_mean_map(&self.state.gamma);
        let new_block: [f64; N_THETA] = std::array::from_fn(|a| proposal.0[a] - mean[a]);
        let d_prior = self.theta_cov.site_delta(s, &self.resid, &new_block);
        let log_ratio = d_ll + d_prior;
        if self.cfg.check_locality && self.iteration % 1000 == 0 {
            let mut moved = self.state.clone();
            moved.theta[s] = proposal;
            let before = log_posterior(&self.state, &self.ctx)?;
            let full = log_posterior(&moved, &self.ctx)? - before;
            let tol = 1e-8f64.max(1e-13 * before.abs());
            if full.is_finite() && (full - log_ratio).abs() > tol {
                return Err(Error::numerical(
                    "site update locality",
                    format!("local ratio {log_ratio} vs full difference {full} at site {s}"),
                ));
            }
        }
        let accepted = self.accept(log_ratio, Stream::Theta);
        self.proposals.sites[s].step.record(accepted);
        if accepted {
            self.state.theta[s] = proposal;
            self.resid[s * N_THETA..(s + 1) * N_THETA].copy_from_slice(&new_block);
            for (c, cc) in candidates {
                self.cores[c] = cc;
            }
        }
        Ok(())
    }

    fn update_beta(&mut self) -> Result<()> {
        let k = self.ctx.spline_dim();
        let obs = self.ctx.obs_density(self.state.nu);
        let field = self.beta_field.clone().expect("smoothing field");
        for s in 0..self.ctx.data.n_sites() {
            for j in 0..k {
                let step = self.proposals.beta[s][j].scale();
                let z: f64 = self.rng(Stream::Beta).sample(StandardNormal);
                let delta = step * z;
                let mut beta_new = self.state.beta[s].clone();
                beta_new[j] += delta;
                let mut candidates = Vec::new();
                let mut d_ll = 0.0;
                for &c in &self.ctx.data.cores_of_site[s] {
                    let mut cc = self.cores[c].clone();
                    refresh_mean(&self.ctx, &mut cc, &beta_new);
                    refresh_loglik(&self.ctx, c, &mut cc, self.state.tau2_core[c], &obs);
                    d_ll += cc.ll_sum - self.cores[c].ll_sum;
                    candidates.push((c, cc));
                }
                let mut rb = 0.0;
                for t in 0..self.ctx.data.n_sites() {
                    rb += field.r_inv[(s, t)] * self.state.beta[t][j];
                }
                let d_prior = -(2.0 * delta * rb + delta * delta * field.r_inv[(s, s)])
                    / (2.0 * self.state.sigma2_beta[j]);
                let accepted = self.accept(d_ll + d_prior, Stream::Beta);
                self.proposals.beta[s][j].record(accepted);
                if accepted {
                    self.state.beta[s] = beta_new;
                    for (c, cc) in candidates {
                        self.cores[c] = cc;
                    }
                }
            }
        }
        Ok(())
    }

    fn update_tau2(&mut self) {
        let obs = self.ctx.obs_density(self.state.nu);
        for c in 0..self.ctx.data.n_cores() {
            let step = self.proposals.tau2[c].scale();
            let z: f64 = self.rng(Stream::Scale).sample(StandardNormal);
            let old = self.state.tau2_core[c];
            let new = old * (step * z).exp();
            let m = self.ctx.data.expedition_of_core[c];
            let hier_mean = self.state.log_tau2_group[m] + self.state.eta_group[m] * self.ctx.log_dx[c];
            let s2 = self.state.sigma2_tau;
            // Log-normal hierarchy density over τ², plus the proposal Jacobian.
            let log_p = |t: f64| crate::likelihood::log_normal_pdf(t.ln(), hier_mean, s2) - t.ln();
            let new_sum = core_loglik_sum(&self.ctx, c, &self.cores[c].mu, new, &obs);
            let log_ratio = new_sum - self.cores[c].ll_sum + log_p(new) - log_p(old) + new.ln() - old.ln();
            let accepted = self.accept(log_ratio, Stream::Scale);
            self.proposals.tau2[c].record(accepted);
            if accepted {
                self.state.tau2_core[c] = new;
                refresh_loglik(&self.ctx, c, &mut self.cores[c], new, &obs);
            }
        }
    }

    /// Metropolis updates of `log τ²_m` and `η_m` when τ² is deterministic.
    fn update_group_scales(&mut self) {
        let obs = self.ctx.obs_density(self.state.nu);
        let p = self.ctx.spec.priors.clone();
        for m in 0..self.ctx.data.n_expeditions() {
            let members = self.ctx.data.cores_of_expedition(m);
            for which in 0..2 {
                if which == 1 && !self.ctx.eta_free[m] {
                    continue;
                }
                let step = if which == 0 {
                    self.proposals.log_tau2_group[m].scale()
                } else {
                    self.proposals.eta_group[m].scale()
                };
                let z: f64 = self.rng(Stream::Scale).sample(StandardNormal);
                let (mut lt, mut eta) = (self.state.log_tau2_group[m], self.state.eta_group[m]);
                let d_prior = if which == 0 {
                    let new = lt + step * z;
                    let d = p.log_tau2_group.log_pdf(new) - p.log_tau2_group.log_pdf(lt);
                    lt = new;
                    d
                } else {
                    let new = eta + step * z;
                    let d = p.eta_group.log_pdf(new) - p.eta_group.log_pdf(eta);
                    eta = new;
                    d
                };
                let sums: Vec<(f64, f64)> = members
                    .par_iter()
                    .map(|&c| {
                        let t2 = (lt + eta * self.ctx.log_dx[c]).exp();
                        (core_loglik_sum(&self.ctx, c, &self.cores[c].mu, t2, &obs), self.cores[c].ll_sum)
                    })
                    .collect();
                let new_ll = pairwise_sum(&sums.iter().map(|s| s.0).collect::<Vec<_>>());
                let old_ll = pairwise_sum(&sums.iter().map(|s| s.1).collect::<Vec<_>>());
                let accepted = self.accept(new_ll - old_ll + d_prior, Stream::Scale);
                let stepper = if which == 0 {
                    &mut self.proposals.log_tau2_group[m]
                } else {
                    &mut self.proposals.eta_group[m]
                };
                stepper.record(accepted);
                if accepted {
                    self.state.log_tau2_group[m] = lt;
                    self.state.eta_group[m] = eta;
                    for &c in &members {
                        let t2 = (lt + eta * self.ctx.log_dx[c]).exp();
                        self.state.tau2_core[c] = t2;
                        refresh_loglik(&self.ctx, c, &mut self.cores[c], t2, &obs);
                    }
                }
            }
        }
    }

    fn gibbs_block(&mut self) -> Result<()> {
        let (mean, cov) = gamma_conditional(&self.ctx, &self.state, &self.theta_cov)?;
        let g = draw_mvn(&mean, &cov, self.rng(Stream::Gibbs))?;
        self.state.gamma = g.as_slice().try_into().unwrap();
        self.resid = self.ctx.theta_residual(&self.state);

        if self.ctx.spec.error.hierarchical {
            for m in 0..self.ctx.data.n_expeditions() {
                let (mean, cov) = scale_group_conditional(&self.ctx, &self.state, m);
                let draw = draw_mvn(&mean, &cov, self.rng(Stream::Gibbs))?;
                self.state.log_tau2_group[m] = draw[0];
                self.state.eta_group[m] = if draw.len() > 1 { draw[1] } else { 0.0 };
            }
            let (a, b) = sigma2_tau_conditional(&self.ctx, &self.state);
            self.state.sigma2_tau = draw_inv_gamma(a, b, self.rng(Stream::Gibbs));
        }

        if let Some(field) = self.beta_field.clone() {
            for j in 0..self.ctx.spline_dim() {
                let (a, b) = sigma2_beta_conditional(&self.ctx, &self.state, &field, j);
                self.state.sigma2_beta[j] = draw_inv_gamma(a, b, self.rng(Stream::Gibbs));
            }
        }

        if self.ctx.spec.cross_covariance == CrossCovKind::Separable {
            let r_inv = match &self.theta_cov {
                ThetaCovariance::Kronecker { r_inv, .. } => r_inv.clone(),
                ThetaCovariance::Dense { .. } => unreachable!("separable kind uses the Kronecker path"),
            };
            let (df, scale) = v_conditional(&self.ctx, &self.resid, &r_inv);
            let v = draw_inv_wishart(df, &scale, self.rng(Stream::Gibbs))?;
            let phi = self.state.cross.decays[0];
            self.state.cross = CrossCovSpec::separable(&v, phi)?;
            let r = exp_correlation(&self.ctx.data.sites.dist, phi);
            self.theta_cov = ThetaCovariance::kronecker(&r, &self.state.cross.point_covariance())?;
        }
        Ok(())
    }

    /// Log-normal random walk on one positive parameter, evaluated through
    /// the θ-field density.
    fn update_decays(&mut self) -> Result<()> {
        let prior = self.ctx.spec.priors.inv_phi;
        for l in 0..self.state.cross.decays.len() {
            let step = self.proposals.decays[l].scale();
            let z: f64 = self.rng(Stream::Decay).sample(StandardNormal);
            let old = self.state.cross.decays[l];
            let new = old * (step * z).exp();
            if prior.log_pdf_of_inverse(new) == f64::NEG_INFINITY {
                self.proposals.decays[l].record(false);
                continue;
            }
            let mut spec = self.state.cross.clone();
            spec.decays[l] = new;
            let cov = ThetaCovariance::from_spec(&spec, &self.ctx.data.sites)?;
            let log_ratio = cov.log_density(&self.resid) - self.theta_cov.log_density(&self.resid)
                + prior.log_pdf_of_inverse(new)
                - prior.log_pdf_of_inverse(old)
                + new.ln()
                - old.ln();
            let accepted = self.accept(log_ratio, Stream::Decay);
            self.proposals.decays[l].record(accepted);
            if accepted {
                self.state.cross = spec;
                self.theta_cov = cov;
            }
        }
        Ok(())
    }

    /// Joint random walk on the free entries of one loading column;
    /// diagonal entries move on the log scale.
    fn update_loadings(&mut self) -> Result<()> {
        let kind = self.state.cross.kind;
        let sd = self.ctx.spec.priors.loading_sd;
        let var = sd * sd;
        let log_prior_entry = |a: usize, l: usize, v: f64| {
            if a == l {
                crate::likelihood::log_normal_pdf(v.ln(), 0.0, var) - v.ln()
            } else {
                crate::likelihood::log_normal_pdf(v, 0.0, var)
            }
        };
        for l in 0..kind.n_factors() {
            let step = self.proposals.loadings[l].scale();
            let mut spec = self.state.cross.clone();
            let mut d_prior = 0.0;
            for a in 0..N_THETA {
                if !kind.is_free_loading(a, l) {
                    continue;
                }
                let z: f64 = self.rng(Stream::Decay).sample(StandardNormal);
                let old = spec.loadings[(a, l)];
                let new = if a == l { old * (step * z).exp() } else { old + step * z };
                d_prior += log_prior_entry(a, l, new) - log_prior_entry(a, l, old);
                if a == l {
                    d_prior += new.ln() - old.ln();
                }
                spec.loadings[(a, l)] = new;
            }
            let cov = ThetaCovariance::from_spec(&spec, &self.ctx.data.sites)?;
            let log_ratio = cov.log_density(&self.resid) - self.theta_cov.log_density(&self.resid) + d_prior;
            let accepted = self.accept(log_ratio, Stream::Decay);
            self.proposals.loadings[l].record(accepted);
            if accepted {
                self.state.cross = spec;
                self.theta_cov = cov;
            }
        }
        Ok(())
    }

    fn beta_field_log_density(&self, field: &ScalarField) -> f64 {
        (0..self.ctx.spline_dim())
            .map(|j| {
                let col: Vec<f64> = self.state.beta.iter().map(|b| b[j]).collect();
                field.log_density(&col, self.state.sigma2_beta[j])
            })
            .sum()
    }

    fn update_phi_beta(&mut self) -> Result<()> {
        let prior = self.ctx.spec.priors.inv_phi_beta;
        let step = self.proposals.phi_beta.scale();
        let z: f64 = self.rng(Stream::Decay).sample(StandardNormal);
        let old = self.state.phi_beta;
        let new = old * (step * z).exp();
        if prior.log_pdf_of_inverse(new) == f64::NEG_INFINITY {
            self.proposals.phi_beta.record(false);
            return Ok(());
        }
        let field_new = ScalarField::new(&self.ctx.data.sites.dist, new)?;
        let field_old = self.beta_field.clone().expect("smoothing field");
        let log_ratio = self.beta_field_log_density(&field_new) - self.beta_field_log_density(&field_old)
            + prior.log_pdf_of_inverse(new)
            - prior.log_pdf_of_inverse(old)
            + new.ln()
            - old.ln();
        let accepted = self.accept(log_ratio, Stream::Decay);
        self.proposals.phi_beta.record(accepted);
        if accepted {
            self.state.phi_beta = new;
            self.beta_field = Some(field_new);
        }
        Ok(())
    }

    /// Random walk on ν reflected into the prior interval.
    fn update_nu(&mut self) {
        let prior = self.ctx.spec.priors.nu;
        let step = self.proposals.nu.scale();
        let z: f64 = self.rng(Stream::Nu).sample(StandardNormal);
        let mut new = self.state.nu + step * z;
        let width = prior.hi - prior.lo;
        // Fold into [lo, hi] (period 2·width reflection).
        let mut t = (new - prior.lo).rem_euclid(2.0 * width);
        if t > width {
            t = 2.0 * width - t;
        }
        new = prior.lo + t;
        let obs = self.ctx.obs_density(new);
        let ctx = &self.ctx;
        let cores = &self.cores;
        let state = &self.state;
        let new_sums: Vec<(f64, Vec<f64>)> = (0..ctx.data.n_cores())
            .into_par_iter()
            .map(|c| {
                let mut ll = Vec::new();
                ctx.core_loglik(c, &cores[c].mu, state.tau2_core[c], &obs, &mut ll);
                (pairwise_sum(&ll), ll)
            })
            .collect();
        let new_total = pairwise_sum(&new_sums.iter().map(|s| s.0).collect::<Vec<_>>());
        let old_total = pairwise_sum(&self.cores.iter().map(|c| c.ll_sum).collect::<Vec<_>>());
        let accepted = self.accept(new_total - old_total, Stream::Nu);
        self.proposals.nu.record(accepted);
        if accepted {
            self.state.nu = new;
            for (c, (sum, ll)) in new_sums.into_iter().enumerate() {
                self.cores[c].ll = ll;
                self.cores[c].ll_sum = sum;
            }
        }
    }
}

/// Run a chain from the default or supplied starting state.
pub fn run_chain(ctx: ModelContext, cfg: ChainConfig, init: Option<ModelState>) -> Result<ChainArchive> {
    Sampler::new(ctx, cfg, init)?.run()
}

/// Draw from `N(mean, cov)`.
pub fn draw_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let (c, _) = cholesky_jittered(cov, "normal conditional covariance")?;
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(mean + c.l() * z)
}

/// Draw from `IG(shape, scale)`.
pub fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = rand_distr::Gamma::new(shape, 1.0 / scale).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

/// Draw `V ~ IW(df, S)` through a Bartlett-decomposed Wishart draw of `V⁻¹`.
pub fn draw_inv_wishart<R: Rng + ?Sized>(df: f64, s: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = s.nrows();
    let (sc, _) = cholesky_jittered(s, "inverse-Wishart scale")?;
    let s_inv = sc.inverse();
    let (lc, _) = cholesky_jittered(&s_inv, "Wishart scale")?;
    let l = lc.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Domain(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = &l * &a;
    let w = &la * la.transpose();
    let (wc, _) = cholesky_jittered(&w, "Wishart draw")?;
    let v = wc.inverse();
    Ok(0.5 * (&v + v.transpose()))
}

/// Conditional `N(mean, cov)` of γ given the site parameters.
pub fn gamma_conditional(
    ctx: &ModelContext,
    state: &ModelState,
    cov: &ThetaCovariance,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = state.theta.len();
    let p = &ctx.spec.priors;
    let mut theta = Vec::with_capacity(n * N_THETA);
    for th in &state.theta {
        theta.extend_from_slice(&th.0);
    }
    let q_theta = cov.precision_times(&theta);
    let mut qx = Vec::with_capacity(N_GAMMA);
    for g in 0..N_GAMMA {
        let x: Vec<f64> = (0..n * N_THETA)
            .map(|i| if GAMMA_OF_THETA[i % N_THETA] == g { 1.0 } else { 0.0 })
            .collect();
        qx.push(cov.precision_times(&x));
    }
    let mut prec = DMatrix::zeros(N_GAMMA, N_GAMMA);
    let mut rhs = DVector::zeros(N_GAMMA);
    for g in 0..N_GAMMA {
        prec[(g, g)] += 1.0 / p.gamma_var[g];
        rhs[g] += p.gamma_mean[g] / p.gamma_var[g];
        for i in 0..n * N_THETA {
            if GAMMA_OF_THETA[i % N_THETA] == g {
                rhs[g] += q_theta[i];
                for h in 0..N_GAMMA {
                    prec[(g, h)] += qx[h][i];
                }
            }
        }
    }
    let prec = 0.5 * (&prec + prec.transpose());
    let (c, _) = cholesky_jittered(&prec, "gamma conditional precision")?;
    let cov = c.inverse();
    let mean = &cov * rhs;
    Ok((mean, 0.5 * (&cov + cov.transpose())))
}

/// Conditional of `(log τ²_m, η_m)` (or `log τ²_m` alone when `η_m` is
/// fixed) as a Bayesian regression of `log τ²_i` on `(1, log dx_i)`.
pub fn scale_group_conditional(ctx: &ModelContext, state: &ModelState, m: usize) -> (DVector<f64>, DMatrix<f64>) {
    let p = &ctx.spec.priors;
    let members = ctx.data.cores_of_expedition(m);
    let free = ctx.eta_free[m];
    let dim = if free { 2 } else { 1 };
    let s2 = state.sigma2_tau;
    let mut prec = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    prec[(0, 0)] = 1.0 / p.log_tau2_group.var;
    rhs[0] = p.log_tau2_group.mean / p.log_tau2_group.var;
    if free {
        prec[(1, 1)] = 1.0 / p.eta_group.var;
        rhs[1] = p.eta_group.mean / p.eta_group.var;
    }
    for &c in &members {
        let y = state.tau2_core[c].ln();
        let x = [1.0, ctx.log_dx[c]];
        for a in 0..dim {
            rhs[a] += x[a] * y / s2;
            for b in 0..dim {
                prec[(a, b)] += x[a] * x[b] / s2;
            }
        }
    }
    let cov = prec.try_inverse().expect("positive definite regression precision");
    let mean = &cov * rhs;
    (mean, cov)
}

/// `IG(shape, scale)` conditional of σ²_τ.
pub fn sigma2_tau_conditional(ctx: &ModelContext, state: &ModelState) -> (f64, f64) {
    let p = &ctx.spec.priors;
    let n = ctx.data.n_cores() as f64;
    let ss: Vec<f64> = (0..ctx.data.n_cores())
        .map(|c| {
            let m = ctx.data.expedition_of_core[c];
            let r = state.tau2_core[c].ln() - state.log_tau2_group[m] - state.eta_group[m] * ctx.log_dx[c];
            r * r
        })
        .collect();
    (p.sigma2_tau.shape + 0.5 * n, p.sigma2_tau.scale + 0.5 * pairwise_sum(&ss))
}

/// `IG(shape, scale)` conditional of σ²_βk.
pub fn sigma2_beta_conditional(ctx: &ModelContext, state: &ModelState, field: &ScalarField, k: usize) -> (f64, f64) {
    let p = &ctx.spec.priors;
    let col: Vec<f64> = state.beta.iter().map(|b| b[k]).collect();
    let n = col.len() as f64;
    (p.sigma2_beta.shape + 0.5 * n, p.sigma2_beta.scale + 0.5 * field.quad(&col))
}

/// `IW(df, S)` conditional of V in the separable kind, from the site-major
/// residual `θ − Mγ` and `R⁻¹`.
pub fn v_conditional(ctx: &ModelContext, resid: &[f64], r_inv: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let p = &ctx.spec.priors;
    let n = r_inv.nrows();
    let e = DMatrix::from_fn(n, N_THETA, |i, a| resid[i * N_THETA + a]);
    let s = p.v.scale_matrix() + e.transpose() * r_inv * &e;
    (p.v.df + n as f64, 0.5 * (&s + s.transpose()))
}

/// The 12n × 8 design `1 ⊗ M` (site-major).
pub fn stacked_mean_design(n_sites: usize) -> DMatrix<f64> {
    let m = mean_map_matrix();
    DMatrix::from_fn(n_sites * N_THETA, N_GAMMA, |i, g| m[(i % N_THETA, g)])
}
