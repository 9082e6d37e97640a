//! The full parameter state and its flat column layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    hierarchical_mean_map, ErrorFamily, ModelContext, GAMMA_NAMES, N_GAMMA,
};
use crate::model::{SiteTheta, N_THETA, THETA_NAMES};
use crate::spatial::{CrossCovKind, CrossCovSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Site parameters, one per unique site.
    pub theta: Vec<SiteTheta>,
    /// Smoothing coefficients, `[site][k]`.
    pub beta: Vec<Vec<f64>>,
    pub gamma: [f64; N_GAMMA],
    pub cross: CrossCovSpec,
    pub phi_beta: f64,
    pub sigma2_beta: Vec<f64>,
    pub nu: f64,
    pub log_tau2_group: Vec<f64>,
    pub eta_group: Vec<f64>,
    pub sigma2_tau: f64,
    /// Per-core error variances. Derived from the expedition scale when the
    /// hierarchy is off.
    pub tau2_core: Vec<f64>,
}

impl ModelState {
    /// Starting point: hierarchical parameters at their prior means, sites at
    /// the implied mean, smoothing coefficients at zero and variance
    /// parameters at their prior modes.
    pub fn initial(ctx: &ModelContext) -> Result<Self> {
        let p = &ctx.spec.priors;
        let d = &ctx.data;
        let gamma = p.gamma_mean;
        let theta = vec![SiteTheta(hierarchical_mean_map(&gamma)); d.n_sites()];
        let v_mode = p.v.scale / (p.v.df + N_THETA as f64 + 1.0);
        let phi = 1.0 / (p.inv_phi.lo * p.inv_phi.hi).sqrt();
        let kind = ctx.spec.cross_covariance;
        let cross = match kind {
            CrossCovKind::Separable => {
                CrossCovSpec::separable(&(DMatrix::identity(N_THETA, N_THETA) * v_mode), phi)?
            }
            _ => {
                let r = kind.n_factors();
                let lam = DMatrix::from_fn(N_THETA, r, |a, l| if a == l { v_mode.sqrt() } else { 0.0 });
                CrossCovSpec::new(kind, lam, vec![phi; kind.n_decays()])?
            }
        };
        let k = ctx.spline_dim();
        let mut s = Self {
            theta,
            beta: vec![vec![0.0; k]; d.n_sites()],
            gamma,
            cross,
            phi_beta: 1.0 / (p.inv_phi_beta.lo * p.inv_phi_beta.hi).sqrt(),
            sigma2_beta: vec![p.sigma2_beta.scale / (p.sigma2_beta.shape + 1.0); k],
            nu: 0.5 * (p.nu.lo + p.nu.hi),
            log_tau2_group: vec![p.log_tau2_group.mean; d.n_expeditions()],
            eta_group: vec![0.0; d.n_expeditions()],
            sigma2_tau: p.sigma2_tau.scale / (p.sigma2_tau.shape + 1.0),
            tau2_core: vec![p.log_tau2_group.mean.exp(); d.n_cores()],
        };
        s.sync_derived(ctx);
        Ok(s)
    }

    /// Recompute quantities that are functions of others.
    pub fn sync_derived(&mut self, ctx: &ModelContext) {
        if !ctx.spec.error.hierarchical {
            for c in 0..self.tau2_core.len() {
                let m = ctx.data.expedition_of_core[c];
                self.tau2_core[c] = (self.log_tau2_group[m] + self.eta_group[m] * ctx.log_dx[c]).exp();
            }
        }
    }
}

/// Column layout used by archives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_sites: usize,
    pub n_cores: usize,
    pub n_expeditions: usize,
    pub spline_dim: usize,
    pub kind: CrossCovKind,
    pub student_t: bool,
    pub hierarchical: bool,
}

impl Layout {
    pub fn for_context(ctx: &ModelContext) -> Self {
        Self {
            n_sites: ctx.data.n_sites(),
            n_cores: ctx.data.n_cores(),
            n_expeditions: ctx.data.n_expeditions(),
            spline_dim: ctx.spline_dim(),
            kind: ctx.spec.cross_covariance,
            student_t: ctx.spec.error.family == ErrorFamily::StudentT,
            hierarchical: ctx.spec.error.hierarchical,
        }
    }

    fn cross_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match self.kind {
            CrossCovKind::Separable => {
                for a in 0..N_THETA {
                    for b in a..N_THETA {
                        names.push(format!("V[{},{}]", THETA_NAMES[a], THETA_NAMES[b]));
                    }
                }
                names.push("phi".into());
            }
            kind => {
                for l in 0..kind.n_factors() {
                    for a in 0..N_THETA {
                        if kind.is_free_loading(a, l) {
                            names.push(format!("lambda[{},{l}]", THETA_NAMES[a]));
                        }
                    }
                }
                for l in 0..kind.n_decays() {
                    names.push(format!("phi[{l}]"));
                }
            }
        }
        names
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = GAMMA_NAMES.iter().map(|s| s.to_string()).collect();
        names.extend(self.cross_names());
        if self.spline_dim > 0 {
            names.push("phi_beta".into());
            for k in 0..self.spline_dim {
                names.push(format!("sigma2_beta[{k}]"));
            }
        }
        if self.student_t {
            names.push("nu".into());
        }
        for m in 0..self.n_expeditions {
            names.push(format!("log_tau2_group[{m}]"));
        }
        for m in 0..self.n_expeditions {
            names.push(format!("eta_group[{m}]"));
        }
        if self.hierarchical {
            names.push("sigma2_tau".into());
        }
        for c in 0..self.n_cores {
            names.push(format!("tau2[{c}]"));
        }
        for s in 0..self.n_sites {
            for a in THETA_NAMES {
                names.push(format!("theta[{s},{a}]"));
            }
        }
        for s in 0..self.n_sites {
            for k in 0..self.spline_dim {
                names.push(format!("beta[{s},{k}]"));
            }
        }
        names
    }

    pub fn width(&self) -> usize {
        self.names().len()
    }

    /// Offset of the first site parameter column.
    pub fn theta_offset(&self) -> usize {
        self.width() - N_THETA * self.n_sites - self.spline_dim * self.n_sites
    }

    pub fn flatten(&self, s: &ModelState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        out.extend_from_slice(&s.gamma);
        match self.kind {
            CrossCovKind::Separable => {
                let v = s.cross.point_covariance();
                for a in 0..N_THETA {
                    for b in a..N_THETA {
                        out.push(v[(a, b)]);
                    }
                }
                out.push(s.cross.decays[0]);
            }
            kind => {
                for l in 0..kind.n_factors() {
                    for a in 0..N_THETA {
                        if kind.is_free_loading(a, l) {
                            out.push(s.cross.loadings[(a, l)]);
                        }
                    }
                }
                out.extend_from_slice(&s.cross.decays);
            }
        }
        if self.spline_dim > 0 {
            out.push(s.phi_beta);
            out.extend_from_slice(&s.sigma2_beta);
        }
        if self.student_t {
            out.push(s.nu);
        }
        out.extend_from_slice(&s.log_tau2_group);
        out.extend_from_slice(&s.eta_group);
        if self.hierarchical {
            out.push(s.sigma2_tau);
        }
        out.extend_from_slice(&s.tau2_core);
        for th in &s.theta {
            out.extend_from_slice(&th.0);
        }
        for b in &s.beta {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten(&self, row: &[f64]) -> Result<ModelState> {
        if row.len() != self.width() {
            return Err(Error::Validation(format!(
                "draw has {} columns, layout expects {}",
                row.len(),
                self.width()
            )));
        }
        let mut it = row.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let gamma: [f64; N_GAMMA] = take(N_GAMMA).try_into().unwrap();
        let cross = match self.kind {
            CrossCovKind::Separable => {
                let upper = take(N_THETA * (N_THETA + 1) / 2);
                let mut v = DMatrix::zeros(N_THETA, N_THETA);
                let mut i = 0;
                for a in 0..N_THETA {
                    for b in a..N_THETA {
                        v[(a, b)] = upper[i];
                        v[(b, a)] = upper[i];
                        i += 1;
                    }
                }
                let phi = take(1)[0];
                CrossCovSpec::separable(&v, phi)?
            }
            kind => {
                let r = kind.n_factors();
                let mut lam = DMatrix::zeros(N_THETA, r);
                for l in 0..r {
                    for a in 0..N_THETA {
                        if kind.is_free_loading(a, l) {
                            lam[(a, l)] = take(1)[0];
                        }
                    }
                }
                let decays = take(kind.n_decays());
                CrossCovSpec::new(kind, lam, decays)?
            }
        };
        let (phi_beta, sigma2_beta) = if self.spline_dim > 0 {
            (take(1)[0], take(self.spline_dim))
        } else {
            (f64::NAN, Vec::new())
        };
        let nu = if self.student_t { take(1)[0] } else { f64::INFINITY };
        let log_tau2_group = take(self.n_expeditions);
        let eta_group = take(self.n_expeditions);
        let sigma2_tau = if self.hierarchical { take(1)[0] } else { f64::NAN };
        let tau2_core = take(self.n_cores);
        let theta = (0..self.n_sites)
            .map(|_| SiteTheta(take(N_THETA).try_into().unwrap()))
            .collect();
        let beta = (0..self.n_sites).map(|_| take(self.spline_dim)).collect();
        Ok(ModelState {
            theta,
            beta,
            gamma,
            cross,
            phi_beta,
            sigma2_beta,
            nu,
            log_tau2_group,
            eta_group,
            sigma2_tau,
            tau2_core,
        })
    }
}
