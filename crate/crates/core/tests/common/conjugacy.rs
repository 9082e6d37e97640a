//! Numeric derivations of every Gibbs conditional from the brute-force log
//! prior, compared against the closed forms used by the sampler.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use svsd_core::likelihood::{ErrorModel, ErrorFamily, ModelContext, ModelSpec, Smoothing};
use svsd_core::model::N_THETA;
use svsd_core::sampler::{
    gamma_conditional, scale_group_conditional, sigma2_beta_conditional, sigma2_tau_conditional, v_conditional,
};
use svsd_core::smoothing::SplineSpec;
use svsd_core::spatial::{exp_correlation, CrossCovKind, CrossCovSpec, ScalarField, ThetaCovariance};
use svsd_core::state::ModelState;

use super::{brute_log_prior, context, perturbed_state, random_spd, two_site_cores};

#[derive(Debug)]
pub struct OracleError {
    pub name: String,
    /// Largest mean discrepancy relative to the mean's scale.
    pub mean: f64,
    /// Largest covariance discrepancy relative to the covariance's scale.
    pub cov: f64,
}

impl OracleError {
    pub fn worst(&self) -> f64 {
        self.mean.max(self.cov)
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale.max(1e-300)
}

/// Mean and covariance of a Gaussian conditional recovered from a function
/// that is exactly quadratic in `x`, by central differences with unit step.
fn gaussian_from_quadratic(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x0.len();
    let at = |steps: &[(usize, f64)]| {
        let mut x = x0.to_vec();
        for &(i, s) in steps {
            x[i] += s;
        }
        f(&x)
    };
    let f0 = f(x0);
    let mut grad = DVector::zeros(d);
    let mut prec = DMatrix::zeros(d, d);
    for a in 0..d {
        grad[a] = 0.5 * (at(&[(a, 1.0)]) - at(&[(a, -1.0)]));
        prec[(a, a)] = -(at(&[(a, 1.0)]) - 2.0 * f0 + at(&[(a, -1.0)]));
        for b in 0..a {
            let v = -0.25
                * (at(&[(a, 1.0), (b, 1.0)]) - at(&[(a, 1.0), (b, -1.0)]) - at(&[(a, -1.0), (b, 1.0)])
                    + at(&[(a, -1.0), (b, -1.0)]));
            prec[(a, b)] = v;
            prec[(b, a)] = v;
        }
    }
    let cov = prec.try_inverse().expect("quadratic has a negative-definite Hessian");
    let mean = DVector::from_column_slice(x0) + &cov * grad;
    (mean, cov)
}

/// `(shape, scale)` of an inverse-gamma kernel fitted exactly to `f` on a
/// set of abscissae: `f(x) = c − (a + 1) ln x − b / x`.
fn inverse_gamma_from_kernel(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let xs: [f64; 6] = [0.03, 0.07, 0.15, 0.3, 0.6, 1.2];
    let design = DMatrix::from_fn(xs.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => -xs[i].ln(),
        _ => -1.0 / xs[i],
    });
    let y = DVector::from_iterator(xs.len(), xs.iter().map(|&x| f(x)));
    let coef = design.svd(true, true).solve(&y, 1e-14).unwrap();
    (coef[1] - 1.0, coef[2])
}

fn ig_moments(shape: f64, scale: f64) -> (f64, f64) {
    (scale / (shape - 1.0), scale * scale / ((shape - 1.0).powi(2) * (shape - 2.0)))
}

pub fn toy_spec(kind: CrossCovKind) -> ModelSpec {
    ModelSpec {
        error: ErrorModel { family: ErrorFamily::StudentT, weighted: true, hierarchical: true },
        cross_covariance: kind,
        smoothing: Smoothing::Spline(SplineSpec::new(2, 1).unwrap()),
        ..ModelSpec::default()
    }
}

fn toy(kind: CrossCovKind, seed: u64) -> (ModelContext, ModelState) {
    let ctx = context(&two_site_cores(10), toy_spec(kind));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let state = perturbed_state(&ctx, &mut rng);
    (ctx, state)
}

pub fn gamma_oracle(kind: CrossCovKind, seed: u64) -> OracleError {
    let (ctx, state) = toy(kind, seed);
    let f = |g: &[f64]| {
        let mut s = state.clone();
        s.gamma.copy_from_slice(g);
        brute_log_prior(&ctx, &s)
    };
    let (mean, cov) = gaussian_from_quadratic(f, &state.gamma);
    let tc = ThetaCovariance::from_spec(&state.cross, &ctx.data.sites).unwrap();
    let (m, c) = gamma_conditional(&ctx, &state, &tc).unwrap();
    OracleError {
        name: format!("gamma ({})", kind.label()),
        mean: rel(m.as_slice(), mean.as_slice()),
        cov: rel(c.as_slice(), cov.as_slice()),
    }
}

pub fn scale_group_oracle(seed: u64) -> Vec<OracleError> {
    let (ctx, state) = toy(CrossCovKind::Separable, seed);
    (0..ctx.data.n_expeditions())
        .map(|m| {
            let free = ctx.eta_free[m];
            let x0: Vec<f64> = if free {
                vec![state.log_tau2_group[m], state.eta_group[m]]
            } else {
                vec![state.log_tau2_group[m]]
            };
            let f = |x: &[f64]| {
                let mut s = state.clone();
                s.log_tau2_group[m] = x[0];
                if free {
                    s.eta_group[m] = x[1];
                }
                brute_log_prior(&ctx, &s)
            };
            let (mean, cov) = gaussian_from_quadratic(f, &x0);
            let (cm, cc) = scale_group_conditional(&ctx, &state, m);
            OracleError {
                name: format!("scale group {m} (eta free: {free})"),
                mean: rel(cm.as_slice(), mean.as_slice()),
                cov: rel(cc.as_slice(), cov.as_slice()),
            }
        })
        .collect()
}

pub fn sigma2_tau_oracle(seed: u64) -> OracleError {
    let (ctx, state) = toy(CrossCovKind::Separable, seed);
    let (a, b) = inverse_gamma_from_kernel(|x| {
        let mut s = state.clone();
        s.sigma2_tau = x;
        brute_log_prior(&ctx, &s)
    });
    let (ca, cb) = sigma2_tau_conditional(&ctx, &state);
    let (m, v) = ig_moments(a, b);
    let (cm, cv) = ig_moments(ca, cb);
    OracleError {
        name: "sigma2_tau".into(),
        mean: rel(&[cm], &[m]).max(rel(&[ca, cb], &[a, b])),
        cov: rel(&[cv], &[v]),
    }
}

pub fn sigma2_beta_oracle(seed: u64) -> Vec<OracleError> {
    let (ctx, state) = toy(CrossCovKind::Separable, seed);
    let field = ScalarField::new(&ctx.data.sites.dist, state.phi_beta).unwrap();
    (0..ctx.spline_dim())
        .map(|k| {
            let (a, b) = inverse_gamma_from_kernel(|x| {
                let mut s = state.clone();
                s.sigma2_beta[k] = x;
                brute_log_prior(&ctx, &s)
            });
            let (ca, cb) = sigma2_beta_conditional(&ctx, &state, &field, k);
            let (m, v) = ig_moments(a, b);
            let (cm, cv) = ig_moments(ca, cb);
            OracleError {
                name: format!("sigma2_beta[{k}]"),
                mean: rel(&[cm], &[m]).max(rel(&[ca, cb], &[a, b])),
                cov: rel(&[cv], &[v]),
            }
        })
        .collect()
}

/// Regresses the log prior over random V on `ln|V|` and the entries of
/// `V⁻¹`; the coefficients identify the inverse-Wishart conditional.
pub fn v_separable_oracle(seed: u64) -> OracleError {
    let (ctx, state) = toy(CrossCovKind::Separable, seed);
    let phi = state.cross.decays[0];
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let n_pairs = N_THETA * (N_THETA + 1) / 2;
    let n_feat = 2 + n_pairs;
    let n_eval = 3 * n_feat;
    let mut design = DMatrix::zeros(n_eval, n_feat);
    let mut y = DVector::zeros(n_eval);
    for r in 0..n_eval {
        let v = random_spd(&mut rng, 0.2);
        let mut s = state.clone();
        s.cross = CrossCovSpec::separable(&v, phi).unwrap();
        y[r] = brute_log_prior(&ctx, &s);
        let w = v.clone().try_inverse().unwrap();
        design[(r, 0)] = 1.0;
        design[(r, 1)] = v.clone().symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
        let mut col = 2;
        for a in 0..N_THETA {
            for b in 0..=a {
                design[(r, col)] = if a == b { w[(a, a)] } else { 2.0 * w[(a, b)] };
                col += 1;
            }
        }
    }
    let coef = design.svd(true, true).solve(&y, 1e-14).unwrap();
    let df = -2.0 * coef[1] - N_THETA as f64 - 1.0;
    let mut s_mat = DMatrix::zeros(N_THETA, N_THETA);
    let mut col = 2;
    for a in 0..N_THETA {
        for b in 0..=a {
            s_mat[(a, b)] = -2.0 * coef[col];
            s_mat[(b, a)] = -2.0 * coef[col];
            col += 1;
        }
    }
    let r_inv = exp_correlation(&ctx.data.sites.dist, phi).try_inverse().unwrap();
    let (cdf, cs) = v_conditional(&ctx, &ctx.theta_residual(&state), &r_inv);
    let denom = |d: f64| d - N_THETA as f64 - 1.0;
    let mean = &s_mat / denom(df);
    let cmean = &cs / denom(cdf);
    OracleError {
        name: "V (separable)".into(),
        mean: rel(cmean.as_slice(), mean.as_slice()).max(rel(&[cdf], &[df])),
        // The inverse-Wishart variance needs df > p + 3, so the scale matrix,
        // which fixes the whole distribution, stands in for it.
        cov: rel(cs.as_slice(), s_mat.as_slice()),
    }
}

/// Every conjugacy check on a few random toy states.
pub fn all_oracles() -> Vec<OracleError> {
    let mut out = Vec::new();
    for seed in [1, 2] {
        for kind in [
            CrossCovKind::Separable,
            CrossCovKind::Independent,
            CrossCovKind::Coregionalization,
        ] {
            out.push(gamma_oracle(kind, seed));
        }
        out.extend(scale_group_oracle(seed));
        out.push(sigma2_tau_oracle(seed));
        out.extend(sigma2_beta_oracle(seed));
        out.push(v_separable_oracle(seed));
    }
    out
}
