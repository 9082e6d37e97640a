//! The deterministic four-stage Herron–Langway densification model.
//!
//! On the logit-density scale `L(ρ) = log(ρ / (ρ_I − ρ))` the density profile
//! is piecewise linear in depth, with one Arrhenius rate per stage and change
//! depths implied by three critical densities. Site parameters live on an
//! unconstrained scale ([`SiteTheta`]) and are mapped back with
//! [`untransform_theta`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of transformed spatially varying parameters per site.
pub const N_THETA: usize = 12;
/// Number of densification stages.
pub const N_STAGES: usize = 4;
/// Number of critical densities separating the stages.
pub const N_CRITICAL: usize = 3;

/// Open intervals (g/cm³) bounding the three critical densities.
pub const CRITICAL_BOUNDS: [(f64, f64); N_CRITICAL] = [(0.42, 0.68), (0.68, 0.78), (0.78, 0.88)];

pub const IDX_ALPHA: usize = 0;
pub const IDX_LOG_A: usize = 1;
pub const IDX_LOG_E: usize = 5;
pub const IDX_T_RHO: usize = 9;

/// Column names for the 12 site parameters, in storage order.
pub const THETA_NAMES: [&str; N_THETA] = [
    "alpha", "log_A1", "log_A2", "log_A3", "log_A4", "log_E1", "log_E2", "log_E3", "log_E4",
    "t_rho1", "t_rho2", "t_rho3",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Density of solid ice, g/cm³.
    pub rho_ice: f64,
    /// Ideal gas constant, J/(K·mol).
    pub gas_const: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            rho_ice: 0.917,
            gas_const: 8.314,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_ice > 0.0 && self.rho_ice.is_finite()) {
            return Err(Error::Config(format!("rho_ice must be positive, got {}", self.rho_ice)));
        }
        if !(self.gas_const > 0.0 && self.gas_const.is_finite()) {
            return Err(Error::Config(format!("gas_const must be positive, got {}", self.gas_const)));
        }
        Ok(())
    }
}

/// Transformed site parameters: surface intercept, 4 log pre-exponential
/// factors, 4 log activation energies and 3 generalized-logit critical densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTheta(pub [f64; N_THETA]);

impl SiteTheta {
    pub fn alpha(&self) -> f64 {
        self.0[IDX_ALPHA]
    }

    pub fn log_a(&self, stage: usize) -> f64 {
        self.0[IDX_LOG_A + stage]
    }

    pub fn log_e(&self, stage: usize) -> f64 {
        self.0[IDX_LOG_E + stage]
    }

    pub fn t_rho(&self, j: usize) -> f64 {
        self.0[IDX_T_RHO + j]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Inverse of [`untransform_theta`].
    pub fn from_physical(p: &PhysicalParams) -> Self {
        let mut t = [0.0; N_THETA];
        t[IDX_ALPHA] = p.alpha;
        for l in 0..N_STAGES {
            t[IDX_LOG_A + l] = p.a[l].ln();
            t[IDX_LOG_E + l] = p.e[l].ln();
        }
        for j in 0..N_CRITICAL {
            let (lo, hi) = CRITICAL_BOUNDS[j];
            t[IDX_T_RHO + j] = generalized_logit(p.rho_c[j], lo, hi);
        }
        SiteTheta(t)
    }
}

/// Site parameters on their physical scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalParams {
    pub alpha: f64,
    pub a: [f64; N_STAGES],
    pub e: [f64; N_STAGES],
    pub rho_c: [f64; N_CRITICAL],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteCovariates {
    /// 10-m firn temperature, K.
    pub temperature: f64,
    /// Surface mass balance, m w.e./yr.
    pub smb: f64,
}

impl SiteCovariates {
    pub fn new(temperature: f64, smb: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be > 0 K, got {temperature}")));
        }
        if !(smb > 0.0 && smb.is_finite()) {
            return Err(Error::Domain(format!("SMB must be > 0, got {smb}")));
        }
        Ok(Self { temperature, smb })
    }
}

/// Critical depths (m) and per-stage Arrhenius constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageGeometry {
    pub kappa: [f64; N_CRITICAL],
    pub k: [f64; N_STAGES],
}

/// `log(ρ / (ρ_I − ρ))`.
pub fn logit_density(rho: f64, consts: &PhysicalConstants) -> Result<f64> {
    if !(rho > 0.0 && rho < consts.rho_ice) {
        return Err(Error::Domain(format!(
            "density {rho} outside (0, {})",
            consts.rho_ice
        )));
    }
    Ok((rho / (consts.rho_ice - rho)).ln())
}

/// `ρ_I / (1 + e^{−l})`, the inverse of [`logit_density`].
pub fn inverse_logit_density(l: f64, consts: &PhysicalConstants) -> f64 {
    consts.rho_ice * logistic(l)
}

#[inline]
pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log((ρ − lo) / (hi − ρ))`.
pub fn generalized_logit(rho: f64, lo: f64, hi: f64) -> f64 {
    ((rho - lo) / (hi - rho)).ln()
}

/// `(lo + hi·e^t) / (1 + e^t)`.
pub fn generalized_logistic(t: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * logistic(t)
}

pub fn untransform_theta(theta: &SiteTheta) -> PhysicalParams {
    let mut a = [0.0; N_STAGES];
    let mut e = [0.0; N_STAGES];
    for l in 0..N_STAGES {
        a[l] = theta.log_a(l).exp();
        e[l] = theta.log_e(l).exp();
    }
    let mut rho_c = [0.0; N_CRITICAL];
    for j in 0..N_CRITICAL {
        let (lo, hi) = CRITICAL_BOUNDS[j];
        rho_c[j] = generalized_logistic(theta.t_rho(j), lo, hi);
    }
    PhysicalParams {
        alpha: theta.alpha(),
        a,
        e,
        rho_c,
    }
}

/// Arrhenius rate `A·exp(−E/(R·T))`.
pub fn arrhenius(a: f64, e: f64, temperature: f64, consts: &PhysicalConstants) -> Result<f64> {
    if !(a > 0.0) || !(temperature > 0.0) || !(e >= 0.0) {
        return Err(Error::Domain(format!(
            "arrhenius requires A > 0, E >= 0, T > 0 (got A={a}, E={e}, T={temperature})"
        )));
    }
    Ok(a * (-e / (consts.gas_const * temperature)).exp())
}

/// Change depths implied by the critical densities.
///
/// Returns [`Error::OutOfSupport`] when the surface density already exceeds
/// the first critical density (`κ₁ < 0`).
pub fn change_depths(
    alpha: f64,
    k: &[f64; N_STAGES],
    rho_c: &[f64; N_CRITICAL],
    cov: &SiteCovariates,
    consts: &PhysicalConstants,
) -> Result<[f64; N_CRITICAL]> {
    if k.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::OutOfSupport(format!("non-positive Arrhenius constant in {k:?}")));
    }
    if !alpha.is_finite() {
        return Err(Error::OutOfSupport(format!("non-finite intercept {alpha}")));
    }
    let l: Vec<f64> = rho_c
        .iter()
        .map(|&r| logit_density(r, consts))
        .collect::<Result<_>>()?;
    let ri = consts.rho_ice;
    let sqrt_smb = cov.smb.sqrt();
    let k1 = (l[0] - alpha) / (ri * k[0]);
    if k1 < 0.0 {
        return Err(Error::OutOfSupport(format!(
            "surface density exceeds first critical density (kappa1 = {k1})"
        )));
    }
    let k2 = k1 + sqrt_smb * (l[1] - l[0]) / (ri * k[1]);
    let k3 = k2 + sqrt_smb * (l[2] - l[1]) / (ri * k[2]);
    let kappa = [k1, k2, k3];
    if kappa.iter().any(|v| !v.is_finite()) {
        return Err(Error::OutOfSupport(format!("non-finite change depths {kappa:?}")));
    }
    Ok(kappa)
}

/// The four piecewise-linear stage covariates at depth `x`.
pub fn design_basis(
    x: f64,
    geom: &StageGeometry,
    cov: &SiteCovariates,
    consts: &PhysicalConstants,
) -> [f64; N_STAGES] {
    stage_basis(x, &geom.kappa, consts.rho_ice, 1.0 / cov.smb.sqrt())
}

#[inline]
fn stage_basis(x: f64, kappa: &[f64; N_CRITICAL], rho_ice: f64, inv_sqrt_smb: f64) -> [f64; 4] {
    let [k1, k2, k3] = *kappa;
    let z1 = rho_ice * x.min(k1);
    let z2 = if x > k1 { rho_ice * (x - k1).min(k2 - k1) * inv_sqrt_smb } else { 0.0 };
    let z3 = if x > k2 { rho_ice * (x - k2).min(k3 - k2) * inv_sqrt_smb } else { 0.0 };
    let z4 = if x > k3 { rho_ice * (x - k3) * inv_sqrt_smb } else { 0.0 };
    [z1, z2, z3, z4]
}

/// A site's fully resolved piecewise-linear profile, built once per θ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profile {
    pub alpha: f64,
    pub geometry: StageGeometry,
    pub rho_c: [f64; N_CRITICAL],
    rho_ice: f64,
    inv_sqrt_smb: f64,
}

impl Profile {
    pub fn new(theta: &SiteTheta, cov: &SiteCovariates, consts: &PhysicalConstants) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::OutOfSupport("non-finite site parameters".into()));
        }
        let p = untransform_theta(theta);
        let mut k = [0.0; N_STAGES];
        for l in 0..N_STAGES {
            k[l] = arrhenius(p.a[l], p.e[l], cov.temperature, consts)
                .map_err(|e| Error::OutOfSupport(e.to_string()))?;
        }
        let kappa = change_depths(p.alpha, &k, &p.rho_c, cov, consts)?;
        Ok(Self {
            alpha: p.alpha,
            geometry: StageGeometry { kappa, k },
            rho_c: p.rho_c,
            rho_ice: consts.rho_ice,
            inv_sqrt_smb: 1.0 / cov.smb.sqrt(),
        })
    }

    #[inline]
    pub fn basis(&self, x: f64) -> [f64; N_STAGES] {
        stage_basis(x, &self.geometry.kappa, self.rho_ice, self.inv_sqrt_smb)
    }

    /// `α + z(x)ᵀk`.
    #[inline]
    pub fn logit(&self, x: f64) -> f64 {
        let z = self.basis(x);
        let k = &self.geometry.k;
        self.alpha + z[0] * k[0] + z[1] * k[1] + z[2] * k[2] + z[3] * k[3]
    }

    pub fn density(&self, x: f64) -> f64 {
        self.rho_ice * logistic(self.logit(x))
    }
}

/// Logit-scale mean `α + z(x)ᵀk + smooth_term`.
pub fn mean_logit(
    x: f64,
    theta: &SiteTheta,
    cov: &SiteCovariates,
    consts: &PhysicalConstants,
    smooth_term: f64,
) -> Result<f64> {
    Ok(Profile::new(theta, cov, consts)?.logit(x) + smooth_term)
}

pub fn mean_density(
    x: f64,
    theta: &SiteTheta,
    cov: &SiteCovariates,
    consts: &PhysicalConstants,
    smooth_term: f64,
) -> Result<f64> {
    Ok(inverse_logit_density(mean_logit(x, theta, cov, consts, smooth_term)?, consts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    /// θ at the hierarchical prior means (stages 3 and 4 share stage 2's).
    fn prior_mean_theta() -> SiteTheta {
        SiteTheta([-0.5, 2.4, 6.35, 6.35, 6.35, 9.23, 9.97, 9.97, 9.97, 0.0, 0.0, 0.0])
    }

    #[test]
    fn logit_density_values() {
        let c = consts();
        assert_eq!(logit_density(c.rho_ice / 2.0, &c).unwrap(), 0.0);
        // mpmath: log(0.55/0.367)
        let v = logit_density(0.55, &c).unwrap();
        assert!((v - 0.404_556_430_171_946_3).abs() < 1e-14);
        for f in [0.1, 0.5, 0.9] {
            let r = f * c.rho_ice;
            let back = inverse_logit_density(logit_density(r, &c).unwrap(), &c);
            assert!((back - r).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_density_domain() {
        let c = consts();
        assert!(matches!(logit_density(0.0, &c), Err(Error::Domain(_))));
        assert!(matches!(logit_density(-0.1, &c), Err(Error::Domain(_))));
        assert!(matches!(logit_density(c.rho_ice, &c), Err(Error::Domain(_))));
        assert!(matches!(logit_density(1.2, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn untransform_midpoints_and_exponentials() {
        let p = untransform_theta(&prior_mean_theta());
        assert!((p.rho_c[0] - 0.55).abs() < 1e-15);
        assert!((p.rho_c[1] - 0.73).abs() < 1e-15);
        assert!((p.rho_c[2] - 0.83).abs() < 1e-15);
        // exp(2.4), exp(9.23) by mpmath
        assert!((p.a[0] - 11.023_176_380_641_6).abs() < 1e-10);
        assert!((p.e[0] - 10_198.541_511_705_77).abs() < 1e-7);
    }

    #[test]
    fn arrhenius_values() {
        let c = consts();
        assert_eq!(arrhenius(3.0, 0.0, 123.0, &c).unwrap(), 3.0);
        // mpmath: 11 exp(-10160/(8.314*250)), 575 exp(-21400/(8.314*250))
        let k1 = arrhenius(11.0, 10160.0, 250.0, &c).unwrap();
        assert!((k1 - 0.082_889_638_455_307_88).abs() < 1e-15);
        let k2 = arrhenius(575.0, 21400.0, 250.0, &c).unwrap();
        assert!((k2 - 0.019_418_745_515_065_5).abs() < 1e-15);
        assert!(arrhenius(0.0, 1.0, 250.0, &c).is_err());
        assert!(arrhenius(1.0, 1.0, 0.0, &c).is_err());
        assert!(arrhenius(1.0, 1.0, 251.0, &c).unwrap() > arrhenius(1.0, 1.0, 250.0, &c).unwrap());
    }

    #[test]
    fn change_depths_values() {
        let c = consts();
        let cov = SiteCovariates::new(250.0, 0.2).unwrap();
        let rho_c = [0.55, 0.73, 0.83];
        let k = [0.08287, 0.02, 0.02, 0.02];
        let alpha = logit_density(0.40, &c).unwrap();
        let kappa = change_depths(alpha, &k, &rho_c, &cov, &c).unwrap();
        // mpmath: (L(0.55) - L(0.40)) / (0.917 * 0.08287)
        assert!((kappa[0] - 8.700_081_384_744_24).abs() < 1e-10);

        let at_rho1 = logit_density(0.55, &c).unwrap();
        let kappa = change_depths(at_rho1, &k, &rho_c, &cov, &c).unwrap();
        assert_eq!(kappa[0], 0.0);

        let surface_too_dense = logit_density(0.6, &c).unwrap();
        assert!(matches!(
            change_depths(surface_too_dense, &k, &rho_c, &cov, &c),
            Err(Error::OutOfSupport(_))
        ));
    }

    #[test]
    fn doubling_smb_scales_stage_two_width() {
        let c = consts();
        let rho_c = [0.55, 0.73, 0.83];
        let k = [0.08, 0.02, 0.03, 0.01];
        let a = -0.6;
        let lo = change_depths(a, &k, &rho_c, &SiteCovariates::new(250.0, 0.2).unwrap(), &c).unwrap();
        let hi = change_depths(a, &k, &rho_c, &SiteCovariates::new(250.0, 0.4).unwrap(), &c).unwrap();
        let ratio = (hi[1] - hi[0]) / (lo[1] - lo[0]);
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(lo[0], hi[0]);
    }

    #[test]
    fn design_basis_stages() {
        let c = consts();
        let cov = SiteCovariates::new(250.0, 0.25).unwrap();
        let geom = StageGeometry {
            kappa: [5.0, 12.0, 30.0],
            k: [0.1, 0.02, 0.02, 0.02],
        };
        let z = design_basis(3.0, &geom, &cov, &c);
        assert_eq!(z, [c.rho_ice * 3.0, 0.0, 0.0, 0.0]);
        let z = design_basis(30.0, &geom, &cov, &c);
        assert_eq!(z[3], 0.0);
        assert!((z[1] - c.rho_ice * 7.0 / 0.5).abs() < 1e-12);
        assert!((z[2] - c.rho_ice * 18.0 / 0.5).abs() < 1e-12);
        let z = design_basis(0.0, &geom, &cov, &c);
        assert_eq!(z, [0.0; 4]);
        for &kj in &geom.kappa {
            let below = design_basis(kj - 1e-12, &geom, &cov, &c);
            let above = design_basis(kj + 1e-12, &geom, &cov, &c);
            for l in 0..4 {
                assert!((below[l] - above[l]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn surface_mean_is_intercept() {
        let c = consts();
        let cov = SiteCovariates::new(250.0, 0.2).unwrap();
        let th = prior_mean_theta();
        assert_eq!(mean_logit(0.0, &th, &cov, &c, 0.0).unwrap(), th.alpha());
    }

    #[test]
    fn prior_mean_profile_crosses_first_critical_density_at_kappa1() {
        let c = consts();
        let cov = SiteCovariates::new(250.0, 0.2).unwrap();
        let th = prior_mean_theta();
        let prof = Profile::new(&th, &cov, &c).unwrap();
        // Independent root finding by bisection on the density profile.
        let (mut lo, mut hi) = (0.0_f64, 200.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_density(mid, &th, &cov, &c, 0.0).unwrap() < 0.55 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((0.5 * (lo + hi) - prof.geometry.kappa[0]).abs() < 1e-9);
    }

    fn arb_theta() -> impl Strategy<Value = SiteTheta> {
        (
            -1.5..0.0f64,
            proptest::array::uniform4(-0.3..0.3f64),
            proptest::array::uniform4(-0.3..0.3f64),
            proptest::array::uniform3(-3.0..3.0f64),
        )
            .prop_map(|(a, da, de, tr)| {
                let base = prior_mean_theta().0;
                let mut t = base;
                t[IDX_ALPHA] = a;
                for l in 0..4 {
                    t[IDX_LOG_A + l] += da[l];
                    t[IDX_LOG_E + l] += de[l];
                }
                for j in 0..3 {
                    t[IDX_T_RHO + j] = tr[j];
                }
                SiteTheta(t)
            })
    }

    proptest! {
        #[test]
        fn transform_round_trip(th in arb_theta()) {
            let back = SiteTheta::from_physical(&untransform_theta(&th));
            for i in 0..N_THETA {
                prop_assert!((back.0[i] - th.0[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn profile_knots_hit_critical_densities(
            th in arb_theta(), t in 230.0..260.0f64, smb in 0.05..0.6f64
        ) {
            let c = consts();
            let cov = SiteCovariates::new(t, smb).unwrap();
            if let Ok(prof) = Profile::new(&th, &cov, &c) {
                let mut prev = -1.0;
                for j in 0..3 {
                    let kj = prof.geometry.kappa[j];
                    prop_assert!(kj >= prev);
                    prev = kj;
                    prop_assert!((prof.density(kj) - prof.rho_c[j]).abs() < 1e-10);
                    let lo = prof.density(kj * (1.0 - 1e-15));
                    let hi = prof.density(kj * (1.0 + 1e-15));
                    prop_assert!((lo - hi).abs() < 1e-12);
                }
                let mut last = prof.density(0.0);
                for i in 1..400 {
                    let d = prof.density(i as f64 * 0.5);
                    prop_assert!(d >= last && d <= c.rho_ice && d > 0.0);
                    last = d;
                }
            }
        }

        #[test]
        fn arrhenius_log_linear(a in 0.1..1e3f64, e in 1.0..3e4f64, t in 200.0..280.0f64) {
            let c = consts();
            let k = arrhenius(a, e, t, &c).unwrap();
            prop_assert!((k.ln() - (a.ln() - e / (c.gas_const * t))).abs() < 1e-12);
            prop_assert!(arrhenius(a, e, t + 1.0, &c).unwrap() > k);
        }
    }
}
