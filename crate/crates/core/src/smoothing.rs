//! Spline covariates projected into the per-core null space of the stage design.
//!
//! The stage covariates `Z` of a core change with its site parameters, so the
//! projection is rebuilt whenever θ changes. The projected basis is stored
//! together with the regression coefficients `C = (ZᵀZ)⁻¹ZᵀH`, which extend
//! the projected functions to depths other than the measured ones:
//! `h⊥(x) = h(x) − C ᵀ z(x)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Profile, N_STAGES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotRule {
    /// Equally spaced quantiles of the depths the basis is built on.
    Quantile,
    /// Equally spaced over `[0, max depth]`.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineSpec {
    pub degree: usize,
    pub n_knots: usize,
    #[serde(default = "default_knot_rule")]
    pub knot_rule: KnotRule,
}

fn default_knot_rule() -> KnotRule {
    KnotRule::Quantile
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            n_knots: 2,
            knot_rule: KnotRule::Quantile,
        }
    }
}

impl SplineSpec {
    pub fn new(degree: usize, n_knots: usize) -> Result<Self> {
        let spec = Self {
            degree,
            n_knots,
            knot_rule: KnotRule::Quantile,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.degree) {
            return Err(Error::Config(format!("spline degree must be 2 or 3, got {}", self.degree)));
        }
        if self.n_knots > 3 {
            return Err(Error::Config(format!("at most 3 interior knots, got {}", self.n_knots)));
        }
        Ok(())
    }

    /// Number of basis columns (the constant is excluded).
    pub fn dim(&self) -> usize {
        self.degree + self.n_knots
    }

    pub fn label(&self) -> String {
        match (self.degree, self.n_knots) {
            (3, 0) => "cubic polynomial".to_string(),
            (2, 0) => "quadratic polynomial".to_string(),
            (2, k) => format!("quadratic spline, {k} knots"),
            (_, k) => format!("cubic spline, {k} knots"),
        }
    }
}

/// Truncated-power spline basis without the constant:
/// `x, x², …, x^d, (x − t₁)₊^d, …`.
pub fn spline_basis(x: f64, spec: &SplineSpec, knots: &[f64]) -> Result<Vec<f64>> {
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain(format!("knots must be strictly increasing: {knots:?}")));
    }
    let mut out = vec![0.0; spec.degree + knots.len()];
    fill_basis(x, spec.degree, knots, &mut out);
    Ok(out)
}

#[inline]
fn fill_basis(x: f64, degree: usize, knots: &[f64], out: &mut [f64]) {
    let mut p = 1.0;
    for slot in out.iter_mut().take(degree) {
        p *= x;
        *slot = p;
    }
    for (slot, &t) in out[degree..].iter_mut().zip(knots) {
        *slot = if x > t { (x - t).powi(degree as i32) } else { 0.0 };
    }
}

/// A spline basis on depths rescaled to `[0, 1]` by a fixed depth scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub spec: SplineSpec,
    /// Depth (m) mapped to 1.
    pub scale: f64,
    /// Interior knots on the rescaled axis.
    pub knots: Vec<f64>,
}

impl SplineBasis {
    /// Build the basis from the depths it will be evaluated on.
    pub fn for_depths(spec: &SplineSpec, depths: &[f64]) -> Result<Self> {
        spec.validate()?;
        let max = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0 && max.is_finite()) {
            return Err(Error::Domain("spline basis needs a positive maximum depth".into()));
        }
        let k = spec.n_knots;
        let knots: Vec<f64> = match spec.knot_rule {
            KnotRule::Uniform => (1..=k).map(|j| j as f64 / (k + 1) as f64).collect(),
            KnotRule::Quantile => {
                let mut u: Vec<f64> = depths.iter().map(|d| d / max).collect();
                u.sort_by(f64::total_cmp);
                (1..=k).map(|j| quantile_sorted(&u, j as f64 / (k + 1) as f64)).collect()
            }
        };
        if knots.windows(2).any(|w| !(w[1] > w[0])) || knots.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Domain(format!(
                "depths too few or repeated to place {k} distinct interior knots"
            )));
        }
        Ok(Self {
            spec: *spec,
            scale: max,
            knots,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn eval_into(&self, depth: f64, out: &mut [f64]) {
        fill_basis(depth / self.scale, self.spec.degree, &self.knots, out);
    }

    pub fn eval(&self, depth: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(depth, &mut out);
        out
    }

    /// `n × p` matrix of the basis at `depths`.
    pub fn matrix(&self, depths: &[f64]) -> DMatrix<f64> {
        let p = self.dim();
        let mut h = DMatrix::zeros(depths.len(), p);
        let mut row = vec![0.0; p];
        for (i, &d) in depths.iter().enumerate() {
            self.eval_into(d, &mut row);
            for j in 0..p {
                h[(i, j)] = row[j];
            }
        }
        h
    }
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis for the column space of a design matrix, found by
/// twice-iterated modified Gram–Schmidt. Columns that are zero or dependent on
/// earlier ones are dropped, which matches the pseudoinverse projector.
#[derive(Clone, Debug)]
pub struct ColumnSpace {
    /// `n × r` orthonormal columns.
    pub q: DMatrix<f64>,
    /// `r × r` upper-triangular factor over the kept columns.
    pub r: DMatrix<f64>,
    /// Indices of the design columns kept.
    pub kept: Vec<usize>,
    pub n_cols: usize,
}

impl ColumnSpace {
    pub fn new(z: &DMatrix<f64>) -> Self {
        let (n, m) = z.shape();
        let mut qcols: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut kept = Vec::with_capacity(m);
        let mut rcols: Vec<Vec<f64>> = Vec::with_capacity(m);
        for j in 0..m {
            let mut v: Vec<f64> = z.column(j).iter().cloned().collect();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 {
                continue;
            }
            let mut coef = vec![0.0; qcols.len()];
            for _ in 0..2 {
                for (c, q) in coef.iter_mut().zip(&qcols) {
                    let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    *c += d;
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= d * qi;
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm <= RANK_TOL * norm0 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            coef.push(norm);
            qcols.push(v);
            rcols.push(coef);
            kept.push(j);
        }
        let r_dim = qcols.len();
        let mut q = DMatrix::zeros(n, r_dim);
        for (j, col) in qcols.iter().enumerate() {
            for i in 0..n {
                q[(i, j)] = col[i];
            }
        }
        let mut r = DMatrix::zeros(r_dim, r_dim);
        for (j, col) in rcols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                r[(i, j)] = v;
            }
        }
        Self {
            q,
            r,
            kept,
            n_cols: m,
        }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    /// `P⊥·h` for every column of `h`.
    pub fn project_out(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let qt_h = self.q.transpose() * h;
        h - &self.q * qt_h
    }

    /// Least-squares coefficients of `h` on the design (`m × p`, zero rows for
    /// dropped columns).
    pub fn coefficients(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let p = h.ncols();
        let mut c = DMatrix::zeros(self.n_cols, p);
        if self.rank() == 0 {
            return c;
        }
        let qt_h = self.q.transpose() * h;
        let rk = self.rank();
        // Back substitution R·x = Qᵀh.
        for col in 0..p {
            let mut x = vec![0.0; rk];
            for i in (0..rk).rev() {
                let mut s = qt_h[(i, col)];
                for k in i + 1..rk {
                    s -= self.r[(i, k)] * x[k];
                }
                x[i] = s / self.r[(i, i)];
            }
            for (i, &j) in self.kept.iter().enumerate() {
                c[(j, col)] = x[i];
            }
        }
        c
    }
}

fn check_depth_count(n: usize, m: usize) -> Result<()> {
    if n < m {
        return Err(Error::DegenerateCore {
            core: String::new(),
            detail: format!("{n} depths but design has {m} columns"),
        });
    }
    Ok(())
}

/// Explicit `I − Z(ZᵀZ)⁺Zᵀ`.
pub fn null_space_projector(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = z.shape();
    check_depth_count(n, m)?;
    let cs = ColumnSpace::new(z);
    Ok(DMatrix::identity(n, n) - &cs.q * cs.q.transpose())
}

/// Stage design matrix `Z` (`n × 4`) of a profile at the given depths.
pub fn stage_design(profile: &Profile, depths: &[f64]) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(depths.len(), N_STAGES);
    for (i, &x) in depths.iter().enumerate() {
        let row = profile.basis(x);
        for l in 0..N_STAGES {
            z[(i, l)] = row[l];
        }
    }
    z
}

/// Projected spline covariates for one core under one value of θ.
#[derive(Clone, Debug)]
pub struct OrthogonalBasis {
    /// `n × p` projected basis at the measured depths.
    pub h_perp: DMatrix<f64>,
    /// `4 × p` least-squares coefficients of `H` on `Z`.
    pub coef: DMatrix<f64>,
    pub rank: usize,
}

impl OrthogonalBasis {
    /// Projected basis at an arbitrary depth, `h(x) − Cᵀz(x)`.
    pub fn at(&self, basis: &SplineBasis, profile: &Profile, depth: f64) -> Vec<f64> {
        let mut h = basis.eval(depth);
        let z = profile.basis(depth);
        for (j, hj) in h.iter_mut().enumerate() {
            for l in 0..N_STAGES {
                *hj -= self.coef[(l, j)] * z[l];
            }
        }
        h
    }

    /// `H⊥β` at the measured depths.
    pub fn smooth_terms(&self, beta: &[f64]) -> Vec<f64> {
        let n = self.h_perp.nrows();
        let mut out = vec![0.0; n];
        for (j, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.h_perp[(i, j)] * b;
            }
        }
        out
    }
}

/// Project a precomputed basis matrix `h` (rows = depths) out of the stage
/// design of `profile` at those depths.
pub fn orthogonalize(profile: &Profile, depths: &[f64], h: &DMatrix<f64>) -> Result<OrthogonalBasis> {
    check_depth_count(depths.len(), N_STAGES)?;
    let z = stage_design(profile, depths);
    let cs = ColumnSpace::new(&z);
    Ok(OrthogonalBasis {
        h_perp: cs.project_out(h),
        coef: cs.coefficients(h),
        rank: cs.rank(),
    })
}

/// `H⊥ = P⊥H` for a core's measured depths under a given profile.
pub fn orthogonalized_covariates(
    depths: &[f64],
    profile: &Profile,
    basis: &SplineBasis,
) -> Result<OrthogonalBasis> {
    orthogonalize(profile, depths, &basis.matrix(depths))
}
