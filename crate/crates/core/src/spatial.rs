//! Distances, exponential correlations, the cross-covariance family for the
//! 12 site parameters, and semivariogram diagnostics.
//!
//! Stacked parameter vectors are site-major: entry `i·12 + a` holds parameter
//! `a` at site `i`. In that ordering the separable model is `R ⊗ V`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::N_THETA;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A geographic location in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Haversine distance in km.
pub fn great_circle(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlam = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Observed locations with their pairwise distance matrix.
#[derive(Clone, Debug)]
pub struct SiteSet {
    pub locations: Vec<LatLon>,
    pub dist: DMatrix<f64>,
}

impl SiteSet {
    pub fn new(locations: Vec<LatLon>) -> Self {
        let dist = distance_matrix(&locations, &locations);
        Self { locations, dist }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

pub fn distance_matrix(a: &[LatLon], b: &[LatLon]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| great_circle(a[i], b[j]))
}

/// `exp(−φ·d)` elementwise.
pub fn exp_correlation(dist: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    dist.map(|d| (-phi * d).exp())
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorization, escalating a diagonal jitter from 1e-10 to 1e-6
/// (×10 per step) when the plain factorization fails.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut mj = m.clone();
        for i in 0..mj.nrows() {
            mj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(mj) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    let min_diag = (0..m.nrows()).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
    Err(Error::numerical(
        what,
        format!(
            "matrix of order {} not positive definite with jitter up to {JITTER_MAX:e} (min diagonal {min_diag:e})",
            m.nrows()
        ),
    ))
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CrossCovKind {
    /// Diagonal loadings, one correlation matrix per parameter.
    Independent,
    /// `(ΛΛᵀ) ⊗ R` with a single correlation matrix.
    Separable,
    /// `12 × r` loadings, `r < 12`, one correlation per factor.
    LatentFactor { rank: usize },
    /// Lower-triangular `12 × 12` loadings, one correlation per factor.
    Coregionalization,
}

impl CrossCovKind {
    pub fn n_factors(&self) -> usize {
        match self {
            CrossCovKind::LatentFactor { rank } => *rank,
            _ => N_THETA,
        }
    }

    pub fn n_decays(&self) -> usize {
        match self {
            CrossCovKind::Separable => 1,
            other => other.n_factors(),
        }
    }

    /// Whether loading entry `(a, l)` is a free parameter.
    pub fn is_free_loading(&self, a: usize, l: usize) -> bool {
        match self {
            CrossCovKind::Independent => a == l,
            _ => a >= l,
        }
    }

    pub fn label(&self) -> String {
        match self {
            CrossCovKind::Independent => "independent GP".into(),
            CrossCovKind::Separable => "separable GP".into(),
            CrossCovKind::LatentFactor { rank } => format!("{rank} latent factors"),
            CrossCovKind::Coregionalization => "coregionalization (12 latent factors)".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CrossCovKind::LatentFactor { rank } = self {
            if *rank == 0 || *rank >= N_THETA {
                return Err(Error::Config(format!("latent factor rank must be in 1..12, got {rank}")));
            }
        }
        Ok(())
    }
}

/// A fully specified cross-covariance `(Λ ⊗ I) BlockDiag(R₁..R_r) (Λᵀ ⊗ I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCovSpec {
    pub kind: CrossCovKind,
    /// `12 × r` loadings.
    pub loadings: DMatrix<f64>,
    /// Exponential decays (km⁻¹); one for separable, `r` otherwise.
    pub decays: Vec<f64>,
}

impl CrossCovSpec {
    pub fn new(kind: CrossCovKind, loadings: DMatrix<f64>, decays: Vec<f64>) -> Result<Self> {
        let s = Self {
            kind,
            loadings,
            decays,
        };
        s.validate()?;
        Ok(s)
    }

    /// Separable model with between-parameter covariance `V = ΛΛᵀ`.
    pub fn separable(v: &DMatrix<f64>, phi: f64) -> Result<Self> {
        let (c, _) = cholesky_jittered(v, "between-parameter covariance V")?;
        Self::new(CrossCovKind::Separable, c.l(), vec![phi])
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        let r = self.kind.n_factors();
        if self.loadings.shape() != (N_THETA, r) {
            return Err(Error::Config(format!(
                "loadings must be 12 x {r}, got {:?}",
                self.loadings.shape()
            )));
        }
        if self.decays.len() != self.kind.n_decays() {
            return Err(Error::Config(format!(
                "expected {} decay parameters, got {}",
                self.kind.n_decays(),
                self.decays.len()
            )));
        }
        if self.decays.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Config(format!("decays must be positive: {:?}", self.decays)));
        }
        for a in 0..N_THETA {
            for l in 0..r {
                let v = self.loadings[(a, l)];
                if !v.is_finite() {
                    return Err(Error::Config("non-finite loading".into()));
                }
                if !self.kind.is_free_loading(a, l) && v != 0.0 {
                    return Err(Error::Config(format!(
                        "loading ({a}, {l}) must be zero for {}",
                        self.kind.label()
                    )));
                }
            }
        }
        if !matches!(self.kind, CrossCovKind::Separable) {
            for l in 0..r {
                if !(self.loadings[(l, l)] > 0.0) {
                    return Err(Error::Config(format!("loading diagonal ({l}, {l}) must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn decay_of_factor(&self, l: usize) -> f64 {
        match self.kind {
            CrossCovKind::Separable => self.decays[0],
            _ => self.decays[l],
        }
    }

    /// Between-parameter covariance at distance zero, `ΛΛᵀ`.
    pub fn point_covariance(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose()
    }

    /// Cross-covariance block between two location sets, site-major
    /// (`12·|a| × 12·|b|`), from their distance matrix.
    pub fn cross_block(&self, dist: &DMatrix<f64>) -> DMatrix<f64> {
        let (na, nb) = dist.shape();
        let r = self.kind.n_factors();
        let mut out = DMatrix::zeros(N_THETA * na, N_THETA * nb);
        let outer: Vec<DMatrix<f64>> = (0..r)
            .map(|l| {
                let col = self.loadings.column(l);
                &col * col.transpose()
            })
            .collect();
        for i in 0..na {
            for j in 0..nb {
                let d = dist[(i, j)];
                let mut block = nalgebra::SMatrix::<f64, N_THETA, N_THETA>::zeros();
                match self.kind {
                    CrossCovKind::Separable => {
                        let c = (-self.decays[0] * d).exp();
                        for l in 0..r {
                            for a in 0..N_THETA {
                                for b in 0..N_THETA {
                                    block[(a, b)] += c * outer[l][(a, b)];
                                }
                            }
                        }
                    }
                    _ => {
                        for l in 0..r {
                            let c = (-self.decays[l] * d).exp();
                            if c == 0.0 {
                                continue;
                            }
                            for a in 0..N_THETA {
                                for b in 0..N_THETA {
                                    block[(a, b)] += c * outer[l][(a, b)];
                                }
                            }
                        }
                    }
                }
                out.view_mut((i * N_THETA, j * N_THETA), (N_THETA, N_THETA))
                    .copy_from(&block);
            }
        }
        out
    }
}

/// Dense `Σ` (`12n × 12n`, site-major) for the given sites.
pub fn build_cross_covariance(spec: &CrossCovSpec, sites: &SiteSet) -> Result<DMatrix<f64>> {
    spec.validate()?;
    Ok(spec.cross_block(&sites.dist))
}

/// Gaussian prior on the stacked site parameters, held in a form that makes
/// single-site updates cheap.
#[derive(Clone, Debug)]
pub enum ThetaCovariance {
    /// `Σ = R ⊗ V`, stored through `R⁻¹` and `V⁻¹`.
    Kronecker {
        r_inv: DMatrix<f64>,
        v_inv: DMatrix<f64>,
        log_det: f64,
    },
    /// Dense precision `Q = Σ⁻¹`.
    Dense { q: DMatrix<f64>, log_det: f64 },
}

impl ThetaCovariance {
    /// Separable fast path from `R` and `V`.
    pub fn kronecker(r: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        let (rc, _) = cholesky_jittered(r, "spatial correlation R")?;
        let (vc, _) = cholesky_jittered(v, "between-parameter covariance V")?;
        let n = r.nrows() as f64;
        let p = v.nrows() as f64;
        let log_det = p * chol_log_det(&rc) + n * chol_log_det(&vc);
        Ok(ThetaCovariance::Kronecker {
            r_inv: rc.inverse(),
            v_inv: vc.inverse(),
            log_det,
        })
    }

    pub fn dense(sigma: &DMatrix<f64>) -> Result<Self> {
        let (c, _) = cholesky_jittered(sigma, "cross-covariance")?;
        let log_det = chol_log_det(&c);
        Ok(ThetaCovariance::Dense {
            q: c.inverse(),
            log_det,
        })
    }

    /// Choose the Kronecker path for the separable kind, dense otherwise.
    pub fn from_spec(spec: &CrossCovSpec, sites: &SiteSet) -> Result<Self> {
        match spec.kind {
            CrossCovKind::Separable => {
                let r = exp_correlation(&sites.dist, spec.decays[0]);
                Self::kronecker(&r, &spec.point_covariance())
            }
            _ => Self::dense(&build_cross_covariance(spec, sites)?),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            ThetaCovariance::Kronecker { log_det, .. } | ThetaCovariance::Dense { log_det, .. } => {
                *log_det
            }
        }
    }

    pub fn n_sites(&self) -> usize {
        match self {
            ThetaCovariance::Kronecker { r_inv, .. } => r_inv.nrows(),
            ThetaCovariance::Dense { q, .. } => q.nrows() / N_THETA,
        }
    }

    /// `Q·r` for a site-major residual.
    pub fn precision_times(&self, resid: &[f64]) -> Vec<f64> {
        let n = self.n_sites();
        match self {
            ThetaCovariance::Kronecker { r_inv, v_inv, .. } => {
                let mut out = vec![0.0; n * N_THETA];
                let mut tmp = [0.0; N_THETA];
                for i in 0..n {
                    tmp.iter_mut().for_each(|t| *t = 0.0);
                    for j in 0..n {
                        let w = r_inv[(i, j)];
                        for a in 0..N_THETA {
                            tmp[a] += w * resid[j * N_THETA + a];
                        }
                    }
                    for a in 0..N_THETA {
                        let mut s = 0.0;
                        for b in 0..N_THETA {
                            s += v_inv[(a, b)] * tmp[b];
                        }
                        out[i * N_THETA + a] = s;
                    }
                }
                out
            }
            ThetaCovariance::Dense { q, .. } => {
                let r = DVector::from_column_slice(resid);
                (q * r).as_slice().to_vec()
            }
        }
    }

    /// `Q_{ij}` as a dense 12 × 12 block.
    pub fn precision_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        match self {
            ThetaCovariance::Kronecker { r_inv, v_inv, .. } => v_inv * r_inv[(i, j)],
            ThetaCovariance::Dense { q, .. } => q
                .view((i * N_THETA, j * N_THETA), (N_THETA, N_THETA))
                .into_owned(),
        }
    }

    /// Quadratic form `rᵀQr`.
    pub fn quad(&self, resid: &[f64]) -> f64 {
        let qr = self.precision_times(resid);
        resid.iter().zip(&qr).map(|(a, b)| a * b).sum()
    }

    /// Full normal log-density of a site-major residual.
    pub fn log_density(&self, resid: &[f64]) -> f64 {
        let dim = resid.len() as f64;
        -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + self.log_det() + self.quad(resid))
    }

    /// `(Q r)_i` for one site only.
    pub fn precision_row_times(&self, i: usize, resid: &[f64]) -> [f64; N_THETA] {
        let n = self.n_sites();
        let mut out = [0.0; N_THETA];
        match self {
            ThetaCovariance::Kronecker { r_inv, v_inv, .. } => {
                let mut tmp = [0.0; N_THETA];
                for j in 0..n {
                    let w = r_inv[(i, j)];
                    for a in 0..N_THETA {
                        tmp[a] += w * resid[j * N_THETA + a];
                    }
                }
                for a in 0..N_THETA {
                    for b in 0..N_THETA {
                        out[a] += v_inv[(a, b)] * tmp[b];
                    }
                }
            }
            ThetaCovariance::Dense { q, .. } => {
                for a in 0..N_THETA {
                    let row = i * N_THETA + a;
                    let mut s = 0.0;
                    for c in 0..n * N_THETA {
                        s += q[(row, c)] * resid[c];
                    }
                    out[a] = s;
                }
            }
        }
        out
    }

    /// Change in log-density when site `i`'s residual block moves from its
    /// current value (inside `resid`) to `new_block`.
    pub fn site_delta(&self, i: usize, resid: &[f64], new_block: &[f64; N_THETA]) -> f64 {
        let qr_i = self.precision_row_times(i, resid);
        let mut delta = [0.0; N_THETA];
        for a in 0..N_THETA {
            delta[a] = new_block[a] - resid[i * N_THETA + a];
        }
        let qii = self.precision_block(i, i);
        let mut quad_change = 0.0;
        for a in 0..N_THETA {
            let mut s = 0.0;
            for b in 0..N_THETA {
                s += qii[(a, b)] * delta[b];
            }
            quad_change += 2.0 * delta[a] * qr_i[a] + delta[a] * s;
        }
        -0.5 * quad_change
    }
}

/// A scalar Gaussian field `N(0, σ²R)` on the observed sites.
#[derive(Clone, Debug)]
pub struct ScalarField {
    pub r_inv: DMatrix<f64>,
    pub log_det_r: f64,
}

impl ScalarField {
    pub fn new(dist: &DMatrix<f64>, phi: f64) -> Result<Self> {
        let r = exp_correlation(dist, phi);
        let (c, _) = cholesky_jittered(&r, "coefficient-field correlation")?;
        Ok(Self {
            log_det_r: chol_log_det(&c),
            r_inv: c.inverse(),
        })
    }

    /// `xᵀR⁻¹x`.
    pub fn quad(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut s = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.r_inv[(i, j)] * x[j];
            }
            s += x[i] * row;
        }
        s
    }

    pub fn log_density(&self, x: &[f64], sigma2: f64) -> f64 {
        let n = x.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI * sigma2).ln() + self.log_det_r + self.quad(x) / sigma2)
    }
}

/// Binned semivariogram with a fitted exponential model
/// `γ(h) = nugget + partial_sill·(1 − e^{−h/range})`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemivariogramFit {
    pub bin_centers: Vec<f64>,
    pub semivariance: Vec<f64>,
    pub counts: Vec<usize>,
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
}

impl SemivariogramFit {
    pub fn model(&self, h: f64) -> f64 {
        self.nugget + self.partial_sill * (1.0 - (-h / self.range).exp())
    }

    /// Distance at which correlation falls to e⁻³.
    pub fn effective_range(&self) -> f64 {
        3.0 * self.range
    }
}

/// Empirical semivariogram over `n_bins` equal-width bins up to half the
/// largest distance. Bins with fewer than two pairs are dropped; bin centers
/// are the mean pair distance within each bin.
pub fn empirical_semivariogram(
    values: &[f64],
    dist: &DMatrix<f64>,
    n_bins: usize,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = values.len();
    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            max_d = max_d.max(dist[(i, j)]);
        }
    }
    let max_lag = 0.5 * max_d;
    let width = max_lag / n_bins as f64;
    let mut sum_g = vec![0.0; n_bins];
    let mut sum_d = vec![0.0; n_bins];
    let mut cnt = vec![0usize; n_bins];
    if width > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                let d = dist[(i, j)];
                if d > max_lag || d <= 0.0 {
                    continue;
                }
                let b = ((d / width).ceil() as usize).clamp(1, n_bins) - 1;
                sum_g[b] += 0.5 * (values[i] - values[j]).powi(2);
                sum_d[b] += d;
                cnt[b] += 1;
            }
        }
    }
    let mut centers = Vec::new();
    let mut gamma = Vec::new();
    let mut counts = Vec::new();
    for b in 0..n_bins {
        if cnt[b] >= 2 {
            centers.push(sum_d[b] / cnt[b] as f64);
            gamma.push(sum_g[b] / cnt[b] as f64);
            counts.push(cnt[b]);
        }
    }
    (centers, gamma, counts)
}

/// Weighted least squares of nugget and partial sill for a fixed range, both
/// constrained nonnegative. Returns `(nugget, psill, sse)`.
fn fit_linear_part(h: &[f64], g: &[f64], w: &[f64], range: f64) -> (f64, f64, f64) {
    let basis: Vec<f64> = h.iter().map(|&x| 1.0 - (-x / range).exp()).collect();
    let sse = |c0: f64, c1: f64| -> f64 {
        h.iter()
            .enumerate()
            .map(|(i, _)| w[i] * (g[i] - c0 - c1 * basis[i]).powi(2))
            .sum()
    };
    let (mut s_w, mut s_b, mut s_bb, mut s_g, mut s_bg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..h.len() {
        s_w += w[i];
        s_b += w[i] * basis[i];
        s_bb += w[i] * basis[i] * basis[i];
        s_g += w[i] * g[i];
        s_bg += w[i] * basis[i] * g[i];
    }
    let mut candidates = Vec::new();
    let det = s_w * s_bb - s_b * s_b;
    if det.abs() > 1e-300 {
        let c0 = (s_bb * s_g - s_b * s_bg) / det;
        let c1 = (s_w * s_bg - s_b * s_g) / det;
        if c0 >= 0.0 && c1 >= 0.0 {
            candidates.push((c0, c1));
        }
    }
    candidates.push((0.0, if s_bb > 0.0 { (s_bg / s_bb).max(0.0) } else { 0.0 }));
    candidates.push(((s_g / s_w).max(0.0), 0.0));
    candidates
        .into_iter()
        .map(|(c0, c1)| (c0, c1, sse(c0, c1)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap()
}

/// Fit the exponential semivariogram by pair-count weighted least squares,
/// profiling out nugget and partial sill and searching the range on a log
/// grid followed by golden-section refinement.
pub fn fit_semivariogram(values: &[f64], dist: &DMatrix<f64>, n_bins: usize) -> Result<SemivariogramFit> {
    if values.len() != dist.nrows() || dist.nrows() != dist.ncols() {
        return Err(Error::FitFailure("values and distance matrix sizes differ".into()));
    }
    if n_bins == 0 {
        return Err(Error::FitFailure("need at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailure("non-finite site value".into()));
    }
    let (h, g, counts) = empirical_semivariogram(values, dist, n_bins);
    if h.len() < 2 {
        return Err(Error::FitFailure(format!(
            "only {} bins with at least two pairs",
            h.len()
        )));
    }
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let h_min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let h_max = h.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = ((0.1 * h_min).ln(), (10.0 * h_max).ln());
    let objective = |log_r: f64| fit_linear_part(&h, &g, &w, log_r.exp()).2;

    let n_grid = 80;
    let grid: Vec<f64> = (0..n_grid)
        .map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64)
        .collect();
    let (best_i, _) = grid
        .iter()
        .map(|&x| objective(x))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(n_grid - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    let mut iters = 0;
    while (b - a).abs() > 1e-10 && iters < 200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
        iters += 1;
    }
    let mut log_r = 0.5 * (a + b);
    if objective(grid[best_i]) < objective(log_r) {
        log_r = grid[best_i];
    }
    let range = log_r.exp();
    let (nugget, partial_sill, sse) = fit_linear_part(&h, &g, &w, range);
    if !(sse.is_finite() && range.is_finite() && range > 0.0) {
        return Err(Error::FitFailure(format!("no finite optimum (range {range}, sse {sse})")));
    }
    Ok(SemivariogramFit {
        bin_centers: h,
        semivariance: g,
        counts,
        nugget,
        partial_sill,
        range,
    })
}
