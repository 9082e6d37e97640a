//! Text formats, run configuration and persistence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CoreDataset, CoreRecord};
use crate::error::{Error, Result};
use crate::inference::NewSiteSmoothing;
use crate::likelihood::{ErrorFamily, ErrorModel, ModelSpec, Smoothing};
use crate::model::SiteCovariates;
use crate::sampler::{ChainArchive, ChainConfig, Checkpoint};
use crate::simulate::SimulationConfig;
use crate::smoothing::SplineSpec;
use crate::spatial::{CrossCovKind, LatLon};

pub const CORES_HEADER: &str = "# svsd-cores v1";
pub const COVARIATES_HEADER: &str = "# svsd-covariates v1";
pub const DRAWS_HEADER: &str = "# svsd-draws v1";
pub const LOGLIK_HEADER: &str = "# svsd-loglik v1";
const CORE_COLUMNS: [&str; 7] = ["core_id", "lat", "lon", "expedition", "dx", "depth", "density"];
const COVARIATE_COLUMNS: [&str; 4] = ["lat", "lon", "temperature", "smb"];

/// Shortest round-trip decimal; exponent form outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Where outputs came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: hex,
            seed,
        }
    }

    /// Comment lines placed after a format header.
    pub fn header_lines(&self) -> String {
        format!(
            "# generator: svsd {}\n# command: {}\n# config_sha256: {}\n# seed: {}\n",
            self.version, self.command, self.config_sha256, self.seed
        )
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

/// Data lines after the version header, comment lines and column header,
/// paired with 1-based line numbers.
fn table_lines<'a>(text: &'a str, path: &str, header: &str, columns: &[&str]) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, l)) if l == header => {}
        Some((n, l)) => return Err(parse_err(path, n, format!("expected header {header:?}, found {l:?}"))),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut saw_columns = false;
    let mut out = Vec::new();
    for (n, l) in lines {
        if l.starts_with('#') || (l.is_empty() && !saw_columns) {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        if !saw_columns {
            if fields != columns {
                return Err(parse_err(path, n, format!("expected columns {:?}", columns.join("\t"))));
            }
            saw_columns = true;
            continue;
        }
        if l.is_empty() {
            return Err(parse_err(path, n, "blank line inside data section"));
        }
        if fields.len() != columns.len() {
            return Err(parse_err(path, n, format!("expected {} fields, found {}", columns.len(), fields.len())));
        }
        out.push((n, fields));
    }
    if !saw_columns {
        return Err(parse_err(path, 1, "missing column header"));
    }
    Ok(out)
}

fn num(path: &str, line: usize, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{name}: non-finite value {s:?}")));
    }
    Ok(v)
}

fn key(loc: LatLon) -> (u64, u64) {
    (loc.lat.to_bits(), loc.lon.to_bits())
}

pub fn parse_covariates(text: &str, path: &str) -> Result<Vec<(LatLon, SiteCovariates)>> {
    let rows = table_lines(text, path, COVARIATES_HEADER, &COVARIATE_COLUMNS)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (n, f) in rows {
        let loc = LatLon::new(num(path, n, "lat", f[0])?, num(path, n, "lon", f[1])?);
        if !(loc.lat.abs() <= 90.0 && loc.lon.abs() <= 360.0) {
            return Err(parse_err(path, n, "coordinates out of range"));
        }
        let cov = SiteCovariates::new(num(path, n, "temperature", f[2])?, num(path, n, "smb", f[3])?)
            .map_err(|e| parse_err(path, n, e.to_string()))?;
        if let Some(prev) = seen.insert(key(loc), n) {
            return Err(parse_err(path, n, format!("duplicate site, first listed on line {prev}")));
        }
        out.push((loc, cov));
    }
    Ok(out)
}

pub fn format_covariates(rows: &[(LatLon, SiteCovariates)], prov: Option<&Provenance>) -> String {
    let mut s = format!("{COVARIATES_HEADER}\n");
    if let Some(p) = prov {
        s.push_str(&p.header_lines());
    }
    s.push_str(&COVARIATE_COLUMNS.join("\t"));
    s.push('\n');
    for (loc, c) in rows {
        writeln!(s, "{}\t{}\t{}\t{}", fmt_f64(loc.lat), fmt_f64(loc.lon), fmt_f64(c.temperature), fmt_f64(c.smb)).unwrap();
    }
    s
}

/// Parse the cores table, attaching covariates by exact site coordinates.
/// Rows of one core must be contiguous; a missing `dx` defaults to the
/// maximum depth over the number of measurements.
pub fn parse_cores(text: &str, path: &str, covariates: &[(LatLon, SiteCovariates)]) -> Result<CoreDataset> {
    let rows = table_lines(text, path, CORES_HEADER, &CORE_COLUMNS)?;
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no cores in data section"));
    }
    let cov_of: HashMap<(u64, u64), SiteCovariates> = covariates.iter().map(|(l, c)| (key(*l), *c)).collect();
    struct Pending {
        line: usize,
        id: String,
        lat: String,
        lon: String,
        exp: String,
        dx: String,
        depths: Vec<f64>,
        density: Vec<f64>,
    }
    let mut cores = Vec::new();
    let mut finished: HashMap<String, usize> = HashMap::new();
    let finish = |p: Pending, cores: &mut Vec<CoreRecord>| -> Result<()> {
        let loc = LatLon::new(num(path, p.line, "lat", &p.lat)?, num(path, p.line, "lon", &p.lon)?);
        let cov = *cov_of
            .get(&key(loc))
            .ok_or_else(|| parse_err(path, p.line, format!("no covariates for site of core {}", p.id)))?;
        let dx = if p.dx.is_empty() {
            CoreRecord::default_dx(&p.depths)
        } else {
            num(path, p.line, "dx", &p.dx)?
        };
        cores.push(CoreRecord {
            core_id: p.id,
            location: loc,
            expedition: p.exp,
            dx,
            depths: p.depths,
            density: p.density,
            covariates: cov,
        });
        Ok(())
    };
    let mut cur: Option<Pending> = None;
    for (n, f) in rows {
        let same = cur.as_ref().is_some_and(|p| p.id == f[0]);
        if !same {
            if let Some(p) = cur.take() {
                finished.insert(p.id.clone(), p.line);
                finish(p, &mut cores)?;
            }
            if let Some(first) = finished.get(f[0]) {
                return Err(parse_err(path, n, format!("duplicate core_id {:?} (first on line {first})", f[0])));
            }
            if f[0].is_empty() || f[3].is_empty() {
                return Err(parse_err(path, n, "core_id and expedition must be nonempty"));
            }
            cur = Some(Pending {
                line: n,
                id: f[0].into(),
                lat: f[1].into(),
                lon: f[2].into(),
                exp: f[3].into(),
                dx: f[4].into(),
                depths: Vec::new(),
                density: Vec::new(),
            });
        }
        let p = cur.as_mut().unwrap();
        if (p.lat.as_str(), p.lon.as_str(), p.exp.as_str(), p.dx.as_str()) != (f[1], f[2], f[3], f[4]) {
            return Err(parse_err(path, n, format!("core {} changes site, expedition or dx between rows", p.id)));
        }
        let depth = num(path, n, "depth", f[5])?;
        let density = num(path, n, "density", f[6])?;
        if depth < 0.0 {
            return Err(parse_err(path, n, "depth must be nonnegative"));
        }
        if density <= 0.0 {
            return Err(parse_err(path, n, "density must be positive"));
        }
        if p.depths.last().is_some_and(|&d| depth < d) {
            return Err(parse_err(path, n, "depths within a core must be sorted"));
        }
        p.depths.push(depth);
        p.density.push(density);
    }
    if let Some(p) = cur.take() {
        finish(p, &mut cores)?;
    }
    CoreDataset::new(cores)
}

/// Canonical text of the cores table.
pub fn format_cores(data: &CoreDataset, prov: Option<&Provenance>) -> String {
    let mut s = format!("{CORES_HEADER}\n");
    if let Some(p) = prov {
        s.push_str(&p.header_lines());
    }
    s.push_str(&CORE_COLUMNS.join("\t"));
    s.push('\n');
    for c in &data.cores {
        let head = format!(
            "{}\t{}\t{}\t{}\t{}",
            c.core_id,
            fmt_f64(c.location.lat),
            fmt_f64(c.location.lon),
            c.expedition,
            fmt_f64(c.dx)
        );
        for (d, y) in c.depths.iter().zip(&c.density) {
            writeln!(s, "{head}\t{}\t{}", fmt_f64(*d), fmt_f64(*y)).unwrap();
        }
    }
    s
}

/// One covariate row per unique site, in site order.
pub fn site_covariates(data: &CoreDataset) -> Vec<(LatLon, SiteCovariates)> {
    data.cores_of_site
        .iter()
        .map(|cs| {
            let c = &data.cores[cs[0]];
            (c.location, c.covariates)
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_covariates(path: &Path) -> Result<Vec<(LatLon, SiteCovariates)>> {
    parse_covariates(&read(path)?, &path.display().to_string())
}

pub fn load_dataset(cores: &Path, covariates: &Path) -> Result<CoreDataset> {
    let cov = load_covariates(covariates)?;
    parse_cores(&read(cores)?, &cores.display().to_string(), &cov)
}

pub fn save_dataset(data: &CoreDataset, cores: &Path, covariates: &Path, prov: Option<&Provenance>) -> Result<()> {
    write(cores, &format_cores(data, prov))?;
    write(covariates, &format_covariates(&site_covariates(data), prov))
}

/// Input file locations, relative to the configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub cores: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub grid_points: usize,
    /// Archive draws used for maps and profiles; 0 uses all.
    pub max_draws: usize,
    pub new_site_smoothing: NewSiteSmoothing,
    pub depth_max: f64,
    pub depth_step: f64,
    /// Covariates for grid points; inverse-distance weighting of site
    /// covariates when absent.
    pub grid_covariates: Option<PathBuf>,
    pub idw_power: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            grid_points: 2500,
            max_draws: 200,
            new_site_smoothing: NewSiteSmoothing::Projected,
            depth_max: 100.0,
            depth_step: 1.0,
            grid_covariates: None,
            idw_power: 2.0,
        }
    }
}

impl PredictConfig {
    pub fn depths(&self) -> Vec<f64> {
        let n = (self.depth_max / self.depth_step).floor() as usize;
        (0..=n).map(|i| i as f64 * self.depth_step).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_max > 0.0 && self.depth_step > 0.0 && self.depth_step <= self.depth_max) {
            return Err(Error::Config("prediction depth range must satisfy 0 < step <= max".into()));
        }
        if self.grid_points == 0 || !(self.idw_power > 0.0) {
            return Err(Error::Config("grid_points and idw_power must be positive".into()));
        }
        Ok(())
    }
}

/// One model in a comparison sweep; unset fields inherit the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub error: Option<ErrorModel>,
    #[serde(default)]
    pub cross_covariance: Option<CrossCovKind>,
    #[serde(default)]
    pub smoothing: Option<Smoothing>,
}

impl Variant {
    pub fn apply(&self, base: &ModelSpec) -> ModelSpec {
        let mut m = base.clone();
        if let Some(e) = self.error {
            m.error = e;
        }
        if let Some(k) = self.cross_covariance {
            m.cross_covariance = k;
        }
        if let Some(s) = &self.smoothing {
            m.smoothing = s.clone();
        }
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparePreset {
    /// Error family, weighting and scale hierarchy.
    #[default]
    Error,
    CrossCovariance,
    Smoothing,
}

impl ComparePreset {
    pub fn variants(&self) -> Vec<Variant> {
        let v = |name: &str, error: Option<ErrorModel>, cross: Option<CrossCovKind>, smoothing: Option<Smoothing>| Variant {
            name: name.into(),
            error,
            cross_covariance: cross,
            smoothing,
        };
        let em = |family, weighted, hierarchical| {
            Some(ErrorModel {
                family,
                weighted,
                hierarchical,
            })
        };
        use ErrorFamily::{Normal, StudentT};
        match self {
            ComparePreset::Error => vec![
                v("normal", em(Normal, false, false), None, None),
                v("student-t", em(StudentT, false, false), None, None),
                v("student-t weighted", em(StudentT, true, false), None, None),
                v("normal weighted hierarchical", em(Normal, true, true), None, None),
                v("student-t weighted hierarchical", em(StudentT, true, true), None, None),
            ],
            ComparePreset::CrossCovariance => vec![
                v("independent", None, Some(CrossCovKind::Independent), None),
                v("separable", None, Some(CrossCovKind::Separable), None),
                v("latent factor (2)", None, Some(CrossCovKind::LatentFactor { rank: 2 }), None),
                v("coregionalization", None, Some(CrossCovKind::Coregionalization), None),
            ],
            ComparePreset::Smoothing => {
                let sp = |d, k| Some(Smoothing::Spline(SplineSpec::new(d, k).expect("valid preset spline")));
                vec![
                    v("none", None, None, Some(Smoothing::None)),
                    v("linear, 1 knot", None, None, sp(1, 1)),
                    v("quadratic, 2 knots", None, None, sp(2, 2)),
                    v("cubic, 3 knots", None, None, sp(3, 3)),
                ]
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub preset: ComparePreset,
    /// Explicit variants; the preset is used when empty.
    pub variants: Vec<Variant>,
}

impl CompareConfig {
    pub fn resolved(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            self.preset.variants()
        } else {
            self.variants.clone()
        }
    }
}

/// Everything a command needs, read from one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the chain and simulation seed when set.
    pub seed: Option<u64>,
    pub model: ModelSpec,
    pub chain: ChainConfig,
    pub data: DataPaths,
    pub simulation: SimulationConfig,
    pub predict: PredictConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file and resolve its data paths against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = read(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.cores, &mut cfg.data.covariates, &mut cfg.predict.grid_covariates]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.chain.validate()?;
        self.simulation.validate()?;
        self.predict.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn check_finite_row(row: &[f64]) -> bool {
    row.iter().all(|v| !v.is_nan())
}

/// Write `draws.tsv`, `loglik.tsv` and `archive.json` into `dir`.
pub fn save_archive(archive: &ChainArchive, dir: &Path, prov: Option<&Provenance>) -> Result<()> {
    let head = |h: &str| {
        let mut s = format!("{h}\n");
        if let Some(p) = prov {
            s.push_str(&p.header_lines());
        }
        s
    };
    let mut d = head(DRAWS_HEADER);
    d.push_str("iteration");
    for n in &archive.names {
        d.push('\t');
        d.push_str(n);
    }
    d.push('\n');
    for (it, row) in archive.iterations.iter().zip(&archive.draws) {
        d.push_str(&it.to_string());
        for v in row {
            d.push('\t');
            d.push_str(&fmt_f64(*v));
        }
        d.push('\n');
    }
    write(&dir.join("draws.tsv"), &d)?;
    let mut l = head(LOGLIK_HEADER);
    l.push_str("iteration");
    let n_obs = archive.loglik.first().map_or(0, |r| r.len());
    for j in 0..n_obs {
        write!(l, "\tobs{j}").unwrap();
    }
    l.push('\n');
    for (it, row) in archive.iterations.iter().zip(&archive.loglik) {
        l.push_str(&it.to_string());
        for v in row {
            l.push('\t');
            l.push_str(&fmt_f64(*v));
        }
        l.push('\n');
    }
    write(&dir.join("loglik.tsv"), &l)?;
    let meta = ChainArchive {
        draws: Vec::new(),
        loglik: Vec::new(),
        ..archive.clone()
    };
    write(&dir.join("archive.json"), &serde_json::to_string_pretty(&meta).expect("archive metadata serializes"))
}

fn read_matrix(path: &Path, header: &str, width: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let text = read(path)?;
    let label = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == header => {}
        _ => return Err(parse_err(&label, 1, format!("expected header {header:?}"))),
    }
    let mut iters = Vec::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for (i, l) in lines {
        if l.starts_with('#') {
            continue;
        }
        if !saw_columns {
            saw_columns = true;
            continue;
        }
        let mut f = l.split('\t');
        let it: usize = f
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(&label, i + 1, "bad iteration"))?;
        let row: Vec<f64> = f
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(&label, i + 1, format!("bad value {s:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != width || !check_finite_row(&row) {
            return Err(parse_err(&label, i + 1, format!("expected {width} numeric values")));
        }
        iters.push(it);
        rows.push(row);
    }
    Ok((iters, rows))
}

pub fn load_archive(dir: &Path) -> Result<ChainArchive> {
    let meta: ChainArchive = serde_json::from_str(&read(&dir.join("archive.json"))?)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.join("archive.json").display())))?;
    let (iters, draws) = read_matrix(&dir.join("draws.tsv"), DRAWS_HEADER, meta.names.len())?;
    let n_obs = {
        let text = read(&dir.join("loglik.tsv"))?;
        text.lines()
            .find(|l| !l.starts_with('#'))
            .map_or(0, |l| l.split('\t').count().saturating_sub(1))
    };
    let (iters2, loglik) = read_matrix(&dir.join("loglik.tsv"), LOGLIK_HEADER, n_obs)?;
    if iters != meta.iterations || iters2 != meta.iterations {
        return Err(Error::Validation("archive files disagree on iterations".into()));
    }
    Ok(ChainArchive { draws, loglik, ..meta })
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    write(path, &serde_json::to_string(cp).expect("checkpoint serializes"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value).expect("value serializes"))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write a tab-separated table with a provenance block.
pub fn save_table(path: &Path, header: &str, columns: &[&str], rows: &[Vec<String>], prov: Option<&Provenance>) -> Result<()> {
    let mut s = format!("{header}\n");
    if let Some(p) = prov {
        s.push_str(&p.header_lines());
    }
    s.push_str(&columns.join("\t"));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    write(path, &s)
}
