//! In-memory core dataset and its derived indexing.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::SiteCovariates;
use crate::spatial::{LatLon, SiteSet};

/// One core: location, expedition, averaging length and its measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreRecord {
    pub core_id: String,
    pub location: LatLon,
    pub expedition: String,
    /// Averaging length, m.
    pub dx: f64,
    /// Measurement depths, m, nondecreasing.
    pub depths: Vec<f64>,
    /// Densities, g/cm³.
    pub density: Vec<f64>,
    pub covariates: SiteCovariates,
}

impl CoreRecord {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn max_depth(&self) -> f64 {
        self.depths.iter().cloned().fold(0.0, f64::max)
    }

    /// Default averaging length: maximum depth over the number of measurements.
    pub fn default_dx(depths: &[f64]) -> f64 {
        depths.iter().cloned().fold(0.0, f64::max) / depths.len().max(1) as f64
    }

    fn validate(&self) -> Result<()> {
        let id = &self.core_id;
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid core id {id:?}")));
        }
        if self.depths.is_empty() {
            return Err(Error::Validation(format!("core {id} has no measurements")));
        }
        if self.depths.len() != self.density.len() {
            return Err(Error::Validation(format!("core {id}: depth and density lengths differ")));
        }
        if !(self.location.lat.abs() <= 90.0 && self.location.lon.abs() <= 360.0) {
            return Err(Error::Validation(format!("core {id}: invalid coordinates")));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::Validation(format!("core {id}: dx must be positive, got {}", self.dx)));
        }
        if self.depths.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::Validation(format!("core {id}: depths must be finite and nonnegative")));
        }
        if self.depths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation(format!("core {id}: depths not sorted")));
        }
        if self.density.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
            return Err(Error::Validation(format!("core {id}: densities must be positive")));
        }
        if !(self.covariates.temperature > 0.0 && self.covariates.smb > 0.0) {
            return Err(Error::Validation(format!("core {id}: covariates must be positive")));
        }
        Ok(())
    }
}

/// Validated cores plus site, expedition and observation indexing.
#[derive(Clone, Debug)]
pub struct CoreDataset {
    pub cores: Vec<CoreRecord>,
    pub sites: SiteSet,
    /// Site index of each core.
    pub site_of_core: Vec<usize>,
    /// Cores located at each site.
    pub cores_of_site: Vec<Vec<usize>>,
    pub expeditions: Vec<String>,
    pub expedition_of_core: Vec<usize>,
    /// Global index of each core's first observation; last entry is the total.
    pub obs_offset: Vec<usize>,
}

impl CoreDataset {
    /// Validate cores and derive indexing. Cores with bit-identical
    /// coordinates share a site.
    pub fn new(cores: Vec<CoreRecord>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Validation("no cores".into()));
        }
        let mut ids = HashMap::new();
        for (i, c) in cores.iter().enumerate() {
            c.validate()?;
            if let Some(j) = ids.insert(c.core_id.clone(), i) {
                return Err(Error::Validation(format!(
                    "duplicate core_id {} (cores {j} and {i})",
                    c.core_id
                )));
            }
        }
        let mut site_index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut locations = Vec::new();
        let mut site_of_core = Vec::with_capacity(cores.len());
        let mut expedition_index: HashMap<String, usize> = HashMap::new();
        let mut expeditions = Vec::new();
        let mut expedition_of_core = Vec::with_capacity(cores.len());
        for c in &cores {
            let key = (c.location.lat.to_bits(), c.location.lon.to_bits());
            let s = *site_index.entry(key).or_insert_with(|| {
                locations.push(c.location);
                locations.len() - 1
            });
            site_of_core.push(s);
            let m = *expedition_index.entry(c.expedition.clone()).or_insert_with(|| {
                expeditions.push(c.expedition.clone());
                expeditions.len() - 1
            });
            expedition_of_core.push(m);
        }
        let mut cores_of_site = vec![Vec::new(); locations.len()];
        for (c, &s) in site_of_core.iter().enumerate() {
            cores_of_site[s].push(c);
        }
        let mut obs_offset = Vec::with_capacity(cores.len() + 1);
        let mut total = 0;
        for c in &cores {
            obs_offset.push(total);
            total += c.len();
        }
        obs_offset.push(total);
        Ok(Self {
            cores,
            sites: SiteSet::new(locations),
            site_of_core,
            cores_of_site,
            expeditions,
            expedition_of_core,
            obs_offset,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn n_obs(&self) -> usize {
        *self.obs_offset.last().unwrap()
    }

    pub fn n_expeditions(&self) -> usize {
        self.expeditions.len()
    }

    /// Whether `dx` varies among the cores of expedition `m`.
    pub fn dx_varies(&self, m: usize) -> bool {
        let mut it = self
            .cores
            .iter()
            .zip(&self.expedition_of_core)
            .filter(|(_, &e)| e == m)
            .map(|(c, _)| c.dx);
        match it.next() {
            Some(first) => it.any(|d| d != first),
            None => false,
        }
    }

    /// Cores belonging to expedition `m`.
    pub fn cores_of_expedition(&self, m: usize) -> Vec<usize> {
        (0..self.n_cores()).filter(|&c| self.expedition_of_core[c] == m).collect()
    }

    /// Copy keeping only the selected observations of each core; cores left
    /// empty are dropped.
    pub fn subset(&self, keep: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let cores = self
            .cores
            .iter()
            .enumerate()
            .filter_map(|(ci, c)| {
                let idx: Vec<usize> = (0..c.len()).filter(|&j| keep(ci, j)).collect();
                if idx.is_empty() {
                    return None;
                }
                let mut out = c.clone();
                out.depths = idx.iter().map(|&j| c.depths[j]).collect();
                out.density = idx.iter().map(|&j| c.density[j]).collect();
                Some(out)
            })
            .collect();
        Self::new(cores)
    }
}
