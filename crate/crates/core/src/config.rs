//! Run configuration: one structured TOML file that fully specifies a run,
//! with dotted-path overrides and a resolved echo written next to every
//! run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_RHO_CP;
use crate::error::{Error, Result};
use crate::fields::{theta_from_range_exp, theta_from_range_sqexp, FieldName, FieldSpec, Hyperparams};
use crate::kernels::ConvolutionMode;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; zero means all available cores.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, threads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSection {
    /// Inclusive year range of the observations.
    pub year_min: i32,
    pub year_max: i32,
    /// Volumetric heat capacity in J/(m^3 C) used at ingestion.
    pub rho_cp: f64,
    /// Optional mask raster path.
    pub mask: String,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self { year_min: 2007, year_max: 2016, rho_cp: DEFAULT_RHO_CP, mask: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KnotSection {
    pub lat_spacing_deg: f64,
    pub lon_spacing_deg: f64,
}

impl Default for KnotSection {
    fn default() -> Self {
        Self { lat_spacing_deg: 8.0, lon_spacing_deg: 16.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CovarianceSection {
    /// exact_circular | gaussian_approx | chordal_isotropic
    pub mode: String,
    /// Fold the areal nugget term into integrated uncertainty.
    pub include_nugget_in_ohc: bool,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        Self { mode: "gaussian_approx".into(), include_nugget_in_ohc: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VecchiaSection {
    pub m: usize,
    pub grouping: bool,
    /// Plan sidecar directory; empty keeps plans under the run directory.
    pub cache_dir: String,
}

impl Default for VecchiaSection {
    fn default() -> Self {
        Self { m: 50, grouping: true, cache_dir: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub target_acceptance: f64,
    pub adapt_batch: usize,
    pub ohc_every: usize,
    pub thin: usize,
    pub initial_proposal_sd: f64,
    pub checkpoint_every: usize,
    /// Compute in-chain integrated-heat-content summaries.
    pub ohc_in_chain: bool,
    /// Per-field stationarity constraints.
    pub constrain: ConstraintSection,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n_iterations: 20_000,
            burn_in: 5_000,
            target_acceptance: 0.44,
            adapt_batch: 50,
            ohc_every: 10,
            thin: 10,
            initial_proposal_sd: 0.0,
            checkpoint_every: 0,
            ohc_in_chain: true,
            constrain: ConstraintSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSection {
    pub phi: bool,
    pub theta_lat: bool,
    pub theta_lon: bool,
    pub noise_ratio: bool,
    pub mu_2007: bool,
    pub trend: bool,
}

impl ConstraintSection {
    pub fn flag(&self, name: FieldName) -> bool {
        match name {
            FieldName::Phi => self.phi,
            FieldName::ThetaLat => self.theta_lat,
            FieldName::ThetaLon => self.theta_lon,
            FieldName::NoiseRatio => self.noise_ratio,
            FieldName::Mu2007 => self.mu_2007,
            FieldName::Trend => self.trend,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub resolution_deg: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { resolution_deg: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSection {
    pub window_deg: f64,
    pub grid_deg: f64,
    pub min_obs: usize,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { window_deg: 20.0, grid_deg: 6.0, min_obs: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    pub n_per_year: usize,
    pub float_spread_deg: f64,
    /// Scale applied to the prior draw of the truth bases; zero keeps
    /// every field at its hyper-mean.
    pub basis_scale: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n_per_year: 300, float_spread_deg: 1.0, basis_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IntervalSection {
    pub level: f64,
    pub resamples_per_sample: usize,
    pub trend_resamples_per_sample: usize,
    pub trend_percentiles: Vec<f64>,
}

impl Default for IntervalSection {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples_per_sample: 100,
            trend_resamples_per_sample: 1,
            trend_percentiles: vec![0.05, 0.95],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSection {
    /// lofo | windowed
    pub kind: String,
    pub window_deg: f64,
    pub cell_deg: f64,
    pub variants: Vec<String>,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { kind: "lofo".into(), window_deg: 2.0, cell_deg: 5.0, variants: vec!["full".into(), "levitus".into()] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LevitusSection {
    pub radius_deg: f64,
    pub scale_deg: f64,
}

impl Default for LevitusSection {
    fn default() -> Self {
        Self { radius_deg: 8.0, scale_deg: 4.0 }
    }
}

/// Prior quartiles of one field's value together with the prior range of
/// its hyper-GP. Range fields quote quartiles as effective ranges and the
/// variance field as a process standard deviation; conversions to the link
/// scale happen in [`RunConfig::field_specs`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HyperQuartiles {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub prior_range_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperSection {
    /// Effective-range quartiles (degrees).
    pub theta_lat: HyperQuartiles,
    /// Effective-range quartiles (degrees).
    pub theta_lon: HyperQuartiles,
    /// Unitless inverse signal-to-noise quartiles.
    pub noise_ratio: HyperQuartiles,
    /// Process-standard-deviation quartiles (J/m^2).
    pub sqrt_phi: HyperQuartiles,
    /// Mean-field quartiles (J/m^2).
    pub mu_2007: HyperQuartiles,
    /// Trend quartiles ((J/m^2)/year); the hyper-mean is pinned to zero.
    pub trend: HyperQuartiles,
}

impl Default for HyperSection {
    fn default() -> Self {
        // Defaults for heat-content-style fields in J/m^2.
        Self {
            theta_lat: HyperQuartiles { q25: 0.89, q50: 2.50, q75: 6.98, prior_range_deg: 39.97 },
            theta_lon: HyperQuartiles { q25: 0.88, q50: 5.07, q75: 29.08, prior_range_deg: 44.93 },
            noise_ratio: HyperQuartiles { q25: 0.0034, q50: 0.04, q75: 0.47, prior_range_deg: 36.59 },
            sqrt_phi: HyperQuartiles { q25: 1.29e9, q50: 2.25e9, q75: 3.92e9, prior_range_deg: 39.24 },
            mu_2007: HyperQuartiles { q25: 19.70e9, q50: 49.24e9, q75: 78.78e9, prior_range_deg: 34.88 },
            trend: HyperQuartiles { q25: -1.53e9, q50: 0.0, q75: 1.53e9, prior_range_deg: 34.88 },
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub domain: DomainSection,
    pub knots: KnotSection,
    pub covariance: CovarianceSection,
    pub vecchia: VecchiaSection,
    pub sampler: SamplerSection,
    pub grid: GridSection,
    pub init: InitSection,
    pub simulate: SimulateSection,
    pub intervals: IntervalSection,
    pub cv: CvSection,
    pub levitus: LevitusSection,
    pub hyper: HyperSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Parse `section.key=value` overrides on top of the current values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut value = toml::Value::try_from(&*self)
            .map_err(|e| Error::Parse(format!("config reserialization: {e}")))?;
        for entry in overrides {
            let (path, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override '{entry}' is not key=value")))?;
            let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
                .map(|t: toml::Table| t["v"].clone())
                .or_else(|_| {
                    toml::from_str(&format!("v = \"{raw}\""))
                        .map(|t: toml::Table| t["v"].clone())
                })
                .map_err(|e| Error::invalid(format!("override value '{raw}': {e}")))?;
            let mut cursor = &mut value;
            let parts: Vec<&str> = path.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                cursor = cursor
                    .get_mut(part)
                    .ok_or_else(|| Error::invalid(format!("unknown config section '{part}'")))?;
            }
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("'{path}' does not address a table entry")))?;
            let key = parts[parts.len() - 1];
            if !table.contains_key(key) {
                return Err(Error::invalid(format!("unknown config key '{path}'")));
            }
            table.insert(key.to_string(), parsed);
        }
        *self = value
            .try_into()
            .map_err(|e| Error::Parse(format!("config after overrides: {e}")))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.year_min > self.domain.year_max {
            return Err(Error::invalid("domain.year_min exceeds domain.year_max"));
        }
        if !(self.domain.rho_cp > 0.0) {
            return Err(Error::invalid("domain.rho_cp must be positive"));
        }
        self.mode()?;
        if self.vecchia.m == 0 {
            return Err(Error::invalid("vecchia.m must be at least 1"));
        }
        if !(0.0 < self.intervals.level && self.intervals.level < 1.0) {
            return Err(Error::invalid("intervals.level must lie in (0, 1)"));
        }
        self.sampler_config(0).validate()?;
        Ok(())
    }

    pub fn mode(&self) -> Result<ConvolutionMode> {
        self.covariance.mode.parse()
    }

    pub fn years(&self) -> Vec<i32> {
        (self.domain.year_min..=self.domain.year_max).collect()
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_iterations: self.sampler.n_iterations,
            burn_in: self.sampler.burn_in,
            target_acceptance: self.sampler.target_acceptance,
            adapt_batch: self.sampler.adapt_batch,
            ohc_every: self.sampler.ohc_every,
            thin: self.sampler.thin,
            seed,
            initial_proposal_sd: self.sampler.initial_proposal_sd,
            mode: self.mode().unwrap_or_default(),
            checkpoint_every: self.sampler.checkpoint_every,
        }
    }

    /// Field specifications from the quartile table: quartiles are mapped
    /// to the field's own value scale (effective ranges square into scale
    /// parameters, standard deviations square into variances), back-solved
    /// to link-scale moments, and paired with the stationarity flags.
    pub fn field_specs(&self) -> Result<[FieldSpec; 6]> {
        let h = &self.hyper;
        let range_q = |q: &HyperQuartiles| -> (f64, f64, f64) {
            (
                theta_from_range_sqexp(q.q25),
                theta_from_range_sqexp(q.q50),
                theta_from_range_sqexp(q.q75),
            )
        };
        let build = |name: FieldName, vals: (f64, f64, f64), prior_range: f64| -> Result<FieldSpec> {
            Ok(FieldSpec {
                hyper: Hyperparams::from_quantiles(
                    vals.0,
                    vals.1,
                    vals.2,
                    theta_from_range_exp(prior_range),
                    name.link(),
                )?,
                constrained: self.sampler.constrain.flag(name),
            })
        };
        let (tl25, tl50, tl75) = range_q(&h.theta_lat);
        let (tn25, tn50, tn75) = range_q(&h.theta_lon);
        Ok([
            build(
                FieldName::Phi,
                (h.sqrt_phi.q25.powi(2), h.sqrt_phi.q50.powi(2), h.sqrt_phi.q75.powi(2)),
                h.sqrt_phi.prior_range_deg,
            )?,
            build(FieldName::ThetaLat, (tl25, tl50, tl75), h.theta_lat.prior_range_deg)?,
            build(FieldName::ThetaLon, (tn25, tn50, tn75), h.theta_lon.prior_range_deg)?,
            build(
                FieldName::NoiseRatio,
                (h.noise_ratio.q25, h.noise_ratio.q50, h.noise_ratio.q75),
                h.noise_ratio.prior_range_deg,
            )?,
            build(
                FieldName::Mu2007,
                (h.mu_2007.q25, h.mu_2007.q50, h.mu_2007.q75),
                h.mu_2007.prior_range_deg,
            )?,
            build(
                FieldName::Trend,
                (h.trend.q25, h.trend.q50, h.trend.q75),
                // The mean and trend fields share a prior range.
                h.mu_2007.prior_range_deg,
            )?,
        ])
    }

    /// Serialized form written next to every run's outputs.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("config serialization: {e}")))
    }

    pub fn mask_path(&self) -> Option<PathBuf> {
        if self.domain.mask.is_empty() {
            None
        } else {
            Some(PathBuf::from(&self.domain.mask))
        }
    }
}
