//! Profile ingestion, vertical integration, masking, synthetic data
//! generation and the tabular file formats.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ParameterFieldSet;
use crate::geometry::{normalize_lon, Location};
use crate::kernels::{covariance_matrix, ConvolutionMode, Site};
use crate::util::stream_id;

/// Default volumetric heat capacity of seawater in J/(m^3 C). A constant of
/// the artifact, configurable at ingestion.
pub const DEFAULT_RHO_CP: f64 = 4.1e6;

/// Depth filter: profiles shallower than this are rejected.
pub const MIN_PROFILE_DEPTH_M: f64 = 1900.0;

/// Vertical integration domain in meters.
pub const INTEGRATION_DEPTH_M: f64 = 2000.0;

// ---------------------------------------------------------------------------
// Mask raster
// ---------------------------------------------------------------------------

/// Boolean raster over `[-90, 90] x [-180, 180)` with cells of a fixed
/// resolution registered at the lower-left corner. Row 0 is the
/// southernmost band. Points on a cell edge belong to the cell whose lower
/// or left edge they sit on (floor-to-cell); the `lat = 90` edge folds into
/// the top band.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    res: f64,
    n_lat: usize,
    n_lon: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(res: f64, cells: Vec<bool>) -> Result<Self> {
        if !(res > 0.0) {
            return Err(Error::invalid("mask resolution must be positive"));
        }
        let n_lat = (180.0 / res).round() as usize;
        let n_lon = (360.0 / res).round() as usize;
        if (n_lat as f64 * res - 180.0).abs() > 1e-9 || (n_lon as f64 * res - 360.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mask resolution {res} does not tile the domain")));
        }
        if cells.len() != n_lat * n_lon {
            return Err(Error::invalid(format!(
                "mask needs {} cells, got {}",
                n_lat * n_lon,
                cells.len()
            )));
        }
        Ok(Self { res, n_lat, n_lon, cells })
    }

    /// All-true mask at the given resolution.
    pub fn all(res: f64) -> Result<Self> {
        let n_lat = (180.0 / res).round() as usize;
        let n_lon = (360.0 / res).round() as usize;
        Self::new(res, vec![true; n_lat * n_lon])
    }

    /// Build from a predicate on cell centers.
    pub fn from_fn(res: f64, f: impl Fn(&Location) -> bool) -> Result<Self> {
        let n_lat = (180.0 / res).round() as usize;
        let n_lon = (360.0 / res).round() as usize;
        let mut cells = Vec::with_capacity(n_lat * n_lon);
        for i in 0..n_lat {
            for j in 0..n_lon {
                let lat = -90.0 + (i as f64 + 0.5) * res;
                let lon = -180.0 + (j as f64 + 0.5) * res;
                cells.push(f(&Location::new(lat.min(90.0), lon)?));
            }
        }
        Self::new(res, cells)
    }

    pub fn resolution(&self) -> f64 {
        self.res
    }

    fn cell_index(&self, loc: &Location) -> usize {
        let i = (((loc.lat() + 90.0) / self.res).floor() as usize).min(self.n_lat - 1);
        let j = (((normalize_lon(loc.lon()) + 180.0) / self.res).floor() as usize).min(self.n_lon - 1);
        i * self.n_lon + j
    }

    pub fn contains(&self, loc: &Location) -> bool {
        self.cells[self.cell_index(loc)]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "cylgp-mask-v1")?;
        writeln!(w, "res {}", self.res)?;
        writeln!(w, "origin -90 -180")?;
        writeln!(w, "rows {} cols {}", self.n_lat, self.n_lon)?;
        for i in 0..self.n_lat {
            let row: String = (0..self.n_lon)
                .map(|j| if self.cells[i * self.n_lon + j] { '1' } else { '0' })
                .collect();
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated mask file".into()))?
                .map_err(Error::from)
        };
        let magic = next()?;
        if magic.trim() != "cylgp-mask-v1" {
            return Err(Error::Parse(format!("not a mask file (header '{magic}')")));
        }
        let res_line = next()?;
        let res: f64 = res_line
            .strip_prefix("res ")
            .ok_or_else(|| Error::Parse("missing 'res' line".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("bad resolution: {e}")))?;
        let origin_line = next()?;
        let origin = origin_line
            .strip_prefix("origin ")
            .ok_or_else(|| Error::Parse("missing 'origin' line".into()))?;
        let parts: Vec<&str> = origin.split_whitespace().collect();
        if parts != ["-90", "-180"] {
            return Err(Error::Parse("mask must be registered at origin (-90, -180)".into()));
        }
        let dims_line = next()?;
        let dims: Vec<&str> = dims_line.split_whitespace().collect();
        if dims.len() != 4 || dims[0] != "rows" || dims[2] != "cols" {
            return Err(Error::Parse("malformed 'rows ... cols ...' line".into()));
        }
        let n_lat: usize = dims[1].parse().map_err(|e| Error::Parse(format!("bad rows: {e}")))?;
        let n_lon: usize = dims[3].parse().map_err(|e| Error::Parse(format!("bad cols: {e}")))?;
        let mut cells = Vec::with_capacity(n_lat * n_lon);
        for _ in 0..n_lat {
            let row = next()?;
            let row = row.trim();
            if row.len() != n_lon {
                return Err(Error::Parse(format!("mask row has {} cells, expected {n_lon}", row.len())));
            }
            for ch in row.chars() {
                match ch {
                    '0' => cells.push(false),
                    '1' => cells.push(true),
                    other => return Err(Error::Parse(format!("mask cell must be 0/1, got '{other}'"))),
                }
            }
        }
        Self::new(res, cells)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

// ---------------------------------------------------------------------------
// Profiles and vertical integration
// ---------------------------------------------------------------------------

/// One measured temperature profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    pub float_id: String,
    pub year: i32,
    pub location: Location,
    /// (depth in meters, temperature in C), depths strictly increasing.
    pub samples: Vec<(f64, f64)>,
}

impl ProfileRecord {
    pub fn max_depth(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.0)
    }
}

/// Integral of the piecewise-linear interpolant over `[0, 2000]` m, times
/// `rho_cp`, evaluated as a trapezoidal sum over integer meters with
/// constant extension above the shallowest and below the deepest reading.
pub fn vertical_integration(profile: &ProfileRecord, rho_cp: f64) -> Result<f64> {
    let samples = &profile.samples;
    if samples.is_empty() {
        return Err(Error::invalid("profile has no samples"));
    }
    for w in samples.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::invalid(format!(
                "profile depths must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
    }
    if samples[0].0 < 0.0 {
        return Err(Error::invalid("negative depth"));
    }
    if profile.max_depth() < MIN_PROFILE_DEPTH_M {
        return Err(Error::invalid(format!(
            "profile max depth {} m is shallower than {MIN_PROFILE_DEPTH_M} m",
            profile.max_depth()
        )));
    }
    let n = INTEGRATION_DEPTH_M as usize;
    let mut cursor = 0usize;
    let temp_at = |z: f64, cursor: &mut usize| -> f64 {
        if z <= samples[0].0 {
            return samples[0].1;
        }
        if z >= samples[samples.len() - 1].0 {
            return samples[samples.len() - 1].1;
        }
        while samples[*cursor + 1].0 < z {
            *cursor += 1;
        }
        let (z0, t0) = samples[*cursor];
        let (z1, t1) = samples[*cursor + 1];
        t0 + (t1 - t0) * (z - z0) / (z1 - z0)
    };
    let mut sum = 0.5 * (temp_at(0.0, &mut cursor) + temp_at(INTEGRATION_DEPTH_M, &mut 0));
    for z in 1..n {
        sum += temp_at(z as f64, &mut cursor);
    }
    Ok(rho_cp * sum)
}

// ---------------------------------------------------------------------------
// Observation sets
// ---------------------------------------------------------------------------

/// Observations of one year, columnar.
#[derive(Debug, Clone, PartialEq)]
pub struct YearData {
    pub year: i32,
    pub locs: Vec<Location>,
    pub values: DVector<f64>,
    pub float_ids: Vec<String>,
}

impl YearData {
    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }
}

/// Per-year vectors of integrated heat-content observations in J/m^2,
/// sorted by year.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    pub years: Vec<YearData>,
}

impl ObservationSet {
    pub fn n_total(&self) -> usize {
        self.years.iter().map(YearData::len).sum()
    }

    pub fn year(&self, year: i32) -> Option<&YearData> {
        self.years.iter().find(|y| y.year == year)
    }

    fn year_mut(&mut self, year: i32) -> &mut YearData {
        if let Some(pos) = self.years.iter().position(|y| y.year == year) {
            return &mut self.years[pos];
        }
        self.years.push(YearData {
            year,
            locs: Vec::new(),
            values: DVector::zeros(0),
            float_ids: Vec::new(),
        });
        self.years.sort_by_key(|y| y.year);
        self.years.iter_mut().find(|y| y.year == year).unwrap()
    }

    pub fn push(&mut self, year: i32, loc: Location, value: f64, float_id: String) {
        let block = self.year_mut(year);
        block.locs.push(loc);
        let mut vals: Vec<f64> = block.values.iter().copied().collect();
        vals.push(value);
        block.values = DVector::from_vec(vals);
        block.float_ids.push(float_id);
    }
}

/// Why and how many profiles were dropped during ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionReport {
    pub total_profiles: usize,
    pub kept: usize,
    pub rejected: usize,
    pub kept_per_year: BTreeMap<i32, usize>,
    pub rejected_per_year: BTreeMap<i32, usize>,
    /// One record per rejected profile or malformed row.
    pub records: Vec<String>,
}

/// Read a profile CSV (`float_id,year,lat,lon,depth_m,temp_c`), group rows
/// into profiles, vertically integrate and filter. Malformed rows and
/// too-shallow profiles are listed in the report, never silently dropped.
pub fn ingest_profiles(
    path: &Path,
    rho_cp: f64,
    mask: Option<&Mask>,
) -> Result<(ObservationSet, RejectionReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["float_id", "year", "lat", "lon", "depth_m", "temp_c"];
    let idx: Vec<usize> = expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Parse(format!("profile CSV missing column '{name}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = RejectionReport::default();
    let mut profiles: Vec<ProfileRecord> = Vec::new();
    let mut lookup: HashMap<(String, i32, u64, u64), usize> = HashMap::new();

    for (line_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = line_no + 2; // header is line 1
        let parse = || -> Result<(String, i32, f64, f64, f64, f64)> {
            let float_id = record
                .get(idx[0])
                .ok_or_else(|| Error::Parse("short row".into()))?
                .to_string();
            let year: i32 = record.get(idx[1]).unwrap_or("").trim().parse().map_err(|e| Error::Parse(format!("year: {e}")))?;
            let lat: f64 = record.get(idx[2]).unwrap_or("").trim().parse().map_err(|e| Error::Parse(format!("lat: {e}")))?;
            let lon: f64 = record.get(idx[3]).unwrap_or("").trim().parse().map_err(|e| Error::Parse(format!("lon: {e}")))?;
            let depth: f64 = record.get(idx[4]).unwrap_or("").trim().parse().map_err(|e| Error::Parse(format!("depth_m: {e}")))?;
            let temp: f64 = record.get(idx[5]).unwrap_or("").trim().parse().map_err(|e| Error::Parse(format!("temp_c: {e}")))?;
            Ok((float_id, year, lat, lon, depth, temp))
        };
        let (float_id, year, lat, lon, depth, temp) = match parse() {
            Ok(v) => v,
            Err(e) => {
                report.records.push(format!("line {line}: malformed row: {e}"));
                continue;
            }
        };
        let loc = match Location::new(lat, lon) {
            Ok(l) => l,
            Err(e) => {
                report.records.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let key = (float_id.clone(), year, loc.lat().to_bits(), loc.lon().to_bits());
        let slot = *lookup.entry(key).or_insert_with(|| {
            profiles.push(ProfileRecord { float_id, year, location: loc, samples: Vec::new() });
            profiles.len() - 1
        });
        profiles[slot].samples.push((depth, temp));
    }

    let mut set = ObservationSet::default();
    report.total_profiles = profiles.len();
    for profile in profiles {
        if let Some(mask) = mask {
            if !mask.contains(&profile.location) {
                report.rejected += 1;
                *report.rejected_per_year.entry(profile.year).or_default() += 1;
                report.records.push(format!(
                    "float {} year {}: location masked out",
                    profile.float_id, profile.year
                ));
                continue;
            }
        }
        match vertical_integration(&profile, rho_cp) {
            Ok(value) => {
                report.kept += 1;
                *report.kept_per_year.entry(profile.year).or_default() += 1;
                set.push(profile.year, profile.location, value, profile.float_id);
            }
            Err(e) => {
                report.rejected += 1;
                *report.rejected_per_year.entry(profile.year).or_default() += 1;
                report.records.push(format!("float {} year {}: {e}", profile.float_id, profile.year));
            }
        }
    }
    Ok((set, report))
}

/// Canonical observation CSV: `year,lat,lon,float_id,h_obs_j_per_m2`, all
/// floating-point fields with 17 significant digits so re-ingestion is
/// bit-exact.
pub fn write_observations(set: &ObservationSet, w: &mut impl Write) -> Result<()> {
    writeln!(w, "year,lat,lon,float_id,h_obs_j_per_m2")?;
    for year in &set.years {
        for i in 0..year.len() {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{},{:.16e}",
                year.year,
                year.locs[i].lat(),
                year.locs[i].lon(),
                year.float_ids[i],
                year.values[i]
            )?;
        }
    }
    Ok(())
}

pub fn read_observations(r: impl std::io::Read) -> Result<ObservationSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut set = ObservationSet::default();
    for record in reader.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::Parse(format!("observation row has {} fields", record.len())));
        }
        let year: i32 = record[0].trim().parse().map_err(|e| Error::Parse(format!("year: {e}")))?;
        let lat: f64 = record[1].trim().parse().map_err(|e| Error::Parse(format!("lat: {e}")))?;
        let lon: f64 = record[2].trim().parse().map_err(|e| Error::Parse(format!("lon: {e}")))?;
        let float_id = record[3].to_string();
        let value: f64 = record[4].trim().parse().map_err(|e| Error::Parse(format!("value: {e}")))?;
        set.push(year, Location::new(lat, lon)?, value, float_id);
    }
    Ok(set)
}

pub fn save_observations(set: &ObservationSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_observations(set, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_observations(path: &Path) -> Result<ObservationSet> {
    read_observations(std::fs::File::open(path)?)
}

/// Drop observations falling in masked-out cells.
pub fn apply_mask(set: &ObservationSet, mask: &Mask) -> (ObservationSet, usize) {
    let mut out = ObservationSet::default();
    let mut dropped = 0usize;
    for year in &set.years {
        for i in 0..year.len() {
            if mask.contains(&year.locs[i]) {
                out.push(year.year, year.locs[i], year.values[i], year.float_ids[i].clone());
            } else {
                dropped += 1;
            }
        }
    }
    (out, dropped)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Layout of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimLayout {
    pub n_per_year: usize,
    pub years: Vec<i32>,
    /// Standard deviation in degrees of the per-float location scatter;
    /// three profiles share each float.
    pub float_spread_deg: f64,
    pub mode: ConvolutionMode,
}

/// Ground truth retained from a simulation: the latent (noise-free) field
/// values per year, in observation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub seed: u64,
    pub latent: BTreeMap<i32, Vec<f64>>,
}

/// Guard for the dense latent draw.
pub const SIMULATE_MAX_PER_YEAR: usize = 3000;

/// Draw a dataset from the model: float centers uniform over the unmasked
/// area, three jittered profiles per float, latent field from the dense
/// covariance per year plus nugget noise. Per-year randomness comes from
/// named substreams of the master seed, so years are reproducible
/// independently of evaluation order.
pub fn simulate_dataset(
    fields: &ParameterFieldSet,
    layout: &SimLayout,
    mask: Option<&Mask>,
    seed: u64,
) -> Result<(ObservationSet, SimulationTruth)> {
    if layout.n_per_year == 0 || layout.n_per_year > SIMULATE_MAX_PER_YEAR {
        return Err(Error::invalid(format!(
            "n_per_year must be in 1..={SIMULATE_MAX_PER_YEAR}, got {}",
            layout.n_per_year
        )));
    }
    if layout.years.is_empty() {
        return Err(Error::invalid("no years requested"));
    }
    if !(layout.float_spread_deg >= 0.0) {
        return Err(Error::invalid("float spread must be nonnegative"));
    }

    let mut set = ObservationSet::default();
    let mut truth = SimulationTruth { seed, latent: BTreeMap::new() };

    for &year in &layout.years {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id(&format!("simulate/{year}")));

        let n = layout.n_per_year;
        let n_floats = n.div_ceil(3);
        let mut locs: Vec<Location> = Vec::with_capacity(n);
        let mut float_ids: Vec<String> = Vec::with_capacity(n);
        for f in 0..n_floats {
            let center = sample_uniform_location(&mut rng, mask)?;
            let float_id = format!("sim-{year}-{f:05}");
            for _ in 0..3 {
                if locs.len() == n {
                    break;
                }
                let loc = jitter_location(&center, layout.float_spread_deg, mask, &mut rng)?;
                locs.push(loc);
                float_ids.push(float_id.clone());
            }
        }

        let params = fields.local_params(&locs)?;
        let sites: Vec<Site> =
            locs.iter().zip(&params).map(|(l, p)| Site { loc: *l, kp: *p }).collect();
        let mut cov = covariance_matrix(&sites, layout.mode, false, None)?;
        let jitter = 1e-8 * cov.diagonal().mean().max(f64::MIN_POSITIVE);
        for i in 0..n {
            cov[(i, i)] += jitter;
        }
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::numeric(format!("simulation covariance for {year} is not positive definite")))?;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = fields.mean_vector(&locs, year);
        let latent = &mean + chol.l() * z;

        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            values.push(latent[i] + params[i].sigma2.sqrt() * noise);
        }
        truth.latent.insert(year, latent.iter().copied().collect());
        for i in 0..n {
            set.push(year, locs[i], values[i], float_ids[i].clone());
        }
    }
    Ok((set, truth))
}

/// Uniform draw over the (masked) sphere surface: sin(lat) uniform,
/// longitude uniform, rejection against the mask.
fn sample_uniform_location(rng: &mut ChaCha20Rng, mask: Option<&Mask>) -> Result<Location> {
    for _ in 0..100_000 {
        let sin_lat: f64 = rng.random_range(-1.0..1.0);
        let lat = sin_lat.asin().to_degrees();
        let lon: f64 = rng.random_range(-180.0..180.0);
        let loc = Location::new(lat, lon)?;
        if mask.map_or(true, |m| m.contains(&loc)) {
            return Ok(loc);
        }
    }
    Err(Error::invalid("mask leaves no area to sample"))
}

fn jitter_location(
    center: &Location,
    spread: f64,
    mask: Option<&Mask>,
    rng: &mut ChaCha20Rng,
) -> Result<Location> {
    if spread == 0.0 {
        return Ok(*center);
    }
    for _ in 0..64 {
        let dlat: f64 = rng.sample::<f64, _>(StandardNormal) * spread;
        let dlon: f64 = rng.sample::<f64, _>(StandardNormal) * spread;
        let lat = (center.lat() + dlat).clamp(-89.99, 89.99);
        let loc = Location::new(lat, center.lon() + dlon)?;
        if mask.map_or(true, |m| m.contains(&loc)) {
            return Ok(loc);
        }
    }
    Ok(*center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldName, FieldSpec, Hyperparams, KnotGrid, Link, ParameterFieldSet};
    use approx::assert_relative_eq;

    fn loc(lat: f64, lon: f64) -> Location {
        Location::new(lat, lon).unwrap()
    }

    fn profile(samples: Vec<(f64, f64)>) -> ProfileRecord {
        ProfileRecord { float_id: "f1".into(), year: 2010, location: loc(0.0, 0.0), samples }
    }

    #[test]
    fn integration_of_constant_profile() {
        let p = profile(vec![(0.0, 1.0), (2000.0, 1.0)]);
        let h = vertical_integration(&p, 4.1e6).unwrap();
        assert_relative_eq!(h, 8.2e9, max_relative = 1e-14);
    }

    #[test]
    fn integration_of_linear_profile_matches_constant_mean() {
        // T rising 0 -> 2 over the full column integrates like constant 1.
        let p = profile(vec![(0.0, 0.0), (2000.0, 2.0)]);
        let h = vertical_integration(&p, 4.1e6).unwrap();
        assert_relative_eq!(h, 8.2e9, max_relative = 1e-12);
    }

    /// Fine-step trapezoid of the piecewise-linear interpolant with
    /// constant extension; the independent oracle for the integral.
    fn quad_oracle(samples: &[(f64, f64)], rho_cp: f64) -> f64 {
        let interp = |z: f64| -> f64 {
            if z <= samples[0].0 {
                return samples[0].1;
            }
            if z >= samples[samples.len() - 1].0 {
                return samples[samples.len() - 1].1;
            }
            let k = samples.windows(2).position(|w| w[1].0 >= z).unwrap();
            let (z0, t0) = samples[k];
            let (z1, t1) = samples[k + 1];
            t0 + (t1 - t0) * (z - z0) / (z1 - z0)
        };
        let steps = 2000 * 64;
        let h = INTEGRATION_DEPTH_M / steps as f64;
        let mut sum = 0.5 * (interp(0.0) + interp(INTEGRATION_DEPTH_M));
        for i in 1..steps {
            sum += interp(i as f64 * h);
        }
        rho_cp * sum * h
    }

    #[test]
    fn integration_matches_quadrature_on_irregular_profile() {
        // Integer-meter reading depths: the meter-resolution trapezoid sum
        // is then the exact integral of the interpolant.
        let samples = vec![
            (2.0, 18.4),
            (100.0, 14.2),
            (420.0, 9.7),
            (800.0, 6.1),
            (1203.0, 4.4),
            (1750.0, 3.0),
            (1950.0, 2.6),
        ];
        let p = profile(samples.clone());
        let h = vertical_integration(&p, DEFAULT_RHO_CP).unwrap();
        let q = quad_oracle(&samples, DEFAULT_RHO_CP);
        assert_relative_eq!(h, q, max_relative = 1e-10);
    }

    #[test]
    fn integration_rejects_bad_profiles() {
        let unordered = profile(vec![(0.0, 1.0), (500.0, 1.0), (400.0, 1.0), (2000.0, 1.0)]);
        assert!(vertical_integration(&unordered, 4.1e6).is_err());
        let shallow = profile(vec![(0.0, 1.0), (1500.0, 1.0)]);
        let err = vertical_integration(&shallow, 4.1e6).unwrap_err();
        assert!(err.to_string().contains("shallower"));
    }

    #[test]
    fn mask_round_trip_and_lookup() {
        let mask = Mask::from_fn(10.0, |l| l.lat() < 0.0).unwrap();
        assert!(mask.contains(&loc(-5.0, 0.0)));
        assert!(!mask.contains(&loc(5.0, 0.0)));
        // Boundary point on a cell edge goes to the cell above (floor rule).
        assert!(!mask.contains(&loc(0.0, 0.0)));

        let mut buf = Vec::new();
        mask.write_to(&mut buf).unwrap();
        let back = Mask::read_from(&buf[..]).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn ingest_empty_and_simple_profiles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.csv");

        std::fs::write(&path, "float_id,year,lat,lon,depth_m,temp_c\n").unwrap();
        let (set, report) = ingest_profiles(&path, 4.1e6, None).unwrap();
        assert_eq!(set.n_total(), 0);
        assert_eq!(report.total_profiles, 0);

        let mut rows = String::from("float_id,year,lat,lon,depth_m,temp_c\n");
        rows.push_str("a,2010,0,0,0,1\n");
        rows.push_str("a,2010,0,0,2000,1\n");
        rows.push_str("b,2010,95,0,0,1\n"); // latitude out of bounds
        rows.push_str("c,2010,1,1,0,1\n");
        rows.push_str("c,2010,1,1,1500,1\n"); // too shallow
        std::fs::write(&path, rows).unwrap();
        let (set, report) = ingest_profiles(&path, 4.1e6, None).unwrap();
        assert_eq!(set.n_total(), 1);
        let y = set.year(2010).unwrap();
        assert_relative_eq!(y.values[0], 8.2e9, max_relative = 1e-14);
        assert_eq!(report.total_profiles, 2); // 'b' rows never formed a profile
        assert_eq!(report.kept, 1);
        assert_eq!(report.rejected, 1);
        assert_eq!(report.kept + report.rejected, report.total_profiles);
        assert!(report.records.iter().any(|r| r.contains("latitude")));
        assert!(report.records.iter().any(|r| r.contains("shallower")));
    }

    #[test]
    fn observation_csv_round_trips_bit_exactly() {
        let mut set = ObservationSet::default();
        set.push(2010, loc(1.234567890123456, -17.77), 8.123456789012345e9, "a".into());
        set.push(2009, loc(-43.21, 170.0001), -2.5e8, "b".into());
        set.push(2010, loc(0.1, 0.2), 1.0e9 + 0.125, "c".into());
        let mut buf = Vec::new();
        write_observations(&set, &mut buf).unwrap();
        let back = read_observations(&buf[..]).unwrap();
        assert_eq!(set, back);
        // Idempotence: writing the re-read set is byte-identical.
        let mut buf2 = Vec::new();
        write_observations(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn apply_mask_filters() {
        let mut set = ObservationSet::default();
        set.push(2010, loc(-5.0, 0.0), 1.0, "a".into());
        set.push(2010, loc(5.0, 0.0), 2.0, "b".into());
        let south = Mask::from_fn(10.0, |l| l.lat() < 0.0).unwrap();
        let (filtered, dropped) = apply_mask(&set, &south);
        assert_eq!(filtered.n_total(), 1);
        assert_eq!(dropped, 1);
        let all = Mask::all(10.0).unwrap();
        let (same, dropped) = apply_mask(&set, &all);
        assert_eq!(same, set);
        assert_eq!(dropped, 0);
        let none = Mask::from_fn(10.0, |_| false).unwrap();
        let (empty, dropped) = apply_mask(&set, &none);
        assert_eq!(empty.n_total(), 0);
        assert_eq!(dropped, 2);
    }

    fn stationary_fields(phi: f64, ratio: f64) -> ParameterFieldSet {
        let spec = |mu: f64, link: Link| FieldSpec {
            hyper: Hyperparams::new(mu, 0.5, 30.0, link).unwrap(),
            constrained: false,
        };
        ParameterFieldSet::new(
            KnotGrid::from_locations(vec![loc(0.0, 0.0), loc(20.0, 40.0)]).unwrap(),
            [
                spec(phi.ln(), Link::Exponential),
                spec((50.0f64).ln(), Link::Exponential),
                spec((50.0f64).ln(), Link::Exponential),
                spec(ratio.ln(), Link::Exponential),
                spec(5.0, Link::Identity),
                spec(0.0, Link::Identity),
            ],
        )
        .unwrap()
    }

    #[test]
    fn simulate_respects_noise_free_case() {
        let fields = stationary_fields(2.0, 1e-12);
        let layout = SimLayout {
            n_per_year: 12,
            years: vec![2010],
            float_spread_deg: 0.7,
            mode: ConvolutionMode::GaussianApprox,
        };
        let (set, truth) = simulate_dataset(&fields, &layout, None, 99).unwrap();
        let y = set.year(2010).unwrap();
        let latent = &truth.latent[&2010];
        for i in 0..y.len() {
            assert_relative_eq!(y.values[i], latent[i], max_relative = 1e-5);
        }
        // Float ids come in co-located triples.
        assert_eq!(y.float_ids[0], y.float_ids[1]);
        assert_eq!(y.float_ids[0], y.float_ids[2]);
        assert_ne!(y.float_ids[2], y.float_ids[3]);
    }

    #[test]
    fn simulate_degenerate_variance_hugs_mean() {
        let fields = stationary_fields(1e-16, 1e-6);
        let layout = SimLayout {
            n_per_year: 9,
            years: vec![2010],
            float_spread_deg: 0.5,
            mode: ConvolutionMode::GaussianApprox,
        };
        let (set, _) = simulate_dataset(&fields, &layout, None, 7).unwrap();
        let y = set.year(2010).unwrap();
        for i in 0..y.len() {
            assert_relative_eq!(y.values[i], 5.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn simulate_is_reproducible_and_guarded() {
        let fields = stationary_fields(2.0, 0.1);
        let layout = SimLayout {
            n_per_year: 15,
            years: vec![2010, 2011],
            float_spread_deg: 1.0,
            mode: ConvolutionMode::GaussianApprox,
        };
        let (a, ta) = simulate_dataset(&fields, &layout, None, 123).unwrap();
        let (b, tb) = simulate_dataset(&fields, &layout, None, 123).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.latent, tb.latent);

        let too_big = SimLayout { n_per_year: SIMULATE_MAX_PER_YEAR + 1, ..layout };
        assert!(simulate_dataset(&fields, &too_big, None, 1).is_err());
    }

    #[test]
    fn simulated_covariance_matches_model() {
        // Empirical covariance at 3 fixed points over replicate draws.
        let fields = stationary_fields(2.0, 0.0 + 1e-9);
        let locs = [loc(0.0, 0.0), loc(3.0, 0.0), loc(0.0, 6.0)];
        let params = fields.local_params(&locs).unwrap();
        let sites: Vec<Site> = locs.iter().zip(&params).map(|(l, p)| Site { loc: *l, kp: *p }).collect();
        let cov = covariance_matrix(&sites, ConvolutionMode::GaussianApprox, false, None).unwrap();

        let n_rep = 5000;
        let mut sums = [0.0f64; 3];
        let mut prods = [[0.0f64; 3]; 3];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
        let mean = fields.mean_vector(&locs, 2010);
        for _ in 0..n_rep {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &mean + chol.l() * z;
            for i in 0..3 {
                sums[i] += draw[i];
                for j in 0..3 {
                    prods[i][j] += draw[i] * draw[j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let emp = prods[i][j] / n_rep as f64 - sums[i] / n_rep as f64 * sums[j] / n_rep as f64;
                assert!(
                    (emp - cov[(i, j)]).abs() <= 0.05 * cov[(i, i)].max(cov[(j, j)]),
                    "cov({i},{j}): {emp} vs {}",
                    cov[(i, j)]
                );
            }
        }
    }
}
