//! Posterior distributions of areally integrated heat content: integration
//! grids, dense and Vecchia paths, confidence/credible intervals, trend
//! resampling and sign-agreement maps.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Mask, YearData};
use crate::dense::conditional_gaussian;
use crate::error::{Error, Result};
use crate::fields::ParameterFieldSet;
use crate::geometry::Location;
use crate::kernels::{covariance_matrix, cross_covariance_matrix, ConvolutionMode, Site};
use crate::util::{norm_quantile, quantile, sort_f64};
use crate::vecchia::{
    extend_for_prediction, vecchia_predict, PredictionCovariance, PredictionExtension, VecchiaPlan,
};

/// Mean Earth radius in meters; a constant of the artifact.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Guard for the dense path: keeps the grid covariance around 200 MB.
pub const DENSE_GRID_GUARD: usize = 5000;

/// Grid-cell centers with spherical areal weights in m^2. Masked cells keep
/// their center but carry zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationGrid {
    pub centers: Vec<Location>,
    pub weights: Vec<f64>,
}

impl IntegrationGrid {
    /// Regular grid at `resolution_deg`, with cell area
    /// `R^2 (lon_right - lon_left) (sin lat_top - sin lat_bottom)`.
    pub fn regular(resolution_deg: f64, mask: Option<&Mask>) -> Result<Self> {
        let res = resolution_deg;
        if !(res > 0.0) || (360.0 / res).fract().abs() > 1e-9 {
            return Err(Error::invalid(format!("grid resolution {res} must divide 360")));
        }
        let n_lat = (180.0 / res).round() as usize;
        let n_lon = (360.0 / res).round() as usize;
        let dlon_rad = res.to_radians();
        let mut centers = Vec::with_capacity(n_lat * n_lon);
        let mut weights = Vec::with_capacity(n_lat * n_lon);
        for i in 0..n_lat {
            let lat_bot = -90.0 + i as f64 * res;
            let lat_top = lat_bot + res;
            let band = EARTH_RADIUS_M * EARTH_RADIUS_M
                * dlon_rad
                * (lat_top.to_radians().sin() - lat_bot.to_radians().sin());
            let lat_c = 0.5 * (lat_bot + lat_top);
            for j in 0..n_lon {
                let lon_c = -180.0 + (j as f64 + 0.5) * res;
                let loc = Location::new(lat_c, lon_c)?;
                let masked = mask.map_or(false, |m| !m.contains(&loc));
                centers.push(loc);
                weights.push(if masked { 0.0 } else { band });
            }
        }
        Ok(Self { centers, weights })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Cells with positive weight, as (locations, weights).
    pub fn active(&self) -> (Vec<Location>, DVector<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        (
            idx.iter().map(|&i| self.centers[i]).collect(),
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.weights[i])),
        )
    }

    /// Integrate a per-active-cell field.
    pub fn integrate(&self, active_values: &DVector<f64>) -> Result<f64> {
        let (_, w) = self.active();
        if w.len() != active_values.len() {
            return Err(Error::invalid("field length does not match active cells"));
        }
        Ok(w.dot(active_values))
    }
}

/// Posterior of one year's integrated heat content at fixed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhcEstimate {
    pub mean: f64,
    pub sd: f64,
}

fn sites_for(fields: &ParameterFieldSet, locs: &[Location]) -> Result<Vec<Site>> {
    let params = fields.local_params(locs)?;
    Ok(locs.iter().zip(params).map(|(l, kp)| Site { loc: *l, kp }).collect())
}

/// Areal nugget term for the optional switch that folds fine-scale
/// variation into the integrated uncertainty.
fn areal_nugget_variance(sites: &[Site], weights: &DVector<f64>) -> f64 {
    sites.iter().zip(weights.iter()).map(|(s, w)| w * w * s.kp.sigma2).sum()
}

/// Dense-path posterior of `a^T H_year` given the year's observations:
/// exact joint-normal conditioning over the active grid cells. Guarded to
/// [`DENSE_GRID_GUARD`] cells.
pub fn ohc_posterior_dense(
    fields: &ParameterFieldSet,
    data: &YearData,
    grid: &IntegrationGrid,
    mode: ConvolutionMode,
    include_nugget: bool,
) -> Result<OhcEstimate> {
    let (active, weights) = grid.active();
    if active.len() > DENSE_GRID_GUARD {
        return Err(Error::invalid(format!(
            "dense path supports at most {DENSE_GRID_GUARD} grid cells, got {}; use the Vecchia path",
            active.len()
        )));
    }
    let grid_sites = sites_for(fields, &active)?;
    let pred_mean = fields.mean_vector(&active, data.year);
    let pred_cov = covariance_matrix(&grid_sites, mode, false, None)?;

    if data.is_empty() {
        let mu = weights.dot(&pred_mean);
        let mut var = (weights.transpose() * &pred_cov * &weights)[(0, 0)];
        if include_nugget {
            var += areal_nugget_variance(&grid_sites, &weights);
        }
        return Ok(OhcEstimate { mean: mu, sd: var.max(0.0).sqrt() });
    }

    let obs_sites = sites_for(fields, &data.locs)?;
    let obs_cov = covariance_matrix(&obs_sites, mode, true, None)?;
    let cross = cross_covariance_matrix(&grid_sites, &obs_sites, mode)?;
    let obs_mean = fields.mean_vector(&data.locs, data.year);
    let cond =
        conditional_gaussian(&data.values, &cross, &obs_cov, &pred_cov, &obs_mean, &pred_mean)?;
    let mu = weights.dot(&cond.mean);
    let mut var = (weights.transpose() * &cond.covariance * &weights)[(0, 0)];
    if include_nugget {
        var += areal_nugget_variance(&grid_sites, &weights);
    }
    Ok(OhcEstimate { mean: mu, sd: var.max(0.0).sqrt() })
}

/// Build the observation-first prediction extension for one year over the
/// active grid cells.
pub fn grid_extension(
    plan: &VecchiaPlan,
    data: &YearData,
    grid: &IntegrationGrid,
    m: usize,
    grouping: bool,
) -> Result<PredictionExtension> {
    let (active, _) = grid.active();
    extend_for_prediction(plan, &data.locs, &active, m, grouping)
}

/// Vecchia-path posterior of `a^T H_year`: sparse solves against the
/// prediction block, never materializing the dense grid covariance.
pub fn ohc_posterior_vecchia(
    fields: &ParameterFieldSet,
    data: &YearData,
    grid: &IntegrationGrid,
    ext: &PredictionExtension,
    mode: ConvolutionMode,
    include_nugget: bool,
) -> Result<OhcEstimate> {
    let (active, weights) = grid.active();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(OhcEstimate { mean: 0.0, sd: 0.0 });
    }
    let obs_sites = sites_for(fields, &data.locs)?;
    let grid_sites = sites_for(fields, &active)?;
    let cov = PredictionCovariance { obs: &obs_sites, pred: &grid_sites, mode };
    let obs_mean = fields.mean_vector(&data.locs, data.year);
    let pred_mean = fields.mean_vector(&active, data.year);
    let pred = vecchia_predict(ext, &data.values, &obs_mean, &pred_mean, &cov)?;
    let mu = weights.dot(&pred.mean);
    let mut var = pred.quadratic_variance(&weights)?;
    if include_nugget {
        var += areal_nugget_variance(&grid_sites, &weights);
    }
    Ok(OhcEstimate { mean: mu, sd: var.max(0.0).sqrt() })
}

/// Confidence and credible intervals for one year of chain OHC summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhcInterval {
    /// Mean of the sample whose OHC mean is the median over the chain.
    pub center: f64,
    /// `center +- z sd(median sample)`: interpolation uncertainty only.
    pub conf_lo: f64,
    pub conf_hi: f64,
    /// Percentiles of pooled per-sample Gaussian resamples: interpolation
    /// plus parameter uncertainty.
    pub cred_lo: f64,
    pub cred_hi: f64,
}

/// Interval construction from per-sample `(mean, sd)` summaries.
///
/// The confidence interval takes the sample at the median mean and expands
/// it by the normal quantile; the credible interval pools
/// `resamples_per_sample` Gaussian draws per retained sample and reads the
/// matching percentiles.
pub fn ohc_intervals(
    samples: &[OhcEstimate],
    level: f64,
    resamples_per_sample: usize,
    rng: &mut impl Rng,
) -> Result<OhcInterval> {
    if samples.is_empty() {
        return Err(Error::invalid("no OHC samples to summarize"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid("interval level must lie in (0, 1)"));
    }
    let mut by_mean: Vec<&OhcEstimate> = samples.iter().collect();
    by_mean.sort_by(|a, b| a.mean.partial_cmp(&b.mean).expect("finite OHC mean"));
    let median = by_mean[(by_mean.len() - 1) / 2];
    let z = norm_quantile(0.5 * (1.0 + level));
    let mut pool = Vec::with_capacity(samples.len() * resamples_per_sample);
    for s in samples {
        for _ in 0..resamples_per_sample {
            let draw: f64 = rng.sample(rand_distr::StandardNormal);
            pool.push(s.mean + s.sd * draw);
        }
    }
    sort_f64(&mut pool);
    Ok(OhcInterval {
        center: median.mean,
        conf_lo: median.mean - z * median.sd,
        conf_hi: median.mean + z * median.sd,
        cred_lo: quantile(&pool, 0.5 * (1.0 - level)),
        cred_hi: quantile(&pool, 0.5 * (1.0 + level)),
    })
}

/// Resampled trend fields on the active grid cells with their integrated
/// values (J/year).
#[derive(Debug, Clone)]
pub struct TrendResample {
    /// Per resample, the trend field over active cells.
    pub fields: Vec<DVector<f64>>,
    /// Areal integral of each resampled field.
    pub integrated: Vec<f64>,
}

impl TrendResample {
    /// The resampled field whose integrated value sits at percentile `p`
    /// (nearest-rank on the integrated distribution).
    pub fn field_at_percentile(&self, p: f64) -> Result<(&DVector<f64>, f64)> {
        if self.integrated.is_empty() {
            return Err(Error::invalid("no resampled trend fields"));
        }
        let mut idx: Vec<usize> = (0..self.integrated.len()).collect();
        idx.sort_by(|&a, &b| {
            self.integrated[a].partial_cmp(&self.integrated[b]).expect("finite trend")
        });
        let rank = ((p.clamp(0.0, 1.0) * (idx.len() - 1) as f64).round()) as usize;
        let chosen = idx[rank];
        Ok((&self.fields[chosen], self.integrated[chosen]))
    }

    pub fn integrated_quantile(&self, p: f64) -> Result<f64> {
        if self.integrated.is_empty() {
            return Err(Error::invalid("no resampled trend fields"));
        }
        let mut sorted = self.integrated.clone();
        sort_f64(&mut sorted);
        Ok(quantile(&sorted, p))
    }
}


/// Redraw the trend-field basis from its Gibbs conditional for each
/// retained sample, evaluate the trend on the active grid cells and
/// integrate with the areal weights.
pub fn trend_resample_and_integrate(
    samples: &[ParameterFieldSet],
    problem: &crate::sampler::SamplerProblem,
    grid: &IntegrationGrid,
    resamples_per_sample: usize,
    rng: &mut impl Rng,
) -> Result<TrendResample> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no retained samples for trend resampling"))?;
    if resamples_per_sample == 0 {
        return Err(Error::invalid("resamples_per_sample must be positive"));
    }
    let (active, weights) = grid.active();
    // The kriging map of the trend basis onto the grid depends only on the
    // (fixed) hyperparameters, so compute it once.
    let a_grid = first.kriging_matrix(crate::fields::FieldName::Trend, &active);
    let beta_off = first.hyper(crate::fields::FieldName::Trend).mu;

    let mut fields_out = Vec::with_capacity(samples.len() * resamples_per_sample);
    let mut integrated = Vec::with_capacity(samples.len() * resamples_per_sample);
    for sample in samples {
        let post = crate::sampler::mean_trend_posterior(problem, sample)?;
        for _ in 0..resamples_per_sample {
            let (_, b_beta) = post.draw(rng)?;
            let mut field = &a_grid * &b_beta;
            field.add_scalar_mut(beta_off);
            integrated.push(weights.dot(&field));
            fields_out.push(field);
        }
    }
    Ok(TrendResample { fields: fields_out, integrated })
}

/// Fraction of resampled fields with a positive trend per active cell,
/// i.e. the posterior probability of local warming.
pub fn sign_agreement_map(fields: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = fields.first().ok_or_else(|| Error::invalid("no trend fields"))?;
    let p = first.len();
    let mut out = DVector::zeros(p);
    for f in fields {
        if f.len() != p {
            return Err(Error::invalid("trend fields have mismatched lengths"));
        }
        for i in 0..p {
            if f[i] > 0.0 {
                out[i] += 1.0;
            }
        }
    }
    Ok(out / fields.len() as f64)
}


#[cfg(test)]
mod trend_tests {
    use super::*;
    use crate::data::ObservationSet;
    use crate::fields::{FieldName, FieldSpec, Hyperparams, KnotGrid, Link};
    use crate::sampler::{mean_trend_posterior, SamplerProblem};
    use crate::vecchia::VecchiaPlan;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn loc(lat: f64, lon: f64) -> Location {
        Location::new(lat, lon).unwrap()
    }

    fn one_knot_fields() -> ParameterFieldSet {
        let spec = |mu: f64, sd: f64, link: Link| FieldSpec {
            hyper: Hyperparams::new(mu, sd, 25.0, link).unwrap(),
            constrained: false,
        };
        ParameterFieldSet::new(
            KnotGrid::from_locations(vec![loc(0.0, 0.0)]).unwrap(),
            [
                spec((1.0f64).ln(), 0.3, Link::Exponential),
                spec((200.0f64).ln(), 0.3, Link::Exponential),
                spec((200.0f64).ln(), 0.3, Link::Exponential),
                spec((0.1f64).ln(), 0.3, Link::Exponential),
                spec(3.0, 2.0, Link::Identity),
                spec(0.0, 1.0, Link::Identity),
            ],
        )
        .unwrap()
    }

    #[test]
    fn constant_field_integrates_to_area_times_value() {
        let grid = IntegrationGrid::regular(30.0, None).unwrap();
        let (active, _) = grid.active();
        let c = 2.5;
        let field = DVector::from_element(active.len(), c);
        assert_relative_eq!(
            grid.integrate(&field).unwrap(),
            c * grid.total_area(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn one_knot_resample_matches_analytic_posterior() {
        let fields = one_knot_fields();
        // Two years of data at a handful of points.
        let mut set = ObservationSet::default();
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        for year in [2008, 2012] {
            for _ in 0..6 {
                let l = loc(rng.random_range(-30.0..30.0), rng.random_range(-40.0..40.0));
                set.push(year, l, 3.0 + rng.random_range(-1.0..1.0), "f".into());
            }
        }
        let plans: Vec<VecchiaPlan> =
            set.years.iter().map(|b| VecchiaPlan::build(&b.locs, 6, true).unwrap()).collect();
        let problem =
            SamplerProblem::new(set, plans, ConvolutionMode::GaussianApprox, &fields).unwrap();
        let grid = IntegrationGrid::regular(45.0, None).unwrap();
        let (active, weights) = grid.active();

        // Analytic: integrated trend is a linear image of the scalar
        // trend-basis draw, itself normal with known moments.
        let post = mean_trend_posterior(&problem, &fields).unwrap();
        let a_grid = fields.kriging_matrix(FieldName::Trend, &active);
        let coeff: f64 = weights.dot(&a_grid.column(0).into_owned());
        let (mean_blocks, cov) = (post.mean_blocks(), post.covariance());
        let expect_mean = coeff * mean_blocks.1[0];
        let expect_sd = coeff.abs() * cov[(1, 1)].sqrt();

        let mut rng = ChaCha20Rng::seed_from_u64(72);
        let tr =
            trend_resample_and_integrate(&[fields.clone()], &problem, &grid, 20_000, &mut rng)
                .unwrap();
        let n = tr.integrated.len() as f64;
        let emp_mean: f64 = tr.integrated.iter().sum::<f64>() / n;
        let emp_var: f64 =
            tr.integrated.iter().map(|v| (v - emp_mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((emp_mean - expect_mean).abs() < 5.0 * expect_sd / n.sqrt());
        assert_relative_eq!(emp_var.sqrt(), expect_sd, max_relative = 0.05);

        // Percentile fields are members of the resampled set.
        let (field, v) = tr.field_at_percentile(0.95).unwrap();
        assert_eq!(field.len(), active.len());
        assert!(v >= tr.integrated_quantile(0.5).unwrap());
    }
}
