//! Cross-validation and reference baselines: leave-one-float-out and
//! windowed folds, MAE/RMSE/CRPS scoring with per-cell maps, the
//! radius-limited distance-weighted reference predictor, and OLS trend
//! fitting.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::data::{ObservationSet, YearData};
use crate::error::{Error, Result};
use crate::fields::ParameterFieldSet;
use crate::geometry::{circular_lon_distance, cyl_distance, Location};
use crate::kernels::{ConvolutionMode, Site};
use crate::util::{norm_cdf, norm_pdf};
use crate::vecchia::{extend_for_prediction, vecchia_predict, PredictionCovariance, VecchiaPlan};

/// One cross-validation fold within a year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Float id or a window key, for reporting.
    pub key: String,
    pub year: i32,
    /// Indices into the year block.
    pub test: Vec<usize>,
    pub train: Vec<usize>,
}

/// Leave-one-float-out folds: one fold per (year, float id) holding out
/// all of that float's profiles for the year.
pub fn lofo_folds(data: &ObservationSet) -> Result<Vec<Fold>> {
    let mut folds = Vec::new();
    for block in &data.years {
        if block.float_ids.iter().any(String::is_empty) {
            return Err(Error::invalid(format!(
                "leave-one-float-out needs float ids for every observation in {}",
                block.year
            )));
        }
        let mut by_float: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, id) in block.float_ids.iter().enumerate() {
            by_float.entry(id).or_default().push(i);
        }
        for (id, test) in by_float {
            let train = (0..block.len()).filter(|i| !test.contains(i)).collect();
            folds.push(Fold { key: id.to_string(), year: block.year, test, train });
        }
    }
    Ok(folds)
}

/// Windowed folds: one fold per observation whose training set excludes
/// every observation within the `window_deg x window_deg` box centered on
/// it (longitude wraps).
pub fn windowed_folds(data: &ObservationSet, window_deg: f64) -> Vec<Fold> {
    let half = 0.5 * window_deg;
    let mut folds = Vec::new();
    for block in &data.years {
        for i in 0..block.len() {
            let center = block.locs[i];
            let train: Vec<usize> = (0..block.len())
                .filter(|&j| {
                    let l = block.locs[j];
                    let in_window = (l.lat() - center.lat()).abs() <= half
                        && circular_lon_distance(l.lon(), center.lon()).unwrap_or(180.0) <= half;
                    !in_window
                })
                .collect();
            folds.push(Fold {
                key: format!("w{}:{i}", block.year),
                year: block.year,
                test: vec![i],
                train,
            });
        }
    }
    folds
}

/// Closed-form continuous ranked probability score of a Gaussian
/// predictive distribution against an outcome; degenerates to the absolute
/// error at zero spread.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("negative predictive sd {sigma}")));
    }
    if sigma == 0.0 {
        return Ok((y - mu).abs());
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// One scored prediction.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPrediction {
    pub loc: Location,
    pub y: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Per-cell aggregate of a score map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    /// Cell-center coordinates.
    pub lat: f64,
    pub lon: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    /// MAE averaged within cells of the scoring grid.
    pub cell_mae: Vec<CellScore>,
}

impl ScoreReport {
    /// Percent improvement of this report over a reference, per metric:
    /// `(ref - this) / ref * 100`.
    pub fn improvement_over(&self, reference: &ScoreReport) -> (f64, f64, f64) {
        let pct = |ours: f64, theirs: f64| (theirs - ours) / theirs * 100.0;
        (pct(self.mae, reference.mae), pct(self.rmse, reference.rmse), pct(self.crps, reference.crps))
    }
}

/// MAE, RMSE and mean CRPS with a per-cell MAE map at `cell_deg`
/// resolution.
pub fn score_predictions(preds: &[ScoredPrediction], cell_deg: f64) -> Result<ScoreReport> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if !(cell_deg > 0.0) {
        return Err(Error::invalid("cell size must be positive"));
    }
    let n = preds.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut crps_sum = 0.0;
    let mut cells: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for p in preds {
        let err = p.y - p.mu;
        abs_sum += err.abs();
        sq_sum += err * err;
        crps_sum += crps_gaussian(p.y, p.mu, p.sigma)?;
        let ci = ((p.loc.lat() + 90.0) / cell_deg).floor() as i64;
        let cj = ((p.loc.lon() + 180.0) / cell_deg).floor() as i64;
        let cell = cells.entry((ci, cj)).or_insert((0.0, 0));
        cell.0 += err.abs();
        cell.1 += 1;
    }
    let cell_mae = cells
        .into_iter()
        .map(|((ci, cj), (total, count))| CellScore {
            lat: -90.0 + (ci as f64 + 0.5) * cell_deg,
            lon: -180.0 + (cj as f64 + 0.5) * cell_deg,
            mae: total / count as f64,
            count,
        })
        .collect();
    Ok(ScoreReport {
        n: preds.len(),
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        crps: crps_sum / n,
        cell_mae,
    })
}

/// Radius-limited distance-weighted reference predictor. Weights are
/// `exp(-d^2 / scale^2)` within `radius`; the predictive sd is the weighted
/// standard deviation about the weighted mean, treating locations as
/// independent. Targets with no in-radius observation (or a single one,
/// whose weighted sd is degenerate) fall back to the training year's global
/// mean and/or sd.
pub fn levitus_predict(
    train_locs: &[Location],
    train_values: &DVector<f64>,
    targets: &[Location],
    radius_deg: f64,
    scale_deg: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(radius_deg > 0.0) || !(scale_deg > 0.0) {
        return Err(Error::invalid("radius and scale must be positive"));
    }
    if train_locs.len() != train_values.len() {
        return Err(Error::invalid("training lengths differ"));
    }
    let n = train_locs.len() as f64;
    let global_mean = train_values.iter().sum::<f64>() / n.max(1.0);
    let global_sd = if train_locs.len() > 1 {
        (train_values.iter().map(|v| (v - global_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(targets
        .iter()
        .map(|t| {
            let mut w_sum = 0.0;
            let mut wy_sum = 0.0;
            let mut members: Vec<(f64, f64)> = Vec::new();
            for (l, y) in train_locs.iter().zip(train_values.iter()) {
                let d = cyl_distance(t, l);
                if d <= radius_deg {
                    let w = (-d * d / (scale_deg * scale_deg)).exp();
                    w_sum += w;
                    wy_sum += w * y;
                    members.push((w, *y));
                }
            }
            if members.is_empty() {
                return (global_mean, global_sd);
            }
            let mu = wy_sum / w_sum;
            if members.len() == 1 {
                return (mu, global_sd);
            }
            let var = members.iter().map(|(w, y)| w * (y - mu).powi(2)).sum::<f64>() / w_sum;
            (mu, var.sqrt())
        })
        .collect())
}

/// Ordinary least-squares trend through yearly values with a t-based
/// confidence interval on the slope.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

pub fn ols_trend(yearly: &[(i32, f64)], level: f64) -> Result<TrendFit> {
    let n = yearly.len();
    if n < 3 {
        return Err(Error::invalid(format!("trend fit needs at least 3 years, got {n}")));
    }
    let xs: Vec<f64> = yearly.iter().map(|(y, _)| f64::from(*y)).collect();
    let ys: Vec<f64> = yearly.iter().map(|(_, v)| *v).collect();
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("degenerate design: all years equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let df = (n - 2) as f64;
    let se = (rss / df / sxx).sqrt();
    let t_dist = statrs::distribution::StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::numeric(format!("t distribution: {e}")))?;
    let (ci_lo, ci_hi, p_value) = if se == 0.0 {
        (slope, slope, if slope == 0.0 { 1.0 } else { 0.0 })
    } else {
        let t_crit = t_dist.inverse_cdf(0.5 * (1.0 + level));
        let t_stat = slope / se;
        let p = 2.0 * (1.0 - t_dist.cdf(t_stat.abs()));
        (slope - t_crit * se, slope + t_crit * se, p)
    };
    Ok(TrendFit { slope, intercept, slope_se: se, ci_lo, ci_hi, p_value })
}

/// Narrative helper: under a `1/sqrt(n)` error-convergence assumption, a
/// fractional score improvement `imp` is worth the same as growing the
/// observation count by `(1/(1-imp))^2 - 1`.
pub fn equivalent_observation_increase(fractional_improvement: f64) -> f64 {
    let keep = 1.0 - fractional_improvement;
    1.0 / (keep * keep) - 1.0
}

/// Model under cross-validation: a fitted Gaussian-process configuration or
/// the reference predictor.
pub enum ModelVariant<'a> {
    Gp { fields: &'a ParameterFieldSet, mode: ConvolutionMode, m: usize, grouping: bool },
    Levitus { radius_deg: f64, scale_deg: f64 },
}

fn fold_predictions(
    variant: &ModelVariant,
    block: &YearData,
    fold: &Fold,
) -> Result<Vec<ScoredPrediction>> {
    let train_locs: Vec<Location> = fold.train.iter().map(|&i| block.locs[i]).collect();
    let train_values =
        DVector::from_iterator(fold.train.len(), fold.train.iter().map(|&i| block.values[i]));
    let test_locs: Vec<Location> = fold.test.iter().map(|&i| block.locs[i]).collect();
    let test_values: Vec<f64> = fold.test.iter().map(|&i| block.values[i]).collect();

    match variant {
        ModelVariant::Levitus { radius_deg, scale_deg } => {
            let preds =
                levitus_predict(&train_locs, &train_values, &test_locs, *radius_deg, *scale_deg)?;
            Ok(preds
                .into_iter()
                .zip(test_locs)
                .zip(test_values)
                .map(|(((mu, sigma), loc), y)| ScoredPrediction { loc, y, mu, sigma })
                .collect())
        }
        ModelVariant::Gp { fields, mode, m, grouping } => {
            let train_params = fields.local_params(&train_locs)?;
            let train_sites: Vec<Site> = train_locs
                .iter()
                .zip(train_params)
                .map(|(l, kp)| Site { loc: *l, kp })
                .collect();
            let test_params = fields.local_params(&test_locs)?;
            let test_sites: Vec<Site> =
                test_locs.iter().zip(&test_params).map(|(l, kp)| Site { loc: *l, kp: *kp }).collect();
            let plan = VecchiaPlan::build(&train_locs, *m, *grouping)?;
            let ext = extend_for_prediction(&plan, &train_locs, &test_locs, *m, *grouping)?;
            let cov = PredictionCovariance { obs: &train_sites, pred: &test_sites, mode: *mode };
            let train_means = fields.mean_vector(&train_locs, block.year);
            let test_means = fields.mean_vector(&test_locs, block.year);
            let pred = vecchia_predict(&ext, &train_values, &train_means, &test_means, &cov)?;
            let latent_sd = pred.marginal_sd()?;
            Ok((0..test_locs.len())
                .map(|i| ScoredPrediction {
                    loc: test_locs[i],
                    y: test_values[i],
                    mu: pred.mean[i],
                    // Scores target observed values, so the predictive
                    // spread includes the nugget.
                    sigma: (latent_sd[i] * latent_sd[i] + test_params[i].sigma2).sqrt(),
                })
                .collect())
        }
    }
}

/// Cross-validate one variant over prepared folds at a fixed parameter
/// configuration. Folds run in parallel; predictions are concatenated in
/// fold order so scoring is deterministic.
pub fn run_cv(
    variant: &ModelVariant,
    data: &ObservationSet,
    folds: &[Fold],
    cell_deg: f64,
) -> Result<ScoreReport> {
    let per_fold: Vec<Result<Vec<ScoredPrediction>>> = folds
        .par_iter()
        .map(|fold| {
            let block = data
                .year(fold.year)
                .ok_or_else(|| Error::invalid(format!("fold year {} not in data", fold.year)))?;
            fold_predictions(variant, block, fold)
        })
        .collect();
    let mut all = Vec::new();
    for preds in per_fold {
        all.extend(preds?);
    }
    score_predictions(&all, cell_deg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldSpec, Hyperparams, KnotGrid, Link};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn loc(lat: f64, lon: f64) -> Location {
        Location::new(lat, lon).unwrap()
    }

    fn set_with(rows: &[(i32, f64, f64, f64, &str)]) -> ObservationSet {
        let mut set = ObservationSet::default();
        for (year, lat, lon, v, id) in rows {
            set.push(*year, loc(*lat, *lon), *v, id.to_string());
        }
        set
    }

    #[test]
    fn lofo_folds_group_floats() {
        let set = set_with(&[
            (2010, 0.0, 0.0, 1.0, "a"),
            (2010, 0.5, 0.0, 2.0, "a"),
            (2010, 1.0, 0.0, 3.0, "a"),
            (2010, 40.0, 10.0, 4.0, "b"),
            (2011, -5.0, 7.0, 5.0, "a"),
        ]);
        let folds = lofo_folds(&set).unwrap();
        assert_eq!(folds.len(), 3); // (2010,a), (2010,b), (2011,a)
        let f_a = folds.iter().find(|f| f.year == 2010 && f.key == "a").unwrap();
        assert_eq!(f_a.test, vec![0, 1, 2]);
        assert_eq!(f_a.train, vec![3]);
        // Disjoint and exhaustive within the year.
        for f in &folds {
            let block = set.year(f.year).unwrap();
            let mut all: Vec<usize> = f.test.iter().chain(f.train.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..block.len()).collect::<Vec<_>>());
        }
        // Single-profile floats reduce LOFO to leave-one-out.
        let singles = set_with(&[(2010, 0.0, 0.0, 1.0, "x"), (2010, 5.0, 0.0, 2.0, "y")]);
        let folds = lofo_folds(&singles).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds.iter().all(|f| f.test.len() == 1));
        // Missing ids are an error.
        let missing = set_with(&[(2010, 0.0, 0.0, 1.0, "")]);
        assert!(lofo_folds(&missing).is_err());
    }

    #[test]
    fn windowed_folds_exclude_neighbors() {
        let set = set_with(&[
            (2010, 0.0, 0.0, 1.0, "a"),
            (2010, 0.4, 0.4, 2.0, "b"),  // inside the 2x2 window of the first
            (2010, 0.0, 179.5, 3.0, "c"),
            (2010, 0.0, -179.9, 4.0, "d"), // wraps to within 0.6 deg of c
            (2010, 30.0, 0.0, 5.0, "e"),
        ]);
        let folds = windowed_folds(&set, 2.0);
        assert_eq!(folds.len(), 5);
        let f0 = &folds[0];
        assert_eq!(f0.test, vec![0]);
        assert!(!f0.train.contains(&1));
        assert!(f0.train.contains(&2));
        assert!(f0.train.contains(&4));
        // Longitude wraparound: c and d exclude each other.
        let f2 = &folds[2];
        assert!(!f2.train.contains(&3));
        // Isolated observation trains on everything else.
        let f4 = &folds[4];
        assert_eq!(f4.train.len(), 4);
    }

    #[test]
    fn crps_reference_values() {
        // Closed form at the center: (sqrt(2) - 1) / sqrt(pi).
        let v = crps_gaussian(0.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(v, (2.0f64.sqrt() - 1.0) / std::f64::consts::PI.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(v, 0.233_694_977_255_108_7, max_relative = 1e-12);

        // Point forecast.
        assert_relative_eq!(crps_gaussian(2.0, 0.5, 0.0).unwrap(), 1.5);
        assert!(crps_gaussian(0.0, 0.0, -1.0).is_err());

        // Scale equivariance.
        let mut rng = ChaCha20Rng::seed_from_u64(81);
        for _ in 0..50 {
            let y: f64 = rng.random_range(-3.0..3.0);
            let mu: f64 = rng.random_range(-3.0..3.0);
            let s: f64 = rng.random_range(0.1..2.0);
            let a: f64 = rng.random_range(0.1..5.0);
            assert_relative_eq!(
                crps_gaussian(a * y, a * mu, a * s).unwrap(),
                a * crps_gaussian(y, mu, s).unwrap(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn crps_matches_monte_carlo_definition() {
        // E|X - y| - 0.5 E|X - X'| by simulation.
        let mut rng = ChaCha20Rng::seed_from_u64(82);
        for _ in 0..5 {
            let mu: f64 = rng.random_range(-1.0..1.0);
            let sigma: f64 = rng.random_range(0.05..0.2);
            let y = mu + sigma * rng.random_range(-3.0..3.0);
            let n = 1_000_000;
            let mut term1 = 0.0;
            let mut term2 = 0.0;
            for _ in 0..n {
                let x1 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                let x2 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                term1 += (x1 - y).abs();
                term2 += (x1 - x2).abs();
            }
            let mc = term1 / n as f64 - 0.5 * term2 / n as f64;
            assert!(
                (crps_gaussian(y, mu, sigma).unwrap() - mc).abs() < 1e-3,
                "closed form vs MC at mu={mu} sigma={sigma}"
            );
        }
    }

    #[test]
    fn score_report_basics() {
        let p = |lat: f64, y: f64, mu: f64| ScoredPrediction { loc: loc(lat, 0.0), y, mu, sigma: 1.0 };
        // Perfect predictions.
        let perfect = vec![p(0.0, 3.0, 3.0), p(10.0, -1.0, -1.0)];
        let r = score_predictions(&perfect, 5.0).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);

        // Errors +1 and -1.
        let pm = vec![p(0.0, 1.0, 0.0), p(0.0, -1.0, 0.0)];
        let r = score_predictions(&pm, 5.0).unwrap();
        assert_relative_eq!(r.mae, 1.0);
        assert_relative_eq!(r.rmse, 1.0);
        assert_eq!(r.cell_mae.len(), 1);
        assert_eq!(r.cell_mae[0].count, 2);

        // Single pair reduces to the univariate formulas.
        let single = vec![ScoredPrediction { loc: loc(0.0, 0.0), y: 2.0, mu: 0.5, sigma: 0.7 }];
        let r = score_predictions(&single, 5.0).unwrap();
        assert_relative_eq!(r.mae, 1.5);
        assert_relative_eq!(r.rmse, 1.5);
        assert_relative_eq!(r.crps, crps_gaussian(2.0, 0.5, 0.7).unwrap());

        assert!(score_predictions(&[], 5.0).is_err());
    }

    #[test]
    fn score_aggregation_is_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(83);
        let mut preds: Vec<ScoredPrediction> = (0..200)
            .map(|_| ScoredPrediction {
                loc: loc(rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0)),
                y: rng.random_range(-5.0..5.0),
                mu: rng.random_range(-5.0..5.0),
                sigma: rng.random_range(0.1..2.0),
            })
            .collect();
        let a = score_predictions(&preds, 5.0).unwrap();
        preds.shuffle(&mut rng);
        let b = score_predictions(&preds, 5.0).unwrap();
        assert_relative_eq!(a.mae, b.mae, max_relative = 1e-12);
        assert_relative_eq!(a.rmse, b.rmse, max_relative = 1e-12);
        assert_relative_eq!(a.crps, b.crps, max_relative = 1e-12);
    }

    #[test]
    fn levitus_hand_cases() {
        // All observations equidistant: plain average.
        let train = vec![loc(1.0, 0.0), loc(-1.0, 0.0), loc(0.0, 1.0)];
        let values = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        let preds = levitus_predict(&train, &values, &[loc(0.0, 0.0)], 8.0, 4.0).unwrap();
        assert_relative_eq!(preds[0].0, 3.0, max_relative = 1e-12);

        // Hand-computed 3-point case with unequal distances.
        let train = vec![loc(0.0, 0.0), loc(3.0, 0.0), loc(0.0, 6.0)];
        let values = DVector::from_vec(vec![10.0, 20.0, 40.0]);
        let target = loc(1.0, 0.0);
        let d = [1.0, 2.0, (1.0f64 + 36.0).sqrt()];
        let w: Vec<f64> = d.iter().map(|d| (-d * d / 16.0).exp()).collect();
        let w_sum: f64 = w.iter().sum();
        let mu = (w[0] * 10.0 + w[1] * 20.0 + w[2] * 40.0) / w_sum;
        let var = (w[0] * (10.0 - mu).powi(2) + w[1] * (20.0 - mu).powi(2) + w[2] * (40.0 - mu).powi(2)) / w_sum;
        let preds = levitus_predict(&train, &values, &[target], 8.0, 4.0).unwrap();
        assert_relative_eq!(preds[0].0, mu, max_relative = 1e-12);
        assert_relative_eq!(preds[0].1, var.sqrt(), max_relative = 1e-12);

        // Single in-radius observation: mean is that value, sd falls back
        // to the global training sd.
        let train = vec![loc(0.0, 0.0), loc(60.0, 90.0)];
        let values = DVector::from_vec(vec![5.0, 9.0]);
        let preds = levitus_predict(&train, &values, &[loc(0.5, 0.0)], 8.0, 4.0).unwrap();
        assert_relative_eq!(preds[0].0, 5.0);
        let global_sd = ((5.0f64 - 7.0).powi(2) + (9.0f64 - 7.0).powi(2)) / 1.0;
        assert_relative_eq!(preds[0].1, global_sd.sqrt());

        // No in-radius observation: global mean and sd.
        let preds = levitus_predict(&train, &values, &[loc(-60.0, -90.0)], 8.0, 4.0).unwrap();
        assert_relative_eq!(preds[0].0, 7.0);

        // The predictive sd ignores the target position given the members.
        let t1 = loc(0.2, 0.0);
        let preds = levitus_predict(&train, &values, &[t1], 8.0, 4.0).unwrap();
        assert_relative_eq!(preds[0].1, global_sd.sqrt());
    }

    #[test]
    fn ols_trend_cases() {
        // Exact line: zero-width interval.
        let yearly: Vec<(i32, f64)> = (2007..=2012).map(|y| (y, 2.0 * f64::from(y) + 1.0)).collect();
        let fit = ols_trend(&yearly, 0.95).unwrap();
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-10);
        assert_relative_eq!(fit.ci_lo, fit.ci_hi, max_relative = 1e-10);
        assert_eq!(fit.p_value, 0.0);

        // Two points are insufficient.
        assert!(ols_trend(&[(2007, 1.0), (2008, 2.0)], 0.95).is_err());

        // Under the null the p-values spread out: a crude sanity check
        // that both tails occur over replicates.
        let mut rng = ChaCha20Rng::seed_from_u64(84);
        let mut low = 0;
        let mut high = 0;
        for _ in 0..200 {
            let yearly: Vec<(i32, f64)> =
                (2007..=2016).map(|y| (y, rng.sample::<f64, _>(StandardNormal))).collect();
            let fit = ols_trend(&yearly, 0.95).unwrap();
            if fit.p_value < 0.5 {
                low += 1;
            } else {
                high += 1;
            }
        }
        assert!(low > 60 && high > 60, "p-values look degenerate: {low} vs {high}");
    }

    #[test]
    fn equivalent_observation_increase_matches_quoted_scale() {
        // An 11% error reduction is worth about a 26% larger network under
        // 1/sqrt(n) convergence.
        let inc = equivalent_observation_increase(0.112);
        assert!((0.2..0.3).contains(&inc), "{inc}");
        assert_relative_eq!(equivalent_observation_increase(0.0), 0.0);
    }

    fn smooth_fields() -> ParameterFieldSet {
        let spec = |mu: f64, link: Link| FieldSpec {
            hyper: Hyperparams::new(mu, 0.4, 30.0, link).unwrap(),
            constrained: false,
        };
        ParameterFieldSet::new(
            KnotGrid::from_locations(vec![loc(0.0, -30.0), loc(0.0, 30.0)]).unwrap(),
            [
                spec((2.0f64).ln(), Link::Exponential),
                spec((60.0f64).ln(), Link::Exponential),
                spec((90.0f64).ln(), Link::Exponential),
                spec((0.05f64).ln(), Link::Exponential),
                spec(5.0, Link::Identity),
                spec(0.1, Link::Identity),
            ],
        )
        .unwrap()
    }

    #[test]
    fn cv_composes_levitus_and_gp() {
        let fields = smooth_fields();
        let mut rng = ChaCha20Rng::seed_from_u64(85);
        let mut set = ObservationSet::default();
        for f in 0..12 {
            let lat: f64 = rng.random_range(-40.0..40.0);
            let lon: f64 = rng.random_range(-90.0..90.0);
            for k in 0..3 {
                set.push(
                    2010,
                    loc(lat + 0.3 * f64::from(k), lon),
                    rng.random_range(0.0..10.0),
                    format!("f{f}"),
                );
            }
        }
        let folds = lofo_folds(&set).unwrap();
        assert_eq!(folds.len(), 12);

        // The Levitus variant reproduces levitus_predict fold by fold.
        let report = run_cv(
            &ModelVariant::Levitus { radius_deg: 8.0, scale_deg: 4.0 },
            &set,
            &folds,
            5.0,
        )
        .unwrap();
        let block = set.year(2010).unwrap();
        let fold = &folds[0];
        let train_locs: Vec<Location> = fold.train.iter().map(|&i| block.locs[i]).collect();
        let train_vals =
            DVector::from_iterator(fold.train.len(), fold.train.iter().map(|&i| block.values[i]));
        let test_locs: Vec<Location> = fold.test.iter().map(|&i| block.locs[i]).collect();
        let direct = levitus_predict(&train_locs, &train_vals, &test_locs, 8.0, 4.0).unwrap();
        // Cross-check one value through the aggregate MAE contribution.
        assert!(report.n == 36 && direct.len() == 3);

        // GP variant with a duplicated training point and zero nugget
        // predicts that point exactly.
        let mut dup = ObservationSet::default();
        let mut fields_nonugget = fields.clone();
        let knots = fields_nonugget.knots().len();
        let b = fields_nonugget
            .basis_from_knot_values(
                crate::fields::FieldName::NoiseRatio,
                &DVector::from_element(knots, (1e-14f64).ln()),
            )
            .unwrap();
        fields_nonugget.set_basis(crate::fields::FieldName::NoiseRatio, b).unwrap();
        for i in 0..6 {
            dup.push(2010, loc(f64::from(i) * 7.0 - 20.0, 10.0), f64::from(i), format!("g{i}"));
        }
        // Duplicate observation 2 under a different float id.
        dup.push(2010, loc(-6.0, 10.0), 2.0, "dup".into());
        let folds = vec![Fold { key: "dup".into(), year: 2010, test: vec![6], train: (0..6).collect() }];
        let report = run_cv(
            &ModelVariant::Gp {
                fields: &fields_nonugget,
                mode: ConvolutionMode::GaussianApprox,
                m: 10,
                grouping: true,
            },
            &dup,
            &folds,
            5.0,
        )
        .unwrap();
        assert!(report.mae < 1e-6, "duplicated point not interpolated: {}", report.mae);
    }

    #[test]
    fn cv_predictive_sd_includes_nugget() {
        let fields = smooth_fields();
        let mut set = ObservationSet::default();
        let mut rng = ChaCha20Rng::seed_from_u64(86);
        for i in 0..10 {
            set.push(
                2010,
                loc(rng.random_range(-40.0..40.0), rng.random_range(-90.0..90.0)),
                rng.random_range(0.0..10.0),
                format!("f{i}"),
            );
        }
        let folds = lofo_folds(&set).unwrap();
        let block = set.year(2010).unwrap();
        for fold in &folds {
            let preds = fold_predictions(
                &ModelVariant::Gp {
                    fields: &fields,
                    mode: ConvolutionMode::GaussianApprox,
                    m: 9,
                    grouping: true,
                },
                block,
                fold,
            )
            .unwrap();
            for p in preds {
                let sigma2 = fields.local_params(&[p.loc]).unwrap()[0].sigma2;
                assert!(p.sigma * p.sigma >= sigma2 - 1e-12);
            }
        }
    }
}
