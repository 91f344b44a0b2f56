//! Moving-window initialization: local stationary MLEs on overlapping
//! windows, hyperparameter estimation from the window outputs, and kriging
//! of the window estimates onto the knots to form the sampler's starting
//! configuration. Everything here is deterministic given the data and
//! configuration.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Mask, ObservationSet};
use crate::dense::cholesky_loglik;
use crate::error::{Error, Result};
use crate::fields::{
    FieldName, FieldSpec, Hyperparams, KnotGrid, Link, ParameterFieldSet, REFERENCE_YEAR,
};
use crate::geometry::{circular_lon_distance, cyl_distance, Location};
use crate::optimize::{golden_section_min, nelder_mead};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InitConfig {
    /// Window edge length in degrees.
    pub window_deg: f64,
    /// Spacing of window centers in degrees.
    pub grid_deg: f64,
    /// Windows with fewer observations are flagged unconverged.
    pub min_obs: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { window_deg: 20.0, grid_deg: 6.0, min_obs: 10 }
    }
}

/// Local stationary MLE at one window center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowEstimate {
    pub center: Location,
    pub theta_lat: f64,
    pub theta_lon: f64,
    pub phi: f64,
    pub sigma2: f64,
    pub mu: f64,
    pub beta: f64,
    pub n_obs: usize,
    pub converged: bool,
}

/// One observation handed to the local fit: location, year, value.
pub type LocalObs = (Location, i32, f64);

/// Negative log-likelihood of the local anisotropic stationary model with
/// per-year independence. Parameters: (ln theta_lat, ln theta_lon, ln phi,
/// ln sigma2, mu, beta).
fn local_nll(params: &[f64], obs: &[LocalObs]) -> f64 {
    let theta_lat = params[0].exp();
    let theta_lon = params[1].exp();
    let phi = params[2].exp();
    let sigma2 = params[3].exp();
    let mu = params[4];
    let beta = params[5];
    if !theta_lat.is_finite() || !theta_lon.is_finite() || !phi.is_finite() || !sigma2.is_finite() {
        return f64::INFINITY;
    }
    let mut years: Vec<i32> = obs.iter().map(|o| o.1).collect();
    years.sort_unstable();
    years.dedup();
    let mut total = 0.0;
    for year in years {
        let block: Vec<&LocalObs> = obs.iter().filter(|o| o.1 == year).collect();
        let n = block.len();
        let mut cov = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    cov[(a, a)] = phi + sigma2;
                } else {
                    let dlat = block[a].0.lat() - block[b].0.lat();
                    let dlon =
                        circular_lon_distance(block[a].0.lon(), block[b].0.lon()).unwrap_or(180.0);
                    cov[(a, b)] = phi
                        * (-dlat * dlat / (2.0 * theta_lat) - dlon * dlon / (2.0 * theta_lon)).exp();
                }
            }
        }
        let dt = f64::from(year - REFERENCE_YEAR);
        let r = DVector::from_fn(n, |i, _| block[i].2 - mu - beta * dt);
        match cholesky_loglik(&r, &cov) {
            Ok(ll) => total -= ll,
            Err(_) => return f64::INFINITY,
        }
    }
    total
}

/// Maximize the local stationary likelihood with a three-start simplex
/// search seeded at moment heuristics. Returns `None` when every start
/// fails to converge.
pub fn local_stationary_mle(obs: &[LocalObs], window_deg: f64) -> Option<WindowEstimate> {
    if obs.is_empty() {
        return None;
    }
    let n = obs.len() as f64;
    let mean = obs.iter().map(|o| o.2).sum::<f64>() / n;
    let var = (obs.iter().map(|o| (o.2 - mean).powi(2)).sum::<f64>() / n).max(1e-12);
    // Crude trend from per-year means.
    let mut years: Vec<i32> = obs.iter().map(|o| o.1).collect();
    years.sort_unstable();
    years.dedup();
    let beta0 = if years.len() >= 2 {
        let pts: Vec<(f64, f64)> = years
            .iter()
            .map(|&y| {
                let vals: Vec<f64> =
                    obs.iter().filter(|o| o.1 == y).map(|o| o.2).collect();
                (f64::from(y - REFERENCE_YEAR), vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let xm = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let ym = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
        if sxx > 0.0 {
            pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum::<f64>() / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };

    let w = window_deg;
    let starts = [
        [(w / 4.0_f64).powi(2).ln(), (w / 4.0_f64).powi(2).ln(), (0.5 * var).ln(), (0.5 * var).ln(), mean, beta0],
        [(w / 8.0_f64).powi(2).ln(), (w / 8.0_f64).powi(2).ln(), (0.9 * var).ln(), (0.1 * var).ln(), mean, beta0],
        [(w / 2.0_f64).powi(2).ln(), (w / 2.0_f64).powi(2).ln(), (0.25 * var).ln(), (0.75 * var).ln(), mean, 0.0],
    ];
    let step = [0.7, 0.7, 0.7, 0.7, var.sqrt().max(1e-6), 0.1 * var.sqrt().max(1e-6)];

    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for start in &starts {
        let r = nelder_mead(|p| local_nll(p, obs), start, &step, 4000, 1e-10);
        if !r.value.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |(v, _, _)| r.value < *v) {
            best = Some((r.value, r.x, r.converged));
        }
    }
    let (_, x, converged) = best?;
    let center = obs[0].0;
    Some(WindowEstimate {
        center,
        theta_lat: x[0].exp(),
        theta_lon: x[1].exp(),
        phi: x[2].exp(),
        sigma2: x[3].exp(),
        mu: x[4],
        beta: x[5],
        n_obs: obs.len(),
        converged,
    })
}

/// Run the moving-window estimation: a window of `window_deg` around each
/// center of a `grid_deg` grid (longitude wraps), pooling all years.
/// Windows with too few observations or failed optimizations come back
/// flagged unconverged and are excluded downstream.
pub fn moving_window_mle(
    data: &ObservationSet,
    cfg: &InitConfig,
    mask: Option<&Mask>,
) -> Result<Vec<WindowEstimate>> {
    if cfg.min_obs < 1 {
        return Err(Error::invalid("min_obs must be positive"));
    }
    let centers = KnotGrid::regular(cfg.grid_deg, cfg.grid_deg, mask)?;
    let half = 0.5 * cfg.window_deg;
    let all: Vec<LocalObs> = data
        .years
        .iter()
        .flat_map(|b| (0..b.len()).map(move |i| (b.locs[i], b.year, b.values[i])))
        .collect();

    Ok(centers
        .locations()
        .par_iter()
        .map(|center| {
            let in_window: Vec<LocalObs> = all
                .iter()
                .filter(|(l, _, _)| {
                    (l.lat() - center.lat()).abs() <= half
                        && circular_lon_distance(l.lon(), center.lon()).unwrap_or(180.0) <= half
                })
                .copied()
                .collect();
            let unconverged = WindowEstimate {
                center: *center,
                theta_lat: f64::NAN,
                theta_lon: f64::NAN,
                phi: f64::NAN,
                sigma2: f64::NAN,
                mu: f64::NAN,
                beta: f64::NAN,
                n_obs: in_window.len(),
                converged: false,
            };
            if in_window.len() < cfg.min_obs {
                return unconverged;
            }
            match local_stationary_mle(&in_window, cfg.window_deg) {
                Some(fit) => WindowEstimate { center: *center, ..fit },
                None => unconverged,
            }
        })
        .collect())
}

/// Window-estimate table as CSV.
pub fn write_window_csv(estimates: &[WindowEstimate], w: &mut impl Write) -> Result<()> {
    writeln!(w, "lat,lon,n_obs,converged,theta_lat,theta_lon,phi,sigma2,mu,beta")?;
    for e in estimates {
        writeln!(
            w,
            "{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            e.center.lat(),
            e.center.lon(),
            e.n_obs,
            e.converged,
            e.theta_lat,
            e.theta_lon,
            e.phi,
            e.sigma2,
            e.mu,
            e.beta
        )?;
    }
    Ok(())
}

/// Profile negative log-likelihood of the exponential-correlation GP over
/// link-scale window values, profiling out the mean (unless pinned) and
/// the variance analytically; only the range is searched.
fn hyper_profile_nll(theta: f64, centers: &[Location], values: &DVector<f64>, pin_mean: bool) -> f64 {
    let n = centers.len();
    let mut corr = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            corr[(a, b)] = (-cyl_distance(&centers[a], &centers[b]) / theta).exp();
        }
    }
    let Some(chol) = nalgebra::Cholesky::new(corr) else {
        return f64::INFINITY;
    };
    let ones = DVector::from_element(n, 1.0);
    let r_inv_v = chol.solve(values);
    let mu = if pin_mean {
        0.0
    } else {
        let r_inv_1 = chol.solve(&ones);
        ones.dot(&r_inv_v) / ones.dot(&r_inv_1)
    };
    let centered = values.map(|v| v - mu);
    let quad = centered.dot(&chol.solve(&centered));
    if quad <= 0.0 {
        return f64::INFINITY;
    }
    let s2 = quad / n as f64;
    let log_det: f64 = (0..n).map(|i| 2.0 * chol.l_dirty()[(i, i)].ln()).sum();
    0.5 * (n as f64 * s2.ln() + log_det + n as f64)
}

fn hyper_mean_sd(theta: f64, centers: &[Location], values: &DVector<f64>, pin_mean: bool) -> (f64, f64) {
    let n = centers.len();
    let mut corr = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            corr[(a, b)] = (-cyl_distance(&centers[a], &centers[b]) / theta).exp();
        }
    }
    let chol = nalgebra::Cholesky::new(corr).expect("profiled range keeps the matrix PD");
    let ones = DVector::from_element(n, 1.0);
    let mu = if pin_mean {
        0.0
    } else {
        let r_inv_1 = chol.solve(&ones);
        ones.dot(&chol.solve(values)) / ones.dot(&r_inv_1)
    };
    let centered = values.map(|v| v - mu);
    let s2 = centered.dot(&chol.solve(&centered)) / n as f64;
    (mu, s2.sqrt())
}

const HYPER_RANGE_LO: f64 = 0.5;
const HYPER_RANGE_HI: f64 = 300.0;

/// Hyperparameters for all six fields from the converged window estimates:
/// per field, the ML fit of an exponential-correlation GP on link-scale
/// window values. The trend hyper-mean is pinned to zero and the mean and
/// trend fields share one range, fit jointly on their stacked profiles.
/// A degenerate fit (constant values) reports the boundary with a floored
/// sd.
pub fn fit_hyperparameters(estimates: &[WindowEstimate]) -> Result<[Hyperparams; 6]> {
    let converged: Vec<&WindowEstimate> = estimates.iter().filter(|e| e.converged).collect();
    if converged.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 converged windows, got {}",
            converged.len()
        )));
    }
    let centers: Vec<Location> = converged.iter().map(|e| e.center).collect();
    let value_of = |name: FieldName, e: &WindowEstimate| -> f64 {
        match name {
            FieldName::Phi => e.phi.ln(),
            FieldName::ThetaLat => e.theta_lat.ln(),
            FieldName::ThetaLon => e.theta_lon.ln(),
            FieldName::NoiseRatio => (e.sigma2 / e.phi).ln(),
            FieldName::Mu2007 => e.mu,
            FieldName::Trend => e.beta,
        }
    };

    let fit_single = |name: FieldName, pin_mean: bool| -> (f64, f64, f64) {
        let values = DVector::from_iterator(centers.len(), converged.iter().map(|e| value_of(name, e)));
        let ln_theta = golden_section_min(
            |lt| hyper_profile_nll(lt.exp(), &centers, &values, pin_mean),
            HYPER_RANGE_LO.ln(),
            HYPER_RANGE_HI.ln(),
            1e-8,
        );
        let theta = ln_theta.exp();
        let (mu, sd) = hyper_mean_sd(theta, &centers, &values, pin_mean);
        (mu, sd, theta)
    };

    let mut out: Vec<Hyperparams> = Vec::with_capacity(6);
    for name in [FieldName::Phi, FieldName::ThetaLat, FieldName::ThetaLon, FieldName::NoiseRatio] {
        let (mu, sd, theta) = fit_single(name, false);
        out.push(Hyperparams::new(mu, sd.max(1e-9), theta, Link::Exponential)?);
    }

    // Mean and trend share a range: maximize the summed profiles.
    let mu_values =
        DVector::from_iterator(centers.len(), converged.iter().map(|e| value_of(FieldName::Mu2007, e)));
    let beta_values =
        DVector::from_iterator(centers.len(), converged.iter().map(|e| value_of(FieldName::Trend, e)));
    let ln_theta = golden_section_min(
        |lt| {
            hyper_profile_nll(lt.exp(), &centers, &mu_values, false)
                + hyper_profile_nll(lt.exp(), &centers, &beta_values, true)
        },
        HYPER_RANGE_LO.ln(),
        HYPER_RANGE_HI.ln(),
        1e-8,
    );
    let theta = ln_theta.exp();
    let (mu_mu, mu_sd) = hyper_mean_sd(theta, &centers, &mu_values, false);
    let (_, beta_sd) = hyper_mean_sd(theta, &centers, &beta_values, true);
    out.push(Hyperparams::new(mu_mu, mu_sd.max(1e-9), theta, Link::Identity)?);
    out.push(Hyperparams::new(0.0, beta_sd.max(1e-9), theta, Link::Identity)?);

    Ok(out.try_into().expect("six hyperparameter sets"))
}

/// Krige link-scale window values onto the knots (noiseless interpolation
/// with a small relative jitter), then invert the basis map so the field
/// reproduces the kriged knot values exactly.
pub fn krige_initial_basis(
    estimates: &[WindowEstimate],
    fields: &ParameterFieldSet,
    name: FieldName,
) -> Result<DVector<f64>> {
    let converged: Vec<&WindowEstimate> = estimates.iter().filter(|e| e.converged).collect();
    if converged.is_empty() {
        return Err(Error::invalid("no converged windows to krige from"));
    }
    let hyper = fields.hyper(name);
    let centers: Vec<Location> = converged.iter().map(|e| e.center).collect();
    let values = DVector::from_iterator(
        centers.len(),
        converged.iter().map(|e| match name {
            FieldName::Phi => e.phi.ln(),
            FieldName::ThetaLat => e.theta_lat.ln(),
            FieldName::ThetaLon => e.theta_lon.ln(),
            FieldName::NoiseRatio => (e.sigma2 / e.phi).ln(),
            FieldName::Mu2007 => e.mu,
            FieldName::Trend => e.beta,
        }),
    );
    let n = centers.len();
    let mut corr = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            corr[(a, b)] = (-cyl_distance(&centers[a], &centers[b]) / hyper.range).exp();
        }
    }
    let jitter = 1e-8 * corr.diagonal().mean();
    for i in 0..n {
        corr[(i, i)] += jitter;
    }
    let chol = nalgebra::Cholesky::new(corr)
        .ok_or_else(|| Error::numeric("window correlation matrix is not positive definite"))?;
    let weights = chol.solve(&values.map(|v| v - hyper.mu));
    let knots = fields.knots().locations();
    let knot_values = DVector::from_fn(knots.len(), |k, _| {
        let mut acc = hyper.mu;
        for (c, w) in centers.iter().zip(weights.iter()) {
            acc += (-cyl_distance(&knots[k], c) / hyper.range).exp() * w;
        }
        acc
    });
    fields.basis_from_knot_values(name, &knot_values)
}

/// The full initialization bundle.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub fields: ParameterFieldSet,
    pub hypers: [Hyperparams; 6],
    pub estimates: Vec<WindowEstimate>,
}

/// Windows, hyperparameters and kriged starting bases in one pass.
pub fn initialize(
    data: &ObservationSet,
    cfg: &InitConfig,
    knot_lat_spacing: f64,
    knot_lon_spacing: f64,
    mask: Option<&Mask>,
) -> Result<Initialization> {
    let estimates = moving_window_mle(data, cfg, mask)?;
    let hypers = fit_hyperparameters(&estimates)?;
    let knots = KnotGrid::regular(knot_lat_spacing, knot_lon_spacing, mask)?;
    let specs: [FieldSpec; 6] = std::array::from_fn(|i| FieldSpec { hyper: hypers[i], constrained: false });
    let mut fields = ParameterFieldSet::new(knots, specs)?;
    for name in FieldName::ALL {
        let basis = krige_initial_basis(&estimates, &fields, name)?;
        fields.set_basis(name, basis)?;
    }
    Ok(Initialization { fields, hypers, estimates })
}
