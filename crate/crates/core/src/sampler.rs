//! Adaptive Metropolis-within-Gibbs sampler over the field bases.
//!
//! Per iteration: random-walk Metropolis updates for the four covariance
//! fields in a fixed order, an exact joint Gibbs draw for the mean and
//! trend bases, then (pre-burn-in, every `adapt_batch` iterations) the
//! diminishing proposal-scale adaptation targeting a 0.44 acceptance rate.
//! One chain is strictly sequential; per-year likelihood blocks evaluate
//! concurrently inside each step.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::fields::{FieldName, ParameterFieldSet, REFERENCE_YEAR};
use crate::kernels::{ConvolutionMode, LocalKernelParams, Site};
use crate::ohc::{ohc_posterior_vecchia, IntegrationGrid, OhcEstimate};
use crate::util::stream_id;
use crate::vecchia::{
    build_factor, vecchia_loglik, PredictionExtension, SiteCovariance, SparseFactor, VecchiaPlan,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    /// Desired Metropolis acceptance rate.
    pub target_acceptance: f64,
    /// Iterations per adaptation batch.
    pub adapt_batch: usize,
    /// Integrated-heat-content summaries every this many iterations.
    pub ohc_every: usize,
    /// Sample retention stride.
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk standard deviation; zero picks
    /// `2.38 / sqrt(basis length)` per field.
    pub initial_proposal_sd: f64,
    pub mode: ConvolutionMode,
    /// Write a resumable checkpoint every this many iterations (0 = off).
    pub checkpoint_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 20_000,
            burn_in: 5_000,
            target_acceptance: 0.44,
            adapt_batch: 50,
            ohc_every: 10,
            thin: 10,
            seed: 1,
            initial_proposal_sd: 0.0,
            mode: ConvolutionMode::GaussianApprox,
            checkpoint_every: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        if self.adapt_batch == 0 || self.thin == 0 || self.ohc_every == 0 {
            return Err(Error::invalid("adapt_batch, thin and ohc_every must be positive"));
        }
        Ok(())
    }
}

/// Symmetric random-walk proposal: independent Gaussian perturbations of
/// every basis entry.
pub fn propose_basis(b: &DVector<f64>, sd: f64, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(b.len(), |i, _| b[i] + sd * rng.sample::<f64, _>(StandardNormal))
}

/// Immutable per-run context: data, plans and the cached kriging matrices
/// mapping each field's basis to link-scale values at the observation
/// locations (hyperparameters are fixed during sampling).
pub struct SamplerProblem {
    pub data: ObservationSet,
    pub plans: Vec<VecchiaPlan>,
    pub mode: ConvolutionMode,
    /// `kriging[year_idx][field_idx]`: n_obs x basis_len, hyper sd folded in.
    kriging: Vec<Vec<DMatrix<f64>>>,
}

impl SamplerProblem {
    pub fn new(
        data: ObservationSet,
        plans: Vec<VecchiaPlan>,
        mode: ConvolutionMode,
        fields: &ParameterFieldSet,
    ) -> Result<Self> {
        if plans.len() != data.years.len() {
            return Err(Error::invalid(format!(
                "{} plans for {} years",
                plans.len(),
                data.years.len()
            )));
        }
        for (block, plan) in data.years.iter().zip(&plans) {
            if plan.len() != block.len() {
                return Err(Error::invalid(format!("plan size mismatch in year {}", block.year)));
            }
        }
        let kriging = data
            .years
            .iter()
            .map(|block| {
                FieldName::ALL
                    .iter()
                    .map(|&f| fields.kriging_matrix(f, &block.locs))
                    .collect()
            })
            .collect();
        Ok(Self { data, plans, mode, kriging })
    }

    fn link_scale(&self, y: usize, name: FieldName, fields: &ParameterFieldSet) -> DVector<f64> {
        let a = &self.kriging[y][name.index()];
        let mut out = a * fields.basis(name);
        out.add_scalar_mut(fields.hyper(name).mu);
        out
    }

    fn local_params(
        &self,
        y: usize,
        fields: &ParameterFieldSet,
    ) -> Result<Vec<LocalKernelParams>> {
        let theta_lat = self.link_scale(y, FieldName::ThetaLat, fields);
        let theta_lon = self.link_scale(y, FieldName::ThetaLon, fields);
        let phi = self.link_scale(y, FieldName::Phi, fields);
        let ratio = self.link_scale(y, FieldName::NoiseRatio, fields);
        (0..theta_lat.len())
            .map(|i| {
                let phi_v = phi[i].exp();
                LocalKernelParams::new(
                    theta_lat[i].exp(),
                    theta_lon[i].exp(),
                    phi_v,
                    ratio[i].exp() * phi_v,
                )
            })
            .collect()
    }

    fn sites(&self, y: usize, fields: &ParameterFieldSet) -> Result<Vec<Site>> {
        let params = self.local_params(y, fields)?;
        Ok(self.data.years[y]
            .locs
            .iter()
            .zip(params)
            .map(|(l, kp)| Site { loc: *l, kp })
            .collect())
    }

    fn means(&self, y: usize, fields: &ParameterFieldSet) -> DVector<f64> {
        let dt = f64::from(self.data.years[y].year - REFERENCE_YEAR);
        let mu = self.link_scale(y, FieldName::Mu2007, fields);
        let beta = self.link_scale(y, FieldName::Trend, fields);
        mu + beta * dt
    }

    /// Vecchia log-likelihood summed over years (fixed year order).
    pub fn loglik(&self, fields: &ParameterFieldSet) -> Result<f64> {
        let mut total = 0.0;
        for y in 0..self.data.years.len() {
            let sites = self.sites(y, fields)?;
            let cov = SiteCovariance { sites: &sites, mode: self.mode, nugget: true };
            let means = self.means(y, fields);
            total += vecchia_loglik(&self.data.years[y].values, &means, &self.plans[y], &cov)?;
        }
        Ok(total)
    }

    /// Sparse precision factors at the current covariance fields, one per
    /// year.
    pub fn factors(&self, fields: &ParameterFieldSet) -> Result<Vec<SparseFactor>> {
        (0..self.data.years.len())
            .map(|y| {
                let sites = self.sites(y, fields)?;
                let cov = SiteCovariance { sites: &sites, mode: self.mode, nugget: true };
                build_factor(&self.plans[y], &cov)
            })
            .collect()
    }
}

/// Exact Gibbs conditional of the stacked mean and trend bases.
pub struct MeanTrendPosterior {
    chol: Cholesky<f64, Dyn>,
    pub mean: DVector<f64>,
    k_mu: usize,
}

impl MeanTrendPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Split a stacked vector into the mean and trend blocks.
    fn split(&self, x: DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mu = DVector::from_iterator(self.k_mu, x.iter().take(self.k_mu).copied());
        let beta =
            DVector::from_iterator(x.len() - self.k_mu, x.iter().skip(self.k_mu).copied());
        (mu, beta)
    }

    pub fn mean_blocks(&self) -> (DVector<f64>, DVector<f64>) {
        self.split(self.mean.clone())
    }

    /// Posterior covariance, for tests and diagnostics.
    pub fn covariance(&self) -> DMatrix<f64> {
        let k = self.dim();
        self.chol.solve(&DMatrix::identity(k, k))
    }

    /// Exact draw: `mean + L^{-T} z` with `A = L L^T` the posterior
    /// precision.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = self.dim();
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.chol.l();
        let x = l
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| Error::numeric("singular posterior factor"))?;
        Ok(self.split(&self.mean + x))
    }
}

/// Build the joint conditional of `[b_mu, b_beta]` given the data and the
/// current covariance fields: precision `M^T Q M + I` and mean
/// `(M^T Q M + I)^{-1} M^T Q h`, with `Q` the block-diagonal Vecchia
/// precision `U U^T` and `M` the per-year design `[A_mu | dt A_beta]`.
/// Observations are residualized by the hyper-mean offsets of both fields.
pub fn mean_trend_posterior(
    problem: &SamplerProblem,
    fields: &ParameterFieldSet,
) -> Result<MeanTrendPosterior> {
    let k_mu = fields.basis_len(FieldName::Mu2007);
    let k_beta = fields.basis_len(FieldName::Trend);
    let k = k_mu + k_beta;
    let mu_off = fields.hyper(FieldName::Mu2007).mu;
    let beta_off = fields.hyper(FieldName::Trend).mu;

    let mut a_post = DMatrix::identity(k, k);
    let mut b_post = DVector::zeros(k);
    for y in 0..problem.data.years.len() {
        let block = &problem.data.years[y];
        let n = block.len();
        if n == 0 {
            continue;
        }
        let sites = problem.sites(y, fields)?;
        let cov = SiteCovariance { sites: &sites, mode: problem.mode, nugget: true };
        let factor = build_factor(&problem.plans[y], &cov)?;

        let dt = f64::from(block.year - REFERENCE_YEAR);
        let a_mu = &problem.kriging[y][FieldName::Mu2007.index()];
        let a_beta = &problem.kriging[y][FieldName::Trend.index()];
        let mut design = DMatrix::zeros(n, k);
        design.view_mut((0, 0), (n, k_mu)).copy_from(a_mu);
        design.view_mut((0, k_mu), (n, k_beta)).copy_from(&(a_beta * dt));

        let residual = block.values.map(|v| v - mu_off - beta_off * dt);
        let v = factor.ut_mul_dense_original(&design);
        let r_ord = DVector::from_fn(n, |i, _| residual[factor.order[i]]);
        let u = factor.ut_mul(&r_ord);
        a_post += v.transpose() * &v;
        b_post += v.transpose() * u;
    }
    let chol = Cholesky::new(a_post)
        .ok_or_else(|| Error::numeric("mean/trend posterior precision is not positive definite"))?;
    let mean = chol.solve(&b_post);
    Ok(MeanTrendPosterior { chol, mean, k_mu })
}

/// Mutable chain state.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub fields: ParameterFieldSet,
    pub iteration: usize,
    /// Log proposal sd per Metropolis field (indexed like `MH_ORDER`).
    pub log_sd: [f64; 4],
    pub cur_loglik: f64,
    batch_accepts: [usize; 4],
    batch_attempts: [usize; 4],
    post_accepts: [usize; 4],
    post_attempts: [usize; 4],
    batch_index: usize,
    pub numeric_rejects: usize,
}

/// One retained sample: the six bases at a recorded iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSample {
    pub iteration: usize,
    pub bases: Vec<Vec<f64>>,
}

impl ChainSample {
    fn from_fields(iteration: usize, fields: &ParameterFieldSet) -> Self {
        let bases =
            FieldName::ALL.iter().map(|&f| fields.basis(f).iter().copied().collect()).collect();
        Self { iteration, bases }
    }

    /// Rebuild a field set by installing this sample's bases on a template.
    pub fn apply_to(&self, template: &ParameterFieldSet) -> Result<ParameterFieldSet> {
        let mut out = template.clone();
        for (i, name) in FieldName::ALL.into_iter().enumerate() {
            out.set_basis(name, DVector::from_vec(self.bases[i].clone()))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OhcChainSample {
    pub iteration: usize,
    pub per_year: Vec<(i32, OhcEstimate)>,
}

/// The recorded chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub burn_in: usize,
    pub thin: usize,
    /// Log posterior per iteration, starting with the initial state.
    pub log_posterior: Vec<f64>,
    pub samples: Vec<ChainSample>,
    pub ohc: Vec<OhcChainSample>,
    /// Post-burn-in acceptance rate per Metropolis field.
    pub acceptance_post: Vec<f64>,
    pub final_proposal_sd: Vec<f64>,
    pub numeric_rejects: usize,
}

impl PosteriorChain {
    pub fn retained(&self) -> impl Iterator<Item = &ChainSample> {
        let burn = self.burn_in;
        self.samples.iter().filter(move |s| s.iteration > burn)
    }

    pub fn retained_ohc(&self) -> impl Iterator<Item = &OhcChainSample> {
        let burn = self.burn_in;
        self.ohc.iter().filter(move |s| s.iteration > burn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Log-posterior trace as CSV (iteration, value).
    pub fn write_trace_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "iteration,log_posterior")?;
        for (i, v) in self.log_posterior.iter().enumerate() {
            writeln!(w, "{i},{v:.16e}")?;
        }
        Ok(())
    }
}

/// Prediction context for in-chain OHC summaries.
pub struct OhcContext {
    pub grid: IntegrationGrid,
    /// One extension per year, aligned with the problem's year order.
    pub extensions: Vec<PredictionExtension>,
    pub include_nugget: bool,
}

/// Everything needed to continue a chain exactly where it stopped.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SamplerConfig,
    pub fields_json: String,
    pub iteration: usize,
    pub log_sd: Vec<f64>,
    pub cur_loglik: f64,
    pub batch_accepts: Vec<usize>,
    pub batch_attempts: Vec<usize>,
    pub post_accepts: Vec<usize>,
    pub post_attempts: Vec<usize>,
    pub batch_index: usize,
    pub numeric_rejects: usize,
    /// ChaCha word position, hex-encoded u128.
    pub rng_word_pos: String,
    pub chain: PosteriorChain,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The sampler: problem context plus mutable state and rng.
pub struct Sampler<'a> {
    pub config: SamplerConfig,
    problem: &'a SamplerProblem,
    pub state: ChainState,
    rng: ChaCha20Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(
        config: SamplerConfig,
        problem: &'a SamplerProblem,
        init: &ParameterFieldSet,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(stream_id("sampler"));
        let cur_loglik = problem.loglik(init)?;
        let log_sd = std::array::from_fn(|i| {
            let f = FieldName::MH_ORDER[i];
            let sd = if config.initial_proposal_sd > 0.0 {
                config.initial_proposal_sd
            } else {
                2.38 / (init.basis_len(f) as f64).sqrt()
            };
            sd.ln()
        });
        Ok(Self {
            config,
            problem,
            state: ChainState {
                fields: init.clone(),
                iteration: 0,
                log_sd,
                cur_loglik,
                batch_accepts: [0; 4],
                batch_attempts: [0; 4],
                post_accepts: [0; 4],
                post_attempts: [0; 4],
                batch_index: 1,
                numeric_rejects: 0,
            },
            rng,
        })
    }

    /// Full log posterior of the current state.
    pub fn log_posterior(&self) -> f64 {
        self.state.cur_loglik + self.state.fields.log_prior_total()
    }

    /// One Metropolis-Hastings update of a covariance field. Numeric
    /// failures in the proposed likelihood count as rejections so nearly
    /// singular proposals cannot kill a long chain.
    pub fn mh_step(&mut self, name: FieldName) -> Result<bool> {
        let slot = FieldName::MH_ORDER
            .iter()
            .position(|&f| f == name)
            .ok_or_else(|| Error::invalid(format!("{} is not a Metropolis field", name.label())))?;
        let sd = self.state.log_sd[slot].exp();
        let current = self.state.fields.basis(name).clone();
        let proposal = propose_basis(&current, sd, &mut self.rng);

        let cur_prior = crate::fields::basis_log_prior(&current);
        let new_prior = crate::fields::basis_log_prior(&proposal);
        self.state.fields.set_basis(name, proposal)?;
        let new_loglik = match self.problem.loglik(&self.state.fields) {
            Ok(v) => v,
            Err(Error::NumericFailure(msg)) => {
                log::warn!(
                    "iteration {}: proposal for {} rejected on numeric failure: {msg}",
                    self.state.iteration,
                    name.label()
                );
                self.state.numeric_rejects += 1;
                self.state.fields.set_basis(name, current)?;
                self.record_mh(slot, false);
                return Ok(false);
            }
            Err(e) => return Err(e),
        };

        let log_ratio = new_loglik + new_prior - self.state.cur_loglik - cur_prior;
        let accept = log_ratio >= 0.0 || {
            let u: f64 = self.rng.random_range(0.0..1.0);
            u.ln() < log_ratio
        };
        if accept {
            self.state.cur_loglik = new_loglik;
        } else {
            self.state.fields.set_basis(name, current)?;
        }
        self.record_mh(slot, accept);
        Ok(accept)
    }

    fn record_mh(&mut self, slot: usize, accept: bool) {
        self.state.batch_attempts[slot] += 1;
        if accept {
            self.state.batch_accepts[slot] += 1;
        }
        if self.state.iteration > self.config.burn_in {
            self.state.post_attempts[slot] += 1;
            if accept {
                self.state.post_accepts[slot] += 1;
            }
        }
    }

    /// Joint exact draw of the mean and trend bases from their Gibbs
    /// conditional, refreshing the cached likelihood.
    pub fn gibbs_mean_trend(&mut self) -> Result<()> {
        let post = mean_trend_posterior(self.problem, &self.state.fields)?;
        let (b_mu, b_beta) = post.draw(&mut self.rng)?;
        self.state.fields.set_basis(FieldName::Mu2007, b_mu)?;
        self.state.fields.set_basis(FieldName::Trend, b_beta)?;
        self.state.cur_loglik = self.problem.loglik(&self.state.fields)?;
        Ok(())
    }

    /// Diminishing adaptation: per field, nudge the log proposal sd by
    /// `min(0.01, batch^{-1/2})` toward the target acceptance rate, then
    /// reset the batch counters. Called pre-burn-in only.
    pub fn adapt_proposals(&mut self) {
        let delta = (self.state.batch_index as f64).powf(-0.5).min(0.01);
        for slot in 0..4 {
            if self.state.batch_attempts[slot] == 0 {
                continue;
            }
            let rate = self.state.batch_accepts[slot] as f64 / self.state.batch_attempts[slot] as f64;
            if rate > self.config.target_acceptance {
                self.state.log_sd[slot] += delta;
            } else {
                self.state.log_sd[slot] -= delta;
            }
            self.state.batch_accepts[slot] = 0;
            self.state.batch_attempts[slot] = 0;
        }
        self.state.batch_index += 1;
    }

    fn ohc_summaries(&self, ctx: &OhcContext) -> Result<Vec<(i32, OhcEstimate)>> {
        let mut out = Vec::with_capacity(self.problem.data.years.len());
        for (y, block) in self.problem.data.years.iter().enumerate() {
            let est = ohc_posterior_vecchia(
                &self.state.fields,
                block,
                &ctx.grid,
                &ctx.extensions[y],
                self.problem.mode,
                ctx.include_nugget,
            )?;
            out.push((block.year, est));
        }
        Ok(out)
    }

    /// Run to `config.n_iterations`, recording the trace, thinned samples
    /// and periodic OHC summaries. Fully reproducible from the seed.
    pub fn run(
        self,
        ohc: Option<&OhcContext>,
        checkpoint_path: Option<&Path>,
    ) -> Result<PosteriorChain> {
        let mut chain = PosteriorChain {
            burn_in: self.config.burn_in,
            thin: self.config.thin,
            log_posterior: vec![self.log_posterior()],
            samples: vec![ChainSample::from_fields(0, &self.state.fields)],
            ohc: Vec::new(),
            acceptance_post: vec![0.0; 4],
            final_proposal_sd: vec![0.0; 4],
            numeric_rejects: 0,
        };
        self.run_into(&mut chain, ohc, checkpoint_path)?;
        Ok(chain)
    }

    fn run_into(
        mut self,
        chain: &mut PosteriorChain,
        ohc: Option<&OhcContext>,
        checkpoint_path: Option<&Path>,
    ) -> Result<()> {
        while self.state.iteration < self.config.n_iterations {
            self.state.iteration += 1;
            let t = self.state.iteration;
            for name in FieldName::MH_ORDER {
                self.mh_step(name).map_err(|e| {
                    Error::numeric(format!("iteration {t}, field {}: {e}", name.label()))
                })?;
            }
            self.gibbs_mean_trend()
                .map_err(|e| Error::numeric(format!("iteration {t}, mean/trend: {e}")))?;
            if t <= self.config.burn_in && t % self.config.adapt_batch == 0 {
                self.adapt_proposals();
            }
            chain.log_posterior.push(self.log_posterior());
            if t % self.config.thin == 0 {
                chain.samples.push(ChainSample::from_fields(t, &self.state.fields));
            }
            if let Some(ctx) = ohc {
                if t % self.config.ohc_every == 0 {
                    chain.ohc.push(OhcChainSample { iteration: t, per_year: self.ohc_summaries(ctx)? });
                }
            }
            if self.config.checkpoint_every > 0 && t % self.config.checkpoint_every == 0 {
                if let Some(path) = checkpoint_path {
                    self.checkpoint(chain)?.save(path)?;
                }
            }
        }
        for slot in 0..4 {
            chain.acceptance_post[slot] = if self.state.post_attempts[slot] > 0 {
                self.state.post_accepts[slot] as f64 / self.state.post_attempts[slot] as f64
            } else {
                f64::NAN
            };
            chain.final_proposal_sd[slot] = self.state.log_sd[slot].exp();
        }
        chain.numeric_rejects = self.state.numeric_rejects;
        Ok(())
    }

    fn checkpoint(&self, chain: &PosteriorChain) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.clone(),
            fields_json: self.state.fields.to_json()?,
            iteration: self.state.iteration,
            log_sd: self.state.log_sd.to_vec(),
            cur_loglik: self.state.cur_loglik,
            batch_accepts: self.state.batch_accepts.to_vec(),
            batch_attempts: self.state.batch_attempts.to_vec(),
            post_accepts: self.state.post_accepts.to_vec(),
            post_attempts: self.state.post_attempts.to_vec(),
            batch_index: self.state.batch_index,
            numeric_rejects: self.state.numeric_rejects,
            rng_word_pos: format!("{:032x}", self.rng.get_word_pos()),
            chain: chain.clone(),
        })
    }

    /// Rebuild a sampler mid-chain from a checkpoint and finish the run.
    pub fn resume(
        checkpoint: Checkpoint,
        problem: &'a SamplerProblem,
        ohc: Option<&OhcContext>,
        checkpoint_path: Option<&Path>,
    ) -> Result<PosteriorChain> {
        let config = checkpoint.config.clone();
        config.validate()?;
        let fields = ParameterFieldSet::from_json(&checkpoint.fields_json)?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(stream_id("sampler"));
        let word_pos = u128::from_str_radix(&checkpoint.rng_word_pos, 16)
            .map_err(|e| Error::Parse(format!("bad rng position: {e}")))?;
        rng.set_word_pos(word_pos);
        let to_array = |v: &[usize]| -> [usize; 4] { std::array::from_fn(|i| v[i]) };
        let sampler = Sampler {
            config,
            problem,
            state: ChainState {
                fields,
                iteration: checkpoint.iteration,
                log_sd: std::array::from_fn(|i| checkpoint.log_sd[i]),
                cur_loglik: checkpoint.cur_loglik,
                batch_accepts: to_array(&checkpoint.batch_accepts),
                batch_attempts: to_array(&checkpoint.batch_attempts),
                post_accepts: to_array(&checkpoint.post_accepts),
                post_attempts: to_array(&checkpoint.post_attempts),
                batch_index: checkpoint.batch_index,
                numeric_rejects: checkpoint.numeric_rejects,
            },
            rng,
        };
        let mut chain = checkpoint.chain;
        sampler.run_into(&mut chain, ohc, checkpoint_path)?;
        Ok(chain)
    }
}

/// Build and run a chain in one call.
pub fn run_chain(
    config: SamplerConfig,
    init: &ParameterFieldSet,
    problem: &SamplerProblem,
    ohc: Option<&OhcContext>,
    checkpoint_path: Option<&Path>,
) -> Result<PosteriorChain> {
    Sampler::new(config, problem, init)?.run(ohc, checkpoint_path)
}
