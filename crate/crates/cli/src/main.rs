//! Batch command-line surface wiring the library into reproducible runs.
//!
//! Every subcommand reads one TOML configuration (plus `key=value`
//! overrides), writes its artifacts under a run directory together with the
//! resolved configuration, and finishes with a manifest hashing every
//! artifact. Errors are reported as a machine-readable JSON record on
//! stderr with a nonzero exit code.

mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use cylgp::config::RunConfig;
use cylgp::data::{
    apply_mask, ingest_profiles, load_observations, simulate_dataset, Mask,
    ObservationSet, SimLayout,
};
use cylgp::fields::{FieldName, KnotGrid, ParameterFieldSet};
use cylgp::init::{initialize, write_window_csv, InitConfig};
use cylgp::kernels::ConvolutionMode;
use cylgp::ohc::{
    grid_extension, ohc_intervals, sign_agreement_map, trend_resample_and_integrate,
    IntegrationGrid, OhcEstimate,
};
use cylgp::sampler::{run_chain, OhcContext, PosteriorChain, SamplerProblem};
use cylgp::util::stream_id;
use cylgp::validation::{
    levitus_predict, lofo_folds, ols_trend, run_cv, windowed_folds, Fold, ModelVariant,
    ScoreReport,
};
use cylgp::vecchia::{plan_with_cache, VecchiaPlan};
use output::RunWriter;

#[derive(Parser)]
#[command(name = "cylgp", version, about = "Non-stationary heat-content modeling on the cylinder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for outputs.
    #[arg(long)]
    out: PathBuf,
    /// Configuration overrides as section.key=value.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset (and its truth record) from the model.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Moving-window estimation: hyperparameters and a starting field set.
    Init {
        #[command(flatten)]
        common: Common,
        /// Canonical observation CSV, or a profile CSV with --profiles.
        #[arg(long)]
        data: PathBuf,
        /// Treat --data as raw profiles and vertically integrate them.
        #[arg(long, default_value_t = false)]
        profiles: bool,
    },
    /// Run the Metropolis-within-Gibbs chain.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting field set (from init or simulate).
        #[arg(long)]
        init: PathBuf,
    },
    /// Posterior summaries: interval tables, trend fields, sign agreement.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Field-set template (knots and hyperparameters).
        #[arg(long)]
        init: PathBuf,
        /// Chain file written by fit.
        #[arg(long)]
        chain: PathBuf,
    },
    /// Cross-validate model variants against held-out observations.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fitted field configuration (e.g. the max-posterior sample).
        #[arg(long)]
        fields: PathBuf,
    },
    /// Reference-predictor heat content and its least-squares trend.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() {
    env_logger::init();
    if let Err(err) = run() {
        let record = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { common } => cmd_simulate(common),
        Command::Init { common, data, profiles } => cmd_init(common, &data, profiles),
        Command::Fit { common, data, init } => cmd_fit(common, &data, &init),
        Command::Predict { common, data, init, chain } => cmd_predict(common, &data, &init, &chain),
        Command::Cv { common, data, fields } => cmd_cv(common, &data, &fields),
        Command::Baseline { common, data } => cmd_baseline(common, &data),
    }
}

struct Setup {
    config: RunConfig,
    mask: Option<Mask>,
    writer: RunWriter,
    command: &'static str,
}

fn setup(common: &Common, command: &'static str, inputs: &[&Path]) -> Result<Setup> {
    for input in inputs {
        if !input.exists() {
            bail!("input {} does not exist", input.display());
        }
    }
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&common.overrides)?;
    let mask = match config.mask_path() {
        Some(path) => Some(Mask::load(&path).with_context(|| format!("loading mask {}", path.display()))?),
        None => None,
    };
    if config.run.threads > 0 {
        // Ignore the error when a pool already exists (e.g. repeated calls
        // in tests); results do not depend on the thread count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.run.threads).build_global();
    }
    let writer = RunWriter::create(&common.out)?;
    Ok(Setup { config, mask, writer, command })
}

impl Setup {
    fn finish(mut self) -> Result<()> {
        let resolved = self.config.resolved_toml().map_err(|e| anyhow!(e))?;
        self.writer.write_string("config.resolved.toml", &resolved)?;
        self.writer.finish(self.command, self.config.run.seed, &resolved)
    }
}

fn load_data(config: &RunConfig, mask: Option<&Mask>, path: &Path) -> Result<ObservationSet> {
    let set = load_observations(path).with_context(|| format!("reading {}", path.display()))?;
    for block in &set.years {
        if block.year < config.domain.year_min || block.year > config.domain.year_max {
            bail!(
                "observation year {} outside configured range {}..={}",
                block.year,
                config.domain.year_min,
                config.domain.year_max
            );
        }
    }
    Ok(match mask {
        Some(m) => apply_mask(&set, m).0,
        None => set,
    })
}

fn build_plans(
    config: &RunConfig,
    data: &ObservationSet,
    writer: &RunWriter,
) -> Result<Vec<VecchiaPlan>> {
    let cache: PathBuf = if config.vecchia.cache_dir.is_empty() {
        writer.path("plans")
    } else {
        PathBuf::from(&config.vecchia.cache_dir)
    };
    data.years
        .iter()
        .map(|block| {
            plan_with_cache(&block.locs, config.vecchia.m, config.vecchia.grouping, Some(&cache))
                .map_err(|e| anyhow!("plan for {}: {e}", block.year))
        })
        .collect()
}

fn cmd_simulate(common: Common) -> Result<()> {
    let mut setup = setup(&common, "simulate", &[])?;
    let config = setup.config.clone();
    let specs = config.field_specs()?;
    let knots = KnotGrid::regular(
        config.knots.lat_spacing_deg,
        config.knots.lon_spacing_deg,
        setup.mask.as_ref(),
    )?;
    let mut fields = ParameterFieldSet::new(knots, specs)?;

    // Truth bases drawn from the (scaled) prior on a named substream.
    let mut rng = ChaCha20Rng::seed_from_u64(config.run.seed);
    rng.set_stream(stream_id("simulate/basis"));
    for name in FieldName::ALL {
        let n = fields.basis_len(name);
        let b = DVector::from_fn(n, |_, _| {
            config.simulate.basis_scale * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        fields.set_basis(name, b)?;
    }

    let layout = SimLayout {
        n_per_year: config.simulate.n_per_year,
        years: config.years(),
        float_spread_deg: config.simulate.float_spread_deg,
        mode: config.mode()?,
    };
    let (set, truth) = simulate_dataset(&fields, &layout, setup.mask.as_ref(), config.run.seed)?;

    setup.writer.write_with("observations.csv", |w| {
        cylgp::data::write_observations(&set, w).map_err(|e| anyhow!(e))
    })?;
    setup.writer.write_string("truth_fields.json", &fields.to_json()?)?;
    setup.writer.write_string("truth.json", &serde_json::to_string_pretty(&truth)?)?;
    setup.finish()
}

fn cmd_init(common: Common, data_path: &Path, profiles: bool) -> Result<()> {
    let mut setup = setup(&common, "init", &[data_path])?;
    let config = setup.config.clone();
    let data = if profiles {
        let (set, report) = ingest_profiles(data_path, config.domain.rho_cp, setup.mask.as_ref())?;
        setup.writer.write_string("ingest_report.json", &serde_json::to_string_pretty(&report)?)?;
        setup.writer.write_with("observations.csv", |w| {
            cylgp::data::write_observations(&set, w).map_err(|e| anyhow!(e))
        })?;
        set
    } else {
        load_data(&config, setup.mask.as_ref(), data_path)?
    };
    if data.n_total() == 0 {
        bail!("no observations to initialize from");
    }

    let init_cfg = InitConfig {
        window_deg: config.init.window_deg,
        grid_deg: config.init.grid_deg,
        min_obs: config.init.min_obs,
    };
    let bundle = initialize(
        &data,
        &init_cfg,
        config.knots.lat_spacing_deg,
        config.knots.lon_spacing_deg,
        setup.mask.as_ref(),
    )?;
    setup.writer.write_with("windows.csv", |w| {
        write_window_csv(&bundle.estimates, w).map_err(|e| anyhow!(e))
    })?;
    setup.writer.write_string("init_fields.json", &bundle.fields.to_json()?)?;
    setup.finish()
}

fn cmd_fit(common: Common, data_path: &Path, init_path: &Path) -> Result<()> {
    let mut setup = setup(&common, "fit", &[data_path, init_path])?;
    let config = setup.config.clone();
    let data = load_data(&config, setup.mask.as_ref(), data_path)?;
    if data.n_total() == 0 {
        bail!("no observations to fit");
    }
    let fields = ParameterFieldSet::load(init_path)?;
    let plans = build_plans(&config, &data, &setup.writer)?;
    let problem = SamplerProblem::new(data, plans, config.mode()?, &fields)?;

    let ohc_ctx = if config.sampler.ohc_in_chain {
        let grid = IntegrationGrid::regular(config.grid.resolution_deg, setup.mask.as_ref())?;
        let extensions = problem
            .data
            .years
            .iter()
            .zip(&problem.plans)
            .map(|(block, plan)| {
                grid_extension(plan, block, &grid, config.vecchia.m, config.vecchia.grouping)
            })
            .collect::<cylgp::Result<Vec<_>>>()?;
        Some(OhcContext {
            grid,
            extensions,
            include_nugget: config.covariance.include_nugget_in_ohc,
        })
    } else {
        None
    };

    let ckpt_path = setup.writer.path("chain.ckpt.json");
    let chain = run_chain(
        config.sampler_config(config.run.seed),
        &fields,
        &problem,
        ohc_ctx.as_ref(),
        if config.sampler.checkpoint_every > 0 { Some(&ckpt_path) } else { None },
    )?;

    setup.writer.write_string("chain.json", &serde_json::to_string(&chain)?)?;
    setup.writer.write_with("trace.csv", |w| chain.write_trace_csv(w).map_err(|e| anyhow!(e)))?;
    let map_sample = chain
        .retained()
        .max_by(|a, b| {
            chain.log_posterior[a.iteration]
                .partial_cmp(&chain.log_posterior[b.iteration])
                .expect("finite log posterior")
        })
        .or_else(|| chain.samples.last())
        .expect("chain holds at least the initial state");
    setup.writer.write_string("fields_map.json", &map_sample.apply_to(&fields)?.to_json()?)?;
    let last = chain.samples.last().expect("chain holds at least the initial state");
    setup.writer.write_string("fields_last.json", &last.apply_to(&fields)?.to_json()?)?;
    setup.finish()
}

fn cmd_predict(common: Common, data_path: &Path, init_path: &Path, chain_path: &Path) -> Result<()> {
    let mut setup = setup(&common, "predict", &[data_path, init_path, chain_path])?;
    let config = setup.config.clone();
    let data = load_data(&config, setup.mask.as_ref(), data_path)?;
    let template = ParameterFieldSet::load(init_path)?;
    let chain = PosteriorChain::load(chain_path)?;

    // Interval tables from the in-chain OHC summaries.
    let mut per_year: std::collections::BTreeMap<i32, Vec<OhcEstimate>> = Default::default();
    for s in chain.retained_ohc() {
        for (year, est) in &s.per_year {
            per_year.entry(*year).or_default().push(*est);
        }
    }
    if per_year.is_empty() {
        bail!(
            "chain holds no heat-content summaries; refit with sampler.ohc_in_chain=true"
        );
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.run.seed);
    rng.set_stream(stream_id("predict/intervals"));
    setup.writer.write_with("ohc_intervals.csv", |w| {
        writeln!(w, "year,center,conf_lo,conf_hi,cred_lo,cred_hi")?;
        for (year, samples) in &per_year {
            let iv = ohc_intervals(
                samples,
                config.intervals.level,
                config.intervals.resamples_per_sample,
                &mut rng,
            )?;
            writeln!(
                w,
                "{year},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                iv.center, iv.conf_lo, iv.conf_hi, iv.cred_lo, iv.cred_hi
            )?;
        }
        Ok(())
    })?;

    // Trend resampling over the retained samples.
    let plans = build_plans(&config, &data, &setup.writer)?;
    let problem = SamplerProblem::new(data, plans, config.mode()?, &template)?;
    let grid = IntegrationGrid::regular(config.grid.resolution_deg, setup.mask.as_ref())?;
    let samples: Vec<ParameterFieldSet> = chain
        .retained()
        .map(|s| s.apply_to(&template))
        .collect::<cylgp::Result<Vec<_>>>()?;
    if samples.is_empty() {
        bail!("chain holds no retained samples; run more iterations than burn-in");
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.run.seed);
    rng.set_stream(stream_id("predict/trend"));
    let resample = trend_resample_and_integrate(
        &samples,
        &problem,
        &grid,
        config.intervals.trend_resamples_per_sample,
        &mut rng,
    )?;

    let (active, _) = grid.active();
    for p in &config.intervals.trend_percentiles {
        let (field, integrated) = resample.field_at_percentile(*p)?;
        let name = format!("trend_p{:02.0}.csv", p * 100.0);
        setup.writer.write_with(&name, |w| {
            writeln!(w, "# integrated_trend_j_per_year,{integrated:.16e}")?;
            writeln!(w, "lat,lon,trend")?;
            for (i, loc) in active.iter().enumerate() {
                writeln!(w, "{:.4},{:.4},{:.16e}", loc.lat(), loc.lon(), field[i])?;
            }
            Ok(())
        })?;
    }
    let agreement = sign_agreement_map(&resample.fields)?;
    setup.writer.write_with("sign_agreement.csv", |w| {
        writeln!(w, "lat,lon,p_positive")?;
        for (i, loc) in active.iter().enumerate() {
            writeln!(w, "{:.4},{:.4},{:.16e}", loc.lat(), loc.lon(), agreement[i])?;
        }
        Ok(())
    })?;
    let half = 0.5 * (1.0 - config.intervals.level);
    let summary = serde_json::json!({
        "n_resamples": resample.integrated.len(),
        "integrated_trend_quantiles": {
            "lo": resample.integrated_quantile(half)?,
            "median": resample.integrated_quantile(0.5)?,
            "hi": resample.integrated_quantile(1.0 - half)?,
            "level": config.intervals.level,
        },
    });
    setup.writer.write_string("trend_summary.json", &serde_json::to_string_pretty(&summary)?)?;
    setup.finish()
}

enum VariantSpec {
    Gp { fields: ParameterFieldSet, mode: ConvolutionMode },
    Levitus,
}

fn parse_variant(
    label: &str,
    fitted: &ParameterFieldSet,
    mode: ConvolutionMode,
) -> Result<VariantSpec> {
    let gp = |fields: ParameterFieldSet, mode: ConvolutionMode| VariantSpec::Gp { fields, mode };
    Ok(match label {
        "full" => gp(fitted.clone(), mode),
        "levitus" => VariantSpec::Levitus,
        "isotropic" | "chordal" => gp(fitted.clone(), ConvolutionMode::ChordalIsotropic),
        "fully_stationary" => gp(fitted.constrained_at_median(&FieldName::ALL)?, mode),
        other => {
            let name = other
                .strip_prefix("stationary_")
                .ok_or_else(|| anyhow!("unknown variant '{other}'"))?;
            let field: FieldName =
                name.parse().map_err(|e| anyhow!("variant '{other}': {e}"))?;
            gp(fitted.constrained_at_median(&[field])?, mode)
        }
    })
}

fn cmd_cv(common: Common, data_path: &Path, fields_path: &Path) -> Result<()> {
    let mut setup = setup(&common, "cv", &[data_path, fields_path])?;
    let config = setup.config.clone();
    let data = load_data(&config, setup.mask.as_ref(), data_path)?;
    let fitted = ParameterFieldSet::load(fields_path)?;
    let mode = config.mode()?;

    let folds: Vec<Fold> = match config.cv.kind.as_str() {
        "lofo" => lofo_folds(&data)?,
        "windowed" => windowed_folds(&data, config.cv.window_deg),
        other => bail!("unknown cv.kind '{other}' (expected lofo or windowed)"),
    };
    if folds.is_empty() {
        bail!("no folds to evaluate");
    }

    let mut reports: Vec<(String, ScoreReport)> = Vec::new();
    for label in &config.cv.variants {
        let spec = parse_variant(label, &fitted, mode)?;
        let report = match &spec {
            VariantSpec::Levitus => run_cv(
                &ModelVariant::Levitus {
                    radius_deg: config.levitus.radius_deg,
                    scale_deg: config.levitus.scale_deg,
                },
                &data,
                &folds,
                config.cv.cell_deg,
            )?,
            VariantSpec::Gp { fields, mode, .. } => run_cv(
                &ModelVariant::Gp {
                    fields,
                    mode: *mode,
                    m: config.vecchia.m,
                    grouping: config.vecchia.grouping,
                },
                &data,
                &folds,
                config.cv.cell_deg,
            )?,
        };
        setup.writer.write_with(&format!("cells_{label}.csv"), |w| {
            writeln!(w, "lat,lon,mae,count")?;
            for c in &report.cell_mae {
                writeln!(w, "{:.4},{:.4},{:.16e},{}", c.lat, c.lon, c.mae, c.count)?;
            }
            Ok(())
        })?;
        reports.push((label.clone(), report));
    }

    let reference = reports.iter().find(|(l, _)| l == "levitus").map(|(_, r)| r.clone());
    setup.writer.write_with("scores.csv", |w| {
        writeln!(w, "variant,n,mae,rmse,crps,improvement_mae_pct,improvement_rmse_pct,improvement_crps_pct")?;
        for (label, report) in &reports {
            let (im, ir, ic) = match &reference {
                Some(r) => report.improvement_over(r),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            writeln!(
                w,
                "{label},{},{:.16e},{:.16e},{:.16e},{im:.4},{ir:.4},{ic:.4}",
                report.n, report.mae, report.rmse, report.crps
            )?;
        }
        Ok(())
    })?;
    let json: serde_json::Value = serde_json::json!({
        "folds": folds.len(),
        "kind": config.cv.kind,
        "reports": reports
            .iter()
            .map(|(l, r)| serde_json::json!({"variant": l, "n": r.n, "mae": r.mae, "rmse": r.rmse, "crps": r.crps}))
            .collect::<Vec<_>>(),
    });
    setup.writer.write_string("scores.json", &serde_json::to_string_pretty(&json)?)?;
    setup.finish()
}

fn cmd_baseline(common: Common, data_path: &Path) -> Result<()> {
    let mut setup = setup(&common, "baseline", &[data_path])?;
    let config = setup.config.clone();
    let data = load_data(&config, setup.mask.as_ref(), data_path)?;
    if data.n_total() == 0 {
        bail!("no observations for the baseline");
    }
    let grid = IntegrationGrid::regular(config.grid.resolution_deg, setup.mask.as_ref())?;
    let (active, weights) = grid.active();
    let z = cylgp::util::norm_quantile(0.5 * (1.0 + config.intervals.level));

    let mut yearly: Vec<(i32, f64)> = Vec::new();
    let mut rows: Vec<(i32, f64, f64)> = Vec::new();
    for block in &data.years {
        let preds = levitus_predict(
            &block.locs,
            &block.values,
            &active,
            config.levitus.radius_deg,
            config.levitus.scale_deg,
        )?;
        let mean: f64 = preds.iter().zip(weights.iter()).map(|((mu, _), w)| mu * w).sum();
        // Independent cell errors, so the variances add in quadrature.
        let var: f64 =
            preds.iter().zip(weights.iter()).map(|((_, sd), w)| (sd * w).powi(2)).sum();
        let sd = var.sqrt();
        setup.writer.write_with(&format!("levitus_grid_{}.csv", block.year), |w| {
            writeln!(w, "lat,lon,mu,sigma")?;
            for (loc, (mu, sigma)) in active.iter().zip(&preds) {
                writeln!(w, "{:.4},{:.4},{:.16e},{:.16e}", loc.lat(), loc.lon(), mu, sigma)?;
            }
            Ok(())
        })?;
        yearly.push((block.year, mean));
        rows.push((block.year, mean, sd));
    }
    setup.writer.write_with("baseline_ohc.csv", |w| {
        writeln!(w, "year,mean,sd,lo,hi")?;
        for (year, mean, sd) in &rows {
            writeln!(
                w,
                "{year},{mean:.16e},{sd:.16e},{:.16e},{:.16e}",
                mean - z * sd,
                mean + z * sd
            )?;
        }
        Ok(())
    })?;
    if yearly.len() >= 3 {
        let fit = ols_trend(&yearly, config.intervals.level)?;
        setup.writer.write_string("baseline_trend.json", &serde_json::to_string_pretty(&fit)?)?;
    }
    setup.finish()
}
