use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use copvi::copula_va::{BaseDraw, VariationalParams};
use copvi::data_prep::{difference_series, to_copula_scores, Panel, DEFAULT_MIN_OBS};
use copvi::elliptical::FamilyKind;
use copvi::kl_bench::{run_grid, KlBenchConfig, KlDirection, MarginalFamily, SkewDefinition};
use copvi::optimizer::{run_with_sink, SgaConfig, StepRule};
use copvi::report::spearman_posterior;
use copvi::targets::corr::CorrModelParams;
use copvi::targets::CorrTarget;
use copvi::transforms::TransformKind;

use crate::artifact::{FitArtifact, FitConfig, FORMAT_VERSION};
use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Parser)]
#[command(name = "copvi", version, about = "Copula variational inference for correlation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the Gaussian copula correlation model to a CSV panel.
    FitCorr(FitCorrArgs),
    /// Summarize the Spearman correlation matrix under a fitted approximation.
    Report(ReportArgs),
    /// Draw parameter vectors from a fitted approximation.
    Sample(SampleArgs),
    /// Optimal KL divergence of marginal approximations to skew-normal targets.
    KlBench(KlBenchArgs),
}

#[derive(Debug, Args)]
pub struct FitCorrArgs {
    /// CSV with a header row; the first column holds row labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Model first differences of each series.
    #[arg(long)]
    pub difference: bool,
    /// Elliptical family: gaussian, t or laplace.
    #[arg(long, default_value = "t")]
    pub family: FamilyKind,
    /// Marginal transform: identity, yj, igh or double-yj.
    #[arg(long, default_value = "yj")]
    pub transform: TransformKind,
    /// Number of factors; 0 gives a mean-field approximation.
    #[arg(long, default_value_t = 2)]
    pub factors: usize,
    #[arg(long, default_value_t = 15_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial marginal scale of q.
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    /// Use ADAM with this learning rate instead of ADADELTA.
    #[arg(long)]
    pub adam: Option<f64>,
    /// Minimum number of observations per series.
    #[arg(long, default_value_t = DEFAULT_MIN_OBS)]
    pub min_obs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV file receiving (step, elbo) rows.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Leave wall-clock time out of the artifact so reruns are byte-identical.
    #[arg(long)]
    pub omit_timing: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Quantile levels, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.25,0.5,0.75,0.975")]
    pub probs: Vec<f64>,
    /// Posterior mean Spearman matrix.
    #[arg(long)]
    pub mean_out: PathBuf,
    /// One row per pair with its posterior mean and quantiles.
    #[arg(long)]
    pub quantiles_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KlBenchArgs {
    #[arg(long, default_value_t = 0.8553)]
    pub skew: f64,
    /// How --skew is read: moment (third standardized moment) or mode ((mean-mode)/sd).
    #[arg(long, default_value = "moment")]
    pub skew_definition: SkewDefinition,
    #[arg(long, value_delimiter = ',', default_value = "0,15,30,60")]
    pub mu_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
    pub sigma_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "adjusted,sln2020,gaussian")]
    pub families: Vec<MarginalFamily>,
    /// q-to-target minimizes KL(q||p), target-to-q minimizes KL(p||q).
    #[arg(long, default_value = "q-to-target")]
    pub direction: KlDirection,
    #[arg(long, default_value_t = 400)]
    pub nodes: usize,
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::FitCorr(a) => fit_corr(&a).map(|_| ()),
        Command::Report(a) => report(&a),
        Command::Sample(a) => sample(&a),
        Command::KlBench(a) => kl_bench(&a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).context(format!("creating {}", path.display()))
}

pub fn fit_corr(a: &FitCorrArgs) -> CliResult<FitArtifact> {
    if !matches!(a.family, FamilyKind::Gaussian | FamilyKind::StudentT | FamilyKind::Laplace) {
        return Err(CliError::Usage(format!("--family must be gaussian, t or laplace, got {:?}", a.family)));
    }
    if !(a.init_scale > 0.0 && a.init_scale.is_finite()) {
        return Err(CliError::Usage("--init-scale must be positive".into()));
    }
    let step_rule = match a.adam {
        Some(alpha) if alpha > 0.0 => StepRule::adam(alpha),
        Some(_) => return Err(CliError::Usage("--adam learning rate must be positive".into())),
        None => StepRule::adadelta(),
    };
    let started = Instant::now();

    let mut panel = Panel::from_csv_path(&a.data).context(format!("loading {}", a.data.display()))?;
    if a.difference {
        panel = difference_series(&panel).context("differencing")?;
    }
    let data = to_copula_scores(&panel, a.min_obs).map_err(|e| CliError::Data(e.to_string()))?;
    let (n_obs, r) = (data.n(), data.r());
    log::info!("{n_obs} observations on {r} series");
    let target = CorrTarget::new(data);

    let m = CorrModelParams::dim_for(r);
    let mut init_rng = ChaCha8Rng::seed_from_u64(a.seed);
    let lambda0 = VariationalParams::init(m, a.factors, a.transform, a.family, a.init_scale, &mut init_rng);
    let cfg = SgaConfig { steps: a.steps, seed: a.seed.wrapping_add(1), step_rule, trace_every: 1 };

    let mut trace = match &a.trace {
        Some(p) => {
            let mut w = csv::Writer::from_writer(create(p)?);
            w.write_record(["step", "elbo"]).context("writing trace")?;
            Some(w)
        }
        None => None,
    };
    let fit = run_with_sink(&target, &lambda0, &cfg, |step, elbo| {
        if let Some(w) = trace.as_mut() {
            w.write_record([step.to_string(), elbo.to_string()]).map_err(copvi::Error::from)?;
        }
        if step % 1000 == 0 {
            log::info!("step {step}: elbo {elbo:.3}");
        }
        Ok(())
    })
    .context("fitting")?;
    if let Some(mut w) = trace {
        w.flush().context("writing trace")?;
    }

    let artifact = FitArtifact {
        format_version: FORMAT_VERSION,
        config: FitConfig {
            data: a.data.display().to_string(),
            difference: a.difference,
            min_obs: a.min_obs,
            family: a.family,
            transform: a.transform,
            factors: a.factors,
            steps: a.steps,
            init_scale: a.init_scale,
            step_rule,
        },
        seed: a.seed,
        columns: panel.column_labels.clone(),
        n_obs,
        m,
        lambda: fit.lambda_star.flatten().iter().copied().collect(),
        lb_bar: fit.lb_bar,
        steps_completed: fit.trace.last().map_or(0, |t| t.0),
        wall_clock_seconds: (!a.omit_timing).then(|| started.elapsed().as_secs_f64()),
    };
    artifact.save(&a.out)?;
    match fit.lb_bar {
        Some(lb) => println!("steps={} lb_bar={:.4}{}", a.steps, lb.value, if lb.short_trace { " (short trace)" } else { "" }),
        None => println!("steps=0 lb_bar=NA"),
    }
    Ok(artifact)
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let art = FitArtifact::load(&a.artifact)?;
    let va = art.variational_params()?;
    let r = CorrModelParams::r_for_dim(art.m).context("artifact dimension")?;
    if art.columns.len() != r {
        return Err(CliError::Data(format!("artifact lists {} columns for r={r}", art.columns.len())));
    }
    let s = spearman_posterior(&va, a.draws, a.seed, &a.probs).map_err(|e| match e {
        copvi::Error::Domain(msg) => CliError::Usage(msg),
        other => CliError::Core { context: "summarizing draws".into(), source: other },
    })?;

    let mut w = csv::Writer::from_writer(create(&a.mean_out)?);
    let header: Vec<&str> = std::iter::once("").chain(art.columns.iter().map(String::as_str)).collect();
    w.write_record(&header).context("writing mean matrix")?;
    for i in 0..r {
        let row: Vec<String> =
            std::iter::once(art.columns[i].clone()).chain((0..r).map(|j| s.mean[(i, j)].to_string())).collect();
        w.write_record(&row).context("writing mean matrix")?;
    }
    w.flush().context("writing mean matrix")?;

    let mut w = csv::Writer::from_writer(create(&a.quantiles_out)?);
    let mut header = vec!["row".to_string(), "col".to_string(), "mean".to_string()];
    header.extend(a.probs.iter().map(|p| format!("q{p}")));
    w.write_record(&header).context("writing quantiles")?;
    for ((i, j), q) in s.pairs().into_iter().zip(&s.quantiles) {
        let mut row = vec![art.columns[i].clone(), art.columns[j].clone(), s.mean[(i, j)].to_string()];
        row.extend(q.iter().map(f64::to_string));
        w.write_record(&row).context("writing quantiles")?;
    }
    w.flush().context("writing quantiles")
}

fn sample(a: &SampleArgs) -> CliResult<()> {
    let art = FitArtifact::load(&a.artifact)?;
    let va = art.variational_params()?;
    let prepared = va.prepare().context("preparing parameters")?;
    let (m, k) = (va.m(), va.k());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record((1..=m).map(|i| format!("theta_{i}"))).context("writing draws")?;
    for _ in 0..a.n {
        let theta = prepared.sample(&BaseDraw::draw(m, k, &mut rng)).context("sampling")?.theta;
        w.write_record(theta.iter().map(f64::to_string)).context("writing draws")?;
    }
    w.flush().context("writing draws")
}

fn kl_bench(a: &KlBenchArgs) -> CliResult<()> {
    if a.mu_grid.is_empty() || a.sigma_grid.is_empty() || a.families.is_empty() {
        return Err(CliError::Usage("grids and family list must be non-empty".into()));
    }
    if a.sigma_grid.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(CliError::Usage("--sigma-grid values must be positive".into()));
    }
    let cfg = KlBenchConfig {
        skew: a.skew,
        skew_definition: a.skew_definition,
        direction: a.direction,
        nodes: a.nodes,
        starts: a.starts,
        ..KlBenchConfig::default()
    };
    let alpha = cfg.alpha().map_err(|e| CliError::Usage(format!("--skew: {e}")))?;
    log::info!("skew-normal shape alpha = {alpha:.6}");
    let rows = run_grid(&a.mu_grid, &a.sigma_grid, &a.families, &cfg).context("kl-bench")?;

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["family", "mu", "sigma", "kl", "converged", "params"]).context("writing results")?;
    for row in &rows {
        if !row.converged {
            log::warn!("{} at mu={}, sigma={} did not converge", row.family, row.mu, row.sigma);
        }
        let params = row.params.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        w.write_record([
            row.family.name().to_string(),
            row.mu.to_string(),
            row.sigma.to_string(),
            row.kl.to_string(),
            row.converged.to_string(),
            params,
        ])
        .context("writing results")?;
    }
    w.flush().context("writing results")
}
