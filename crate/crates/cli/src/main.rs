mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mssf::bcrw::simulate_trajectory;
use mssf::em::{fit_bcrw_direct, fit_ssf, posterior, BcrwModel, EmConfig, SsfModel, StateOrdering};
use mssf::io::{
    read_choice_sets, read_landscape, read_trajectory, write_choice_sets, write_landscape, write_smoothed,
    write_states, write_trajectory, FitSummary,
};
use mssf::model::Point;
use mssf::rng::stream_rng;
use mssf::sampler::{build_choice_sets, correct_coefficients, CovariateFormula, OffsetRule, SamplingScheme};
use mssf::study::{equivalence_report, run_study, scenario_landscape, Estimator, StudyConfig, SIMULATE_STREAM};
use mssf::{ChoiceSet, HmmParams, LandscapeGrid, Matrix, Trajectory};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mssf",
    version,
    about = "Multi-state step selection: simulate, sample controls, fit, decode, study"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate a multi-state BCRW trajectory.
    Simulate,
    /// Sample matched controls and write the long-format choice sets.
    SampleControls,
    /// Fit the multi-state model.
    Fit,
    /// Smoothed state probabilities and decoded states under a saved fit.
    Decode,
    /// Replicated simulation study.
    Study,
    /// Compare estimators on one trajectory.
    Equivalence,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::SampleControls => "sample-controls",
            Self::Fit => "fit",
            Self::Decode => "decode",
            Self::Study => "study",
            Self::Equivalence => "equivalence",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SIMULATION: u8 = 3;
const EXIT_FIT: u8 = 4;
const EXIT_STUDY_QUALITY: u8 = 5;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn fail<E: Into<anyhow::Error>>(code: u8) -> impl FnOnce(E) -> Failure {
    move |e| Failure { code, error: e.into() }
}

#[derive(Default)]
struct Outcome {
    outputs: Vec<String>,
    warnings: Vec<String>,
    details: Option<serde_json::Value>,
    code: u8,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: &'a [String],
    warnings: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<&'a serde_json::Value>,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    outcome: Outcome,
}

impl Ctx {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let f = File::create(self.out.join(name))
            .with_context(|| format!("creating {name}"))
            .map_err(fail(EXIT_CONFIG))?;
        self.outcome.outputs.push(name.to_owned());
        Ok(BufWriter::new(f))
    }

    fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(fail(EXIT_CONFIG))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(fail(EXIT_CONFIG))
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.outcome.warnings.push(msg);
    }

    fn landscape(&self) -> Result<Option<LandscapeGrid>, Failure> {
        if let Some(p) = &self.cfg.landscape {
            return read_landscape(p)
                .with_context(|| format!("reading landscape {}", p.display()))
                .map(Some)
                .map_err(fail(EXIT_CONFIG));
        }
        if self.cfg.scenario.is_some() {
            let s = self.cfg.scenario().map_err(fail(EXIT_CONFIG))?;
            return Ok(Some(scenario_landscape(&s.targets)));
        }
        Ok(None)
    }

    fn trajectory(&self) -> Result<Trajectory, Failure> {
        let p = RunConfig::require(&self.cfg.trajectory, "trajectory").map_err(fail(EXIT_CONFIG))?;
        let f = File::open(p)
            .with_context(|| format!("opening {}", p.display()))
            .map_err(fail(EXIT_CONFIG))?;
        read_trajectory(f)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(fail(EXIT_CONFIG))
    }

    fn em(&self) -> EmConfig<f64> {
        EmConfig {
            seed: self.seed,
            ..self.cfg.em.clone()
        }
    }
}

fn targets_of(landscape: Option<&LandscapeGrid>) -> (Vec<String>, Vec<Point<f64>>) {
    landscape.map_or_else(Default::default, |l| {
        (
            l.targets.iter().map(|t| t.name.clone()).collect(),
            l.targets.iter().map(|t| t.point()).collect(),
        )
    })
}

/// Choice sets from the configured file, or sampled from the trajectory.
struct SsfData {
    sets: Vec<ChoiceSet>,
    names: Vec<String>,
    scheme: Option<SamplingScheme<f64>>,
}

fn ssf_data(ctx: &Ctx) -> Result<SsfData, Failure> {
    let scheme = ctx.cfg.sampling.as_ref().map(|s| s.scheme);
    if let Some(p) = &ctx.cfg.choice_sets {
        let f = File::open(p)
            .with_context(|| format!("opening {}", p.display()))
            .map_err(fail(EXIT_CONFIG))?;
        let (sets, names) = read_choice_sets(f)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(fail(EXIT_CONFIG))?;
        return Ok(SsfData { sets, names, scheme });
    }
    let sampling = RunConfig::require(&ctx.cfg.sampling, "sampling or choice_sets").map_err(fail(EXIT_CONFIG))?;
    let trajectory = ctx.trajectory()?;
    let landscape = ctx.landscape()?;
    let formula = match &ctx.cfg.formula {
        Some(f) => f.clone(),
        None => CovariateFormula::bcrw(&targets_of(landscape.as_ref()).0, sampling.scheme.offset_rule()),
    };
    let names = formula.names(landscape.as_ref());
    let sets = build_choice_sets(
        &trajectory,
        &sampling.scheme,
        sampling.n_controls,
        &formula,
        landscape.as_ref(),
        ctx.seed,
    )
    .context("sampling controls")
    .map_err(fail(EXIT_FIT))?;
    Ok(SsfData { sets, names, scheme })
}

fn distance_columns(names: &[String]) -> Option<(usize, usize)> {
    Some((
        names.iter().position(|n| n == "log_distance")?,
        names.iter().position(|n| n == "neg_distance")?,
    ))
}

fn ordering_for(names: &[String], scheme: Option<&SamplingScheme<f64>>) -> StateOrdering<f64> {
    if let Some((log_distance, neg_distance)) = distance_columns(names) {
        let eta_shift = scheme.and_then(|s| s.tilt()).unwrap_or([0.0, 0.0]);
        return StateOrdering::MeanDistance {
            log_distance,
            neg_distance,
            eta_shift,
        };
    }
    match names.iter().position(|n| n == "log_distance" || n == "neg_distance") {
        Some(index) => StateOrdering::Coefficient { index },
        None => StateOrdering::None,
    }
}

fn bcrw_names(target_names: &[String]) -> Vec<String> {
    CovariateFormula::bcrw(target_names, OffsetRule::Zero).names::<f64>(None)
}

fn cmd_simulate(ctx: &mut Ctx) -> Result<(), Failure> {
    let scenario = ctx.cfg.scenario().map_err(fail(EXIT_CONFIG))?;
    let mut rng = stream_rng(ctx.seed, SIMULATE_STREAM, 0);
    let path = simulate_trajectory(&mut rng, &scenario).map_err(fail(EXIT_SIMULATION))?;
    let w = ctx.create("trajectory.csv")?;
    write_trajectory(&path.trajectory, w).map_err(fail(EXIT_SIMULATION))?;
    let w = ctx.create("true_states.csv")?;
    write_states(&path.states, w).map_err(fail(EXIT_SIMULATION))?;
    write_landscape(&scenario_landscape(&scenario.targets), &ctx.out, "landscape").map_err(fail(EXIT_SIMULATION))?;
    ctx.outcome.outputs.push("landscape.json".into());
    if path.truncated {
        ctx.warn(format!(
            "walk reached max_steps = {} before any target; output is truncated",
            scenario.max_steps
        ));
    }
    ctx.outcome.details =
        Some(serde_json::json!({ "n_steps": path.trajectory.n_steps(), "truncated": path.truncated }));
    Ok(())
}

fn cmd_sample_controls(ctx: &mut Ctx) -> Result<(), Failure> {
    let data = ssf_data(ctx)?;
    let w = ctx.create("choice_sets.csv")?;
    write_choice_sets(&data.sets, &data.names, w).map_err(fail(EXIT_FIT))?;
    ctx.outcome.details = Some(serde_json::json!({ "n_choice_sets": data.sets.len(), "covariates": data.names }));
    Ok(())
}

fn cmd_fit(ctx: &mut Ctx) -> Result<(), Failure> {
    let estimator = ctx.cfg.estimator.unwrap_or(Estimator::Ssf);
    let mut em = EmConfig {
        std_errors: true,
        ..ctx.em()
    };
    let (fit, names, time_index, correction) = match estimator {
        Estimator::Ssf => {
            let data = ssf_data(ctx)?;
            if em.ordering == StateOrdering::None {
                em.ordering = ordering_for(&data.names, data.scheme.as_ref());
            }
            let mut fit = fit_ssf(&data.sets, &em).map_err(fail(EXIT_FIT))?;
            let tilt = data.scheme.and_then(|s| s.tilt());
            let correction = match (tilt, distance_columns(&data.names)) {
                (Some(tilt), Some(idx)) => {
                    let mut betas: Vec<Vec<f64>> = fit.state_params.iter().map(|p| p.beta.clone()).collect();
                    correct_coefficients(&mut betas, idx, tilt);
                    for (p, b) in fit.state_params.iter_mut().zip(betas) {
                        p.beta = b;
                    }
                    Some(tilt)
                }
                _ => None,
            };
            (
                fit,
                data.names,
                data.sets.iter().map(|c| c.time_index()).collect::<Vec<_>>(),
                correction,
            )
        }
        Estimator::BcrwDirect => {
            let trajectory = ctx.trajectory()?;
            let landscape = ctx.landscape()?;
            let (target_names, targets) = targets_of(landscape.as_ref());
            if em.ordering == StateOrdering::None {
                em.ordering = StateOrdering::bcrw();
            }
            let fit = fit_bcrw_direct(&trajectory, &targets, &em).map_err(fail(EXIT_FIT))?;
            (
                fit,
                bcrw_names(&target_names),
                (1..trajectory.n_steps()).collect(),
                None,
            )
        }
    };
    let mut summary = FitSummary::new(&fit, &names);
    summary.distance_correction = correction;
    if !fit.converged {
        ctx.warn(format!(
            "EM stopped after {} iterations without meeting the tolerance",
            fit.n_em_iterations
        ));
    }
    if !fit.degenerate_states.is_empty() {
        ctx.warn(format!(
            "states {:?} had negligible occupancy",
            fit.degenerate_states.iter().map(|s| s + 1).collect::<Vec<_>>()
        ));
    }
    ctx.write_json("fit.json", &summary)?;
    let w = ctx.create("smoothed.csv")?;
    write_smoothed(&time_index, &fit.smooth_probs, w).map_err(fail(EXIT_FIT))?;
    ctx.outcome.details = Some(
        serde_json::json!({ "estimator": estimator, "loglik": fit.loglik, "n_em_iterations": fit.n_em_iterations }),
    );
    Ok(())
}

fn cmd_decode(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = RunConfig::require(&ctx.cfg.fit, "fit").map_err(fail(EXIT_CONFIG))?;
    let f = File::open(p)
        .with_context(|| format!("opening {}", p.display()))
        .map_err(fail(EXIT_CONFIG))?;
    let summary: FitSummary = serde_json::from_reader(f)
        .with_context(|| format!("reading {}", p.display()))
        .map_err(fail(EXIT_CONFIG))?;
    if summary.transition.iter().any(|r| r.len() != summary.transition.len()) {
        return Err(fail(EXIT_CONFIG)(anyhow!("fit transition matrix is not square")));
    }
    let hmm =
        HmmParams::new(Matrix::from_rows(&summary.transition), summary.initial.clone()).map_err(fail(EXIT_CONFIG))?;
    let lookup = |names: &[String]| -> Result<Vec<Vec<f64>>, Failure> {
        (1..=hmm.n_states())
            .map(|s| {
                let coef = summary
                    .coefficients
                    .get(&format!("state{s}"))
                    .ok_or_else(|| anyhow!("fit lacks state{s}"))?;
                names
                    .iter()
                    .map(|n| {
                        coef.get(n)
                            .copied()
                            .ok_or_else(|| anyhow!("fit lacks coefficient '{n}' for state{s}"))
                    })
                    .collect()
            })
            .collect::<anyhow::Result<_>>()
            .map_err(fail(EXIT_CONFIG))
    };
    let (bundle, time_index) = match ctx.cfg.estimator.unwrap_or(Estimator::Ssf) {
        Estimator::Ssf => {
            let data = ssf_data(ctx)?;
            let mut betas = lookup(&data.names)?;
            if let (Some([a, b]), Some(idx)) = (summary.distance_correction, distance_columns(&data.names)) {
                correct_coefficients(&mut betas, idx, [-a, -b]);
            }
            let model = SsfModel::new(&data.sets).map_err(fail(EXIT_FIT))?;
            (
                posterior(&model, &betas, &hmm).map_err(fail(EXIT_FIT))?,
                data.sets.iter().map(|c| c.time_index()).collect::<Vec<_>>(),
            )
        }
        Estimator::BcrwDirect => {
            let trajectory = ctx.trajectory()?;
            let landscape = ctx.landscape()?;
            let (target_names, targets) = targets_of(landscape.as_ref());
            let betas = lookup(&bcrw_names(&target_names))?;
            let model = BcrwModel::new(&trajectory, &targets);
            (
                posterior(&model, &betas, &hmm).map_err(fail(EXIT_FIT))?,
                (1..trajectory.n_steps()).collect(),
            )
        }
    };
    let w = ctx.create("smoothed.csv")?;
    write_smoothed(&time_index, &bundle.smoothed, w).map_err(fail(EXIT_FIT))?;
    ctx.outcome.details = Some(serde_json::json!({ "loglik": bundle.loglik }));
    Ok(())
}

fn cmd_study(ctx: &mut Ctx) -> Result<(), Failure> {
    let block = RunConfig::require(&ctx.cfg.study, "study")
        .map_err(fail(EXIT_CONFIG))?
        .clone();
    let config = StudyConfig {
        scenario: ctx.cfg.scenario().map_err(fail(EXIT_CONFIG))?,
        n_replicates: block.n_replicates,
        n_controls: block.n_controls,
        schemes: block.schemes,
        estimators: block.estimators,
        seed: ctx.seed,
        em: ctx.em(),
    };
    config.validate().map_err(fail(EXIT_CONFIG))?;
    let report = run_study(&config).map_err(fail(EXIT_STUDY_QUALITY))?;
    let w = ctx.create("study.csv")?;
    report.write_csv(w).map_err(fail(EXIT_STUDY_QUALITY))?;
    ctx.write_json("study.json", &report)?;
    for cell in &report.cells {
        if cell.n_failed > 0 {
            ctx.warn(format!(
                "{}/{}: {} of {} replicates failed",
                cell.scheme,
                cell.estimator.label(),
                cell.n_failed,
                report.n_replicates
            ));
        }
    }
    if report.has_excessive_failures() {
        ctx.outcome.code = EXIT_STUDY_QUALITY;
    }
    Ok(())
}

fn cmd_equivalence(ctx: &mut Ctx) -> Result<(), Failure> {
    let block = RunConfig::require(&ctx.cfg.equivalence, "equivalence")
        .map_err(fail(EXIT_CONFIG))?
        .clone();
    let (trajectory, targets) = if ctx.cfg.trajectory.is_some() {
        let landscape = ctx.landscape()?;
        (ctx.trajectory()?, targets_of(landscape.as_ref()).1)
    } else {
        let scenario = ctx.cfg.scenario().map_err(fail(EXIT_CONFIG))?;
        let mut rng = stream_rng(ctx.seed, SIMULATE_STREAM, 0);
        let path = simulate_trajectory(&mut rng, &scenario).map_err(fail(EXIT_SIMULATION))?;
        if path.truncated {
            ctx.warn("simulated walk is truncated".into());
        }
        (path.trajectory, scenario.targets)
    };
    let report = equivalence_report(
        &trajectory,
        &targets,
        block.n_controls,
        &block.schemes,
        &ctx.em(),
        ctx.seed,
    )
    .map_err(fail(EXIT_FIT))?;
    let w = ctx.create("equivalence.csv")?;
    report.write_csv(w).map_err(fail(EXIT_FIT))?;
    ctx.write_json("equivalence.json", &report)?;
    Ok(())
}

fn write_manifest(ctx: &Ctx, command: Command, error: Option<&Failure>) -> anyhow::Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.seed = Some(ctx.seed);
    let manifest = Manifest {
        tool: "mssf",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        seed: ctx.seed,
        config: &cfg,
        status: if error.is_some() { "failed" } else { "ok" },
        error: error.map(|f| format!("{:#}", f.error)),
        outputs: &ctx.outcome.outputs,
        warnings: &ctx.outcome.warnings,
        details: ctx.outcome.details.as_ref(),
    };
    let mut w = BufWriter::new(File::create(ctx.out.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(fail(EXIT_CONFIG))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref()).map_err(fail(EXIT_CONFIG))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .map_err(fail(EXIT_CONFIG))?;
    let mut ctx = Ctx {
        cfg,
        seed,
        out: cli.out.clone(),
        outcome: Outcome::default(),
    };
    let result = match cli.command {
        Command::Simulate => cmd_simulate(&mut ctx),
        Command::SampleControls => cmd_sample_controls(&mut ctx),
        Command::Fit => cmd_fit(&mut ctx),
        Command::Decode => cmd_decode(&mut ctx),
        Command::Study => cmd_study(&mut ctx),
        Command::Equivalence => cmd_equivalence(&mut ctx),
    };
    if let Err(e) = write_manifest(&ctx, cli.command, result.as_ref().err()) {
        eprintln!("warning: could not write manifest: {e:#}");
    }
    result.map(|()| ctx.outcome.code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => {
            if code == EXIT_STUDY_QUALITY {
                eprintln!("error: more than 5% of replicates failed in at least one study cell");
            }
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
