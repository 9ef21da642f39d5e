//! `accord`: pretrain, personalize, sample, analyze and self-verify.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use accord::analysis::write_trace_csv;
use accord::checkpoint::{load_checkpoint, save_checkpoint};
use accord::config::RunConfig;
use accord::denoiser::{Condition, DenoiserParams};
use accord::losses::{LossWeights, ReferencePrompt};
use accord::projector::{train_projector, Projector};
use accord::schedule::NoiseSchedule;
use accord::trainer::{
    final_report, generation_accuracy, personalize, pretrain, sample, write_metrics_csv, Regime, Workbench,
};
use accord::verify::Suite;
use accord::world::{build_world, GridWorld};

#[derive(Parser)]
#[command(name = "accord", version, about = "Concept-decoupling workbench on an analytic grid world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser and write `base.ckpt` under the pretrain directory.
    Pretrain {
        /// TOML run configuration.
        config: PathBuf,
    },
    /// Personalize the base model on a coupled reference set.
    Personalize {
        /// TOML run configuration.
        config: PathBuf,
        /// Loss weights as `recon,dd,pd`.
        #[arg(long)]
        weights: Option<String>,
        /// Trainable set: `embedding` or `full`.
        #[arg(long)]
        regime: Option<Regime>,
        /// Fixed prior-decouple cosine target in [-1, 1].
        #[arg(long, allow_hyphen_values = true)]
        cosine_target: Option<f64>,
        /// Reconstruction condition for reference samples: `subject` or `pair`.
        #[arg(long, value_parser = parse_prompt)]
        reference_prompt: Option<ReferencePrompt>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a checkpoint under one condition.
    Sample {
        checkpoint: PathBuf,
        /// `subject:context`; either side may be empty or `null`.
        #[arg(long)]
        condition: String,
        #[arg(short = 'n', long = "num")]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Coupling, fidelity and discrepancy report for a personalized checkpoint.
    Analyze {
        checkpoint: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-check suites.
    Verify {
        /// `thm33`, `bridge`, `eq10`, `gradcheck` or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_prompt(s: &str) -> Result<ReferencePrompt, String> {
    match s {
        "subject" => Ok(ReferencePrompt::Subject),
        "pair" => Ok(ReferencePrompt::Pair),
        _ => Err(format!("expected subject or pair, got {s:?}")),
    }
}

/// A failure reported on stderr as `{command, stage, message}`.
struct Failure {
    stage: &'static str,
    message: String,
}

fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure { stage, message: e.to_string() }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Pretrain { config } => ("pretrain", cmd_pretrain(&config)),
        Command::Personalize { config, weights, regime, cosine_target, reference_prompt, seed } => {
            ("personalize", cmd_personalize(&config, weights.as_deref(), regime, cosine_target, reference_prompt, seed))
        }
        Command::Sample { checkpoint, condition, n, seed, out } => ("sample", cmd_sample(&checkpoint, &condition, n, seed, &out)),
        Command::Analyze { checkpoint, out } => ("analyze", cmd_analyze(&checkpoint, &out)),
        Command::Verify { suite, seed } => ("verify", cmd_verify(&suite, seed)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "command": name, "stage": f.stage, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}

struct Env {
    config: RunConfig,
    world: GridWorld,
    schedule: NoiseSchedule,
}

impl Env {
    fn new(config: RunConfig) -> Result<Self, Failure> {
        let world = build_world(&config.world).map_err(at("config"))?;
        let schedule = config.schedule.build().map_err(at("config"))?;
        Ok(Self { config, world, schedule })
    }

    /// Rebuilds the environment a checkpoint was trained in from its metadata.
    fn from_checkpoint(path: &Path) -> Result<(Self, DenoiserParams), Failure> {
        let (params, meta) = load_checkpoint(path).map_err(at("checkpoint"))?;
        let config = RunConfig::from_toml(&meta).map_err(at("checkpoint"))?;
        Ok((Self::new(config)?, params))
    }

    fn projector(&self, params: &DenoiserParams) -> Result<Projector, Failure> {
        train_projector(&self.world, &params.table.embeddings, &self.config.projector, self.config.seed).map_err(at("projector"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(at("io"))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Failure { stage: "io", message: format!("{}: {e}", path.display()) })?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(at("io"))?;
    writeln!(out).map_err(at("io"))?;
    out.flush().map_err(at("io"))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(at("config"))
}

fn run_pretrain(env: &Env) -> Result<DenoiserParams, Failure> {
    let c = &env.config;
    let outcome = pretrain(&env.world, &env.schedule, c.denoiser, &c.pretrain, c.seed).map_err(at("pretrain"))?;
    let dir = c.pretrain_dir();
    fs::create_dir_all(&dir).map_err(at("io"))?;
    save_checkpoint(&outcome.params, &c.to_toml(), &dir.join("base.ckpt")).map_err(at("checkpoint"))?;
    let mut curve = create(&dir.join("loss_curve.csv"))?;
    writeln!(curve, "step,loss").map_err(at("io"))?;
    for (step, loss) in &outcome.loss_curve {
        writeln!(curve, "{step},{loss}").map_err(at("io"))?;
    }
    curve.flush().map_err(at("io"))?;
    let accuracy = generation_accuracy(&outcome.params, &env.world, &env.schedule, c.pretrain.eval_samples, c.seed)
        .map_err(at("evaluate"))?;
    write_json(&dir.join("pretrain.json"), &json!({ "generation_accuracy": accuracy, "steps": c.pretrain.steps, "seed": c.seed }))?;
    println!("{}", dir.display());
    Ok(outcome.params)
}

fn cmd_pretrain(path: &Path) -> Outcome {
    let env = Env::new(load_config(path)?)?;
    run_pretrain(&env).map(|_| ())
}

fn cmd_personalize(
    path: &Path,
    weights: Option<&str>,
    regime: Option<Regime>,
    cosine_target: Option<f64>,
    prompt: Option<ReferencePrompt>,
    seed: Option<u64>,
) -> Outcome {
    let mut config = load_config(path)?;
    if let Some(w) = weights {
        config.personalize.weights = LossWeights::parse(w).map_err(at("config"))?;
    }
    if let Some(r) = regime {
        config.personalize.regime = r;
    }
    if cosine_target.is_some() {
        config.personalize.cosine_target = cosine_target;
    }
    if let Some(p) = prompt {
        config.personalize.reference_prompt = p;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(at("config"))?;
    let env = Env::new(config)?;
    let c = &env.config;

    let base_path = c.pretrain_dir().join("base.ckpt");
    let base = if base_path.exists() {
        load_checkpoint(&base_path).map_err(at("checkpoint"))?.0
    } else {
        eprintln!("no base checkpoint at {}, pretraining first", base_path.display());
        run_pretrain(&env)?
    };
    let projector = env.projector(&base)?;
    let vocab = env.world.vocabulary();
    let coupled = vocab.parse(&c.personalize.coupled_context).map_err(at("config"))?;
    let reference = env
        .world
        .make_reference_set(coupled, c.personalize.reference_size, c.seed)
        .map_err(at("reference"))?;
    let bench = Workbench { world: &env.world, schedule: &env.schedule, projector: &projector };
    let out = personalize(&base, &reference, &bench, &c.personalize, c.seed).map_err(at("personalize"))?;

    let dir = c.run_dir();
    fs::create_dir_all(&dir).map_err(at("io"))?;
    fs::write(dir.join("config.toml"), c.to_toml()).map_err(at("io"))?;
    let mut metrics = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&out.metrics, &mut metrics).map_err(at("io"))?;
    metrics.flush().map_err(at("io"))?;
    let mut traces = create(&dir.join("traces.csv"))?;
    write_trace_csv(&out.traces, &mut traces).map_err(at("io"))?;
    traces.flush().map_err(at("io"))?;
    let mut refs = create(&dir.join("reference.csv"))?;
    env.world.write_csv(&reference, &mut refs).map_err(at("io"))?;
    refs.flush().map_err(at("io"))?;
    write_json(&dir.join("report.json"), &out.report)?;
    save_checkpoint(&out.params, &c.to_toml(), &dir.join("personalized.ckpt")).map_err(at("checkpoint"))?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sample(path: &Path, condition: &str, n: usize, seed: u64, out: &Path) -> Outcome {
    if n == 0 {
        return Err(Failure { stage: "arguments", message: "-n must be at least 1".into() });
    }
    let (env, params) = Env::from_checkpoint(path)?;
    let vocab = env.world.vocabulary();
    let cond = Condition::parse(vocab, condition).map_err(at("arguments"))?;
    let xs = sample(&params, &cond, n, seed, &env.schedule).map_err(at("sample"))?;
    let mut w = create(out)?;
    let header: Vec<String> = (0..env.world.dim()).map(|k| format!("x_{k}")).collect();
    writeln!(w, "{},subject_label,context_label", header.join(",")).map_err(at("io"))?;
    for x in &xs {
        let label = env.world.oracle_label(&x.values).map_err(at("sample"))?;
        let (s, c) = match label {
            Some((i, j)) => (vocab.name(vocab.subject(i)), vocab.name(vocab.context(j))),
            None => (String::new(), String::new()),
        };
        let vals: Vec<String> = x.values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{s},{c}", vals.join(",")).map_err(at("io"))?;
    }
    w.flush().map_err(at("io"))
}

fn cmd_analyze(path: &Path, out: &Path) -> Outcome {
    let (env, params) = Env::from_checkpoint(path)?;
    let projector = env.projector(&params)?;
    let c = &env.config;
    let coupled = env.world.vocabulary().parse(&c.personalize.coupled_context).map_err(at("config"))?;
    let bench = Workbench { world: &env.world, schedule: &env.schedule, projector: &projector };
    let (report, _) = final_report(&params, &bench, coupled, &c.personalize, c.seed).map_err(at("analyze"))?;
    write_json(out, &report)
}

fn cmd_verify(suite: &str, seed: u64) -> Outcome {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(at("arguments"))?]
    };
    let mut failed = Vec::new();
    for s in suites {
        let report = s.run(seed).map_err(at("verify"))?;
        println!("{}", serde_json::to_string(&report).map_err(at("io"))?);
        if !report.passed {
            failed.push(format!("{s}: {} of {} checks failed (max error {:e})", report.failures, report.checks, report.max_error));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { stage: "verify", message: failed.join("; ") })
    }
}
