//! Pretraining on the grid world, personalization on a reference set, and the
//! metric stream written while personalizing.

use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    attach_projector_prior, cosine_discrepancy, evaluate_coupling, fidelity_distance, trace_denoising_discrepancy,
    DependenceReport, DiscrepancyTrace, MIN_LABELED,
};
use crate::denoiser::{Condition, DenoiserArch, DenoiserParams, Trainable};
use crate::error::{invalid, Error, Result};
use crate::losses::{reconstruction_graph, total_loss_with_grads, LossBreakdown, LossSetup, LossWeights, ReconWeighting, ReferencePrompt};
use crate::autodiff::Graph;
use crate::optim::{Adam, Update};
use crate::projector::Projector;
use crate::rng;
use crate::sampling::sample_batch;
use crate::schedule::{NoiseSchedule, StateVector};
use crate::world::{ConceptId, GridWorld, LabeledSample};

pub use crate::sampling::sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that each condition slot is replaced by the null concept.
    pub slot_dropout: f64,
    /// Conditioned samples used for the generation-accuracy check.
    pub eval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch_size: 128, learning_rate: 1e-3, slot_dropout: 0.25, eval_samples: 1000 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("pretraining needs at least one step and one sample per batch"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.slot_dropout) {
            return Err(invalid(format!("slot dropout must be in [0, 1), got {}", self.slot_dropout)));
        }
        Ok(())
    }
}

/// Which parameters personalization may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Only the personal token's embedding.
    Embedding,
    /// The personal token and every network weight.
    Full,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Self::Embedding),
            "full" => Ok(Self::Full),
            _ => Err(invalid(format!("regime {s:?} is not embedding or full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub steps: usize,
    pub regime: Regime,
    pub weights: LossWeights,
    /// Fixed prior-decouple cosine target; absent means match the superclass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_target: Option<f64>,
    /// Step size for the personal token.
    pub learning_rate: f64,
    /// Step size for network weights in the full regime.
    pub weight_learning_rate: f64,
    pub reference_size: usize,
    pub coupled_context: String,
    /// Condition used for the reconstruction term on reference samples.
    pub reference_prompt: ReferencePrompt,
    pub token_noise: f64,
    /// Metric rows every this many steps; 0 keeps only the final row.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub final_samples: usize,
    pub fidelity_samples: usize,
    pub trace_trajectories: usize,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            regime: Regime::Full,
            weights: LossWeights::default(),
            cosine_target: None,
            learning_rate: 1e-3,
            weight_learning_rate: 1e-4,
            reference_size: 4,
            coupled_context: "g1".into(),
            reference_prompt: ReferencePrompt::default(),
            token_noise: 0.0,
            eval_every: 50,
            eval_samples: 500,
            final_samples: 4000,
            fidelity_samples: 400,
            trace_trajectories: 16,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("personalization needs at least one step"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_learning_rate > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if self.eval_every != 0 && !self.steps.is_multiple_of(self.eval_every) {
            return Err(invalid(format!("eval_every {} does not divide steps {}", self.eval_every, self.steps)));
        }
        if !(3..=16).contains(&self.reference_size) {
            return Err(invalid(format!("reference_size must be in 3..=16, got {}", self.reference_size)));
        }
        if !(self.token_noise >= 0.0) {
            return Err(invalid("token_noise must be nonnegative"));
        }
        if self.cosine_target.is_some_and(|c| !(-1.0..=1.0).contains(&c)) {
            return Err(invalid("cosine_target must lie in [-1, 1]"));
        }
        if self.eval_samples < MIN_LABELED || self.final_samples < MIN_LABELED {
            return Err(invalid(format!("coupling evaluations need at least {MIN_LABELED} samples")));
        }
        if self.fidelity_samples == 0 || self.trace_trajectories == 0 {
            return Err(invalid("evaluation sizes must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: DenoiserParams,
    /// `(step, mean loss over the preceding window)` every 100 steps.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Fits a fresh denoiser to the world with condition-slot dropout, so the
/// joint, single-concept and unconditional branches are all trained.
pub fn pretrain(
    world: &GridWorld,
    schedule: &NoiseSchedule,
    arch: DenoiserArch,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if arch.dim != world.dim() {
        return Err(Error::DimensionMismatch { expected: world.dim(), got: arch.dim });
    }
    let vocab = world.vocabulary();
    let mut params = DenoiserParams::init(arch, vocab, &mut rng::stream(seed, "denoiser-init"))?;
    let mut data_rng = rng::stream(seed, "pretrain-data");
    let mut adam = Adam::for_tensors(&params.tensors());
    let (b, d, big_t) = (config.batch_size, world.dim(), schedule.num_steps());
    let null = vocab.null();
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 0..config.steps {
        let mut x0 = Array2::zeros((b, d));
        let mut eps = Array2::zeros((b, d));
        let mut conds = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for k in 0..b {
            let (i, j) = world.draw_labels(&mut data_rng);
            x0.row_mut(k).assign(&Array1::from(world.draw_point(world.mean(i, j), &mut data_rng)));
            let s = if data_rng.random::<f64>() < config.slot_dropout { null } else { vocab.subject(i) };
            let c = if data_rng.random::<f64>() < config.slot_dropout { null } else { vocab.context(j) };
            conds.push(match (s == null, c == null) {
                (true, true) => Condition::Null,
                (false, true) => Condition::Subject(s),
                (true, false) => Condition::Context(c),
                (false, false) => Condition::Pair(s, c),
            });
            ts.push(data_rng.random_range(1..=big_t));
            for e in eps.row_mut(k).iter_mut() {
                *e = StandardNormal.sample(&mut data_rng);
            }
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g, Trainable::ALL);
        let (loss, _) = reconstruction_graph(&mut g, &params, &bound, &x0, &eps, &conds, &ts, schedule, ReconWeighting::Uniform)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { stage: "pretraining", seed, step });
        }
        window += value;
        if (step + 1) % 100 == 0 {
            curve.push((step + 1, window / 100.0));
            window = 0.0;
        }
        let grads = params.collect_grads(&bound, &g.backward(loss)?);
        let mask = params.table.trainable.clone();
        let mut updates = vec![Update::Rows { lr: config.learning_rate, rows: &mask }];
        updates.extend(std::iter::repeat_n(Update::All { lr: config.learning_rate }, grads.tensors().len() - 1));
        adam.step(params.tensors_mut(), &grads.tensors(), &updates);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite { stage: "pretraining", seed, step: config.steps });
    }
    Ok(PretrainOutcome { params, loss_curve: curve })
}

/// Fraction of pair-conditioned samples the oracle assigns to the prompted
/// cell, with prompts spread evenly over all cells.
pub fn generation_accuracy(params: &DenoiserParams, world: &GridWorld, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    let vocab = world.vocabulary();
    let cells: Vec<(usize, usize)> = (0..vocab.num_subjects()).flat_map(|i| (0..vocab.num_contexts()).map(move |j| (i, j))).collect();
    let prompts: Vec<(usize, usize)> = (0..n).map(|k| cells[k % cells.len()]).collect();
    let conds: Vec<Condition> = prompts.iter().map(|(i, j)| Condition::Pair(vocab.subject(*i), vocab.context(*j))).collect();
    let x = sample_batch(params, &conds, seed, schedule)?;
    let mut hits = 0;
    for (row, cell) in x.rows().into_iter().zip(&prompts) {
        hits += usize::from(world.oracle_label(row.as_slice().unwrap())? == Some(*cell));
    }
    Ok(hits as f64 / n as f64)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub train_step: usize,
    pub recon: f64,
    pub dd: f64,
    pub pd: f64,
    pub coupling_metric: f64,
    pub cum_discrepancy: f64,
    pub mean_cosine_discrepancy: f64,
}

pub const METRICS_HEADER: &str = "train_step,recon,dd,pd,coupling_metric,cum_discrepancy,mean_cosine_discrepancy";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.train_step, r.recon, r.dd, r.pd, r.coupling_metric, r.cum_discrepancy, r.mean_cosine_discrepancy
        )?;
    }
    Ok(())
}

/// Final summary written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub dependence: DependenceReport,
    pub fidelity_distance: f64,
    pub cum_discrepancy: f64,
    pub mean_cosine_discrepancy: f64,
    pub seed: u64,
    pub regime: Regime,
    pub weights: LossWeights,
    pub cosine_target: Option<f64>,
    pub steps: usize,
    pub coupled_context: String,
}

/// Frozen inputs shared by every personalization run on one world.
#[derive(Debug, Clone, Copy)]
pub struct Workbench<'a> {
    pub world: &'a GridWorld,
    pub schedule: &'a NoiseSchedule,
    pub projector: &'a Projector,
}

#[derive(Debug, Clone)]
pub struct PersonalizeOutcome {
    pub params: DenoiserParams,
    pub metrics: Vec<MetricsRow>,
    pub breakdowns: Vec<LossBreakdown>,
    pub report: RunReport,
    pub traces: Vec<DiscrepancyTrace>,
}

/// How the per-step objective is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectivePath {
    Combined,
    /// Reconstruction alone, without building the decoupling terms at all.
    ReconstructionOnly,
}

struct Snapshot {
    coupling: f64,
    cum_discrepancy: f64,
    cosine: f64,
}

fn snapshot(bench: &Workbench<'_>, params: &DenoiserParams, coupled: ConceptId, config: &PersonalizeConfig, seed: u64, step: usize) -> Result<Snapshot> {
    let vocab = bench.world.vocabulary();
    let contexts: Vec<ConceptId> = std::iter::once(coupled).chain(vocab.contexts().filter(|c| *c != coupled)).collect();
    let report = evaluate_coupling(params, bench.world, bench.schedule, vocab.personal(), &contexts, config.eval_samples, rng::derive(seed, "eval"))?;
    let (cum, cos) = discrepancy_summaries(bench, params, coupled, config.trace_trajectories, seed, step)?;
    Ok(Snapshot { coupling: report.coupling_metric, cum_discrepancy: cum, cosine: cos })
}

fn discrepancy_summaries(
    bench: &Workbench<'_>,
    params: &DenoiserParams,
    coupled: ConceptId,
    trajectories: usize,
    seed: u64,
    step: usize,
) -> Result<(f64, f64)> {
    let vocab = bench.world.vocabulary();
    let traces = trace_denoising_discrepancy(params, vocab.personal(), coupled, trajectories, bench.schedule, rng::derive(seed, "trace"), step)?;
    summarize_traces(bench, params, &traces)
}

fn summarize_traces(bench: &Workbench<'_>, params: &DenoiserParams, traces: &[DiscrepancyTrace]) -> Result<(f64, f64)> {
    let vocab = bench.world.vocabulary();
    let cum = traces.iter().map(|t| t.cumulative.abs()).sum::<f64>() / traces.len() as f64;
    let contexts: Vec<Array1<f64>> = vocab.contexts().map(|c| params.table.get(c)).collect::<Result<_>>()?;
    let e_p = params.table.get(vocab.personal())?;
    let e_s = params.table.get(vocab.superclass())?;
    let cos = cosine_discrepancy(bench.projector, e_p.as_slice().unwrap(), e_s.as_slice().unwrap(), &contexts)?;
    Ok((cum, cos.iter().sum::<f64>() / cos.len() as f64))
}

pub fn personalize(
    base: &DenoiserParams,
    reference: &[LabeledSample],
    bench: &Workbench<'_>,
    config: &PersonalizeConfig,
    seed: u64,
) -> Result<PersonalizeOutcome> {
    personalize_with(base, reference, bench, config, seed, ObjectivePath::Combined)
}

/// [`personalize`] with an explicit objective path; the reconstruction-only
/// path is the control for the plug-in property of the decoupling terms.
pub fn personalize_with(
    base: &DenoiserParams,
    reference: &[LabeledSample],
    bench: &Workbench<'_>,
    config: &PersonalizeConfig,
    seed: u64,
    path: ObjectivePath,
) -> Result<PersonalizeOutcome> {
    config.validate()?;
    let world = bench.world;
    let vocab = world.vocabulary();
    let (personal, superclass) = (vocab.personal(), vocab.superclass());
    let first = reference.first().ok_or_else(|| invalid("reference set is empty"))?;
    if first.subject != personal {
        return Err(invalid("reference samples must be labeled with the personal concept"));
    }
    let coupled = first.context;
    if path == ObjectivePath::ReconstructionOnly && (config.weights.lambda_dd != 0.0 || config.weights.lambda_pd != 0.0) {
        return Err(invalid("the reconstruction-only path needs zero decoupling weights"));
    }

    let mut params = base.clone();
    params.table.init_personal_token(personal, superclass, config.token_noise, &mut rng::stream(seed, "personal-token"))?;
    let trainable = match config.regime {
        Regime::Embedding => Trainable::EMBEDDINGS,
        Regime::Full => Trainable::ALL,
    };
    let mut adam = Adam::for_tensors(&params.tensors());
    let contexts: Vec<ConceptId> = vocab.contexts().collect();
    let setup = LossSetup {
        projector: bench.projector,
        schedule: bench.schedule,
        superclass,
        contexts: &contexts,
        cosine_target: config.cosine_target,
        prompt: config.reference_prompt,
    };
    let mut t_rng = rng::stream(seed, "personalize-t");
    let mut noise_rng = rng::stream(seed, "personalize-noise");
    let (n_ref, dim, big_t) = (reference.len(), world.dim(), bench.schedule.num_steps());

    let mut metrics = Vec::new();
    let mut breakdowns = Vec::with_capacity(config.steps);
    let mut window = [0.0; 3];
    for step in 0..config.steps {
        let t = t_rng.random_range(1..=big_t);
        let eps = Array2::from_shape_fn((n_ref, dim), |_| StandardNormal.sample(&mut noise_rng));
        let (b, grads) = match path {
            ObjectivePath::Combined => total_loss_with_grads(&params, trainable, &setup, reference, &eps, &config.weights, t)?,
            ObjectivePath::ReconstructionOnly => recon_only_step(&params, trainable, reference, &eps, t, bench.schedule, config.reference_prompt)?,
        };
        if ![b.recon, b.dd, b.pd, b.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: "personalization", seed, step });
        }
        if step == 0 && config.eval_every != 0 {
            let s = snapshot(bench, &params, coupled, config, seed, 0)?;
            metrics.push(MetricsRow {
                train_step: 0,
                recon: b.recon,
                dd: b.dd,
                pd: b.pd,
                coupling_metric: s.coupling,
                cum_discrepancy: s.cum_discrepancy,
                mean_cosine_discrepancy: s.cosine,
            });
        }
        breakdowns.push(b);
        window[0] += b.recon;
        window[1] += b.dd;
        window[2] += b.pd;

        let mask = params.table.trainable.clone();
        let mut updates = vec![Update::Rows { lr: config.learning_rate, rows: &mask }];
        let layer_update = match config.regime {
            Regime::Embedding => Update::Frozen,
            Regime::Full => Update::All { lr: config.weight_learning_rate },
        };
        updates.extend(std::iter::repeat_n(layer_update, grads.tensors().len() - 1));
        adam.step(params.tensors_mut(), &grads.tensors(), &updates);

        let done = step + 1;
        let emit = if config.eval_every == 0 { done == config.steps } else { done % config.eval_every == 0 };
        if emit {
            let span = if config.eval_every == 0 { config.steps } else { config.eval_every } as f64;
            let s = snapshot(bench, &params, coupled, config, seed, done)?;
            metrics.push(MetricsRow {
                train_step: done,
                recon: window[0] / span,
                dd: window[1] / span,
                pd: window[2] / span,
                coupling_metric: s.coupling,
                cum_discrepancy: s.cum_discrepancy,
                mean_cosine_discrepancy: s.cosine,
            });
            window = [0.0; 3];
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite { stage: "personalization", seed, step: config.steps });
    }

    let (report, traces) = final_report(&params, bench, coupled, config, seed)?;
    Ok(PersonalizeOutcome { params, metrics, breakdowns, report, traces })
}

/// Final coupling, fidelity and discrepancy summaries for personalized parameters.
pub fn final_report(
    params: &DenoiserParams,
    bench: &Workbench<'_>,
    coupled: ConceptId,
    config: &PersonalizeConfig,
    seed: u64,
) -> Result<(RunReport, Vec<DiscrepancyTrace>)> {
    let world = bench.world;
    let vocab = world.vocabulary();
    let personal = vocab.personal();
    let contexts: Vec<ConceptId> = std::iter::once(coupled).chain(vocab.contexts().filter(|c| *c != coupled)).collect();
    let mut dependence = evaluate_coupling(params, world, bench.schedule, personal, &contexts, config.final_samples, rng::derive(seed, "final-eval"))?;
    attach_projector_prior(&mut dependence, world, bench.projector, &params.table.embeddings, personal)?;

    let fid_conds: Vec<Condition> = (0..config.fidelity_samples).map(|k| Condition::Pair(personal, vocab.context(k % vocab.num_contexts()))).collect();
    let fid = sample_batch(params, &fid_conds, rng::derive(seed, "fidelity"), bench.schedule)?;
    let fid: Vec<StateVector> = fid.rows().into_iter().map(|r| StateVector::clean(r.to_vec())).collect();
    let fidelity = fidelity_distance(world, &fid)?;

    let traces = trace_denoising_discrepancy(params, personal, coupled, config.trace_trajectories, bench.schedule, rng::derive(seed, "trace"), config.steps)?;
    let (cum, cos) = summarize_traces(bench, params, &traces)?;
    let report = RunReport {
        dependence,
        fidelity_distance: fidelity,
        cum_discrepancy: cum,
        mean_cosine_discrepancy: cos,
        seed,
        regime: config.regime,
        weights: config.weights,
        cosine_target: config.cosine_target,
        steps: config.steps,
        coupled_context: vocab.name(coupled),
    };
    Ok((report, traces))
}

fn recon_only_step(
    params: &DenoiserParams,
    trainable: Trainable,
    batch: &[LabeledSample],
    eps: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    prompt: ReferencePrompt,
) -> Result<(LossBreakdown, crate::denoiser::DenoiserGrads)> {
    let dim = params.arch.dim;
    let mut x0 = Array2::zeros((batch.len(), dim));
    for (mut row, s) in x0.rows_mut().into_iter().zip(batch) {
        row.assign(&Array1::from(s.x.values.clone()));
    }
    let conds: Vec<Condition> = batch.iter().map(|s| prompt.condition(s.subject, s.context)).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, trainable);
    let (recon, _) = reconstruction_graph(&mut g, params, &bound, &x0, eps, &conds, &vec![t; batch.len()], schedule, ReconWeighting::Likelihood)?;
    let root = g.scale(recon, 1.0);
    let grads = params.collect_grads(&bound, &g.backward(root)?);
    let value = g.scalar(recon);
    Ok((LossBreakdown { recon: value, dd: 0.0, pd: 0.0, total: value, t_sampled: t }, grads))
}
