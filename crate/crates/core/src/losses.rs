//! Training objectives: reconstruction, the denoising-decouple loss built from
//! four denoiser branches, and the prior-decouple loss in projector space.
//!
//! Each objective comes in two forms: a graph builder used by the trainer and
//! a plain scalar function used by tests and analysis.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::denoiser::{BoundDenoiser, Condition, DenoiserGrads, DenoiserParams, Trainable};
use crate::error::{invalid, Error, Result};
use crate::projector::{cosine, Projector};
use crate::rng;
use crate::schedule::{NoiseSchedule, StateVector};
use crate::world::{ConceptId, LabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_dd: f64,
    pub lambda_pd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_recon: 1.0, lambda_dd: 0.2, lambda_pd: 0.002 }
    }
}

impl LossWeights {
    pub const BASELINE: Self = Self { lambda_recon: 1.0, lambda_dd: 0.0, lambda_pd: 0.0 };

    pub fn new(lambda_recon: f64, lambda_dd: f64, lambda_pd: f64) -> Result<Self> {
        let w = Self { lambda_recon, lambda_dd, lambda_pd };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_recon", self.lambda_recon), ("lambda_dd", self.lambda_dd), ("lambda_pd", self.lambda_pd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Parses `recon,dd,pd`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(invalid(format!("weights {text:?} are not recon,dd,pd")));
        }
        let mut v = [0.0; 3];
        for (dst, p) in v.iter_mut().zip(&parts) {
            *dst = p.parse().map_err(|_| invalid(format!("weight {p:?} is not a number")))?;
        }
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub dd: f64,
    pub pd: f64,
    pub total: f64,
    pub t_sampled: usize,
}

/// Per-timestep weighting of the squared reconstruction residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconWeighting {
    /// `1 / (2 sigma_t^2)`, the Gaussian transition likelihood.
    Likelihood,
    /// Rescaled so every step weighs like a unit-variance noise regression.
    Uniform,
}

impl ReconWeighting {
    fn factor(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Self::Likelihood => 1.0 / (2.0 * schedule.sigma(t).powi(2)),
            Self::Uniform => {
                // posterior mean error = k_t * (noise regression error)
                let beta = schedule.beta(t);
                let k = beta / ((1.0 - beta).sqrt() * (1.0 - schedule.alpha(t)).sqrt());
                1.0 / (k * k)
            }
        }
    }
}

/// `||target - output||^2 / (2 sigma^2)`.
pub fn residual_loss(target: &[f64], output: &[f64], sigma: f64) -> f64 {
    let sq: f64 = target.iter().zip(output).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * sigma * sigma)
}

/// Forward-noised rows `x_t` for per-row timesteps.
pub fn noisy_rows(schedule: &NoiseSchedule, x0: &Array2<f64>, eps: &Array2<f64>, ts: &[usize]) -> Array2<f64> {
    let mut out = x0.clone();
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        let a = schedule.alpha(ts[b]);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        for (k, v) in row.iter_mut().enumerate() {
            *v = sa * x0[[b, k]] + sb * eps[[b, k]];
        }
    }
    out
}

/// Posterior means `E[x_{t-1} | x_t, x_0]`, row by row.
pub fn posterior_targets(schedule: &NoiseSchedule, x0: &Array2<f64>, x_t: &Array2<f64>, ts: &[usize]) -> Array2<f64> {
    let mut out = x0.clone();
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        let (c0, ct) = schedule.posterior_coefficients(ts[b]);
        for (k, v) in row.iter_mut().enumerate() {
            *v = c0 * x0[[b, k]] + ct * x_t[[b, k]];
        }
    }
    out
}

fn check_steps(schedule: &NoiseSchedule, ts: &[usize]) -> Result<()> {
    ts.iter().try_for_each(|t| schedule.check_step(*t))
}

/// Mean weighted reconstruction loss of a batch; also returns the noised input.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_graph(
    g: &mut Graph,
    params: &DenoiserParams,
    bound: &BoundDenoiser,
    x0: &Array2<f64>,
    eps: &Array2<f64>,
    conds: &[Condition],
    ts: &[usize],
    schedule: &NoiseSchedule,
    weighting: ReconWeighting,
) -> Result<(Var, Array2<f64>)> {
    check_steps(schedule, ts)?;
    if x0.dim() != eps.dim() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: eps.len() });
    }
    let x_t = noisy_rows(schedule, x0, eps, ts);
    let target = posterior_targets(schedule, x0, &x_t, ts);
    let xv = g.constant(x_t.clone());
    let out = params.forward(g, bound, xv, conds, ts)?;
    let target = g.constant(target);
    let diff = g.sub(out, target);
    let sq = g.row_sq_norm(diff);
    let w = Array2::from_shape_fn((ts.len(), 1), |(b, _)| weighting.factor(schedule, ts[b]));
    let w = g.constant(w);
    let weighted = g.mul(sq, w);
    Ok((g.mean(weighted), x_t))
}

/// Reconstruction loss for one clean sample, noise draw and condition.
pub fn reconstruction_loss(
    params: &DenoiserParams,
    x0: &StateVector,
    eps: &StateVector,
    t: usize,
    cond: &Condition,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let row = |s: &StateVector| Array2::from_shape_vec((1, s.dim()), s.values.clone()).map_err(|e| invalid(e.to_string()));
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::NONE);
    let (loss, _) = reconstruction_graph(&mut g, params, &bound, &row(x0)?, &row(eps)?, &[*cond], &[t], schedule, ReconWeighting::Likelihood)?;
    Ok(g.scalar(loss))
}

/// Signed step discrepancy of each row of `x_t`, as a `B x 1` node.
///
/// The context-only and unconditional branches are detached, so gradient
/// reaches the parameters only through the joint and personal branches.
#[allow(clippy::too_many_arguments)]
pub fn discrepancy_graph(
    g: &mut Graph,
    params: &DenoiserParams,
    bound: &BoundDenoiser,
    x_t: Var,
    personal: ConceptId,
    context: ConceptId,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    schedule.check_step(t)?;
    let b = g.value(x_t).nrows();
    let ts = vec![t; b];
    let branch = |g: &mut Graph, c: Condition| params.forward(g, bound, x_t, &vec![c; b], &ts);
    let j = branch(g, Condition::Pair(personal, context))?;
    let p = branch(g, Condition::Subject(personal))?;
    let c = branch(g, Condition::Context(context))?;
    let n = branch(g, Condition::Null)?;
    let c = g.stop_gradient(c);
    let n = g.stop_gradient(n);
    let jp = g.sub(j, p);
    let jc = g.sub(j, c);
    let jn = g.sub(j, n);
    let jp = g.row_sq_norm(jp);
    let jc = g.row_sq_norm(jc);
    let jn = g.row_sq_norm(jn);
    let s = g.add(jp, jc);
    let s = g.sub(s, jn);
    Ok(g.scale(s, 1.0 / (2.0 * schedule.sigma(t).powi(2))))
}

/// `[||J-P||^2 + ||J-G||^2 - ||J-N||^2] / (2 sigma^2)` from explicit branch outputs.
pub fn discrepancy_from_branches(j: &[f64], p: &[f64], c: &[f64], n: &[f64], sigma: f64) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (sq(j, p) + sq(j, c) - sq(j, n)) / (2.0 * sigma * sigma)
}

/// Step discrepancies for a batch of states sharing one timestep.
pub fn step_discrepancy_batch(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    personal: ConceptId,
    context: ConceptId,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::NONE);
    let x = g.constant(x_t.clone());
    let d = discrepancy_graph(&mut g, params, &bound, x, personal, context, t, schedule)?;
    Ok(g.value(d).column(0).to_vec())
}

pub fn step_dependence_discrepancy(
    params: &DenoiserParams,
    x_t: &StateVector,
    personal: ConceptId,
    context: ConceptId,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x = Array2::from_shape_vec((1, x_t.dim()), x_t.values.clone()).map_err(|e| invalid(e.to_string()))?;
    Ok(step_discrepancy_batch(params, &x, personal, context, t, schedule)?[0])
}

/// Time-weighted absolute discrepancy `(t/T) |d|`.
pub fn ddloss(discrepancy: f64, t: usize, num_steps: usize) -> f64 {
    t as f64 / num_steps as f64 * discrepancy.abs()
}

/// `(t/T)` times the batch mean of `|d|`.
pub fn ddloss_graph(g: &mut Graph, discrepancy: Var, t: usize, num_steps: usize) -> Var {
    let a = g.abs(discrepancy);
    let m = g.mean(a);
    g.scale(m, t as f64 / num_steps as f64)
}

/// What `cos(f_p, f_g)` is pulled towards.
fn cosine_targets(f_s: &[f64], f_gs: &[Vec<f64>], target: Option<f64>) -> Vec<f64> {
    f_gs.iter().map(|f_g| target.unwrap_or_else(|| cosine(f_s, f_g))).collect()
}

/// Prior-decouple loss as a graph node, differentiable in `emb_p` only.
///
/// `target = None` matches each `cos(f_p, f_g)` to `cos(f_s, f_g)`; a fixed
/// value replaces that target for every context.
pub fn pdloss_graph(
    g: &mut Graph,
    proj: &Projector,
    emb_p: Var,
    emb_s: &Array1<f64>,
    contexts: &Array2<f64>,
    target: Option<f64>,
) -> Result<Var> {
    if contexts.nrows() == 0 {
        return Err(invalid("context batch is empty"));
    }
    let f_p = proj.concept_forward(g, emb_p)?;
    let f_s = proj.project_concept(emb_s.as_slice().ok_or_else(|| invalid("embedding is not contiguous"))?)?;
    let f_g = proj.project_concepts(contexts)?;
    let f_gs: Vec<Vec<f64>> = f_g.rows().into_iter().map(|r| r.to_vec()).collect();
    let f_g = g.constant(f_g);
    let cos_p = g.matmul_t(f_g, f_p);
    // unit vectors, so the same product gives the superclass cosines
    let tv = match target {
        Some(v) => g.constant(Array2::from_elem((f_gs.len(), 1), v)),
        None => {
            let f_s = g.constant(Array2::from_shape_vec((1, f_s.len()), f_s).expect("row shape"));
            g.matmul_t(f_g, f_s)
        }
    };
    let diff = g.sub(cos_p, tv);
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// Mean of `|cos(f_p, f_g) - target_g|` over explicit projector-space vectors.
pub fn pdloss_from_projections(f_p: &[f64], f_s: &[f64], f_gs: &[Vec<f64>], target: Option<f64>) -> Result<f64> {
    if f_gs.is_empty() {
        return Err(invalid("context batch is empty"));
    }
    let targets = cosine_targets(f_s, f_gs, target);
    Ok(f_gs.iter().zip(&targets).map(|(f_g, t)| (cosine(f_p, f_g) - t).abs()).sum::<f64>() / f_gs.len() as f64)
}

pub fn pdloss(proj: &Projector, emb_p: &[f64], emb_s: &[f64], contexts: &[Array1<f64>], target: Option<f64>) -> Result<f64> {
    if contexts.is_empty() {
        return Err(invalid("context batch is empty"));
    }
    let f_p = proj.project_concept(emb_p)?;
    let f_s = proj.project_concept(emb_s)?;
    let f_gs = contexts
        .iter()
        .map(|c| proj.project_concept(c.as_slice().ok_or_else(|| invalid("embedding is not contiguous"))?))
        .collect::<Result<Vec<_>>>()?;
    pdloss_from_projections(&f_p, &f_s, &f_gs, target)
}

/// Everything the combined objective needs besides parameters and data.
#[derive(Debug, Clone, Copy)]
pub struct LossSetup<'a> {
    pub projector: &'a Projector,
    pub schedule: &'a NoiseSchedule,
    pub superclass: ConceptId,
    /// Context batch for the prior-decouple term.
    pub contexts: &'a [ConceptId],
    pub cosine_target: Option<f64>,
    pub prompt: ReferencePrompt,
}

/// Condition the reconstruction term sees for reference samples. `Subject`
/// mimics captions that name only the personal concept, which is how the
/// co-occurring context leaks into the personal token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePrompt {
    Pair,
    #[default]
    Subject,
}

impl ReferencePrompt {
    pub fn condition(self, personal: ConceptId, context: ConceptId) -> Condition {
        match self {
            Self::Pair => Condition::Pair(personal, context),
            Self::Subject => Condition::Subject(personal),
        }
    }
}

/// Combined objective on a reference batch at one timestep, with gradients
/// for the groups in `trainable`.
///
/// Terms with zero weight are still evaluated for logging but never enter
/// the differentiated total.
pub fn total_loss_with_grads(
    params: &DenoiserParams,
    trainable: Trainable,
    setup: &LossSetup<'_>,
    batch: &[LabeledSample],
    eps: &Array2<f64>,
    weights: &LossWeights,
    t: usize,
) -> Result<(LossBreakdown, DenoiserGrads)> {
    weights.validate()?;
    let first = batch.first().ok_or_else(|| invalid("reference batch is empty"))?;
    let (personal, context) = (first.subject, first.context);
    if batch.iter().any(|s| s.subject != personal || s.context != context) {
        return Err(invalid("reference batch mixes condition pairs"));
    }
    let schedule = setup.schedule;
    let dim = params.arch.dim;
    let mut x0 = Array2::zeros((batch.len(), dim));
    for (mut row, s) in x0.rows_mut().into_iter().zip(batch) {
        if s.x.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: s.x.dim() });
        }
        row.assign(&Array1::from(s.x.values.clone()));
    }
    let ts = vec![t; batch.len()];
    let conds = vec![setup.prompt.condition(personal, context); batch.len()];

    let mut g = Graph::new();
    let bound = params.bind(&mut g, trainable);
    let (recon, x_t) = reconstruction_graph(&mut g, params, &bound, &x0, eps, &conds, &ts, schedule, ReconWeighting::Likelihood)?;
    let xv = g.constant(x_t);
    let d = discrepancy_graph(&mut g, params, &bound, xv, personal, context, t, schedule)?;
    let dd = ddloss_graph(&mut g, d, t, schedule.num_steps());

    let table = params.table.embeddings.clone();
    let ctx_rows: Vec<usize> = setup.contexts.iter().map(|c| c.0 as usize).collect();
    if ctx_rows.iter().any(|r| *r >= table.nrows()) {
        return Err(invalid("context id outside the embedding table"));
    }
    let ctx = table.select(ndarray::Axis(0), &ctx_rows);
    let emb_p = bound.gather_row(&mut g, personal.0 as usize)?;
    let emb_s = params.table.get(setup.superclass)?;
    let pd = pdloss_graph(&mut g, setup.projector, emb_p, &emb_s, &ctx, setup.cosine_target)?;

    let mut total: Option<Var> = None;
    for (var, w) in [(recon, weights.lambda_recon), (dd, weights.lambda_dd), (pd, weights.lambda_pd)] {
        if w > 0.0 {
            let term = g.scale(var, w);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
    }
    let breakdown = LossBreakdown {
        recon: g.scalar(recon),
        dd: g.scalar(dd),
        pd: g.scalar(pd),
        total: total.map_or(0.0, |v| g.scalar(v)),
        t_sampled: t,
    };
    let grads = match total {
        None => params.zero_grads(),
        Some(root) => {
            let gr = g.backward(root)?;
            params.collect_grads(&bound, &gr)
        }
    };
    Ok((breakdown, grads))
}

/// Gaussian noise rows for a reference batch, drawn from a seeded stream.
pub fn draw_noise(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "loss-noise");
    Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(&mut r))
}

pub fn total_loss(
    params: &DenoiserParams,
    setup: &LossSetup<'_>,
    batch: &[LabeledSample],
    weights: &LossWeights,
    t: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let eps = draw_noise(batch.len(), params.arch.dim, seed);
    Ok(total_loss_with_grads(params, Trainable::NONE, setup, batch, &eps, weights, t)?.0)
}
