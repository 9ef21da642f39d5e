//! Dependence measurements: conditional dependence coefficients with Wilson
//! intervals, the coupling metric, the noise-bridge check, implicit-classifier
//! posterior deltas and denoising discrepancy traces.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::losses::step_discrepancy_batch;
use crate::projector::{cosine, Projector};
use crate::rng;
use crate::sampling::{initial_states, sample_batch};
use crate::schedule::{add_noise, NoiseSchedule, StateVector};
use crate::world::{ConceptId, GridWorld};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Bounds applied to `r` before taking logs for reporting.
pub const LOG_CLAMP: (f64, f64) = (1e-6, 1e6);

/// Minimum confidently labeled samples for a dependence estimate.
pub const MIN_LABELED: usize = 100;

/// Half-width of the 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_half_width(k: usize, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let (n, p, z2) = (n as f64, k as f64 / n as f64, Z95 * Z95);
    Z95 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceEstimate {
    pub r: f64,
    pub n_labeled: usize,
    pub n_both: usize,
    pub n_subject: usize,
    pub n_context: usize,
    /// Delta-method half-width of `log r` from the three Wilson intervals.
    pub log_half_width: f64,
    /// No co-occurrence was observed, so `log r` is unbounded.
    pub degenerate: bool,
}

impl DependenceEstimate {
    pub fn clamped_log(&self) -> f64 {
        self.r.clamp(LOG_CLAMP.0, LOG_CLAMP.1).ln()
    }
}

/// Oracle hard labels; `None` marks an ambiguous sample.
pub fn label_samples(world: &GridWorld, samples: &[StateVector]) -> Result<Vec<Option<(usize, usize)>>> {
    samples.iter().map(|s| world.oracle_label(&s.values)).collect()
}

/// `r = p(both) / (p(row) p(col))` over the confidently labeled samples.
pub fn dependence_from_labels(labels: &[Option<(usize, usize)>], row: usize, col: usize) -> Result<DependenceEstimate> {
    let labeled: Vec<(usize, usize)> = labels.iter().flatten().copied().collect();
    let n = labeled.len();
    if n < MIN_LABELED {
        return Err(invalid(format!("{n} confidently labeled samples, need at least {MIN_LABELED}")));
    }
    let n_subject = labeled.iter().filter(|(i, _)| *i == row).count();
    let n_context = labeled.iter().filter(|(_, j)| *j == col).count();
    let n_both = labeled.iter().filter(|l| **l == (row, col)).count();
    if n_subject == 0 || n_context == 0 {
        return Err(Error::Degenerate(format!("no samples carry subject row {row} or context column {col}")));
    }
    let nf = n as f64;
    let (pb, ps, pc) = (n_both as f64 / nf, n_subject as f64 / nf, n_context as f64 / nf);
    let rel = |k: usize, p: f64| wilson_half_width(k, n) / p;
    let log_half_width = (rel(n_both, pb).powi(2) + rel(n_subject, ps).powi(2) + rel(n_context, pc).powi(2)).sqrt();
    Ok(DependenceEstimate {
        r: pb / (ps * pc),
        n_labeled: n,
        n_both,
        n_subject,
        n_context,
        log_half_width,
        degenerate: n_both == 0,
    })
}

/// Estimated `r(subject, context | x)` over generated samples. The personal
/// concept is detected through its superclass row.
pub fn estimate_conditional_dependence(
    world: &GridWorld,
    samples: &[StateVector],
    subject: ConceptId,
    context: ConceptId,
) -> Result<DependenceEstimate> {
    let vocab = world.vocabulary();
    let row = vocab.data_row(subject).ok_or(Error::UnknownConcept(subject.0))?;
    let col = vocab.context_index(context).ok_or(Error::UnknownConcept(context.0))?;
    dependence_from_labels(&label_samples(world, samples)?, row, col)
}

/// A generated sample with the prompt that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub prompt: Condition,
    pub x: StateVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDependence {
    pub subject: String,
    pub context: String,
    pub r_conditional: f64,
    pub r_prior_superclass: f64,
    pub r_prior_target: Option<f64>,
    pub abs_log_gap: f64,
    pub log_half_width: f64,
    pub degenerate: bool,
}

/// Coupling summary. The scalar `r_*` fields describe the first measured
/// pair; `per_context` lists every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub r_conditional: f64,
    pub r_prior_target: Option<f64>,
    pub r_prior_superclass: f64,
    pub coupling_metric: f64,
    pub coupling_half_width: f64,
    pub n_samples: usize,
    pub ambiguous_fraction: f64,
    pub degenerate: bool,
    pub per_context: Vec<PairDependence>,
}

/// Mean over `pairs` of `|log r(c_p, c_g | x) - log r(c_s, c_g)|`, where `c_s`
/// is the superclass whose data row the personal concept occupies.
pub fn coupling_metric(world: &GridWorld, samples: &[GeneratedSample], pairs: &[(ConceptId, ConceptId)]) -> Result<DependenceReport> {
    if pairs.is_empty() {
        return Err(invalid("no concept pairs to measure"));
    }
    let vocab = world.vocabulary();
    for (p, _) in pairs {
        let prompted = samples.iter().any(|s| matches!(s.prompt, Condition::Subject(c) | Condition::Pair(c, _) if c == *p));
        if !prompted {
            return Err(invalid(format!("no sample was prompted with {}", vocab.name(*p))));
        }
    }
    let states: Vec<StateVector> = samples.iter().map(|s| s.x.clone()).collect();
    let labels = label_samples(world, &states)?;
    let ambiguous = labels.iter().filter(|l| l.is_none()).count();
    let mut per_context = Vec::with_capacity(pairs.len());
    for &(p, c) in pairs {
        let row = vocab.data_row(p).ok_or(Error::UnknownConcept(p.0))?;
        let col = vocab.context_index(c).ok_or(Error::UnknownConcept(c.0))?;
        let est = dependence_from_labels(&labels, row, col)?;
        let prior = world.prior_dependence(vocab.subject(row), c)?;
        per_context.push(PairDependence {
            subject: vocab.name(p),
            context: vocab.name(c),
            r_conditional: est.r,
            r_prior_superclass: prior,
            r_prior_target: None,
            abs_log_gap: (est.clamped_log() - prior.ln()).abs(),
            log_half_width: est.log_half_width,
            degenerate: est.degenerate,
        });
    }
    let k = per_context.len() as f64;
    let first = &per_context[0];
    Ok(DependenceReport {
        r_conditional: first.r_conditional,
        r_prior_target: None,
        r_prior_superclass: first.r_prior_superclass,
        coupling_metric: per_context.iter().map(|d| d.abs_log_gap).sum::<f64>() / k,
        coupling_half_width: per_context.iter().map(|d| d.log_half_width).sum::<f64>() / k,
        n_samples: samples.len(),
        ambiguous_fraction: ambiguous as f64 / samples.len() as f64,
        degenerate: per_context.iter().any(|d| d.degenerate),
        per_context,
    })
}

/// Fills `r(c_p, c_g)` from the projector's conditional estimates:
/// `r(c_s, c_g) * p(c_g | c_p) / p(c_g | c_s)` over the context vocabulary.
pub fn attach_projector_prior(
    report: &mut DependenceReport,
    world: &GridWorld,
    proj: &Projector,
    embeddings: &Array2<f64>,
    personal: ConceptId,
) -> Result<()> {
    let vocab = world.vocabulary();
    let row = vocab.data_row(personal).ok_or(Error::UnknownConcept(personal.0))?;
    let emb = |id: ConceptId| embeddings.row(id.0 as usize).to_owned();
    let contexts: Vec<ConceptId> = vocab.contexts().collect();
    let candidates: Vec<Array1<f64>> = contexts.iter().map(|c| emb(*c)).collect();
    let (e_p, e_s) = (emb(personal), emb(vocab.subject(row)));
    for d in &mut report.per_context {
        let c = vocab.parse(&d.context)?;
        let k = contexts.iter().position(|x| *x == c).ok_or(Error::UnknownConcept(c.0))?;
        let ratio = proj.estimate_conditional(k, e_p.as_slice().unwrap(), &candidates)?
            / proj.estimate_conditional(k, e_s.as_slice().unwrap(), &candidates)?;
        d.r_prior_target = Some(d.r_prior_superclass * ratio);
    }
    report.r_prior_target = report.per_context[0].r_prior_target;
    Ok(())
}

/// Prompts for a coupling population: subject-only prompts in proportion to
/// the subject marginal, with the personal concept standing in for its
/// superclass.
pub fn coupling_prompts(world: &GridWorld, personal: ConceptId, n: usize) -> Result<Vec<Condition>> {
    let vocab = world.vocabulary();
    let row = vocab.data_row(personal).ok_or(Error::UnknownConcept(personal.0))?;
    let marg = world.subject_marginal();
    // largest-remainder apportionment
    let quotas: Vec<f64> = marg.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..marg.len()).collect();
    order.sort_by(|a, b| (quotas[*b] - quotas[*b].floor()).total_cmp(&(quotas[*a] - quotas[*a].floor())).then(a.cmp(b)));
    let short = n - counts.iter().sum::<usize>();
    for i in order.into_iter().take(short) {
        counts[i] += 1;
    }
    let mut prompts = Vec::with_capacity(n);
    for (i, &k) in counts.iter().enumerate() {
        let id = if i == row { personal } else { vocab.subject(i) };
        prompts.extend(std::iter::repeat_n(Condition::Subject(id), k));
    }
    Ok(prompts)
}

/// Generates a coupling population and measures it.
pub fn evaluate_coupling(
    params: &DenoiserParams,
    world: &GridWorld,
    schedule: &NoiseSchedule,
    personal: ConceptId,
    contexts: &[ConceptId],
    n: usize,
    seed: u64,
) -> Result<DependenceReport> {
    let prompts = coupling_prompts(world, personal, n)?;
    let x = sample_batch(params, &prompts, seed, schedule)?;
    let samples: Vec<GeneratedSample> = prompts
        .iter()
        .zip(x.rows())
        .map(|(p, r)| GeneratedSample { prompt: *p, x: StateVector::clean(r.to_vec()) })
        .collect();
    let pairs: Vec<(ConceptId, ConceptId)> = contexts.iter().map(|c| (personal, *c)).collect();
    coupling_metric(world, &samples, &pairs)
}

/// Mean distance from samples to the personalization target, ignoring the
/// context axis.
pub fn fidelity_distance(world: &GridWorld, samples: &[StateVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let target = world.target_mean();
    let mut total = 0.0;
    for s in samples {
        if s.dim() != target.len() {
            return Err(Error::DimensionMismatch { expected: target.len(), got: s.dim() });
        }
        let sq: f64 = s.values.iter().zip(target).enumerate().filter(|(k, _)| *k != 1).map(|(_, (a, b))| (a - b) * (a - b)).sum();
        total += sq.sqrt();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub analytic_pass: bool,
    pub r_prior: f64,
    pub r_mc: f64,
    pub log_half_width: f64,
    pub mc_pass: bool,
    pub passed: bool,
}

/// Checks that the terminal state carries no information about the concepts.
///
/// Analytically, the sampler's start density is the same for every component,
/// so Bayes' rule returns the prior. The Monte-Carlo part noises labeled
/// clean samples to `x_T` with the forward process, keeps those in the
/// half-space `x_T[0] > 0`, and compares the label dependence there to the prior.
pub fn verify_bridge(
    world: &GridWorld,
    schedule: &NoiseSchedule,
    subject: ConceptId,
    context: ConceptId,
    n_mc: usize,
    seed: u64,
) -> Result<BridgeReport> {
    if n_mc < 1000 {
        return Err(invalid(format!("bridge check needs n_mc >= 1000, got {n_mc}")));
    }
    let vocab = world.vocabulary();
    let row = vocab.data_row(subject).ok_or(Error::UnknownConcept(subject.0))?;
    let col = vocab.context_index(context).ok_or(Error::UnknownConcept(context.0))?;
    let r_prior = world.prior_dependence(vocab.subject(row), context)?;

    // posterior under the start density: every component has likelihood N(x; 0, I)
    let start = initial_states(8, world.dim(), seed);
    let prior = world.joint_prior();
    let mut analytic_pass = true;
    for x in start.rows() {
        let lik = (-0.5 * x.dot(&x)).exp();
        let post = prior.mapv(|p| p * lik);
        let post = &post / post.sum();
        let r = post[[row, col]] / (post.row(row).sum() * post.column(col).sum());
        analytic_pass &= (r.ln() - r_prior.ln()).abs() <= 1e-12;
    }

    let data = world.sample_dataset(n_mc, seed)?;
    let mut eps_rng = rng::stream(seed, "bridge-noise");
    let t_max = schedule.num_steps();
    let mut labels = Vec::new();
    for s in &data {
        let eps = StateVector::clean((0..s.x.dim()).map(|_| StandardNormal.sample(&mut eps_rng)).collect());
        let x_t = add_noise(&s.x, &eps, t_max, schedule)?;
        if x_t.values[0] > 0.0 {
            let i = vocab.subject_index(s.subject).expect("dataset subject");
            let j = vocab.context_index(s.context).expect("dataset context");
            labels.push(Some((i, j)));
        }
    }
    let est = dependence_from_labels(&labels, row, col)?;
    let mc_pass = !est.degenerate && (est.r.ln() - r_prior.ln()).abs() < 3.0 * est.log_half_width;
    Ok(BridgeReport {
        analytic_pass,
        r_prior,
        r_mc: est.r,
        log_half_width: est.log_half_width,
        mc_pass,
        passed: analytic_pass && mc_pass,
    })
}

/// Change in `log p(c_hat | x)` over one reverse step under the Gaussian
/// transition model, from explicit branch outputs.
pub fn delta_from_branches(joint: &[f64], branch: &[f64], null: &[f64], sigma: f64) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (sq(joint, null) - sq(joint, branch)) / (2.0 * sigma * sigma)
}

/// `[||J - N||^2 - ||J - C||^2] / (2 sigma_t^2)` for `c_hat` one of the joint
/// pair, the personal concept alone, or the context alone.
pub fn implicit_log_posterior_delta(
    params: &DenoiserParams,
    x_t: &StateVector,
    c_hat: &Condition,
    personal: ConceptId,
    context: ConceptId,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let allowed = [Condition::Pair(personal, context), Condition::Subject(personal), Condition::Context(context)];
    if !allowed.contains(c_hat) {
        return Err(invalid(format!("condition {c_hat:?} is not part of the joint pair")));
    }
    schedule.check_step(t)?;
    let n = schedule.num_steps();
    let j = params.denoise(x_t, &allowed[0], t, n)?;
    let c = params.denoise(x_t, c_hat, t, n)?;
    let z = params.denoise(x_t, &Condition::Null, t, n)?;
    Ok(delta_from_branches(&j.values, &c.values, &z.values, schedule.sigma(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyTrace {
    pub train_step: usize,
    /// Signed step discrepancies for `t = T, T-1, ..., 1`.
    pub steps: Vec<f64>,
    pub cumulative: f64,
}

impl DiscrepancyTrace {
    pub fn abs_total(&self) -> f64 {
        self.steps.iter().map(|d| d.abs()).sum()
    }
}

/// Follows reverse trajectories under the joint pair and records the step
/// discrepancy at every state visited.
pub fn trace_denoising_discrepancy(
    params: &DenoiserParams,
    personal: ConceptId,
    context: ConceptId,
    n_trajectories: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    train_step: usize,
) -> Result<Vec<DiscrepancyTrace>> {
    if n_trajectories == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    let n = n_trajectories;
    let cond = vec![Condition::Pair(personal, context); n];
    let mut x = initial_states(n, params.arch.dim, seed);
    let mut noise = rng::stream(seed, "trace-noise");
    let mut steps = vec![Vec::with_capacity(schedule.num_steps()); n];
    for t in (1..=schedule.num_steps()).rev() {
        let d = step_discrepancy_batch(params, &x, personal, context, t, schedule)?;
        for (acc, v) in steps.iter_mut().zip(d) {
            acc.push(v);
        }
        let mean = params.denoise_batch(&x, &cond, &vec![t; n])?;
        x = if t == 1 {
            mean
        } else {
            let sigma = schedule.sigma(t);
            mean.mapv(|m| {
                let z: f64 = StandardNormal.sample(&mut noise);
                m + sigma * z
            })
        };
    }
    Ok(steps
        .into_iter()
        .map(|s| DiscrepancyTrace { train_step, cumulative: s.iter().sum(), steps: s })
        .collect())
}

/// One row per (trajectory, step): `trajectory,train_step,t,d_t,cumulative`.
pub fn write_trace_csv<W: Write>(traces: &[DiscrepancyTrace], mut out: W) -> Result<()> {
    writeln!(out, "trajectory,train_step,t,d_t,cumulative")?;
    for (k, tr) in traces.iter().enumerate() {
        let mut acc = 0.0;
        let big_t = tr.steps.len();
        for (i, d) in tr.steps.iter().enumerate() {
            acc += d;
            writeln!(out, "{k},{},{},{d},{acc}", tr.train_step, big_t - i)?;
        }
    }
    Ok(())
}

/// `|cos(f_p, f_g) - cos(f_s, f_g)|` for each context embedding.
pub fn cosine_discrepancy(proj: &Projector, emb_p: &[f64], emb_s: &[f64], contexts: &[Array1<f64>]) -> Result<Vec<f64>> {
    let f_p = proj.project_concept(emb_p)?;
    let f_s = proj.project_concept(emb_s)?;
    contexts
        .iter()
        .map(|c| {
            let f_g = proj.project_concept(c.as_slice().ok_or_else(|| invalid("embedding is not contiguous"))?)?;
            Ok((cosine(&f_p, &f_g) - cosine(&f_s, &f_g)).abs())
        })
        .collect()
}

/// Largest violation over all `(a, b, g)` of
/// `log r(a,g) - log r(b,g) = log p(g|a) - log p(g|b)` on a world's prior.
pub fn prior_ratio_identity_error(world: &GridWorld) -> f64 {
    let prior = world.joint_prior();
    let (s, g) = prior.dim();
    let (ms, mc) = (world.subject_marginal(), world.context_marginal());
    let mut worst: f64 = 0.0;
    for a in 0..s {
        for b in 0..s {
            for j in 0..g {
                if prior[[a, j]] <= 0.0 || prior[[b, j]] <= 0.0 {
                    continue;
                }
                let lr = |i: usize| (prior[[i, j]] / (ms[i] * mc[j])).ln();
                let lc = |i: usize| world.context_given_subject(i, j).ln();
                worst = worst.max(((lr(a) - lr(b)) - (lc(a) - lc(b))).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserArch;
    use crate::losses::{pdloss, step_dependence_discrepancy};
    use crate::projector::ProjectorSpec;
    use crate::schedule::{build_schedule, gaussian_log_density};
    use crate::world::{build_world, WorldSpec};

    fn world() -> GridWorld {
        build_world(&WorldSpec::default()).unwrap()
    }

    /// Samples placed exactly at component means, `counts[i][j]` of each.
    fn at_means(world: &GridWorld, counts: &[[usize; 4]; 4]) -> Vec<StateVector> {
        let mut out = Vec::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                out.extend(std::iter::repeat_n(StateVector::clean(world.mean(i, j).to_vec()), k));
            }
        }
        out
    }

    #[test]
    fn wilson_half_widths() {
        // p = 0.5, n = 100: 1.96 / 1.0384 * sqrt(0.0025 + 0.000096) = 0.0962
        assert!((wilson_half_width(50, 100) - 0.096_17).abs() < 1e-4);
        assert!(wilson_half_width(0, 100) > 0.0);
        assert!(wilson_half_width(1, 10_000) < wilson_half_width(1, 100));
    }

    #[test]
    fn dependence_on_constructed_sets() {
        let w = world();
        let v = w.vocabulary();
        // every sample in cell (0, 0): each marginal is 1, r = 1
        let all = at_means(&w, &[[200, 0, 0, 0], [0; 4], [0; 4], [0; 4]]);
        let e = estimate_conditional_dependence(&w, &all, v.subject(0), v.context(0)).unwrap();
        assert_eq!(e.r, 1.0);
        // half in (0, 0), half in (1, 1): r = 0.5 / 0.25 = 2
        let half = at_means(&w, &[[100, 0, 0, 0], [0, 100, 0, 0], [0; 4], [0; 4]]);
        let e = estimate_conditional_dependence(&w, &half, v.subject(0), v.context(0)).unwrap();
        assert_eq!(e.r, 2.0);
        // the personal concept reads the superclass row
        let e = estimate_conditional_dependence(&w, &half, v.personal(), v.context(0)).unwrap();
        assert_eq!(e.r, 2.0);
        assert!(estimate_conditional_dependence(&w, &half[..50], v.subject(0), v.context(0)).is_err());
        assert!(matches!(
            estimate_conditional_dependence(&w, &half, v.subject(2), v.context(0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn independent_labels_give_unit_dependence() {
        let spec = WorldSpec { coupling: 0.0, ..WorldSpec::default() };
        let w = build_world(&spec).unwrap();
        let v = w.vocabulary();
        let data = w.sample_dataset(8000, 5).unwrap();
        let xs: Vec<StateVector> = data.into_iter().map(|s| s.x).collect();
        for (i, j) in [(0, 0), (1, 3), (2, 1)] {
            let e = estimate_conditional_dependence(&w, &xs, v.subject(i), v.context(j)).unwrap();
            assert!(e.r.ln().abs() < e.log_half_width, "r = {} +- {}", e.r, e.log_half_width);
        }
    }

    fn prompted(world: &GridWorld, xs: Vec<StateVector>) -> Vec<GeneratedSample> {
        let p = world.vocabulary().personal();
        xs.into_iter().map(|x| GeneratedSample { prompt: Condition::Subject(p), x }).collect()
    }

    #[test]
    fn coupling_metric_hand_values() {
        // independent world, prior r = 1 everywhere
        let w = build_world(&WorldSpec { coupling: 0.0, ..WorldSpec::default() }).unwrap();
        let v = w.vocabulary();
        let (p, g0) = (v.personal(), v.context(0));
        // r(s0, g0) = 0.5 / (0.5 * 0.5) = 2
        let over = prompted(&w, at_means(&w, &[[100, 0, 0, 0], [0, 100, 0, 0], [0; 4], [0; 4]]));
        let rep = coupling_metric(&w, &over, &[(p, g0)]).unwrap();
        assert_eq!(rep.r_conditional, 2.0);
        assert!((rep.coupling_metric - 2f64.ln()).abs() < 1e-15);
        // r(s0, g0) = 0.125 / (0.5 * 0.5) = 0.5
        let under = prompted(&w, at_means(&w, &[[25, 75, 0, 0], [75, 25, 0, 0], [0; 4], [0; 4]]));
        let rep = coupling_metric(&w, &under, &[(p, g0)]).unwrap();
        assert_eq!(rep.r_conditional, 0.5);
        assert!((rep.coupling_metric - 2f64.ln()).abs() < 1e-15);
        assert_eq!(rep.ambiguous_fraction, 0.0);
        // prompts must include the personal concept
        let unprompted: Vec<GeneratedSample> = over.iter().map(|s| GeneratedSample { prompt: Condition::Null, x: s.x.clone() }).collect();
        assert!(coupling_metric(&w, &unprompted, &[(p, g0)]).is_err());
    }

    #[test]
    fn coupling_metric_is_zero_at_the_prior() {
        let w = world();
        let v = w.vocabulary();
        // counts proportional to the default prior: 0.04375 off-diagonal, 0.11875 diagonal
        let mut counts = [[35usize; 4]; 4];
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] = 95;
        }
        let xs = prompted(&w, at_means(&w, &counts));
        let pairs: Vec<_> = v.contexts().map(|c| (v.personal(), c)).collect();
        let rep = coupling_metric(&w, &xs, &pairs).unwrap();
        assert!(rep.coupling_metric < 1e-12, "{}", rep.coupling_metric);
        assert!(rep.coupling_metric <= rep.coupling_half_width);
        assert!(!rep.degenerate);
        // exact zero cells are flagged and clamped only for the log
        let mut zero = counts;
        zero[0][1] = 0;
        let rep = coupling_metric(&w, &prompted(&w, at_means(&w, &zero)), &pairs).unwrap();
        assert!(rep.degenerate && rep.per_context[1].degenerate);
        assert_eq!(rep.per_context[1].r_conditional, 0.0);
        assert!(rep.coupling_metric.is_finite());
    }

    #[test]
    fn coupling_prompts_follow_the_marginal() {
        let w = world();
        let v = w.vocabulary();
        let prompts = coupling_prompts(&w, v.personal(), 10).unwrap();
        assert_eq!(prompts.len(), 10);
        let personal = prompts.iter().filter(|c| **c == Condition::Subject(v.personal())).count();
        assert!((2..=3).contains(&personal));
        assert!(!prompts.contains(&Condition::Subject(v.superclass())));
    }

    #[test]
    fn fidelity_ignores_the_context_axis() {
        let w = world();
        let at = |j: usize| StateVector::clean(w.target_mean_with_context(j));
        assert_eq!(fidelity_distance(&w, &[at(0), at(3)]).unwrap(), 0.0);
        let mut off = w.target_mean().to_vec();
        off[0] += 0.5;
        assert!((fidelity_distance(&w, &[StateVector::clean(off)]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bridge_holds_and_rejects_small_runs() {
        let w = world();
        let v = w.vocabulary();
        let schedule = build_schedule(100, 1e-4, 0.2).unwrap();
        let rep = verify_bridge(&w, &schedule, v.superclass(), v.context(1), 10_000, 3).unwrap();
        assert!(rep.analytic_pass);
        assert!(rep.passed, "{rep:?}");
        assert!(verify_bridge(&w, &schedule, v.superclass(), v.context(1), 10, 3).is_err());
    }

    fn random_params(seed: u64, world: &GridWorld) -> DenoiserParams {
        let arch = DenoiserArch { dim: 2, embed_dim: 6, hidden: 12, depth: 2, time_dim: 8 };
        let mut params = DenoiserParams::init(arch, world.vocabulary(), &mut rng::stream(seed, "p")).unwrap();
        let mut r = rng::stream(seed, "last");
        for v in params.layers.last_mut().unwrap().weight.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = 0.3 * z;
        }
        params
    }

    #[test]
    fn deltas_by_hand_and_by_density() {
        assert_eq!(delta_from_branches(&[0.0], &[1.0], &[0.5], 1.0), -0.375);
        assert_eq!(delta_from_branches(&[0.2, 0.1], &[0.7, 0.7], &[0.7, 0.7], 0.4), 0.0);
        let w = world();
        let v = w.vocabulary();
        let schedule = build_schedule(20, 1e-4, 0.2).unwrap();
        let params = random_params(3, &w);
        let (p, c) = (v.personal(), v.context(2));
        let x = StateVector::new(vec![0.3, -0.8], 11);
        let sigma = schedule.sigma(11);
        let branch = |cond| params.denoise(&x, &cond, 11, 20).unwrap().values;
        let j = branch(Condition::Pair(p, c));
        for c_hat in [Condition::Pair(p, c), Condition::Subject(p), Condition::Context(c)] {
            let delta = implicit_log_posterior_delta(&params, &x, &c_hat, p, c, 11, &schedule).unwrap();
            let oracle = gaussian_log_density(&j, &branch(c_hat), sigma).unwrap()
                - gaussian_log_density(&j, &branch(Condition::Null), sigma).unwrap();
            assert!((delta - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }
        assert!(implicit_log_posterior_delta(&params, &x, &Condition::Null, p, c, 11, &schedule).is_err());
        assert!(implicit_log_posterior_delta(&params, &x, &Condition::Context(v.context(0)), p, c, 11, &schedule).is_err());
    }

    #[test]
    fn step_discrepancy_composes_from_deltas() {
        let w = world();
        let v = w.vocabulary();
        let schedule = build_schedule(20, 1e-4, 0.2).unwrap();
        let params = random_params(4, &w);
        let (p, c) = (v.personal(), v.context(1));
        let x = StateVector::new(vec![-1.2, 0.4], 5);
        let delta = |ch| implicit_log_posterior_delta(&params, &x, &ch, p, c, 5, &schedule).unwrap();
        let composed = delta(Condition::Pair(p, c)) - delta(Condition::Subject(p)) - delta(Condition::Context(c));
        let d = step_dependence_discrepancy(&params, &x, p, c, 5, &schedule).unwrap();
        assert!((d - composed).abs() <= 1e-9 * d.abs().max(1e-12));
    }

    #[test]
    fn traces_of_a_fresh_network_are_zero() {
        let w = world();
        let v = w.vocabulary();
        let schedule = build_schedule(10, 1e-4, 0.2).unwrap();
        let arch = DenoiserArch { dim: 2, embed_dim: 4, hidden: 8, depth: 1, time_dim: 4 };
        let params = DenoiserParams::init(arch, v, &mut rng::stream(0, "p")).unwrap();
        let traces = trace_denoising_discrepancy(&params, v.personal(), v.context(0), 3, &schedule, 1, 0).unwrap();
        assert_eq!(traces.len(), 3);
        for tr in &traces {
            assert_eq!(tr.steps.len(), 10);
            assert!(tr.steps.iter().all(|d| *d == 0.0));
        }
        let mut buf = Vec::new();
        write_trace_csv(&traces, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 10);
    }

    #[test]
    fn traces_obey_the_triangle_bound() {
        let w = world();
        let v = w.vocabulary();
        let schedule = build_schedule(10, 1e-4, 0.2).unwrap();
        let params = random_params(5, &w);
        let traces = trace_denoising_discrepancy(&params, v.personal(), v.context(0), 5, &schedule, 2, 7).unwrap();
        for tr in &traces {
            assert!((tr.cumulative - tr.steps.iter().sum::<f64>()).abs() <= 1e-10);
            assert!(tr.cumulative.abs() <= tr.abs_total());
            assert_eq!(tr.train_step, 7);
        }
    }

    #[test]
    fn cosine_discrepancy_matches_pdloss() {
        let w = world();
        let v = w.vocabulary();
        let params = random_params(6, &w);
        let proj = Projector::init(6, 2, &ProjectorSpec::default(), &mut rng::stream(1, "proj")).unwrap();
        let get = |c: ConceptId| params.table.get(c).unwrap();
        let contexts: Vec<Array1<f64>> = v.contexts().map(get).collect();
        let (e_p, e_s) = (get(v.subject(1)), get(v.superclass()));
        let per = cosine_discrepancy(&proj, e_p.as_slice().unwrap(), e_s.as_slice().unwrap(), &contexts).unwrap();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        let pd = pdloss(&proj, e_p.as_slice().unwrap(), e_s.as_slice().unwrap(), &contexts, None).unwrap();
        assert!((mean - pd).abs() <= 1e-10);
        let same = cosine_discrepancy(&proj, e_s.as_slice().unwrap(), e_s.as_slice().unwrap(), &contexts).unwrap();
        assert!(same.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn prior_ratio_identity_on_default_world() {
        assert!(prior_ratio_identity_error(&world()) <= 1e-12);
    }
}
