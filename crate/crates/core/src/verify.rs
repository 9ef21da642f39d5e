//! Self-check suites shared by the command line and the test targets.
//!
//! Each suite runs a fixed number of randomized checks and reports the worst
//! error against its tolerance.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::analysis::{implicit_log_posterior_delta, prior_ratio_identity_error, verify_bridge};
use crate::autodiff::Graph;
use crate::denoiser::{Condition, DenoiserArch, DenoiserGrads, DenoiserParams, Trainable};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    ddloss, discrepancy_from_branches, noisy_rows, posterior_targets, step_dependence_discrepancy, total_loss_with_grads,
    LossSetup, LossWeights, ReferencePrompt,
};
use crate::projector::{Projector, ProjectorSpec};
use crate::rng;
use crate::schedule::{build_schedule, gaussian_log_density, NoiseSchedule, StateVector};
use crate::world::{build_world, ConceptId, GridWorld, LabeledSample, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Thm33,
    Bridge,
    Eq10,
    Gradcheck,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Thm33, Suite::Bridge, Suite::Eq10, Suite::Gradcheck];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Thm33 => "thm33",
            Suite::Bridge => "bridge",
            Suite::Eq10 => "eq10",
            Suite::Gradcheck => "gradcheck",
        }
    }

    /// Runs the suite at its standard size.
    pub fn run(self, seed: u64) -> Result<SuiteReport> {
        match self {
            Suite::Thm33 => discrepancy_identity(100, seed),
            Suite::Bridge => bridge(10_000, seed),
            Suite::Eq10 => prior_ratio_identity(20, seed),
            Suite::Gradcheck => gradient_check(3, seed),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(suite: Suite, errors: &[f64], tolerance: f64, detail: String) -> Self {
        let failures = errors.iter().filter(|e| !(**e <= tolerance)).count();
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        Self { suite, checks: errors.len(), failures, max_error, tolerance, passed: failures == 0 && !errors.is_empty(), detail }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Small denoiser with every tensor randomized, including the zero-initialized head.
pub fn random_denoiser(arch: DenoiserArch, world: &GridWorld, seed: u64) -> Result<DenoiserParams> {
    let mut params = DenoiserParams::init(arch, world.vocabulary(), &mut rng::stream(seed, "verify-init"))?;
    let mut r = rng::stream(seed, "verify-perturb");
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += 0.3 * z;
        }
    }
    Ok(params)
}

const SMALL_ARCH: DenoiserArch = DenoiserArch { dim: 2, embed_dim: 6, hidden: 12, depth: 2, time_dim: 8 };

/// The step discrepancy against its composition from implicit-classifier
/// deltas, and each delta against explicit Gaussian log densities.
pub fn discrepancy_identity(configs: usize, seed: u64) -> Result<SuiteReport> {
    let world = build_world(&WorldSpec::default())?;
    let schedule = build_schedule(100, 1e-4, 0.2)?;
    let vocab = world.vocabulary();
    let mut r = rng::stream(seed, "thm33");
    let mut errors = Vec::with_capacity(4 * configs);
    for k in 0..configs {
        let params = random_denoiser(SMALL_ARCH, &world, rng::derive(seed, &format!("thm33-{k}")))?;
        let t = r.random_range(1..=schedule.num_steps());
        let x = StateVector::new((0..world.dim()).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect(), t);
        let (p, c) = (vocab.personal(), vocab.context(r.random_range(0..vocab.num_contexts())));
        let delta = |ch: Condition| implicit_log_posterior_delta(&params, &x, &ch, p, c, t, &schedule);
        let d = step_dependence_discrepancy(&params, &x, p, c, t, &schedule)?;
        let composed = delta(Condition::Pair(p, c))? - delta(Condition::Subject(p))? - delta(Condition::Context(c))?;
        errors.push(rel_err(d, composed));

        let n = schedule.num_steps();
        let sigma = schedule.sigma(t);
        let j = params.denoise(&x, &Condition::Pair(p, c), t, n)?;
        let z = params.denoise(&x, &Condition::Null, t, n)?;
        let null_density = gaussian_log_density(&j.values, &z.values, sigma)?;
        for ch in [Condition::Pair(p, c), Condition::Subject(p), Condition::Context(c)] {
            let b = params.denoise(&x, &ch, t, n)?;
            let explicit = gaussian_log_density(&j.values, &b.values, sigma)? - null_density;
            errors.push(rel_err(delta(ch)?, explicit));
        }
    }
    Ok(SuiteReport::new(Suite::Thm33, &errors, 1e-9, format!("{configs} configurations, 4 identities each")))
}

/// A random joint prior with every marginal positive.
pub fn random_prior_world(seed: u64) -> Result<GridWorld> {
    let mut r = rng::stream(seed, "eq10-world");
    let (s, g) = (r.random_range(2..=6), r.random_range(2..=6));
    let mut prior = Array2::from_shape_fn((s, g), |_| -> f64 { Exp1.sample(&mut r) });
    let total = prior.sum();
    prior /= total;
    let spec = WorldSpec { subjects: s, contexts: g, superclass: r.random_range(0..s), ..WorldSpec::default() };
    GridWorld::with_prior(&spec, prior)
}

/// `log r(a,g) - log r(b,g) = log p(g|a) - log p(g|b)` on random priors.
pub fn prior_ratio_identity(worlds: usize, seed: u64) -> Result<SuiteReport> {
    let errors = (0..worlds)
        .map(|k| Ok(prior_ratio_identity_error(&random_prior_world(rng::derive(seed, &format!("eq10-{k}")))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport::new(Suite::Eq10, &errors, 1e-12, format!("{worlds} random worlds, all ordered pairs")))
}

/// The bridge check on the default world, reported as the Monte-Carlo gap in
/// units of three half-widths (passing means at most 1).
pub fn bridge(n_mc: usize, seed: u64) -> Result<SuiteReport> {
    let world = build_world(&WorldSpec::default())?;
    let schedule = build_schedule(100, 1e-4, 0.2)?;
    let v = world.vocabulary();
    let rep = verify_bridge(&world, &schedule, v.superclass(), v.context(0), n_mc, seed)?;
    let gap = (rep.r_mc.ln() - rep.r_prior.ln()).abs() / (3.0 * rep.log_half_width);
    let errors = [if rep.analytic_pass { gap } else { f64::INFINITY }];
    let detail = format!("r_prior {:.4}, r_mc {:.4}, log half-width {:.4}, n_mc {n_mc}", rep.r_prior, rep.r_mc, rep.log_half_width);
    let mut out = SuiteReport::new(Suite::Bridge, &errors, 1.0, detail);
    out.passed &= rep.passed;
    Ok(out)
}

/// Inputs for one gradient check point.
pub struct GradPoint {
    pub world: GridWorld,
    pub schedule: NoiseSchedule,
    pub projector: Projector,
    pub params: DenoiserParams,
    pub reference: Vec<LabeledSample>,
    pub eps: Array2<f64>,
    pub t: usize,
    pub contexts: Vec<ConceptId>,
}

impl GradPoint {
    pub fn new(seed: u64) -> Result<Self> {
        let world = build_world(&WorldSpec::default())?;
        let schedule = build_schedule(20, 1e-4, 0.2)?;
        let vocab = world.vocabulary();
        let mut params = random_denoiser(SMALL_ARCH, &world, seed)?;
        // offset from the superclass so the prior-decouple term is away from its kink
        params.table.init_personal_token(vocab.personal(), vocab.superclass(), 0.5, &mut rng::stream(seed, "verify-token"))?;
        let projector = Projector::init(SMALL_ARCH.embed_dim, world.dim(), &ProjectorSpec::default(), &mut rng::stream(seed, "verify-proj"))?;
        let mut r = rng::stream(seed, "verify-point");
        let coupled = vocab.context(r.random_range(0..vocab.num_contexts()));
        let reference = world.make_reference_set(coupled, 4, seed)?;
        let eps = Array2::from_shape_fn((4, world.dim()), |_| -> f64 { StandardNormal.sample(&mut r) });
        let t = r.random_range(2..=schedule.num_steps());
        let contexts = vocab.contexts().collect();
        Ok(Self { world, schedule, projector, params, reference, eps, t, contexts })
    }

    pub fn setup(&self) -> LossSetup<'_> {
        LossSetup {
            projector: &self.projector,
            schedule: &self.schedule,
            superclass: self.world.vocabulary().superclass(),
            contexts: &self.contexts,
            cosine_target: None,
            prompt: ReferencePrompt::Pair,
        }
    }

    pub fn analytic(&self, weights: &LossWeights) -> Result<DenoiserGrads> {
        Ok(total_loss_with_grads(&self.params, Trainable::ALL, &self.setup(), &self.reference, &self.eps, weights, self.t)?.1)
    }

    /// The objective the analytic gradient differentiates: the context-only
    /// and unconditional branches are frozen at `frozen`, everything else
    /// follows `params`.
    pub fn surrogate(&self, params: &DenoiserParams, frozen: &DenoiserParams, weights: &LossWeights) -> Result<f64> {
        let vocab = self.world.vocabulary();
        let first = &self.reference[0];
        let (p, c) = (first.subject, first.context);
        let x0 = Array2::from_shape_fn((self.reference.len(), self.world.dim()), |(b, k)| self.reference[b].x.values[k]);
        let ts = vec![self.t; x0.nrows()];
        let x_t = noisy_rows(&self.schedule, &x0, &self.eps, &ts);
        let target = posterior_targets(&self.schedule, &x0, &x_t, &ts);
        let sigma = self.schedule.sigma(self.t);
        let pair = vec![Condition::Pair(p, c); x0.nrows()];
        let out = |m: &DenoiserParams, cond: Condition| m.denoise_batch(&x_t, &vec![cond; x0.nrows()], &ts);

        let j = params.denoise_batch(&x_t, &pair, &ts)?;
        let recon = (&target - &j).mapv(|v| v * v).sum() / (2.0 * sigma * sigma) / x0.nrows() as f64;
        let pp = out(params, Condition::Subject(p))?;
        let gg = out(frozen, Condition::Context(c))?;
        let nn = out(frozen, Condition::Null)?;
        let mut dd = 0.0;
        for b in 0..x0.nrows() {
            let row = |a: &Array2<f64>| a.row(b).to_vec();
            dd += ddloss(discrepancy_from_branches(&row(&j), &row(&pp), &row(&gg), &row(&nn), sigma), self.t, self.schedule.num_steps());
        }
        dd /= x0.nrows() as f64;
        let emb_p = params.table.get(vocab.personal())?;
        let emb_s = frozen.table.get(vocab.superclass())?;
        let ctx: Vec<Array1<f64>> = self.contexts.iter().map(|g| frozen.table.get(*g)).collect::<Result<_>>()?;
        let pd = crate::losses::pdloss(&self.projector, emb_p.as_slice().unwrap(), emb_s.as_slice().unwrap(), &ctx, None)?;
        Ok(weights.lambda_recon * recon + weights.lambda_dd * dd + weights.lambda_pd * pd)
    }
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error between analytic and central-difference gradients
/// over every trainable entry, plus the largest analytic magnitude found on
/// entries that must be exactly zero.
pub fn compare_gradients(point: &GradPoint, weights: &LossWeights) -> Result<(f64, f64)> {
    let analytic = point.analytic(weights)?;
    let base = point.params.clone();
    let mut probe = base.clone();
    let mut worst: f64 = 0.0;
    let mut frozen_max: f64 = 0.0;
    let count = base.tensors().len();
    for k in 0..count {
        let shape = base.tensors()[k].dim();
        for idx in 0..shape.0 * shape.1 {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let a = analytic.tensors()[k][[r, c]];
            if k == 0 && !base.table.trainable[r] {
                frozen_max = frozen_max.max(a.abs());
                continue;
            }
            let orig = base.tensors()[k][[r, c]];
            probe.tensors_mut()[k][[r, c]] = orig + GRAD_STEP;
            let up = point.surrogate(&probe, &base, weights)?;
            probe.tensors_mut()[k][[r, c]] = orig - GRAD_STEP;
            let down = point.surrogate(&probe, &base, weights)?;
            probe.tensors_mut()[k][[r, c]] = orig;
            let fd = (up - down) / (2.0 * GRAD_STEP);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR));
        }
    }
    Ok((worst, frozen_max))
}

/// Gradient of `|d|` when only the detached branches are live: must vanish.
pub fn detached_branch_gradient(point: &GradPoint) -> Result<f64> {
    let params = &point.params;
    let first = &point.reference[0];
    let (p, c) = (first.subject, first.context);
    let x0 = Array2::from_shape_fn((point.reference.len(), point.world.dim()), |(b, k)| point.reference[b].x.values[k]);
    let ts = vec![point.t; x0.nrows()];
    let x_t = noisy_rows(&point.schedule, &x0, &point.eps, &ts);
    let b = x0.nrows();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::ALL);
    let xv = g.constant(x_t.clone());
    let j = g.constant(params.denoise_batch(&x_t, &vec![Condition::Pair(p, c); b], &ts)?);
    let pp = g.constant(params.denoise_batch(&x_t, &vec![Condition::Subject(p); b], &ts)?);
    let gg = params.forward(&mut g, &bound, xv, &vec![Condition::Context(c); b], &ts)?;
    let nn = params.forward(&mut g, &bound, xv, &vec![Condition::Null; b], &ts)?;
    let gg = g.stop_gradient(gg);
    let nn = g.stop_gradient(nn);
    let terms = [g.sub(j, pp), g.sub(j, gg), g.sub(j, nn)];
    let [a, bb, cc] = terms.map(|v| g.row_sq_norm(v));
    let s = g.add(a, bb);
    let s = g.sub(s, cc);
    let s = g.abs(s);
    let loss = g.mean(s);
    let grads = params.collect_grads(&bound, &g.backward(loss)?);
    Ok(grads.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs())))
}

/// Every loss term, alone and combined, at `points` random parameter points.
pub fn gradient_check(points: usize, seed: u64) -> Result<SuiteReport> {
    let terms = [
        ("recon", LossWeights::BASELINE),
        ("dd", LossWeights { lambda_recon: 0.0, lambda_dd: 1.0, lambda_pd: 0.0 }),
        ("pd", LossWeights { lambda_recon: 0.0, lambda_dd: 0.0, lambda_pd: 1.0 }),
        ("total", LossWeights::default()),
    ];
    let mut errors = Vec::new();
    let mut notes = Vec::new();
    for k in 0..points {
        let point = GradPoint::new(rng::derive(seed, &format!("grad-{k}")))?;
        for (name, w) in &terms {
            let (worst, frozen) = compare_gradients(&point, w)?;
            errors.push(worst);
            // exact zeros are required, so any magnitude fails the tolerance
            errors.push(if frozen == 0.0 { 0.0 } else { f64::INFINITY });
            notes.push(format!("{name}@{k}: {worst:.2e}"));
        }
        let detached = detached_branch_gradient(&point)?;
        errors.push(if detached == 0.0 { 0.0 } else { f64::INFINITY });
        let pd_only = point.analytic(&terms[2].1)?;
        let layers_zero = pd_only.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == 0.0));
        errors.push(if layers_zero { 0.0 } else { f64::INFINITY });
    }
    Ok(SuiteReport::new(Suite::Gradcheck, &errors, GRAD_TOL, notes.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse_by_name() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("all".parse::<Suite>().is_err());
    }

    #[test]
    fn reports_count_failures() {
        let r = SuiteReport::new(Suite::Eq10, &[1e-13, 2e-12, f64::NAN], 1e-12, String::new());
        assert_eq!((r.checks, r.failures, r.passed), (3, 2, false));
        assert_eq!(r.max_error, 2e-12);
        assert!(!SuiteReport::new(Suite::Eq10, &[], 1.0, String::new()).passed);
    }

    #[test]
    fn small_suites_pass() {
        assert!(discrepancy_identity(10, 1).unwrap().passed);
        assert!(prior_ratio_identity(5, 1).unwrap().passed);
    }

    #[test]
    fn surrogate_matches_the_loss_value() {
        let point = GradPoint::new(4).unwrap();
        let w = LossWeights::default();
        let b = total_loss_with_grads(&point.params, Trainable::NONE, &point.setup(), &point.reference, &point.eps, &w, point.t).unwrap().0;
        let s = point.surrogate(&point.params, &point.params, &w).unwrap();
        assert!((b.total - s).abs() <= 1e-10 * s.abs().max(1.0), "{} vs {s}", b.total);
    }
}
