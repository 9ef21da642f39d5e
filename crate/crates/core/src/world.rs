//! The concept grid world: a Gaussian mixture indexed by (subject, context)
//! concept pairs with a tunable co-occurrence prior.
//!
//! Component `(i, j)` sits at `pitch * (i - (S-1)/2, j - (G-1)/2, 0, ...)`, so
//! axis 0 carries the subject and axis 1 carries the context. The world is the
//! analytic ground truth for every dependence estimate in the crate.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::StateVector;

/// Posterior mass the winning component needs before a sample gets hard labels.
pub const CONFIDENCE_THRESHOLD: f64 = 0.8;

/// Minimum separation between component means, in units of the component std.
pub const MIN_SEPARATION_STDS: f64 = 6.0;

/// Offset of the personalization target from its superclass row, in stds.
pub const TARGET_OFFSET_STDS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptId(pub u32);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Subject axis, context axis, the personalization token and the null condition.
///
/// Ids are laid out as subjects `0..S`, contexts `S..S+G`, then the personal
/// id and the null id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    subjects: usize,
    contexts: usize,
    superclass: usize,
}

impl ConceptVocabulary {
    pub fn new(subjects: usize, contexts: usize, superclass: usize) -> Result<Self> {
        if subjects < 2 || contexts < 2 {
            return Err(invalid(format!(
                "need at least 2 subjects and 2 contexts, got {subjects}x{contexts}"
            )));
        }
        if superclass >= subjects {
            return Err(invalid(format!("superclass row {superclass} out of range")));
        }
        Ok(Self { subjects, contexts, superclass })
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts
    }

    /// Number of ids including the personal and null ids.
    pub fn num_ids(&self) -> usize {
        self.subjects + self.contexts + 2
    }

    pub fn subject(&self, i: usize) -> ConceptId {
        assert!(i < self.subjects);
        ConceptId(i as u32)
    }

    pub fn context(&self, j: usize) -> ConceptId {
        assert!(j < self.contexts);
        ConceptId((self.subjects + j) as u32)
    }

    pub fn subjects(&self) -> impl Iterator<Item = ConceptId> + '_ {
        (0..self.subjects).map(|i| self.subject(i))
    }

    pub fn contexts(&self) -> impl Iterator<Item = ConceptId> + '_ {
        (0..self.contexts).map(|j| self.context(j))
    }

    pub fn superclass(&self) -> ConceptId {
        self.subject(self.superclass)
    }

    pub fn superclass_index(&self) -> usize {
        self.superclass
    }

    pub fn personal(&self) -> ConceptId {
        ConceptId((self.subjects + self.contexts) as u32)
    }

    pub fn null(&self) -> ConceptId {
        ConceptId((self.subjects + self.contexts + 1) as u32)
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        (id.0 as usize) < self.num_ids()
    }

    pub fn subject_index(&self, id: ConceptId) -> Option<usize> {
        let k = id.0 as usize;
        (k < self.subjects).then_some(k)
    }

    pub fn context_index(&self, id: ConceptId) -> Option<usize> {
        let k = id.0 as usize;
        (self.subjects..self.subjects + self.contexts).contains(&k).then(|| k - self.subjects)
    }

    /// Row an id occupies in the data: subjects map to themselves and the
    /// personal token maps to its superclass.
    pub fn data_row(&self, id: ConceptId) -> Option<usize> {
        if id == self.personal() {
            Some(self.superclass)
        } else {
            self.subject_index(id)
        }
    }

    /// Short human-readable name: `s<i>`, `g<j>`, `p` or `null`.
    pub fn name(&self, id: ConceptId) -> String {
        if let Some(i) = self.subject_index(id) {
            format!("s{i}")
        } else if let Some(j) = self.context_index(id) {
            format!("g{j}")
        } else if id == self.personal() {
            "p".to_string()
        } else if id == self.null() {
            "null".to_string()
        } else {
            format!("?{}", id.0)
        }
    }

    pub fn parse(&self, name: &str) -> Result<ConceptId> {
        let name = name.trim();
        let parse_index = |rest: &str| rest.parse::<usize>().map_err(|_| invalid(format!("bad concept name {name:?}")));
        match name {
            "p" => Ok(self.personal()),
            "null" | "" => Ok(self.null()),
            _ if name.starts_with('s') => {
                let i = parse_index(&name[1..])?;
                if i < self.subjects { Ok(self.subject(i)) } else { Err(invalid(format!("unknown subject {name}"))) }
            }
            _ if name.starts_with('g') => {
                let j = parse_index(&name[1..])?;
                if j < self.contexts { Ok(self.context(j)) } else { Err(invalid(format!("unknown context {name}"))) }
            }
            _ => Err(invalid(format!("bad concept name {name:?}"))),
        }
    }
}

/// Construction parameters for a [`GridWorld`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub subjects: usize,
    pub contexts: usize,
    pub dim: usize,
    pub std: f64,
    pub pitch: f64,
    pub coupling: f64,
    /// Subject row the personalization target specializes.
    pub superclass: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { subjects: 4, contexts: 4, dim: 2, std: 0.25, pitch: 3.0, coupling: 0.3, superclass: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: StateVector,
    pub subject: ConceptId,
    pub context: ConceptId,
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    vocab: ConceptVocabulary,
    dim: usize,
    std: f64,
    means: Vec<Vec<f64>>,
    joint_prior: Array2<f64>,
    subject_marginal: Vec<f64>,
    context_marginal: Vec<f64>,
    target_mean: Vec<f64>,
}

/// Builds the default grid layout with a prior interpolating between
/// independence (`coupling = 0`) and the diagonal (`coupling = 1`).
///
/// The diagonal pairs subject `i` with context `i mod G`.
pub fn build_world(spec: &WorldSpec) -> Result<GridWorld> {
    if !(0.0..=1.0).contains(&spec.coupling) {
        return Err(invalid(format!("coupling must be in [0, 1], got {}", spec.coupling)));
    }
    let (s, g) = (spec.subjects, spec.contexts);
    let independent = 1.0 / (s * g) as f64;
    let prior = Array2::from_shape_fn((s, g), |(i, j)| {
        let diagonal = if j == i % g { 1.0 / s as f64 } else { 0.0 };
        (1.0 - spec.coupling) * independent + spec.coupling * diagonal
    });
    GridWorld::with_prior(spec, prior)
}

impl GridWorld {
    /// Grid layout from `spec` with an explicit joint prior over (subject, context).
    pub fn with_prior(spec: &WorldSpec, joint_prior: Array2<f64>) -> Result<Self> {
        let vocab = ConceptVocabulary::new(spec.subjects, spec.contexts, spec.superclass)?;
        let (s, g) = (spec.subjects, spec.contexts);
        if !(spec.std > 0.0) {
            return Err(invalid(format!("component std must be positive, got {}", spec.std)));
        }
        if spec.dim < 2 {
            return Err(Error::InfeasibleWorld(format!(
                "a {s}x{g} grid needs at least 2 dimensions, got {}",
                spec.dim
            )));
        }
        if spec.pitch < MIN_SEPARATION_STDS * spec.std {
            return Err(Error::InfeasibleWorld(format!(
                "pitch {} is below {MIN_SEPARATION_STDS} stds ({})",
                spec.pitch,
                MIN_SEPARATION_STDS * spec.std
            )));
        }
        if joint_prior.dim() != (s, g) {
            return Err(invalid(format!("joint prior has shape {:?}, expected ({s}, {g})", joint_prior.dim())));
        }
        if joint_prior.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid("joint prior entries must be nonnegative"));
        }
        let total: f64 = joint_prior.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("joint prior sums to {total}, expected 1")));
        }
        let subject_marginal: Vec<f64> = (0..s).map(|i| joint_prior.row(i).sum()).collect();
        let context_marginal: Vec<f64> = (0..g).map(|j| joint_prior.column(j).sum()).collect();
        if subject_marginal.iter().chain(&context_marginal).any(|p| *p <= 0.0) {
            return Err(Error::InfeasibleWorld("every subject and context needs positive marginal mass".into()));
        }

        let center = |n: usize, k: usize| spec.pitch * (k as f64 - (n as f64 - 1.0) / 2.0);
        let mut means = Vec::with_capacity(s * g);
        for i in 0..s {
            for j in 0..g {
                let mut m = vec![0.0; spec.dim];
                m[0] = center(s, i);
                m[1] = center(g, j);
                means.push(m);
            }
        }
        let mut target_mean = vec![0.0; spec.dim];
        target_mean[0] = center(s, spec.superclass) + TARGET_OFFSET_STDS * spec.std;

        Ok(Self { vocab, dim: spec.dim, std: spec.std, means, joint_prior, subject_marginal, context_marginal, target_mean })
    }

    pub fn vocabulary(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn component_std(&self) -> f64 {
        self.std
    }

    pub fn joint_prior(&self) -> &Array2<f64> {
        &self.joint_prior
    }

    pub fn subject_marginal(&self) -> &[f64] {
        &self.subject_marginal
    }

    pub fn context_marginal(&self) -> &[f64] {
        &self.context_marginal
    }

    pub fn mean(&self, subject: usize, context: usize) -> &[f64] {
        &self.means[subject * self.vocab.num_contexts() + context]
    }

    /// Subject-axis part of the personalization target's mean.
    pub fn target_mean(&self) -> &[f64] {
        &self.target_mean
    }

    /// Context-axis displacement of column `j`.
    pub fn context_offset(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[1] = self.mean(0, j)[1];
        v
    }

    /// Mean of the personalization target's data when seen with context `j`.
    pub fn target_mean_with_context(&self, j: usize) -> Vec<f64> {
        self.target_mean.iter().zip(self.context_offset(j)).map(|(a, b)| a + b).collect()
    }

    /// `p(context j | subject i)` under the prior.
    pub fn context_given_subject(&self, i: usize, j: usize) -> f64 {
        self.joint_prior[[i, j]] / self.subject_marginal[i]
    }

    /// Bayes posterior over components, `p(i, j | x)`.
    pub fn oracle_posterior(&self, x: &[f64]) -> Result<Array2<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let (s, g) = self.joint_prior.dim();
        let inv = 1.0 / (2.0 * self.std * self.std);
        let mut logits = Array2::from_elem((s, g), f64::NEG_INFINITY);
        for i in 0..s {
            for j in 0..g {
                let p = self.joint_prior[[i, j]];
                if p > 0.0 {
                    let sq: f64 = x.iter().zip(self.mean(i, j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    logits[[i, j]] = p.ln() - sq * inv;
                }
            }
        }
        let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut post = logits.mapv(|l| (l - max).exp());
        let z = post.sum();
        post /= z;
        Ok(post)
    }

    /// Hard `(subject, context)` label, or `None` when the winning component
    /// holds less than [`CONFIDENCE_THRESHOLD`] of the posterior mass.
    pub fn oracle_label(&self, x: &[f64]) -> Result<Option<(usize, usize)>> {
        let post = self.oracle_posterior(x)?;
        let (mut best, mut arg) = (-1.0, (0, 0));
        for ((i, j), p) in post.indexed_iter() {
            if *p > best {
                best = *p;
                arg = (i, j);
            }
        }
        Ok((best >= CONFIDENCE_THRESHOLD).then_some(arg))
    }

    /// `r(subject, context) = p(s, g) / (p(s) p(g))` from the prior.
    pub fn prior_dependence(&self, subject: ConceptId, context: ConceptId) -> Result<f64> {
        let i = self.vocab.subject_index(subject).ok_or(Error::UnknownConcept(subject.0))?;
        let j = self.vocab.context_index(context).ok_or(Error::UnknownConcept(context.0))?;
        Ok(self.joint_prior[[i, j]] / (self.subject_marginal[i] * self.context_marginal[j]))
    }

    pub(crate) fn draw_point(&self, mean: &[f64], rng: &mut Rng) -> Vec<f64> {
        mean.iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.std * z
            })
            .collect()
    }

    /// Draws a component index from the joint prior.
    pub fn draw_labels(&self, rng: &mut Rng) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let g = self.vocab.num_contexts();
        let mut last = (0, 0);
        for ((i, j), p) in self.joint_prior.indexed_iter() {
            if *p <= 0.0 {
                continue;
            }
            acc += p;
            last = (i, j);
            if u < acc {
                return (i, j);
            }
        }
        debug_assert!(last.1 < g);
        last
    }

    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        if n == 0 {
            return Err(invalid("dataset size must be at least 1"));
        }
        let mut rng = rng::stream(seed, "dataset");
        Ok((0..n)
            .map(|_| {
                let (i, j) = self.draw_labels(&mut rng);
                LabeledSample {
                    x: StateVector::clean(self.draw_point(self.mean(i, j), &mut rng)),
                    subject: self.vocab.subject(i),
                    context: self.vocab.context(j),
                }
            })
            .collect())
    }

    /// Few-shot reference set where the personalization target always appears
    /// with `coupled_context`.
    pub fn make_reference_set(&self, coupled_context: ConceptId, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        if !(3..=16).contains(&n) {
            return Err(invalid(format!("reference set size must be in 3..=16, got {n}")));
        }
        let j = self.vocab.context_index(coupled_context).ok_or(Error::UnknownConcept(coupled_context.0))?;
        let center = self.target_mean_with_context(j);
        let mut rng = rng::stream(seed, "reference");
        Ok((0..n)
            .map(|_| LabeledSample {
                x: StateVector::clean(self.draw_point(&center, &mut rng)),
                subject: self.vocab.personal(),
                context: coupled_context,
            })
            .collect())
    }

    /// Writes samples as CSV: `x_0..x_{d-1},subject_label,context_label`.
    pub fn write_csv<W: Write>(&self, samples: &[LabeledSample], mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("x_{k}")).collect();
        writeln!(out, "{},subject_label,context_label", header.join(","))?;
        for s in samples {
            let xs: Vec<String> = s.x.values.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", xs.join(","), self.vocab.name(s.subject), self.vocab.name(s.context))?;
        }
        Ok(())
    }
}

impl FromStr for WorldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: usize, g: usize, coupling: f64) -> WorldSpec {
        WorldSpec { subjects: s, contexts: g, coupling, ..WorldSpec::default() }
    }

    #[test]
    fn independent_world_has_unit_dependence() {
        let w = build_world(&spec(4, 3, 0.0)).unwrap();
        let v = w.vocabulary();
        for a in v.subjects() {
            for c in v.contexts() {
                assert!((w.prior_dependence(a, c).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_coupled_two_by_two() {
        let w = build_world(&spec(2, 2, 1.0)).unwrap();
        assert_eq!(w.joint_prior(), &ndarray::arr2(&[[0.5, 0.0], [0.0, 0.5]]));
        let v = w.vocabulary();
        assert_eq!(w.prior_dependence(v.subject(0), v.context(0)).unwrap(), 2.0);
        assert_eq!(w.prior_dependence(v.subject(0), v.context(1)).unwrap(), 0.0);
    }

    #[test]
    fn half_coupled_two_by_two() {
        let w = build_world(&spec(2, 2, 0.5)).unwrap();
        assert_eq!(w.joint_prior(), &ndarray::arr2(&[[0.375, 0.125], [0.125, 0.375]]));
        let v = w.vocabulary();
        assert!((w.prior_dependence(v.subject(0), v.context(0)).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_infeasible_worlds() {
        assert!(build_world(&spec(1, 4, 0.3)).is_err());
        assert!(build_world(&WorldSpec { dim: 1, ..WorldSpec::default() }).is_err());
        assert!(matches!(
            build_world(&WorldSpec { pitch: 1.0, ..WorldSpec::default() }),
            Err(Error::InfeasibleWorld(_))
        ));
        assert!(build_world(&WorldSpec { std: 0.0, ..WorldSpec::default() }).is_err());
        // two subjects fully coupled onto three contexts leaves a column empty
        assert!(build_world(&spec(2, 3, 1.0)).is_err());
    }

    #[test]
    fn components_are_separated() {
        let w = build_world(&WorldSpec::default()).unwrap();
        let (s, g) = w.joint_prior().dim();
        for a in 0..s * g {
            for b in (a + 1)..s * g {
                let (ma, mb) = (w.mean(a / g, a % g), w.mean(b / g, b % g));
                let d: f64 = ma.iter().zip(mb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                assert!(d >= MIN_SEPARATION_STDS * w.component_std());
            }
        }
    }

    #[test]
    fn vocabulary_ids_are_disjoint() {
        let v = ConceptVocabulary::new(4, 3, 1).unwrap();
        let mut ids: Vec<_> = v.subjects().chain(v.contexts()).collect();
        ids.push(v.personal());
        ids.push(v.null());
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(v.num_ids(), n);
        for id in ids {
            assert_eq!(v.parse(&v.name(id)).unwrap(), id);
        }
        assert_eq!(v.data_row(v.personal()), Some(1));
        assert!(v.parse("s9").is_err());
    }

    #[test]
    fn dataset_cases() {
        let w = build_world(&spec(4, 4, 0.0)).unwrap();
        assert!(w.sample_dataset(0, 1).is_err());

        // Monte-Carlo co-occurrence for an independent world: r-hat within 0.05 of 1
        // for every cell (binomial sd of a cell frequency is ~0.0024 at n = 10000).
        let n = 10_000;
        let data = w.sample_dataset(n, 3).unwrap();
        let v = w.vocabulary();
        let mut joint = Array2::<f64>::zeros((4, 4));
        for s in &data {
            joint[[v.subject_index(s.subject).unwrap(), v.context_index(s.context).unwrap()]] += 1.0;
        }
        joint /= n as f64;
        for i in 0..4 {
            for j in 0..4 {
                let r = joint[[i, j]] / (joint.row(i).sum() * joint.column(j).sum());
                assert!((r - 1.0).abs() < 0.05 * 4.0, "cell ({i},{j}) r = {r}");
            }
        }
        let pooled: f64 = (0..4)
            .map(|i| (0..4).map(|j| joint[[i, j]] / (joint.row(i).sum() * joint.column(j).sum())).sum::<f64>())
            .sum::<f64>()
            / 16.0;
        assert!((pooled - 1.0).abs() < 0.05);

        let diag = build_world(&spec(2, 2, 1.0)).unwrap();
        for s in diag.sample_dataset(500, 9).unwrap() {
            let v = diag.vocabulary();
            assert_eq!(v.subject_index(s.subject), v.context_index(s.context));
        }
    }

    #[test]
    fn oracle_posterior_cases() {
        let uniform = GridWorld::with_prior(&WorldSpec::default(), Array2::from_elem((4, 4), 1.0 / 16.0)).unwrap();
        let post = uniform.oracle_posterior(uniform.mean(2, 1)).unwrap();
        assert!(post[[2, 1]] > 0.99);
        assert!((post.sum() - 1.0).abs() < 1e-12);

        let (a, b) = (uniform.mean(1, 1).to_vec(), uniform.mean(1, 2).to_vec());
        let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
        let post = uniform.oracle_posterior(&mid).unwrap();
        assert!((post[[1, 1]] - post[[1, 2]]).abs() < 1e-12);
        assert_eq!(uniform.oracle_label(&mid).unwrap(), None);

        let far = uniform.oracle_posterior(&[1e3, -1e3]).unwrap();
        assert!((far.sum() - 1.0).abs() < 1e-12);
        assert!(far.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn oracle_matches_direct_bayes() {
        use crate::schedule::gaussian_log_density;
        use rand::Rng as _;
        let w = build_world(&WorldSpec::default()).unwrap();
        let mut rng = rng::stream(5, "oracle-test");
        for _ in 0..10_000 {
            let x = [rng.random_range(-5.5..5.5), rng.random_range(-5.5..5.5)];
            let post = w.oracle_posterior(&x).unwrap();
            // Direct evaluation of p(i,j) N(x; mu_ij, std^2 I) / sum, without log-sum-exp.
            let mut dens = Array2::<f64>::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    let ld = gaussian_log_density(&x, w.mean(i, j), w.component_std()).unwrap();
                    dens[[i, j]] = w.joint_prior()[[i, j]] * ld.exp();
                }
            }
            let z = dens.sum();
            if z < 1e-250 {
                continue;
            }
            for ((i, j), p) in post.indexed_iter() {
                assert!((p - dens[[i, j]] / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conditional_ratio_identity_on_prior() {
        let w = build_world(&spec(4, 5, 0.6)).unwrap();
        let v = w.vocabulary();
        for a in 0..4 {
            for b in 0..4 {
                for g in 0..5 {
                    let lhs = w.prior_dependence(v.subject(a), v.context(g)).unwrap().ln()
                        - w.prior_dependence(v.subject(b), v.context(g)).unwrap().ln();
                    let rhs = w.context_given_subject(a, g).ln() - w.context_given_subject(b, g).ln();
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reference_set_is_coupled() {
        let w = build_world(&WorldSpec::default()).unwrap();
        let v = w.vocabulary();
        let g = v.context(2);
        let set = w.make_reference_set(g, 4, 11).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.iter().all(|s| s.context == g && s.subject == v.personal()));
        assert!(w.make_reference_set(g, 2, 11).is_err());
        assert!(w.make_reference_set(g, 17, 11).is_err());
        assert!(matches!(w.make_reference_set(v.subject(0), 4, 11), Err(Error::UnknownConcept(_))));
        // the target lives inside its superclass row
        for s in &set {
            let (i, j) = w.oracle_label(&s.x.values).unwrap().unwrap();
            assert_eq!((i, j), (v.superclass_index(), 2));
        }
    }

    #[test]
    fn csv_export_has_documented_columns() {
        let w = build_world(&WorldSpec::default()).unwrap();
        let data = w.sample_dataset(3, 1).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x_0,x_1,subject_label,context_label"));
        assert_eq!(lines.count(), 3);
    }
}
