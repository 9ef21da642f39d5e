//! The conditional denoiser: an MLP predicting the mean of `x_{t-1}` from
//! `(x_t, subject slot, context slot, t)`, with a residual skip from `x_t`.
//!
//! Conditions occupy two input slots. A missing slot receives the null
//! embedding, so the joint, subject-only, context-only and unconditional
//! branches are four inputs to the same network.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::schedule::StateVector;
use crate::world::{ConceptId, ConceptVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { dim: 2, embed_dim: 32, hidden: 128, depth: 3, time_dim: 32 }
    }
}

impl DenoiserArch {
    pub fn input_dim(&self) -> usize {
        self.dim + 2 * self.embed_dim + self.time_dim
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim(), self.hidden)];
        for _ in 1..self.depth {
            shapes.push((self.hidden, self.hidden));
        }
        shapes.push((self.hidden, self.dim));
        shapes
    }
}

/// A generation condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Subject(ConceptId),
    Context(ConceptId),
    Pair(ConceptId, ConceptId),
}

impl Condition {
    /// A single concept placed in the slot its axis belongs to.
    pub fn single(vocab: &ConceptVocabulary, id: ConceptId) -> Result<Self> {
        if vocab.context_index(id).is_some() {
            Ok(Self::Context(id))
        } else if id == vocab.null() {
            Ok(Self::Null)
        } else if vocab.contains(id) {
            Ok(Self::Subject(id))
        } else {
            Err(Error::UnknownConcept(id.0))
        }
    }

    /// `(subject slot, context slot)` ids, with `null` filling empty slots.
    pub fn slots(&self, null: ConceptId) -> (ConceptId, ConceptId) {
        match *self {
            Self::Null => (null, null),
            Self::Subject(s) => (s, null),
            Self::Context(c) => (null, c),
            Self::Pair(s, c) => (s, c),
        }
    }

    /// Parses `subject:context` with `null` or an empty side for a missing slot.
    pub fn parse(vocab: &ConceptVocabulary, text: &str) -> Result<Self> {
        let (a, b) = text.split_once(':').ok_or_else(|| invalid(format!("condition {text:?} is not subject:context")))?;
        let (s, c) = (vocab.parse(a)?, vocab.parse(b)?);
        let null = vocab.null();
        if s != null && vocab.data_row(s).is_none() {
            return Err(invalid(format!("{a:?} is not a subject")));
        }
        if c != null && vocab.context_index(c).is_none() {
            return Err(invalid(format!("{b:?} is not a context")));
        }
        Ok(match (s == null, c == null) {
            (true, true) => Self::Null,
            (false, true) => Self::Subject(s),
            (true, false) => Self::Context(c),
            (false, false) => Self::Pair(s, c),
        })
    }
}

/// Condition embeddings for every vocabulary id, plus per-id trainability.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbeddingTable {
    pub embeddings: Array2<f64>,
    pub trainable: Vec<bool>,
    null: ConceptId,
}

impl ConditionEmbeddingTable {
    pub fn new(embeddings: Array2<f64>, trainable: Vec<bool>, null: ConceptId) -> Result<Self> {
        if trainable.len() != embeddings.nrows() || null.0 as usize >= embeddings.nrows() {
            return Err(invalid("embedding table shape does not match its id set"));
        }
        Ok(Self { embeddings, trainable, null })
    }

    pub fn num_ids(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn null(&self) -> ConceptId {
        self.null
    }

    fn check(&self, id: ConceptId) -> Result<usize> {
        let k = id.0 as usize;
        if k < self.num_ids() {
            Ok(k)
        } else {
            Err(Error::UnknownConcept(id.0))
        }
    }

    pub fn get(&self, id: ConceptId) -> Result<Array1<f64>> {
        Ok(self.embeddings.row(self.check(id)?).to_owned())
    }

    /// Subject-slot and context-slot vectors for a condition.
    pub fn embed_condition(&self, cond: &Condition) -> Result<(Array1<f64>, Array1<f64>)> {
        let (s, c) = cond.slots(self.null);
        Ok((self.get(s)?, self.get(c)?))
    }

    /// Anchors the personal token at its superclass and makes it the only
    /// trainable row.
    pub fn init_personal_token(
        &mut self,
        personal: ConceptId,
        superclass: ConceptId,
        noise_scale: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let p = self.check(personal)?;
        let s = self.check(superclass)?;
        let base = self.embeddings.row(s).to_owned();
        let mut row = self.embeddings.row_mut(p);
        for (dst, b) in row.iter_mut().zip(base.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *dst = b + noise_scale * z;
        }
        self.trainable.iter_mut().enumerate().for_each(|(k, t)| *t = k == p);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub table: ConditionEmbeddingTable,
    pub layers: Vec<Linear>,
}

/// Which parameter groups a gradient pass tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    /// Rows of the embedding table flagged trainable in the table itself.
    pub embeddings: bool,
}

impl Trainable {
    pub const ALL: Self = Self { weights: true, embeddings: true };
    pub const EMBEDDINGS: Self = Self { weights: false, embeddings: true };
    pub const NONE: Self = Self { weights: false, embeddings: false };
}

/// Graph handles of a parameter set bound into a [`Graph`].
pub struct BoundDenoiser {
    table: Var,
    layers: Vec<(Var, Var)>,
    trainable: Trainable,
}

impl BoundDenoiser {
    /// One embedding row as a `1 x e` node sharing the table's gradient.
    pub fn gather_row(&self, g: &mut Graph, row: usize) -> Result<Var> {
        if row >= g.value(self.table).nrows() {
            return Err(Error::UnknownConcept(row as u32));
        }
        Ok(g.gather(self.table, vec![row]))
    }
}

/// Gradient structure shaped like [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub table: Array2<f64>,
    pub layers: Vec<Linear>,
}

impl DenoiserGrads {
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.table];
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }

    pub fn add_scaled(&mut self, other: &DenoiserGrads, k: f64) {
        self.table.scaled_add(k, &other.table);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(k, &b.weight);
            a.bias.scaled_add(k, &b.bias);
        }
    }
}

/// Sinusoidal encoding of an integer timestep.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

impl DenoiserParams {
    /// Fresh parameters: uniform fan-in init, Gaussian embeddings and a zero
    /// final layer so the initial network is the identity map on `x_t`.
    pub fn init(arch: DenoiserArch, vocab: &ConceptVocabulary, rng: &mut Rng) -> Result<Self> {
        if arch.dim == 0 || arch.embed_dim == 0 || arch.hidden == 0 || arch.depth == 0 || arch.time_dim < 2 {
            return Err(invalid(format!("degenerate denoiser architecture {arch:?}")));
        }
        let n = vocab.num_ids();
        let embeddings = Array2::from_shape_fn((n, arch.embed_dim), |_| StandardNormal.sample(rng));
        let table = ConditionEmbeddingTable::new(embeddings, vec![true; n], vocab.null())?;
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(k, (fan_in, fan_out))| {
                if k == last {
                    Linear { weight: Array2::zeros((fan_in, fan_out)), bias: Array2::zeros((1, fan_out)) }
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Linear {
                        weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
                        bias: Array2::zeros((1, fan_out)),
                    }
                }
            })
            .collect();
        Ok(Self { arch, table, layers })
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.table.embeddings];
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.table.embeddings];
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> DenoiserGrads {
        DenoiserGrads {
            table: Array2::zeros(self.table.embeddings.dim()),
            layers: self
                .layers
                .iter()
                .map(|l| Linear { weight: Array2::zeros(l.weight.dim()), bias: Array2::zeros(l.bias.dim()) })
                .collect(),
        }
    }

    /// Registers the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundDenoiser {
        let table = if trainable.embeddings && self.table.trainable.iter().any(|t| *t) {
            g.param(self.table.embeddings.clone())
        } else {
            g.constant(self.table.embeddings.clone())
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable.weights {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundDenoiser { table, layers, trainable }
    }

    /// Batched forward pass: row `b` of `x` is denoised under `conds[b]` at `ts[b]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundDenoiser,
        x: Var,
        conds: &[Condition],
        ts: &[usize],
    ) -> Result<Var> {
        let batch = g.value(x).nrows();
        if conds.len() != batch || ts.len() != batch {
            return Err(invalid("condition and timestep counts must match the batch"));
        }
        if g.value(x).ncols() != self.arch.dim {
            return Err(Error::DimensionMismatch { expected: self.arch.dim, got: g.value(x).ncols() });
        }
        let null = self.table.null();
        let mut subj = Vec::with_capacity(batch);
        let mut ctx = Vec::with_capacity(batch);
        for c in conds {
            let (s, k) = c.slots(null);
            subj.push(self.table.check(s)?);
            ctx.push(self.table.check(k)?);
        }
        let mut temb = Array2::zeros((batch, self.arch.time_dim));
        for (mut row, &t) in temb.rows_mut().into_iter().zip(ts) {
            row.assign(&Array1::from(timestep_encoding(t, self.arch.time_dim)));
        }
        let s_emb = g.gather(bound.table, subj);
        let c_emb = g.gather(bound.table, ctx);
        let temb = g.constant(temb);
        let mut h = g.concat(&[x, s_emb, c_emb, temb]);
        let last = bound.layers.len() - 1;
        for (k, (w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, *w);
            let z = g.add_row(z, *b);
            h = if k == last { z } else { g.silu(z) };
        }
        Ok(g.add(x, h))
    }

    /// Collects parameter-shaped gradients; frozen groups and frozen
    /// embedding rows come back as exact zeros.
    pub fn collect_grads(&self, bound: &BoundDenoiser, grads: &Gradients) -> DenoiserGrads {
        let mut out = self.zero_grads();
        if bound.trainable.embeddings {
            let mut table = grads.wrt(bound.table);
            for (mut row, &train) in table.rows_mut().into_iter().zip(&self.table.trainable) {
                if !train {
                    row.fill(0.0);
                }
            }
            out.table = table;
        }
        if bound.trainable.weights {
            for (dst, (w, b)) in out.layers.iter_mut().zip(&bound.layers) {
                dst.weight = grads.wrt(*w);
                dst.bias = grads.wrt(*b);
            }
        }
        out
    }

    /// Inference on a batch without tracking gradients.
    pub fn denoise_batch(&self, x: &Array2<f64>, conds: &[Condition], ts: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, conds, ts)?;
        Ok(g.value(out).clone())
    }

    /// Predicted mean of `x_{t-1}` for a single state.
    pub fn denoise(&self, x_t: &StateVector, cond: &Condition, t: usize, num_steps: usize) -> Result<StateVector> {
        if t == 0 || t > num_steps {
            return Err(Error::TimestepOutOfRange { t, max: num_steps });
        }
        let x = Array2::from_shape_vec((1, x_t.dim()), x_t.values.clone()).map_err(|e| invalid(e.to_string()))?;
        let out = self.denoise_batch(&x, &[*cond], &[t])?;
        Ok(StateVector::new(out.index_axis(Axis(0), 0).to_vec(), t - 1))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup() -> (ConceptVocabulary, DenoiserParams) {
        let vocab = ConceptVocabulary::new(3, 3, 0).unwrap();
        let arch = DenoiserArch { dim: 2, embed_dim: 4, hidden: 8, depth: 2, time_dim: 6 };
        let params = DenoiserParams::init(arch, &vocab, &mut rng::stream(1, "init")).unwrap();
        (vocab, params)
    }

    #[test]
    fn condition_slots() {
        let (vocab, params) = setup();
        let table = &params.table;
        let null = table.get(vocab.null()).unwrap();
        assert!(null.iter().any(|v| *v != 0.0));
        let (s, c) = table.embed_condition(&Condition::Null).unwrap();
        assert_eq!((s.clone(), c), (null.clone(), null.clone()));

        let (p, g) = (vocab.personal(), vocab.context(1));
        let (s, c) = table.embed_condition(&Condition::Pair(p, g)).unwrap();
        assert_eq!(s, table.get(p).unwrap());
        assert_eq!(c, table.get(g).unwrap());

        let single = Condition::single(&vocab, g).unwrap();
        assert_eq!(single, Condition::Context(g));
        let (s, c) = table.embed_condition(&single).unwrap();
        assert_eq!(s, null);
        assert_eq!(c, table.get(g).unwrap());

        assert!(table.embed_condition(&Condition::Subject(ConceptId(99))).is_err());
        assert_eq!(Condition::parse(&vocab, "p:g2").unwrap(), Condition::Pair(p, vocab.context(2)));
        assert_eq!(Condition::parse(&vocab, "s1:null").unwrap(), Condition::Subject(vocab.subject(1)));
        assert_eq!(Condition::parse(&vocab, ":").unwrap(), Condition::Null);
        assert!(Condition::parse(&vocab, "g1:s1").is_err());
        assert!(Condition::parse(&vocab, "s1").is_err());
    }

    #[test]
    fn fresh_network_is_identity_for_every_condition() {
        let (vocab, params) = setup();
        let x = StateVector::new(vec![0.7, -1.3], 5);
        for cond in [
            Condition::Null,
            Condition::Subject(vocab.subject(1)),
            Condition::Context(vocab.context(0)),
            Condition::Pair(vocab.personal(), vocab.context(2)),
        ] {
            let out = params.denoise(&x, &cond, 5, 10).unwrap();
            assert_eq!(out.values, x.values);
            assert_eq!(out.timestep, 4);
        }
        assert!(params.denoise(&x, &Condition::Null, 0, 10).is_err());
        assert!(params.denoise(&x, &Condition::Null, 11, 10).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let (vocab, mut params) = setup();
        params.layers.last_mut().unwrap().weight.fill(0.3);
        let x = StateVector::new(vec![0.2, 0.1], 3);
        let c = Condition::Pair(vocab.subject(0), vocab.context(1));
        let a = params.denoise(&x, &c, 3, 10).unwrap();
        let b = params.denoise(&x, &c, 3, 10).unwrap();
        assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.values, x.values);
    }

    #[test]
    fn timestep_encodings_differ() {
        let a = timestep_encoding(0, 32);
        let b = timestep_encoding(100, 32);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[16], 1.0);
        assert!((b[0] - 100f64.sin()).abs() < 1e-15);
        assert_ne!(a, b);
        assert_ne!(timestep_encoding(1, 32), timestep_encoding(2, 32));
    }

    #[test]
    fn personal_token_init() {
        let (vocab, mut params) = setup();
        let (p, s) = (vocab.personal(), vocab.superclass());
        params.table.init_personal_token(p, s, 0.0, &mut rng::stream(2, "tok")).unwrap();
        assert_eq!(params.table.get(p).unwrap(), params.table.get(s).unwrap());
        let flagged: Vec<usize> = params.table.trainable.iter().enumerate().filter(|(_, t)| **t).map(|(k, _)| k).collect();
        assert_eq!(flagged, vec![p.0 as usize]);
        assert!(params.table.init_personal_token(p, ConceptId(42), 0.0, &mut rng::stream(2, "tok")).is_err());
    }

    #[test]
    fn personal_token_noise_has_chi_scale() {
        // E||N(0, k^2 I_e)|| = k sqrt(2) Gamma((e+1)/2) / Gamma(e/2) ~ k sqrt(e - 1/2)
        let vocab = ConceptVocabulary::new(3, 3, 0).unwrap();
        let arch = DenoiserArch { embed_dim: 32, ..DenoiserArch::default() };
        let mut params = DenoiserParams::init(arch, &vocab, &mut rng::stream(1, "init")).unwrap();
        let (p, s) = (vocab.personal(), vocab.superclass());
        let trials = 400;
        let mut total = 0.0;
        for k in 0..trials {
            params.table.init_personal_token(p, s, 0.01, &mut rng::indexed_stream(3, "tok", k)).unwrap();
            let d = params.table.get(p).unwrap() - params.table.get(s).unwrap();
            total += d.dot(&d).sqrt();
        }
        let mean = total / trials as f64;
        let expected = 0.01 * (31.5f64).sqrt();
        // chi(32) has sd ~0.71; the mean over 400 draws has sd ~0.0004 at scale 0.01
        assert!((mean - expected).abs() < 4.0 * 0.01 * 0.71 / 20.0, "{mean} vs {expected}");
        assert!((mean - 0.01 * 32f64.sqrt()).abs() < 0.001);
    }
}
