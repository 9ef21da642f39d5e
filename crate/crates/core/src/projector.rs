//! Two-tower contrastive projector standing in for a CLIP-style text/image
//! projector.
//!
//! The concept tower maps condition embeddings (rows of the denoiser's
//! embedding table) to unit vectors; the data tower maps clean samples to the
//! same sphere. Training is symmetric InfoNCE over blocks where every concept
//! of an axis appears exactly once, so a block has no false negatives.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::denoiser::Linear;
use crate::error::{invalid, Error, Result};
use crate::optim::{Adam, Update};
use crate::rng::{self, Rng};
use crate::world::GridWorld;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub dim: usize,
    pub temperature: f64,
    pub pairs: usize,
    pub hidden: usize,
    pub learning_rate: f64,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self { dim: 16, temperature: 10.0, pairs: 20_000, hidden: 64, learning_rate: 3e-3 }
    }
}

/// Two linear layers with a SiLU between them, followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub layers: [Linear; 2],
}

impl Tower {
    fn init(input: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Linear {
                weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
                bias: Array2::zeros((1, fan_out)),
            }
        };
        Self { layers: [layer(input, hidden), layer(hidden, out)] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> [(Var, Var); 2] {
        let mut leaf = |a: &Array2<f64>| if trainable { g.param(a.clone()) } else { g.constant(a.clone()) };
        let l0 = (leaf(&self.layers[0].weight), leaf(&self.layers[0].bias));
        let l1 = (leaf(&self.layers[1].weight), leaf(&self.layers[1].bias));
        [l0, l1]
    }

    fn apply(g: &mut Graph, bound: &[(Var, Var); 2], x: Var) -> Result<Var> {
        let h = g.matmul(x, bound[0].0);
        let h = g.add_row(h, bound[0].1);
        let h = g.silu(h);
        let o = g.matmul(h, bound[1].0);
        let o = g.add_row(o, bound[1].1);
        g.normalize_rows(o)
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub concept: Tower,
    pub data: Tower,
    pub temperature: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Softmax of `tau * cos(given, candidate_m)` over the candidates, read at `target`.
pub fn conditional_from_projections(tau: f64, given: &[f64], candidates: &[Vec<f64>], target: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(invalid("candidate set is empty"));
    }
    if target >= candidates.len() {
        return Err(invalid(format!("target {target} is not in the candidate set")));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| tau * cosine(given, c)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((scores[target] - max).exp() / z)
}

impl Projector {
    pub fn init(embed_dim: usize, data_dim: usize, spec: &ProjectorSpec, rng: &mut Rng) -> Result<Self> {
        if spec.dim < 2 || spec.hidden == 0 {
            return Err(invalid(format!("degenerate projector spec {spec:?}")));
        }
        if !(spec.temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", spec.temperature)));
        }
        Ok(Self {
            concept: Tower::init(embed_dim, spec.hidden, spec.dim, rng),
            data: Tower::init(data_dim, spec.hidden, spec.dim, rng),
            temperature: spec.temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.concept.layers[1].weight.ncols()
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = self.concept.tensors();
        v.extend(self.data.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.concept.tensors_mut();
        v.extend(self.data.tensors_mut());
        v
    }

    /// Differentiable concept projection of `emb` (rows are embeddings).
    pub fn concept_forward(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        if g.value(emb).ncols() != self.concept.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.concept.input_dim(), got: g.value(emb).ncols() });
        }
        let bound = self.concept.bind(g, false);
        Tower::apply(g, &bound, emb)
    }

    fn project_rows(&self, tower: &Tower, rows: Array2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != tower.input_dim() {
            return Err(Error::DimensionMismatch { expected: tower.input_dim(), got: rows.ncols() });
        }
        let mut g = Graph::new();
        let bound = tower.bind(&mut g, false);
        let x = g.constant(rows);
        let out = Tower::apply(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    /// Unit-norm projection of one concept embedding.
    pub fn project_concept(&self, emb: &[f64]) -> Result<Vec<f64>> {
        let rows = Array2::from_shape_vec((1, emb.len()), emb.to_vec()).map_err(|e| invalid(e.to_string()))?;
        Ok(self.project_rows(&self.concept, rows)?.row(0).to_vec())
    }

    pub fn project_concepts(&self, embs: &Array2<f64>) -> Result<Array2<f64>> {
        self.project_rows(&self.concept, embs.clone())
    }

    pub fn project_data(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rows = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| invalid(e.to_string()))?;
        Ok(self.project_rows(&self.data, rows)?.row(0).to_vec())
    }

    /// Estimate of `p(candidates[target] | given)` from concept embeddings.
    pub fn estimate_conditional(&self, target: usize, given: &[f64], candidates: &[Array1<f64>]) -> Result<f64> {
        let f_given = self.project_concept(given)?;
        let f_cands = candidates.iter().map(|c| self.project_concept(c.as_slice().unwrap())).collect::<Result<Vec<_>>>()?;
        conditional_from_projections(self.temperature, &f_given, &f_cands, target)
    }
}

/// Trains the projector on (sample, subject) and (sample, context) pairs from
/// `world`, with the concept tower reading rows of `embeddings`.
pub fn train_projector(world: &GridWorld, embeddings: &Array2<f64>, spec: &ProjectorSpec, seed: u64) -> Result<Projector> {
    if spec.pairs < 1000 {
        return Err(invalid(format!("projector training needs at least 1000 pairs, got {}", spec.pairs)));
    }
    let vocab = world.vocabulary();
    let (ns, ng) = (vocab.num_subjects(), vocab.num_contexts());
    let mut proj = Projector::init(embeddings.ncols(), world.dim(), spec, &mut rng::stream(seed, "projector-init"))?;
    let mut data_rng = rng::stream(seed, "projector-data");
    let mut adam = Adam::for_tensors(&proj.tensors());
    let subject_rows: Vec<usize> = vocab.subjects().map(|c| c.0 as usize).collect();
    let context_rows: Vec<usize> = vocab.contexts().map(|c| c.0 as usize).collect();
    let blocks_per_step = 8;
    let pairs_per_step = blocks_per_step * (ns + ng);
    let steps = spec.pairs.div_ceil(pairs_per_step);
    let tau = spec.temperature;

    let pick = |weights: Vec<f64>, rng: &mut Rng| -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                return k;
            }
            u -= w;
        }
        weights.len() - 1
    };

    for step in 0..steps {
        let mut g = Graph::new();
        let concept = proj.concept.bind(&mut g, true);
        let data = proj.data.bind(&mut g, true);
        let table = g.constant(embeddings.clone());
        let mut terms = Vec::new();
        for _ in 0..blocks_per_step {
            for axis in 0..2 {
                let (rows, n) = if axis == 0 { (&subject_rows, ns) } else { (&context_rows, ng) };
                let mut xs = Array2::zeros((n, world.dim()));
                for k in 0..n {
                    let (i, j) = if axis == 0 {
                        (k, pick((0..ng).map(|j| world.joint_prior()[[k, j]]).collect(), &mut data_rng))
                    } else {
                        (pick((0..ns).map(|i| world.joint_prior()[[i, k]]).collect(), &mut data_rng), k)
                    };
                    xs.row_mut(k).assign(&Array1::from(world.draw_point(world.mean(i, j), &mut data_rng)));
                }
                let x = g.constant(xs);
                let fx = Tower::apply(&mut g, &data, x)?;
                let e = g.gather(table, rows.clone());
                let fc = Tower::apply(&mut g, &concept, e)?;
                let logits = g.matmul_t(fx, fc);
                let logits = g.scale(logits, tau);
                let logits_t = g.matmul_t(fc, fx);
                let logits_t = g.scale(logits_t, tau);
                let targets: Vec<usize> = (0..n).collect();
                terms.push(g.cross_entropy(logits, targets.clone()));
                terms.push(g.cross_entropy(logits_t, targets));
            }
        }
        let mut loss = terms[0];
        for t in &terms[1..] {
            loss = g.add(loss, *t);
        }
        let loss = g.scale(loss, 1.0 / terms.len() as f64);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite { stage: "projector training", seed, step });
        }
        let grads = g.backward(loss)?;
        let vars: Vec<Var> = concept.iter().chain(data.iter()).flat_map(|(w, b)| [*w, *b]).collect();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();
        let grefs: Vec<&Array2<f64>> = gs.iter().collect();
        let updates = vec![Update::All { lr: spec.learning_rate }; gs.len()];
        adam.step(proj.tensors_mut(), &grefs, &updates);
    }
    Ok(proj)
}

/// Fraction of clean component samples whose subject and context are both
/// retrieved correctly by nearest concept projection.
pub fn retrieval_accuracy(proj: &Projector, world: &GridWorld, embeddings: &Array2<f64>, trials: usize, seed: u64) -> Result<f64> {
    let vocab = world.vocabulary();
    let subj: Vec<Vec<f64>> = vocab.subjects().map(|c| proj.project_concept(embeddings.row(c.0 as usize).as_slice().unwrap())).collect::<Result<_>>()?;
    let ctx: Vec<Vec<f64>> = vocab.contexts().map(|c| proj.project_concept(embeddings.row(c.0 as usize).as_slice().unwrap())).collect::<Result<_>>()?;
    let data = world.sample_dataset(trials, seed)?;
    let argmax = |f: &[f64], cands: &[Vec<f64>]| {
        cands.iter().enumerate().map(|(k, c)| (k, cosine(f, c))).fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a }).0
    };
    let mut hits = 0;
    for s in &data {
        let f = proj.project_data(&s.x.values)?;
        let ok_s = argmax(&f, &subj) == vocab.subject_index(s.subject).unwrap();
        let ok_c = argmax(&f, &ctx) == vocab.context_index(s.context).unwrap();
        hits += usize::from(ok_s && ok_c);
    }
    Ok(hits as f64 / trials as f64)
}
