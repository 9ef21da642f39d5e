//! A small reverse-mode tape over dense matrices.
//!
//! Every value is an `Array2<f64>` (row-major batch x features). Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order. [`Graph::stop_gradient`] copies a value into a
//! node that never propagates gradient to its input.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    NormalizeRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when no path from `v` to the root carries gradient.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a . b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let t = self.tracked(a) || self.tracked(col);
        self.push(v, Op::MulCol(a, col), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, k), t)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let t = self.tracked(a);
        self.push(v, Op::AddScalar(a), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        let t = self.tracked(a);
        self.push(v, Op::Silu(a), t)
    }

    /// Elementwise `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let t = self.tracked(a);
        self.push(v, Op::Abs(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let t = self.tracked(a);
        self.push(v, Op::Square(a), t)
    }

    /// `B x n -> B x 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(a);
        self.push(v, Op::RowSum(a), t)
    }

    /// Squared Euclidean norm of each row, `B x n -> B x 1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.row_sum(sq)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        let t = self.tracked(a);
        self.push(v, Op::Mean(a), t)
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat needs equal row counts");
        let t = parts.iter().any(|p| self.tracked(*p));
        self.push(v, Op::Concat(parts.to_vec()), t)
    }

    /// Selects rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let v = self.value(table).select(Axis(0), &idx);
        let t = self.tracked(table);
        self.push(v, Op::Gather(table, idx), t)
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if norms.iter().any(|n| !(*n > 0.0)) {
            return Err(Error::ZeroNorm);
        }
        let v = x / &norms.insert_axis(Axis(1));
        let t = self.tracked(a);
        Ok(self.push(v, Op::NormalizeRows(a), t))
    }

    /// Mean softmax cross-entropy of row logits against target columns.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &k) in x.rows().into_iter().zip(&targets) {
            let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            total += lse - row[k];
        }
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        let t = self.tracked(logits);
        self.push(v, Op::CrossEntropy(logits, targets), t)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).dim();
        if shape != (1, 1) {
            return Err(Error::Graph(format!("backward needs a scalar root, got {shape:?}")));
        }
        if let Some(pos) = self.nodes[..=root.0].iter().position(|n| n.value.iter().any(|v| !v.is_finite())) {
            return Err(Error::Graph(format!("non-finite value in forward pass at node {pos}")));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for k in (0..=root.0).rev() {
            let node = &self.nodes[k];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[k].take() else { continue };
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[k] = Some(gout);
        }
        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::MulCol(a, col) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*col));
                }
                if self.tracked(*col) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, d);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => self.accumulate(grads, *a, g * self.value(*a) * 2.0),
            Op::RowSum(a) => {
                let shape = self.value(*a).dim();
                let d = g.broadcast(shape).expect("row sum grad").to_owned();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let shape = self.value(*a).dim();
                let n = (shape.0 * shape.1).max(1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.tracked(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::Gather(table, idx) => {
                let mut d = Array2::zeros(self.value(*table).dim());
                for (r, &k) in idx.iter().enumerate() {
                    let mut row = d.row_mut(k);
                    row += &g.row(r);
                }
                self.accumulate(grads, *table, d);
            }
            Op::NormalizeRows(a) => {
                // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
                let x = self.value(*a);
                let mut d = Array2::zeros(x.dim());
                Zip::from(d.rows_mut())
                    .and(x.rows())
                    .and(out.rows())
                    .and(g.rows())
                    .for_each(|mut dr, xr, yr, gr| {
                        let norm = xr.dot(&xr).sqrt();
                        let proj = yr.dot(&gr);
                        dr.assign(&((&gr - &(&yr * proj)) / norm));
                    });
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = self.value(*logits);
                let n = targets.len() as f64;
                let mut d = Array2::zeros(x.dim());
                for ((mut dr, xr), &k) in d.rows_mut().into_iter().zip(x.rows()).zip(targets) {
                    let m = xr.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    let e = xr.mapv(|v| (v - m).exp());
                    let z = e.sum();
                    dr.assign(&(e / z));
                    dr[k] -= 1.0;
                    dr *= g[[0, 0]] / n;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn finite_diff<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    // a small composite exercising every op
    fn composite(g: &mut Graph, w: Var, x: Var, table: Var) -> Var {
        let h = g.matmul(x, w);
        let bias = g.constant(arr2(&[[0.1, -0.2, 0.3]]));
        let h = g.add_row(h, bias);
        let h = g.silu(h);
        let e = g.gather(table, vec![1, 0, 1]);
        let c = g.concat(&[h, e]);
        let n = g.normalize_rows(c).unwrap();
        let logits = g.matmul_t(n, c);
        let ce = g.cross_entropy(logits, vec![0, 2, 1]);
        let sq = g.row_sq_norm(c);
        let k = g.constant(arr2(&[[0.5], [1.5], [-1.0]]));
        let wsq = g.mul_col(sq, k);
        let a = g.abs(wsq);
        let m = g.mean(a);
        let prod = g.mul(h, h);
        let s = g.sum(prod);
        let s = g.scale(s, 0.1);
        let s = g.add_scalar(s, 3.0);
        let d = g.sub(m, s);
        g.add(d, ce)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let w0 = arr2(&[[0.3, -0.4, 0.8], [0.5, 0.1, -0.7]]);
        let x0 = arr2(&[[1.0, 2.0], [-0.5, 0.3], [0.7, -1.2]]);
        let t0 = arr2(&[[0.2, -0.1], [0.4, 0.9]]);
        let eval = |w: &Array2<f64>, x: &Array2<f64>, t: &Array2<f64>| {
            let mut g = Graph::new();
            let (w, x, t) = (g.param(w.clone()), g.param(x.clone()), g.param(t.clone()));
            let out = composite(&mut g, w, x, t);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let (w, x, t) = (g.param(w0.clone()), g.param(x0.clone()), g.param(t0.clone()));
        let out = composite(&mut g, w, x, t);
        let grads = g.backward(out).unwrap();
        assert_close(&grads.wrt(w), &finite_diff(|v| eval(v, &x0, &t0), &w0), 1e-6);
        assert_close(&grads.wrt(x), &finite_diff(|v| eval(&w0, v, &t0), &x0), 1e-6);
        assert_close(&grads.wrt(t), &finite_diff(|v| eval(&w0, &x0, v), &t0), 1e-6);
    }

    #[test]
    fn stop_gradient_and_constants_carry_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(arr2(&[[1.0, 2.0]]));
        let frozen = g.stop_gradient(p);
        let sq = g.square(frozen);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(p).iter().all(|v| *v == 0.0));

        let mut g = Graph::new();
        let p = g.param(arr2(&[[1.0]]));
        let c = g.constant(arr2(&[[4.0]]));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(p)[[0, 0]], 0.0);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut g = Graph::new();
        let p = g.param(arr2(&[[1.0, 2.0]]));
        assert!(matches!(g.backward(p), Err(Error::Graph(_))));
        let n = g.param(arr2(&[[f64::NAN]]));
        let s = g.sum(n);
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let p = g.param(arr2(&[[0.0, -2.0, 3.0]]));
        let a = g.abs(p);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p), arr2(&[[0.0, -1.0, 1.0]]));
    }

    #[test]
    fn normalizing_a_zero_row_fails() {
        let mut g = Graph::new();
        let p = g.param(arr2(&[[0.0, 0.0]]));
        assert!(matches!(g.normalize_rows(p), Err(Error::ZeroNorm)));
    }
}
