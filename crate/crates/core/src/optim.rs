//! Adam with per-tensor learning rates and entry masks.

use ndarray::{Array2, Zip};

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

/// What an optimizer step may touch in one tensor.
#[derive(Debug, Clone, Copy)]
pub enum Update<'a> {
    Frozen,
    All { lr: f64 },
    /// Only rows whose flag is set.
    Rows { lr: f64, rows: &'a [bool] },
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
        }
    }

    pub fn for_tensors(tensors: &[&Array2<f64>]) -> Self {
        let shapes: Vec<_> = tensors.iter().map(|t| t.dim()).collect();
        Self::new(&shapes)
    }

    /// Applies one step. Entries outside the update set are left bit-identical.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>], updates: &[Update<'_>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(updates.len(), self.m.len());
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            let (lr, rows) = match updates[k] {
                Update::Frozen => continue,
                Update::All { lr } => (lr, None),
                Update::Rows { lr, rows } => (lr, Some(rows)),
            };
            let g = grads[k];
            for r in 0..p.nrows() {
                if rows.is_some_and(|mask| !mask[r]) {
                    continue;
                }
                Zip::from(p.row_mut(r))
                    .and(self.m[k].row_mut(r))
                    .and(self.v[k].row_mut(r))
                    .and(g.row(r))
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
        }
    }
}
