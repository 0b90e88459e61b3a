//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Just the operations the toy denoiser and its losses need. Every forward
//! pass records onto a fresh [`Tape`]; [`Tape::backward`] returns the gradient
//! of a scalar (`1 x 1`) node with respect to every node on the tape.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcast a `1 x n` row over every row.
    AddRow(Var, Var),
    /// Broadcast elementwise product with a `1 x n` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    SliceCols(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanSquare(Var),
    /// Row-mean of `min(sum_k t_k ln((t_k + eps) / (a_k + eps)), ceiling)`.
    AlignLoss { attn: Var, target: Array2<f64>, eps: f64, ceiling: f64 },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let v = self.value(a).slice(s![.., cols.clone()]).to_owned();
        self.push(v, Op::SliceCols(a, cols))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.iter().map(|e| e * e).sum::<f64>() / x.len().max(1) as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquare(a))
    }

    pub fn align_loss(&mut self, attn: Var, target: Array2<f64>, eps: f64, ceiling: f64) -> Var {
        let a = self.value(attn);
        assert_eq!(a.dim(), target.dim());
        let v = align_rows(a, &target, eps, ceiling).iter().map(|(l, _)| *l).sum::<f64>() / a.nrows().max(1) as f64;
        self.push(Array2::from_elem((1, 1), v), Op::AlignLoss { attn, target, eps, ceiling })
    }

    /// Gradients of scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    acc(*row, (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * self.value(*row));
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::SliceCols(a, cols) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., cols.clone()]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let c = 2.0 * g[[0, 0]] / x.len().max(1) as f64;
                    acc(*a, x * c);
                }
                Op::AlignLoss { attn, target, eps, ceiling } => {
                    let a = self.value(*attn);
                    let rows = align_rows(a, target, *eps, *ceiling);
                    let c = g[[0, 0]] / a.nrows().max(1) as f64;
                    let mut d = Array2::zeros(a.dim());
                    for (i, (_, clipped)) in rows.iter().enumerate() {
                        if *clipped {
                            continue;
                        }
                        for k in 0..a.ncols() {
                            d[[i, k]] = -c * target[[i, k]] / (a[[i, k]] + eps);
                        }
                    }
                    acc(*attn, d);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-row alignment loss and whether the ceiling clipped it.
fn align_rows(a: &Array2<f64>, target: &Array2<f64>, eps: f64, ceiling: f64) -> Vec<(f64, bool)> {
    a.rows()
        .into_iter()
        .zip(target.rows())
        .map(|(ar, tr)| {
            let l: f64 = ar
                .iter()
                .zip(tr.iter())
                .filter(|(_, t)| **t > 0.0)
                .map(|(a, t)| t * ((t + eps) / (a + eps)).ln())
                .sum();
            if l > ceiling {
                (ceiling, true)
            } else {
                (l, false)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph built by `f`.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = f(&mut t, &vars);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
        let out = f(&mut t, &vars);
        let grads = t.backward(out);
        let h = 1e-6;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
            for pos in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[idx].as_slice_mut().unwrap()[pos] += h;
                minus[idx].as_slice_mut().unwrap()[pos] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[pos];
                assert!((a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()), "input {idx} pos {pos}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 5);
        let b = rand_mat(&mut rng, 1, 5);
        let y = rand_mat(&mut rng, 3, 2);
        check(vec![x, w, b, y], |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.mul_row(h, v[2]);
            let sq = t.matmul_t(h, h);
            let sq = t.softmax_rows(sq);
            let h = t.matmul(sq, h);
            let h = t.tanh(h);
            let a = t.slice_cols(h, 0..2);
            let c = t.slice_cols(h, 2..5);
            let p = t.softmax_rows(c);
            let joined = t.concat_cols(&[a, p]);
            let stacked = t.concat_rows(&[joined, joined]);
            let s = t.scale(stacked, 0.7);
            let first = t.slice_cols(s, 0..2);
            let two = t.concat_rows(&[v[3], v[3]]);
            let d = t.sub(first, two);
            let e = t.add(d, d);
            t.mean_square(e)
        });
    }

    #[test]
    fn align_loss_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = rand_mat(&mut rng, 3, 4);
        check(vec![logits], |t, v| {
            let a = t.softmax_rows(v[0]);
            let mut target = Array2::zeros((3, 4));
            target.slice_mut(s![.., 1..3]).fill(0.5);
            t.align_loss(a, target, 1e-6, 1e3)
        });
    }

    #[test]
    fn align_loss_zero_on_uniform_span() {
        let mut t = Tape::new();
        let mut a = Array2::zeros((2, 4));
        a.slice_mut(s![.., 1..3]).fill(0.5);
        let target = a.clone();
        let v = t.leaf(a);
        let l = t.align_loss(v, target, 1e-6, 1e3);
        assert_eq!(t.scalar(l), 0.0);
    }
}
