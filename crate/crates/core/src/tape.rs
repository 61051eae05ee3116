//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward computation. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to every parameter that was read through
//! [`Tape::param`]. Parameters are addressed by `(store tag, index)` so that
//! several independent parameter stores (one per encoder, plus a head) can take
//! part in the same computation.

use std::collections::HashMap;

use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Address of a parameter: which store it lives in and its index there.
pub type ParamKey = (usize, usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamKey),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Softmax(Var),
    Normalize { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, indices: Vec<usize> },
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BceWithLogits { logit: Var, target: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

/// Gradients of one scalar with respect to the parameters read on a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.by_param.get(&key)
    }

    pub fn take(&mut self, key: ParamKey) -> Option<Matrix> {
        self.by_param.remove(&key)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant that receives no gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Reads a parameter. Repeated reads of the same key share one node, so
    /// gradients from every use accumulate into it.
    pub fn param(&mut self, key: ParamKey, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(key));
        self.params.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "mul_row width mismatch");
        let r = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), mask.shape(), "mul_const shape mismatch");
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.push(out, Op::MulConst(a, mask))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise standardisation to zero mean and unit variance.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let n = x.cols() as f64;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::Normalize { input: a, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(idx));
        }
        self.push(out, Op::Gather { table, indices: indices.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let out = Matrix::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target`, computed
    /// from the logit for numerical stability. `logit` must be `1 x 1`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let z = self.value(logit);
        assert_eq!(z.shape(), (1, 1), "bce expects a scalar logit");
        let z = z.get(0, 0);
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        self.push(Matrix::from_vec(1, 1, vec![loss]), Op::BceWithLogits { logit, target })
    }

    /// Gradient of the `1 x 1` node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(key) => {
                    result.by_param.insert(*key, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let gij = g.get(i, j);
                            ga.set(i, j, gij * r.get(0, j));
                            gr.data_mut()[j] += gij * x.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::MulConst(a, mask) => {
                    let mut ga = g;
                    for (o, m) in ga.data_mut().iter_mut().zip(mask.data()) {
                        *o *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Normalize { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (o, &x) in ga.data_mut().iter_mut().zip(x.data()) {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *o *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, indices } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceCols { input, start } => {
                    let x = self.value(*input);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::SliceRows { input, start } => {
                    let x = self.value(*input);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    let c = x.cols();
                    gx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, *input, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let gp = Matrix::from_vec(h, c, g.data()[offset * c..(offset + h) * c].to_vec());
                        offset += h;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::BceWithLogits { logit, target } => {
                    let z = self.value(*logit).get(0, 0);
                    let p = sigmoid(z);
                    accumulate(&mut grads, *logit, Matrix::filled(1, 1, g.get(0, 0) * (p - target)));
                }
            }
        }
        result
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a small graph touching every op, returning a scalar.
    fn build(tape: &mut Tape, params: &[Matrix]) -> Var {
        let x = tape.param((0, 0), &params[0]); // 3x4
        let w = tape.param((0, 1), &params[1]); // 4x4
        let b = tape.param((0, 2), &params[2]); // 1x4
        let table = tape.param((0, 3), &params[3]); // 5x4
        let head = tape.param((0, 4), &params[4]); // 8x1

        let e = tape.gather(table, &[1, 3, 1]);
        let h = tape.add(x, e);
        let h = tape.normalize(h, 1e-5);
        let h = tape.mul_row(h, b);
        let q = tape.matmul(h, w);
        let q = tape.add_row(q, b);
        let s = tape.matmul_t(q, h);
        let s = tape.scale(s, 0.5);
        let a = tape.softmax(s);
        let o = tape.matmul(a, h);
        let o = tape.gelu(o);
        let o = tape.mul_const(o, Matrix::filled(3, 4, 1.5));
        let left = tape.slice_cols(o, 0, 2);
        let right = tape.slice_cols(o, 2, 2);
        let swapped = tape.concat_cols(&[right, left]);
        let top = tape.slice_rows(swapped, 0, 1);
        let bottom = tape.slice_rows(swapped, 2, 1);
        let stacked = tape.concat_rows(&[bottom, top]);
        let flat_a = tape.slice_rows(stacked, 0, 1);
        let flat_b = tape.slice_rows(stacked, 1, 1);
        let flat = tape.concat_cols(&[flat_a, flat_b]);
        let z = tape.matmul(flat, head);
        tape.bce_with_logits(z, 1.0)
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = [(3, 4), (4, 4), (1, 4), (5, 4), (8, 1)];
        let params: Vec<Matrix> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();

        let mut tape = Tape::new();
        let loss = build(&mut tape, &params);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get((0, pi)).expect("param gradient");
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let mut t1 = Tape::new();
                let l1 = build(&mut t1, &plus);
                let mut t2 = Tape::new();
                let l2 = build(&mut t2, &minus);
                let fd = (t1.value(l1).get(0, 0) - t2.value(l2).get(0, 0)) / (2.0 * h);
                let an = g.data()[k];
                assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()), "param {pi}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.input(Matrix::filled(1, 1, 800.0));
        let l = tape.bce_with_logits(z, 0.0);
        assert!((tape.value(l).get(0, 0) - 800.0).abs() < 1e-9);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
