//! Reverse-mode differentiation over a recorded sequence of matrix kernels.
//!
//! Forward values are computed eagerly as operations are recorded. Calling
//! [`Tape::gradients`] walks the record backwards from a scalar loss.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{
    self, cross_entropy, layer_norm_parts, matmul, matmul_transposed, softmax, softmax_rows,
    transposed_matmul, Matrix, Scalar,
};
use super::params::{GradValue, Gradients, ParameterSet};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    node: usize,
    tape: u64,
}

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    MatMulTransposed(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    /// Input plus a constant matrix; the constant carries no gradient.
    AddConst(usize),
    Scale(usize, T),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<usize>),
    RowSlice(usize, usize),
    Gather(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<T>,
    },
    Sum(usize),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            node: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.node >= self.nodes.len() {
            return Err(Error::Usage("value was recorded on a different tape".into()));
        }
        Ok(v.node)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.node].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records parameter `idx` of `params` as a differentiable leaf.
    pub fn param(&mut self, params: &ParameterSet<T>, idx: usize) -> Var {
        self.push(params.value(idx).clone(), Op::Param(idx), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    /// `a × bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = matmul_transposed(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMulTransposed(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Add(ia, ib), ng))
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (am, rm) = (&self.nodes[ia].value, &self.nodes[ir].value);
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::Shape(format!(
                "add_row: {}x{} + {}x{}",
                am.rows(),
                am.cols(),
                rm.rows(),
                rm.cols()
            )));
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (v, &b) in value.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *v = *v + b;
            }
        }
        let ng = self.needs(ia) || self.needs(ir);
        Ok(self.push(value, Op::AddRow(ia, ir), ng))
    }

    pub fn add_constant(&mut self, a: Var, c: &Matrix<T>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.add(c)?;
        let ng = self.needs(ia);
        Ok(self.push(value, Op::AddConst(ia), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.scale(s);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Scale(ia, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = matrix::relu(&self.nodes[ia].value);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Relu(ia), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = softmax_rows(&self.nodes[ia].value);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::SoftmaxRows(ia), ng))
    }

    /// Row-wise layer normalization; `gain` and `bias` are `1×n` rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ia, ig, ib) = (self.idx(a)?, self.idx(gain)?, self.idx(bias)?);
        let (value, normalized, inv_std) = layer_norm_parts(
            &self.nodes[ia].value,
            self.nodes[ig].value.as_slice(),
            self.nodes[ib].value.as_slice(),
            eps,
        )?;
        let ng = self.needs(ia) || self.needs(ig) || self.needs(ib);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: ia,
                gain: ig,
                bias: ib,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Horizontal concatenation of equally tall matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = ids.first().map_or(0, |&i| self.nodes[i].value.rows());
        if ids.iter().any(|&i| self.nodes[i].value.rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = ids.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &i in &ids {
                let src = self.nodes[i].value.row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let ng = ids.iter().any(|&i| self.needs(i));
        Ok(self.push(value, Op::ConcatCols(ids), ng))
    }

    /// Rows `start..start + len` of `a`.
    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if start + len > src.rows() {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {}-row matrix",
                start + len,
                src.rows()
            )));
        }
        let value = src.row_slice(start, len);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::RowSlice(ia, start), ng))
    }

    /// Stacks the rows `ids` of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let src = &self.nodes[it].value;
        if let Some(&bad) = ids.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::Index(format!(
                "id {bad} outside a table of {} rows",
                src.rows()
            )));
        }
        let mut value = Matrix::zeros(ids.len(), src.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(src.row(id));
        }
        let ng = self.needs(it);
        Ok(self.push(value, Op::Gather(it, ids.to_vec()), ng))
    }

    /// Cross-entropy of a `1×n` logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rows() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy expects a single row, got {} rows",
                lv.rows()
            )));
        }
        let loss = cross_entropy(lv.as_slice(), target)?;
        let probs = softmax(lv.as_slice());
        let ng = self.needs(il);
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::CrossEntropy {
                logits: il,
                target,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Matrix::row_vector(vec![self.nodes[ia].value.sum()]);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Sum(ia), ng))
    }

    /// Gradients of the scalar `loss` with respect to every recorded parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.shape() != (1, 1) {
            let (r, c) = self.nodes[root].value.shape();
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        if !self.nodes[root].needs_grad {
            return Err(Error::Usage(
                "backward on a value detached from every parameter".into(),
            ));
        }

        let mut grads: Vec<Option<Matrix<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = Gradients::default();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.entries.push((*p, GradValue::Dense(g))),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let ga = matmul_transposed(&g, &self.nodes[b].value)?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = transposed_matmul(&self.nodes[a].value, &g)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatMulTransposed(a, b) => {
                    // c = a bᵀ: dA = g b, dB = gᵀ a
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let ga = matmul(&g, &self.nodes[b].value)?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = transposed_matmul(&g, &self.nodes[a].value)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if self.needs(row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (t, &v) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *t = *t + v;
                            }
                        }
                        accumulate(&mut grads, row, gr);
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let input = &self.nodes[*a].value;
                    let mut ga = g;
                    for (v, &x) in ga.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if x <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y ⊙ (g − rowsum(g ⊙ y))
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = matrix::dot(g.row(r), y.row(r));
                        for ((o, &gv), &yv) in
                            ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gain_v = self.nodes[*gain].value.as_slice();
                    let (rows, cols) = g.shape();
                    if self.needs(*gain) {
                        let mut gg = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = gg.get(0, c) + g.get(r, c) * normalized.get(r, c);
                                gg.set(0, c, v);
                            }
                        }
                        accumulate(&mut grads, *gain, gg);
                    }
                    if self.needs(*bias) {
                        let mut gb = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for (t, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *t = *t + v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.needs(*input) {
                        let n = T::from_usize(cols).unwrap();
                        let mut gx = Matrix::zeros(rows, cols);
                        for (r, &istd) in inv_std.iter().enumerate().take(rows) {
                            let xhat = normalized.row(r);
                            let dxhat: Vec<T> =
                                g.row(r).iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                            let mean_d = dxhat.iter().fold(T::zero(), |a, &b| a + b) / n;
                            let mean_dx = matrix::dot(&dxhat, xhat) / n;
                            for (c, (&dx, &xh)) in dxhat.iter().zip(xhat).enumerate() {
                                gx.set(r, c, istd * (dx - mean_d - xh * mean_dx));
                            }
                        }
                        accumulate(&mut grads, *input, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.cols();
                        if self.needs(p) {
                            let gp = Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                            accumulate(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::RowSlice(a, start) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let table = *table;
                    if let Op::Param(p) = self.nodes[table].op {
                        // Sparse path: avoid a dense |vocab|×d gradient per sample.
                        let rows = ids
                            .iter()
                            .enumerate()
                            .map(|(r, &id)| (id, g.row(r).to_vec()))
                            .collect();
                        out.entries.push((p, GradValue::Rows(rows)));
                    } else {
                        let src = &self.nodes[table].value;
                        let mut gt = Matrix::zeros(src.rows(), src.cols());
                        for (r, &id) in ids.iter().enumerate() {
                            for (t, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *t = *t + v;
                            }
                        }
                        accumulate(&mut grads, table, gt);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.get(0, 0);
                    let mut gl = Matrix::row_vector(probs.clone());
                    let t = gl.get(0, *target);
                    gl.set(0, *target, t - T::one());
                    accumulate(&mut grads, *logits, gl.scale(scale));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
            }
        }
        Ok(out)
    }

    /// Computes gradients of `loss` and adds them into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.accumulate(&grads, T::one());
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], i: usize, g: Matrix<T>) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(entries: &[(&str, Matrix<f64>)]) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        for (n, m) in entries {
            p.insert(*n, m.clone()).unwrap();
        }
        p
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let a = Matrix::from_fn(3, 2, |r, c| (r as f64) - (c as f64));
        let mut params = params_with(&[("a", a)]);
        let mut tape = Tape::new();
        let va = tape.param(&params, 0);
        let loss = tape.sum(va).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("a").unwrap().grad, Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transposed() {
        let a = Matrix::from_fn(2, 3, |r, c| 0.5 * r as f64 + c as f64);
        let b = Matrix::from_fn(3, 4, |r, c| (r as f64 - 1.0) * (c as f64 + 0.25));
        let mut params = params_with(&[("a", a.clone()), ("b", b.clone())]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&params, 0), tape.param(&params, 1));
        let prod = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss, &mut params).unwrap();

        let expected_a = matmul(&Matrix::filled(2, 4, 1.0), &b.transpose()).unwrap();
        assert_eq!(params.get("a").unwrap().grad, expected_a);
        let expected_b = matmul(&a.transpose(), &Matrix::filled(2, 4, 1.0)).unwrap();
        assert_eq!(params.get("b").unwrap().grad, expected_b);
    }

    #[test]
    fn detached_and_foreign_values_are_usage_errors() {
        let params = params_with(&[("a", Matrix::filled(1, 1, 2.0))]);
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.gradients(s), Err(Error::Usage(_))));

        let mut other = Tape::<f64>::new();
        let foreign = other.param(&params, 0);
        assert!(matches!(tape.gradients(foreign), Err(Error::Usage(_))));
        assert!(matches!(tape.sum(foreign), Err(Error::Usage(_))));

        let p = tape.param(&params, 0);
        let wide = tape.concat_cols(&[p, p]).unwrap();
        assert!(matches!(tape.gradients(wide), Err(Error::Usage(_))));
    }
}
