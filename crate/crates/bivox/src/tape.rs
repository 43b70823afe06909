//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into every reachable leaf. The op set is exactly what the model needs:
//! dense products, row broadcasts, gathers, row normalization, SiLU, causal
//! row softmax and masked cross-entropy.
//!
//! Gradient correctness of each op (and of anything composed from them) is
//! pinned by central finite differences; see the tests here and the
//! model-level checker in [`crate::gradcheck`].

use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    /// `a (m,k) · b (k,n)`
    MatMul { a: Var, b: Var },
    /// `a (m,k) · bᵀ` with `b (n,k)`
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `a + row` broadcast over rows; `row` is `(1,n)`.
    AddRow { a: Var, row: Var },
    /// `a ∘ row` broadcast over rows.
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: S },
    /// `ca·a + cb·b`, same shapes.
    AddScaled { a: Var, b: Var, ca: S, cb: S },
    /// Rows of `table` selected by `idx`.
    GatherRows { table: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
    /// Per-row `(x−μ)/√(σ²+ε)`; `inv_std` cached at forward time.
    RowNormalize { a: Var, inv_std: Vec<S> },
    Silu { a: Var },
    /// Row `i` is a softmax over columns `0..=offset+i`, zero elsewhere.
    CausalSoftmaxRows { a: Var, offset: usize },
    /// Scalar `Σ_{mask} −log softmax(logits_r)[targets_r]`.
    MaskedCeSum {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    SumScalars { parts: Vec<Var> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.at(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul { a, b })
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rt = self.value(row);
        assert_eq!(rt.rows(), 1, "bias must be a single row");
        assert_eq!(rt.cols(), self.value(a).cols(), "bias width mismatch");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                *value.at_mut(r, c) = value.at(r, c) + self.nodes[row.0].value.at(0, c);
            }
        }
        self.push(value, Op::AddRow { a, row })
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let rt = self.value(row);
        assert_eq!(rt.rows(), 1, "gain must be a single row");
        assert_eq!(rt.cols(), self.value(a).cols(), "gain width mismatch");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                *value.at_mut(r, c) = value.at(r, c) * self.nodes[row.0].value.at(0, c);
            }
        }
        self.push(value, Op::MulRow { a, row })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(c);
        self.push(value, Op::Scale { a, c })
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, ca: S, cb: S) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (rows, cols) = self.value(a).shape();
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            value.data_mut()[i] =
                ca * self.nodes[a.0].value.data()[i] + cb * self.nodes[b.0].value.data()[i];
        }
        self.push(value, Op::AddScaled { a, b, ca, cb })
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Tensor::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(self.nodes[table.0].value.row(i));
        }
        self.push(value, Op::GatherRows { table, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut r = 0;
        for p in &parts {
            let pt = &self.nodes[p.0].value;
            assert_eq!(pt.cols(), cols);
            for pr in 0..pt.rows() {
                value.row_mut(r).copy_from_slice(pt.row(pr));
                r += 1;
            }
        }
        self.push(value, Op::ConcatRows { parts })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let at = self.value(a);
        assert!(start + len <= at.cols());
        let mut value = Tensor::zeros(at.rows(), len);
        for r in 0..at.rows() {
            let src = &self.nodes[a.0].value.row(r)[start..start + len];
            value.row_mut(r).copy_from_slice(src);
        }
        self.push(value, Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c = 0;
            for p in &parts {
                let pt = &self.nodes[p.0].value;
                assert_eq!(pt.rows(), rows);
                value.row_mut(r)[c..c + pt.cols()].copy_from_slice(pt.row(r));
                c += pt.cols();
            }
        }
        self.push(value, Op::ConcatCols { parts })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).reshaped(rows, cols);
        self.push(value, Op::Reshape { a })
    }

    /// Per-row standardization `(x − μ)/√(σ² + ε)` (biased variance).
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let at = self.value(a);
        let (rows, cols) = at.shape();
        let mut value = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let epss = fl::<S>(eps);
        let n = fl::<S>(cols as f64);
        for r in 0..rows {
            let x = self.nodes[a.0].value.row(r);
            let mut mean = S::zero();
            for &v in x {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = S::zero();
            for &v in x {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let r_inv = S::one() / (var + epss).sqrt();
            inv_std.push(r_inv);
            for c in 0..cols {
                *value.at_mut(r, c) = (x[c] - mean) * r_inv;
            }
        }
        self.push(value, Op::RowNormalize { a, inv_std })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (rows, cols) = at.shape();
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let x = self.nodes[a.0].value.data()[i];
            value.data_mut()[i] = x * sigmoid(x);
        }
        self.push(value, Op::Silu { a })
    }

    /// Row `i` becomes a softmax over columns `0..=offset+i`; the rest zero.
    /// For a square score matrix `offset` is 0 and this is the causal mask.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (rows, cols) = at.shape();
        assert!(cols >= rows, "causal softmax needs cols >= rows");
        let offset = cols - rows;
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let prefix = offset + r + 1;
            let x = &self.nodes[a.0].value.row(r)[..prefix];
            let mut m = x[0];
            for &v in x {
                if v > m {
                    m = v;
                }
            }
            let mut z = S::zero();
            let out = value.row_mut(r);
            for c in 0..prefix {
                let e = (x[c] - m).exp();
                out[c] = e;
                z = z + e;
            }
            for c in 0..prefix {
                out[c] = out[c] / z;
            }
        }
        self.push(value, Op::CausalSoftmaxRows { a, offset })
    }

    /// Summed cross-entropy over mask-true rows; returns the scalar var and
    /// the number of rows that contributed.
    pub fn masked_ce_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> (Var, usize) {
        let lt = self.value(logits);
        assert_eq!(lt.rows(), targets.len());
        assert_eq!(lt.rows(), mask.len());
        let mut total = S::zero();
        let mut count = 0usize;
        for r in 0..lt.rows() {
            if !mask[r] {
                continue;
            }
            count += 1;
            let row = self.nodes[logits.0].value.row(r);
            total = total + ce_row(row, targets[r]);
        }
        let v = self.push(
            Tensor::scalar(total),
            Op::MaskedCeSum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        );
        (v, count)
    }

    pub fn sum_scalars(&mut self, parts: Vec<Var>) -> Var {
        let mut total = S::zero();
        for p in &parts {
            total = total + self.scalar_value(*p);
        }
        self.push(Tensor::scalar(total), Op::SumScalars { parts })
    }

    pub fn zero_scalar(&mut self) -> Var {
        self.leaf(Tensor::scalar(S::zero()))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let da = g.matmul_t(&self.nodes[b.0].value);
                    let db = self.nodes[a.0].value.matmul_at(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT { a, b } => {
                    let da = g.matmul(&self.nodes[b.0].value);
                    let db = g.matmul_at(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow { a, row } => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *dr.at_mut(0, c) = dr.at(0, c) + g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::MulRow { a, row } => {
                    let av = &self.nodes[a.0].value;
                    let rv = &self.nodes[row.0].value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *da.at_mut(r, c) = g.at(r, c) * rv.at(0, c);
                            *dr.at_mut(0, c) = dr.at(0, c) + g.at(r, c) * av.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale { a, c } => {
                    let mut da = g;
                    da.scale_assign(*c);
                    accumulate(&mut grads, *a, da);
                }
                Op::AddScaled { a, b, ca, cb } => {
                    let mut da = g.clone();
                    da.scale_assign(*ca);
                    let mut db = g;
                    db.scale_assign(*cb);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::GatherRows { table, idx } => {
                    let tv = &self.nodes[table.0].value;
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..g.cols() {
                            *dt.at_mut(i, c) = dt.at(i, c) + g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows { parts } => {
                    let mut r = 0;
                    for p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        let mut dp = Tensor::zeros(pr, g.cols());
                        for i in 0..pr {
                            dp.row_mut(i).copy_from_slice(g.row(r + i));
                        }
                        r += pr;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for c in 0..*len {
                            *da.at_mut(r, start + c) = g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[start..start + pc]);
                        }
                        start += pc;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::Reshape { a } => {
                    let (ar, ac) = self.nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, g.reshaped(ar, ac));
                }
                Op::RowNormalize { a, inv_std } => {
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = y.shape();
                    let n = fl::<S>(cols as f64);
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mg = S::zero();
                        let mut mgy = S::zero();
                        for c in 0..cols {
                            mg = mg + g.at(r, c);
                            mgy = mgy + g.at(r, c) * y.at(r, c);
                        }
                        mg = mg / n;
                        mgy = mgy / n;
                        for c in 0..cols {
                            *da.at_mut(r, c) =
                                inv_std[r] * (g.at(r, c) - mg - y.at(r, c) * mgy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu { a } => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.len() {
                        let x = av.data()[i];
                        let s = sigmoid(x);
                        da.data_mut()[i] = g.data()[i] * s * (S::one() + x * (S::one() - s));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::CausalSoftmaxRows { a, offset } => {
                    let p = &self.nodes[idx].value;
                    let (rows, cols) = p.shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let prefix = offset + r + 1;
                        let mut s = S::zero();
                        for c in 0..prefix {
                            s = s + g.at(r, c) * p.at(r, c);
                        }
                        for c in 0..prefix {
                            *da.at_mut(r, c) = p.at(r, c) * (g.at(r, c) - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaskedCeSum {
                    logits,
                    targets,
                    mask,
                } => {
                    let up = g.at(0, 0);
                    let lv = &self.nodes[logits.0].value;
                    let mut dl = Tensor::zeros(lv.rows(), lv.cols());
                    for r in 0..lv.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let row = lv.row(r);
                        let probs = softmax_row(row);
                        let drow = dl.row_mut(r);
                        for c in 0..row.len() {
                            drow[c] = up * probs[c];
                        }
                        drow[targets[r]] = drow[targets[r]] - up;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::SumScalars { parts } => {
                    for p in parts {
                        accumulate(&mut grads, *p, g.clone());
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a node, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, contribution: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot => *slot = Some(contribution),
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Softmax of a single row with max subtraction.
pub fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut m = row[0];
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut out: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
    let mut z = S::zero();
    for &e in &out {
        z = z + e;
    }
    for e in &mut out {
        *e = *e / z;
    }
    out
}

/// `−log softmax(row)[target]` with max subtraction.
pub fn ce_row<S: Scalar>(row: &[S], target: usize) -> S {
    let mut m = row[0];
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut z = S::zero();
    for &v in row {
        z = z + (v - m).exp();
    }
    m + z.ln() - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar-valued rebuildable graph with
    /// respect to one leaf tensor.
    fn finite_diff<F>(build: F, leaf_value: &Tensor<f64>, eps: f64) -> Tensor<f64>
    where
        F: Fn(&Tensor<f64>) -> f64,
    {
        let mut grad = Tensor::zeros(leaf_value.rows(), leaf_value.cols());
        for i in 0..leaf_value.len() {
            let mut plus = leaf_value.clone();
            plus.data_mut()[i] += eps;
            let mut minus = leaf_value.clone();
            minus.data_mut()[i] -= eps;
            grad.data_mut()[i] = (build(&plus) - build(&minus)) / (2.0 * eps);
        }
        grad
    }

    /// Composite graph touching every op; returns the scalar loss.
    fn composite_loss(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> (f64, Option<(Tensor<f64>, Tensor<f64>, Tensor<f64>)>) {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());

        let g = tape.gather_rows(xv, vec![0, 1, 2, 1]);
        let lin = tape.matmul_t(g, wv);
        let lin = tape.add_row(lin, bv);
        let act = tape.silu(lin);
        let norm = tape.row_normalize(act, 1e-5);
        let gain = tape.leaf(Tensor::filled(1, norm_cols(&tape, norm), 1.25));
        let scaled = tape.mul_row(norm, gain);
        let scores = tape.matmul_t(scaled, scaled);
        let probs = tape.causal_softmax_rows(scores);
        let mixed = tape.matmul(probs, scaled);
        let left = tape.slice_cols(mixed, 0, 2);
        let right = tape.slice_cols(mixed, 2, 2);
        let cat = tape.concat_cols(vec![left, right]);
        let twice = tape.concat_rows(vec![cat, cat]);
        let flat = tape.reshape(twice, 4, 8);
        let (ce, _count) = tape.masked_ce_sum(flat, &[1, 3, 0, 2], &[true, false, true, true]);
        let scaled_ce = tape.scale(ce, 0.5);
        let extra = tape.add_scaled(ce, scaled_ce, 0.25, 1.0);
        let loss = tape.sum_scalars(vec![scaled_ce, extra]);

        let l = tape.scalar_value(loss);
        let grads = tape.backward(loss);
        let gx = grads.get(xv).cloned();
        let gw = grads.get(wv).cloned();
        let gb = grads.get(bv).cloned();
        (l, gx.map(|gx| (gx, gw.unwrap(), gb.unwrap())))
    }

    fn norm_cols(tape: &Tape<f64>, v: Var) -> usize {
        tape.value(v).cols()
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::randn(3, 5, 0.8, &mut rng);
        let w = Tensor::<f64>::randn(4, 5, 0.8, &mut rng);
        let b = Tensor::<f64>::randn(1, 4, 0.5, &mut rng);

        let (_, analytic) = composite_loss(&x, &w, &b);
        let (gx, gw, gb) = analytic.expect("gradients reach all leaves");

        let eps = 1e-6;
        let nx = finite_diff(|t| composite_loss(t, &w, &b).0, &x, eps);
        let nw = finite_diff(|t| composite_loss(&x, t, &b).0, &w, eps);
        let nb = finite_diff(|t| composite_loss(&x, &w, t).0, &b, eps);

        for (analytic, numeric) in [(&gx, &nx), (&gw, &nw), (&gb, &nb)] {
            for i in 0..analytic.len() {
                let a = analytic.data()[i];
                let n = numeric.data()[i];
                let rel = (a - n).abs() / n.abs().max(1e-8);
                assert!(rel < 1e-6, "grad mismatch: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn causal_softmax_rows_are_prefix_distributions() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(
            3,
            3,
            vec![0.3, 9.0, 9.0, 1.0, 2.0, 9.0, -1.0, 0.5, 2.0],
        ));
        let p = tape.causal_softmax_rows(a);
        let pv = tape.value(p);
        assert_eq!(pv.at(0, 0), 1.0, "first row sees only itself");
        assert_eq!(pv.at(0, 1), 0.0);
        assert_eq!(pv.at(1, 2), 0.0, "masked region stays zero");
        let row1: f64 = (0..2).map(|c| pv.at(1, c)).sum();
        let row2: f64 = (0..3).map(|c| pv.at(2, c)).sum();
        assert!((row1 - 1.0).abs() < 1e-12);
        assert!((row2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_ignores_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_vec(2, 3, vec![0.0, 0.0, 0.0, 50.0, 0.0, 0.0]));
        let (ce, count) = tape.masked_ce_sum(logits, &[0, 0], &[true, false]);
        assert_eq!(count, 1);
        let expected = (3.0f64).ln();
        assert!((tape.scalar_value(ce) - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(4, 32));
        let (ce, count) = tape.masked_ce_sum(logits, &[5, 1, 0, 31], &[true; 4]);
        let mean = tape.scalar_value(ce) / count as f64;
        assert!((mean - (32.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let picked = tape.gather_rows(table, vec![1, 1, 0]);
        let (ce, _) = tape.masked_ce_sum(picked, &[0, 0, 1], &[true; 3]);
        let grads = tape.backward(ce);
        let gt = grads.get(table).unwrap();
        // Row 1 received two contributions, row 0 one.
        assert!(gt.at(1, 0).abs() > 0.0);
        assert!(gt.at(0, 1).abs() > 0.0);
    }
}
