//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation eagerly computes its value, records itself on the
//! tape, and checks its output for NaN/Inf. A non-finite output poisons the
//! graph: the first offending op is remembered and surfaced as an error from
//! `backward`/`ensure_healthy` instead of propagating silently.
//!
//! Attention does not persist its probability matrix; the backward pass
//! recomputes it from the (still live) query/key values, which keeps graph
//! memory proportional to the activations rather than to `n^2`.

use std::collections::HashMap;

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_inplace, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Silu { a: usize },
    RmsNorm { x: usize, gain: usize, eps: f64 },
    Rope { x: usize, positions: Vec<usize>, base: f64 },
    Attn { q: usize, k: usize, v: usize, causal: bool },
    GatherRows { table: usize, ids: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize, len: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SoftmaxRows { a: usize },
    CrossEntropySum { logits: usize, targets: Vec<u32>, mask: Vec<bool> },
    SumAll { a: usize },
}

/// Gradient tape. Nodes are appended in forward order; `backward` walks the
/// tape in reverse.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    param_memo: HashMap<(String, String), Var>,
    param_order: Vec<(String, String, Var)>,
    poisoned: Option<&'static str>,
    backward_done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_memo: HashMap::new(),
            param_order: Vec::new(),
            poisoned: None,
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op, op_name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(op_name);
        }
        self.nodes.push(Node { value, requires_grad, op });
        Var { idx: self.nodes.len() - 1 }
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf, "leaf")
    }

    /// Differentiable input.
    pub fn trainable_leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf, "leaf")
    }

    /// Register a named parameter from `set`. Repeated calls for the same
    /// (set, name) return the same node so gradient contributions from every
    /// use accumulate into one slot. Frozen parameters become plain leaves.
    pub fn param(&mut self, set: &super::ParamSet<F>, name: &str) -> Var {
        let key = (set.tag().to_string(), name.to_string());
        if let Some(&v) = self.param_memo.get(&key) {
            return v;
        }
        let p = set
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{}` in set `{}`", name, set.tag()));
        let var = self.push(p.value.clone(), p.trainable, Op::Leaf, "param");
        self.param_memo.insert(key.clone(), var);
        self.param_order.push((key.0, key.1, var));
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.idx].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.idx].value.scalar_value()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.idx].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.idx].value.cols()
    }

    /// Error if any recorded op produced a non-finite output.
    pub fn ensure_healthy(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_acc(out.data_mut(), av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Matmul { a: a.idx, b: b.idx }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add { a: a.idx, b: b.idx }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        assert_eq!(av.shape(), bv.shape(), "mul shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Mul { a: a.idx, b: b.idx }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = &self.nodes[a.idx].value;
        let cf = F::from_f64(c);
        let data = av.data().iter().map(|&x| x * cf).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale { a: a.idx, c }, "scale")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.idx].value;
        let data = av
            .data()
            .iter()
            .map(|&x| {
                let sig = F::one() / (F::one() + (-x).exp());
                x * sig
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, rg, Op::Silu { a: a.idx }, "silu")
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let eps = 1e-5;
        let (xv, gv) = (&self.nodes[x.idx].value, &self.nodes[gain.idx].value);
        assert_eq!(xv.shape().len(), 2, "rms_norm input must be rank 2");
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(gv.numel(), d, "rms_norm gain length");
        let epsf = F::from_f64(eps);
        let df = F::from_f64(d as f64);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / df;
            let inv = F::one() / (ms + epsf).sqrt();
            for (c, &v) in row.iter().enumerate() {
                data.push(v * inv * gv.data()[c]);
            }
        }
        let out = Tensor::new(vec![n, d], data).unwrap();
        let rg = self.rg(x) || self.rg(gain);
        self.push(out, rg, Op::RmsNorm { x: x.idx, gain: gain.idx, eps }, "rms_norm")
    }

    /// Rotary position encoding over consecutive column pairs of `[n, h]`
    /// rows, one position per row. `h` must be even.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Var {
        let xv = &self.nodes[x.idx].value;
        let (n, h) = (xv.rows(), xv.cols());
        assert_eq!(positions.len(), n, "rope positions per row");
        assert_eq!(h % 2, 0, "rope head dim must be even");
        let mut data = Vec::with_capacity(n * h);
        for (r, &pos) in positions.iter().enumerate() {
            let row = xv.row(r);
            for p in 0..h / 2 {
                let theta = rope_angle(pos, p, h, base);
                let (s, c) = (F::from_f64(theta.sin()), F::from_f64(theta.cos()));
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                data.push(x0 * c - x1 * s);
                data.push(x0 * s + x1 * c);
            }
        }
        let out = Tensor::new(vec![n, h], data).unwrap();
        let rg = self.rg(x);
        self.push(out, rg, Op::Rope { x: x.idx, positions: positions.to_vec(), base }, "rope")
    }

    /// Scaled dot-product attention for one head. With `causal`, query row
    /// `i` attends to key rows `0..=i` (shapes must agree). Probabilities
    /// are never stored; backward recomputes them.
    pub fn attn(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.idx].value,
            &self.nodes[k.idx].value,
            &self.nodes[v.idx].value,
        );
        let (n, h) = (qv.rows(), qv.cols());
        let m = kv.rows();
        assert_eq!(kv.cols(), h, "attn key dim");
        assert_eq!(vv.rows(), m, "attn value rows");
        assert_eq!(vv.cols(), h, "attn value dim");
        if causal {
            assert_eq!(n, m, "causal attn requires aligned query/key rows");
        }
        let scale = F::from_f64(1.0 / (h as f64).sqrt());

        let mut out = Tensor::zeros(vec![n, h]);
        attn_rows_forward(
            out.data_mut(),
            qv.data(),
            kv.data(),
            vv.data(),
            n,
            m,
            h,
            scale,
            causal,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, rg, Op::Attn { q: q.idx, k: k.idx, v: v.idx, causal }, "attn")
    }

    /// Select rows of `table` by index (indices may repeat); backward
    /// scatter-adds into the table gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.idx].value;
        let rows = tv.rows();
        for &i in ids {
            assert!(i < rows, "gather index {i} out of range {rows}");
        }
        let out = tv.select_rows(ids);
        let rg = self.rg(table);
        self.push(out, rg, Op::GatherRows { table: table.idx, ids: ids.to_vec() }, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].idx].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.idx].value.rows()).sum();
        let mut data = Vec::with_capacity(total * d);
        for p in parts {
            let t = &self.nodes[p.idx].value;
            assert_eq!(t.cols(), d, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![total, d], data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        let idxs = parts.iter().map(|p| p.idx).collect();
        self.push(out, rg, Op::ConcatRows { parts: idxs }, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.idx].value;
        let (n, d) = (av.rows(), av.cols());
        assert!(start + len <= n, "slice_rows out of range");
        let data = av.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data).unwrap();
        let rg = self.rg(a);
        self.push(out, rg, Op::SliceRows { a: a.idx, start, len }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.idx].value;
        let (n, d) = (av.rows(), av.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            let row = av.row(r);
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], data).unwrap();
        let rg = self.rg(a);
        self.push(out, rg, Op::SliceCols { a: a.idx, start, len }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].idx].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.idx].value.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                let t = &self.nodes[p.idx].value;
                assert_eq!(t.rows(), n, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::new(vec![n, total], data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        let idxs = parts.iter().map(|p| p.idx).collect();
        self.push(out, rg, Op::ConcatCols { parts: idxs }, "concat_cols")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.idx].value;
        let (n, d) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for r in 0..n {
            softmax_inplace(&mut data[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![n, d], data).unwrap();
        let rg = self.rg(a);
        self.push(out, rg, Op::SoftmaxRows { a: a.idx }, "softmax_rows")
    }

    /// Sum of per-row cross-entropy over unmasked rows; also returns the
    /// unmasked count. Targets must lie in `[0, vocab)` and at least one row
    /// must be unmasked.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let lv = &self.nodes[logits.idx].value;
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n || mask.len() != n {
            return Err(Error::InvalidArg(format!(
                "cross entropy: {} logit rows, {} targets, {} mask entries",
                n,
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArg("cross entropy: all rows masked".into()));
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t as usize >= vocab {
                return Err(Error::InvalidArg(format!(
                    "cross entropy: target {t} out of range [0, {vocab})"
                )));
            }
        }
        let mut sum = F::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = lv.row(r);
            let mut max = F::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            sum = sum + lse - row[targets[r] as usize];
        }
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(sum),
            rg,
            Op::CrossEntropySum {
                logits: logits.idx,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            "cross_entropy",
        );
        Ok((var, count))
    }

    /// Mean negative log-likelihood over unmasked rows.
    pub fn softmax_ce_loss(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (sum, count) = self.cross_entropy_sum(logits, targets, mask)?;
        Ok(self.scale(sum, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.idx].value;
        let s = av.data().iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll { a: a.idx }, "sum_all")
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// differentiable ancestor; frozen/constant leaves receive none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.ensure_healthy()?;
        if self.backward_done {
            return Err(Error::Autodiff("backward called twice on the same graph".into()));
        }
        if !self.nodes[loss.idx].value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.idx] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.idx).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &out_grad);
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradients of registered parameters for `tag`, in registration order.
    /// Parameters that received no gradient (frozen or unused) are skipped.
    pub fn param_grads(&self, tag: &str) -> Vec<(String, Tensor<F>)> {
        self.param_order
            .iter()
            .filter(|(t, _, _)| t == tag)
            .filter_map(|(_, name, var)| {
                self.grad(*var).map(|g| (name.clone(), g.clone()))
            })
            .collect()
    }

    fn accum(&mut self, idx: usize, delta: &Tensor<F>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (gv, &dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + dv;
                }
            }
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn accum_raw(&mut self, idx: usize, shape: &[usize], f: impl FnOnce(&mut [F])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        if self.grads[idx].is_none() {
            self.grads[idx] = Some(Tensor::zeros(shape.to_vec()));
        }
        f(self.grads[idx].as_mut().unwrap().data_mut());
    }

    fn backprop_node(&mut self, idx: usize, out_grad: &Tensor<F>) {
        // Take the op apart first to appease the borrow checker; values are
        // read through raw indices afterwards.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                let a_data = self.nodes[a].value.data().to_vec();
                let b_data = self.nodes[b].value.data().to_vec();
                self.accum_raw(a, &[m, k], |ga| {
                    matmul_nt_acc(ga, out_grad.data(), &b_data, m, n, k);
                });
                self.accum_raw(b, &[k, n], |gb| {
                    matmul_tn_acc(gb, &a_data, out_grad.data(), m, k, n);
                });
            }
            &Op::Add { a, b } => {
                self.accum(a, out_grad);
                self.accum(b, out_grad);
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a].value.clone();
                let bv = self.nodes[b].value.clone();
                let ga = Tensor::new(
                    av.shape().to_vec(),
                    out_grad.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    av.shape().to_vec(),
                    out_grad.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect(),
                )
                .unwrap();
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            &Op::Scale { a, c } => {
                let cf = F::from_f64(c);
                let ga = Tensor::new(
                    out_grad.shape().to_vec(),
                    out_grad.data().iter().map(|&g| g * cf).collect(),
                )
                .unwrap();
                self.accum(a, &ga);
            }
            &Op::Silu { a } => {
                let av = self.nodes[a].value.clone();
                let ga = Tensor::new(
                    av.shape().to_vec(),
                    av.data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&x, &g)| {
                            let sig = F::one() / (F::one() + (-x).exp());
                            g * sig * (F::one() + x * (F::one() - sig))
                        })
                        .collect(),
                )
                .unwrap();
                self.accum(a, &ga);
            }
            &Op::RmsNorm { x, gain, eps } => {
                let xv = self.nodes[x].value.clone();
                let gv = self.nodes[gain].value.clone();
                let (n, d) = (xv.rows(), xv.cols());
                let epsf = F::from_f64(eps);
                let df = F::from_f64(d as f64);
                let mut gx = Tensor::zeros(vec![n, d]);
                let mut gg = Tensor::zeros(vec![d]);
                for r in 0..n {
                    let row = xv.row(r);
                    let dy = &out_grad.data()[r * d..(r + 1) * d];
                    let ms = row.iter().map(|&v| v * v).sum::<F>() / df;
                    let inv = F::one() / (ms + epsf).sqrt();
                    // s = sum_c g_c dy_c x_c
                    let mut s = F::zero();
                    for c in 0..d {
                        s = s + gv.data()[c] * dy[c] * row[c];
                    }
                    let coef = inv * inv * inv / df;
                    for c in 0..d {
                        gx.data_mut()[r * d + c] =
                            gv.data()[c] * dy[c] * inv - row[c] * s * coef;
                        gg.data_mut()[c] = gg.data_mut()[c] + dy[c] * row[c] * inv;
                    }
                }
                self.accum(x, &gx);
                self.accum(gain, &gg);
            }
            Op::Rope { x, positions, base } => {
                let (x, positions, base) = (*x, positions.clone(), *base);
                let xv = self.nodes[x].value.clone();
                let (n, h) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(vec![n, h]);
                for (r, &pos) in positions.iter().enumerate() {
                    let dy = &out_grad.data()[r * h..(r + 1) * h];
                    let gr = &mut gx.data_mut()[r * h..(r + 1) * h];
                    for p in 0..h / 2 {
                        let theta = rope_angle(pos, p, h, base);
                        let (s, c) = (F::from_f64(theta.sin()), F::from_f64(theta.cos()));
                        let (g0, g1) = (dy[2 * p], dy[2 * p + 1]);
                        gr[2 * p] = g0 * c + g1 * s;
                        gr[2 * p + 1] = -g0 * s + g1 * c;
                    }
                }
                self.accum(x, &gx);
            }
            &Op::Attn { q, k, v, causal } => {
                let qv = self.nodes[q].value.clone();
                let kv = self.nodes[k].value.clone();
                let vv = self.nodes[v].value.clone();
                let (n, h) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let scale = F::from_f64(1.0 / (h as f64).sqrt());
                let mut gq = Tensor::zeros(vec![n, h]);
                let mut gk = Tensor::zeros(vec![m, h]);
                let mut gv = Tensor::zeros(vec![m, h]);
                let mut probs = vec![F::zero(); m];
                let mut d_scores = vec![F::zero(); m];
                for i in 0..n {
                    let limit = if causal { i + 1 } else { m };
                    let q_row = qv.row(i);
                    // recompute probabilities for this row
                    for j in 0..limit {
                        let k_row = kv.row(j);
                        let mut dot = F::zero();
                        for (&a, &b) in q_row.iter().zip(k_row.iter()) {
                            dot = dot + a * b;
                        }
                        probs[j] = dot * scale;
                    }
                    softmax_inplace(&mut probs[..limit]);
                    let dy = &out_grad.data()[i * h..(i + 1) * h];
                    // dP_ij = dy . v_j ; dv_j += P_ij dy
                    let mut dot_p = F::zero();
                    for j in 0..limit {
                        let v_row = vv.row(j);
                        let mut dp = F::zero();
                        for (&g, &vb) in dy.iter().zip(v_row.iter()) {
                            dp = dp + g * vb;
                        }
                        let gvj = &mut gv.data_mut()[j * h..(j + 1) * h];
                        for (o, &g) in gvj.iter_mut().zip(dy.iter()) {
                            *o = *o + probs[j] * g;
                        }
                        d_scores[j] = dp;
                        dot_p = dot_p + probs[j] * dp;
                    }
                    // dS_ij = P_ij (dP_ij - sum_l P_il dP_il)
                    for j in 0..limit {
                        d_scores[j] = probs[j] * (d_scores[j] - dot_p);
                    }
                    let gqi = &mut gq.data_mut()[i * h..(i + 1) * h];
                    for j in 0..limit {
                        let ds = d_scores[j] * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let k_row = kv.row(j);
                        for (o, &b) in gqi.iter_mut().zip(k_row.iter()) {
                            *o = *o + ds * b;
                        }
                        let gkj = &mut gk.data_mut()[j * h..(j + 1) * h];
                        for (o, &a) in gkj.iter_mut().zip(q_row.iter()) {
                            *o = *o + ds * a;
                        }
                    }
                }
                self.accum(q, &gq);
                self.accum(k, &gk);
                self.accum(v, &gv);
            }
            Op::GatherRows { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let shape = self.nodes[table].value.shape().to_vec();
                let d = shape[1];
                self.accum_raw(table, &shape, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &out_grad.data()[r * d..(r + 1) * d];
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src.iter()) {
                            *o = *o + g;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let d = out_grad.cols();
                let mut start = 0usize;
                for p in parts {
                    let rows = self.nodes[p].value.rows();
                    let piece = Tensor::new(
                        vec![rows, d],
                        out_grad.data()[start * d..(start + rows) * d].to_vec(),
                    )
                    .unwrap();
                    self.accum(p, &piece);
                    start += rows;
                }
            }
            &Op::SliceRows { a, start, len } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let d = shape[1];
                debug_assert_eq!(out_grad.numel(), len * d);
                self.accum_raw(a, &shape, |ga| {
                    let dst = &mut ga[start * d..(start + len) * d];
                    for (o, &g) in dst.iter_mut().zip(out_grad.data().iter()) {
                        *o = *o + g;
                    }
                });
            }
            &Op::SliceCols { a, start, len } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let (n, d) = (shape[0], shape[1]);
                self.accum_raw(a, &shape, |ga| {
                    for r in 0..n {
                        let src = &out_grad.data()[r * len..(r + 1) * len];
                        let dst = &mut ga[r * d + start..r * d + start + len];
                        for (o, &g) in dst.iter_mut().zip(src.iter()) {
                            *o = *o + g;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = out_grad.rows();
                let total = out_grad.cols();
                let mut start = 0usize;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut piece = Tensor::zeros(vec![n, w]);
                    for r in 0..n {
                        let src = &out_grad.data()[r * total + start..r * total + start + w];
                        piece.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    self.accum(p, &piece);
                    start += w;
                }
            }
            &Op::SoftmaxRows { a } => {
                let yv = self.nodes[idx].value.clone();
                let (n, d) = (yv.rows(), yv.cols());
                let mut ga = Tensor::zeros(vec![n, d]);
                for r in 0..n {
                    let y = yv.row(r);
                    let dy = &out_grad.data()[r * d..(r + 1) * d];
                    let mut dot = F::zero();
                    for c in 0..d {
                        dot = dot + y[c] * dy[c];
                    }
                    for c in 0..d {
                        ga.data_mut()[r * d + c] = y[c] * (dy[c] - dot);
                    }
                }
                self.accum(a, &ga);
            }
            Op::CrossEntropySum { logits, targets, mask } => {
                let (logits, targets, mask) = (*logits, targets.clone(), mask.clone());
                let lv = self.nodes[logits].value.clone();
                let (n, vocab) = (lv.rows(), lv.cols());
                let g = out_grad.scalar_value();
                let mut gl = Tensor::zeros(vec![n, vocab]);
                let mut probs = vec![F::zero(); vocab];
                for r in 0..n {
                    if !mask[r] {
                        continue;
                    }
                    probs.copy_from_slice(lv.row(r));
                    softmax_inplace(&mut probs);
                    let dst = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                    for (o, &p) in dst.iter_mut().zip(probs.iter()) {
                        *o = p * g;
                    }
                    dst[targets[r] as usize] = dst[targets[r] as usize] - g;
                }
                self.accum(logits, &gl);
            }
            &Op::SumAll { a } => {
                let shape = self.nodes[a].value.shape().to_vec();
                let g = out_grad.scalar_value();
                let ga = Tensor::filled(shape, g);
                self.accum(a, &ga);
            }
        }
    }
}

fn rope_angle(pos: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    let exponent = -2.0 * pair as f64 / head_dim as f64;
    pos as f64 * base.powf(exponent)
}

#[allow(clippy::too_many_arguments)]
fn attn_rows_forward<F: Scalar>(
    out: &mut [F],
    q: &[F],
    k: &[F],
    v: &[F],
    n: usize,
    m: usize,
    h: usize,
    scale: F,
    causal: bool,
) {
    let row_job = |(i, out_row): (usize, &mut [F])| {
        let limit = if causal { i + 1 } else { m };
        let q_row = &q[i * h..(i + 1) * h];
        let mut probs = vec![F::zero(); limit];
        for (j, pj) in probs.iter_mut().enumerate() {
            let k_row = &k[j * h..(j + 1) * h];
            let mut dot = F::zero();
            for (&a, &b) in q_row.iter().zip(k_row.iter()) {
                dot = dot + a * b;
            }
            *pj = dot * scale;
        }
        softmax_inplace(&mut probs);
        for (j, &p) in probs.iter().enumerate() {
            let v_row = &v[j * h..(j + 1) * h];
            for (o, &vb) in out_row.iter_mut().zip(v_row.iter()) {
                *o = *o + p * vb;
            }
        }
    };
    if n * m * h >= 1 << 18 && n > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(h).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(h).enumerate().for_each(row_job);
    }
}
