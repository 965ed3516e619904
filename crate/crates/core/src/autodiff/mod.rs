//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] replays it in reverse, accumulating gradients
//! additively across fan-out. Tapes are cheap and short-lived: one per
//! adaptation step, discarded after backward.
//!
//! Values on the tape are addressed by copyable [`Var`] handles. Leaves are
//! created from plain [`Tensor`]s with an explicit `requires_grad` flag; a
//! leaf with `requires_grad = false` never receives a gradient.

mod check;

pub use check::{grad_check_fn, grad_check_params};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a · b, a: [m,k], b: [k,n]
    Matmul { a: Var, b: Var },
    /// out = xᵀ
    Transpose { x: Var },
    /// out = x · wᵀ (+ b), x: [rows,din], w: [dout,din], b: [dout]
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Elementwise product.
    Mul { a: Var, b: Var },
    /// Elementwise quotient.
    Div { a: Var, b: Var },
    /// out = c · x for a compile-time constant c.
    ScaleConst { x: Var, c: f64 },
    /// out[r,·] = x[r,·] + v
    AddRowVec { x: Var, v: Var },
    /// out[r,·] = x[r,·] ⊙ v
    MulRowVec { x: Var, v: Var },
    /// out = s · x for a scalar-valued Var s.
    MulScalarVar { x: Var, s: Var },
    /// Per-row zero-mean / unit-variance over the last dimension
    /// (biased variance). aux: (mu, inv_std) per row.
    Normalize { x: Var },
    /// Row softmax over the last dimension, max-subtracted.
    Softmax { x: Var },
    /// Row log-sum-exp over the last dimension: [r,k] → [r].
    LogSumExp { x: Var },
    /// tanh-approximated GELU, elementwise.
    Gelu { x: Var },
    Exp { x: Var },
    /// [r,k] → [r]
    RowSum { x: Var },
    /// Mean over rows: [r,k] → [k]
    MeanRows { x: Var },
    /// Sum of all elements → scalar.
    Sum { x: Var },
    /// Σ coeffs[i] · parts[i] over scalar-valued parts → scalar.
    LinComb { parts: Vec<Var>, coeffs: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    /// Row gather: [r,c] → [c]; backward scatter-adds into the row.
    SelectRow { m: Var, row: usize },
    /// Single element by flat index → scalar.
    Pick { x: Var, index: usize },
    Reshape { x: Var },
}

#[derive(Debug, Clone)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    /// Op-specific values saved for backward.
    aux: Vec<f64>,
}

/// Gradient assignment produced by [`Tape::backward`]. Only leaves with
/// `requires_grad = true` retain their gradients.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, or zeros of the leaf's shape if it was unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(tape.shape(v).to_vec(), g.to_vec()).expect("shape matches"),
            None => Tensor::zeros(tape.shape(v)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.push_aux(data, shape, op, needs_grad, Vec::new())
    }

    fn push_aux(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        needs_grad: bool,
        aux: Vec<f64>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Record a constant leaf (never receives a gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![v], Vec::new(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("shape matches")
    }

    /// Scalar value of a length-1 Var.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Same values, `requires_grad = false`, no tape edge back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Leaf, false)
    }

    /// `p / detach(p)` for a strictly positive scalar: forward is exactly 1,
    /// backward routes d(out)/dp = 1/p into the probability.
    pub fn detach_scale(&mut self, p: Var) -> Result<Var> {
        if self.nodes[p.0].data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "detach_scale expects a scalar, got shape {:?}",
                self.shape(p)
            )));
        }
        let v = self.scalar_value(p);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Numeric {
                op: "detach_scale",
                detail: alloc::format!("probability must be strictly positive and finite, got {v}"),
            });
        }
        let frozen = self.detach(p);
        self.div(p, frozen)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    /// (rows, k): interpret the last dimension as the row axis for row-wise ops.
    fn rows_last(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.is_empty() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0],
            });
        }
        let k = *s.last().expect("nonempty");
        let numel = self.nodes[v.0].data.len();
        Ok((numel / k, k))
    }

    // ── binary elementwise ───────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, Op::Mul { a, b }, ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, Op::Div { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, Op::ScaleConst { x, c }, ng)
    }

    // ── matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::Matmul { a, b }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![c, r], Op::Transpose { x }, ng))
    }

    /// `x · wᵀ (+ b)` with torch-style weight layout `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.dims2(x, "linear")?;
        let (dout, din2) = self.dims2(w, "linear")?;
        if din != din2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(bv) = b {
            if self.shape(bv) != [dout] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: self.shape(bv).to_vec(),
                    rhs: vec![dout],
                });
            }
        }
        let mut out = vec![0.0; rows * dout];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            for r in 0..rows {
                let xrow = &xd[r * din..(r + 1) * din];
                let orow = &mut out[r * dout..(r + 1) * dout];
                for o in 0..dout {
                    let wrow = &wd[o * din..(o + 1) * din];
                    let mut s = 0.0;
                    for d in 0..din {
                        s += xrow[d] * wrow[d];
                    }
                    orow[o] = s;
                }
            }
            if let Some(bv) = b {
                let bd = &self.nodes[bv.0].data;
                for r in 0..rows {
                    for o in 0..dout {
                        out[r * dout + o] += bd[o];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        Ok(self.push(out, vec![rows, dout], Op::Linear { x, w, b }, ng))
    }

    // ── broadcast over rows ──────────────────────────────────────────

    fn rowvec_check(&self, x: Var, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x, op)?;
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok((r, c))
    }

    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_check(x, v, "add_rowvec")?;
        let mut data = self.nodes[x.0].data.clone();
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vd[j];
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(data, vec![r, c], Op::AddRowVec { x, v }, ng))
    }

    pub fn mul_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_check(x, v, "mul_rowvec")?;
        let mut data = self.nodes[x.0].data.clone();
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= vd[j];
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(data, vec![r, c], Op::MulRowVec { x, v }, ng))
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "mul_scalar_var expects a scalar multiplier, got shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.scalar_value(s);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| sv * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(data, shape, Op::MulScalarVar { x, s }, ng))
    }

    // ── row-wise nonlinearities ──────────────────────────────────────

    /// Zero-mean, unit-variance per row over the last dimension.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, k) = self.rows_last(x, "normalize")?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        let mut aux = vec![0.0; 2 * rows];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let mu = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            if !var.is_finite() {
                return Err(Error::Numeric {
                    op: "normalize",
                    detail: alloc::format!("non-finite variance in row {r}"),
                });
            }
            let inv = 1.0 / math::sqrt(var + eps);
            aux[2 * r] = mu;
            aux[2 * r + 1] = inv;
            for j in 0..k {
                out[r * k + j] = (row[j] - mu) * inv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        Ok(self.push_aux(out, shape, Op::Normalize { x }, ng, aux))
    }

    /// Row softmax with max-subtraction. Errors on non-finite input.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.rows_last(x, "softmax")?;
        let xd = &self.nodes[x.0].data;
        if let Some(bad) = xd.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: alloc::format!("non-finite input {bad}"),
            });
        }
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| math::max(a, b));
            let mut z = 0.0;
            for j in 0..k {
                let e = math::exp(row[j] - m);
                out[r * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[r * k + j] /= z;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        Ok(self.push(out, shape, Op::Softmax { x }, ng))
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.rows_last(x, "logsumexp")?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| math::max(a, b));
            let s: f64 = row.iter().map(|&v| math::exp(v - m)).sum();
            out[r] = m + math::ln(s);
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![rows], Op::LogSumExp { x }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_tanh(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, Op::Gelu { x }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| math::exp(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, Op::Exp { x }, ng)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.dims2(x, "row_sum")?;
        let xd = &self.nodes[x.0].data;
        let out: Vec<f64> = (0..rows)
            .map(|r| xd[r * k..(r + 1) * k].iter().sum())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(out, vec![rows], Op::RowSum { x }, ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.dims2(x, "mean_rows")?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; k];
        for r in 0..rows {
            for j in 0..k {
                out[j] += xd[r * k + j];
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![k], Op::MeanRows { x }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.ng(x);
        self.push(vec![s], Vec::new(), Op::Sum { x }, ng)
    }

    /// Linear combination of scalar-valued Vars with constant coefficients.
    pub fn lincomb(&mut self, parts: &[Var], coeffs: &[f64]) -> Result<Var> {
        if parts.is_empty() || parts.len() != coeffs.len() {
            return Err(Error::Contract(alloc::format!(
                "lincomb needs matching non-empty parts/coeffs, got {}/{}",
                parts.len(),
                coeffs.len()
            )));
        }
        let mut s = 0.0;
        for (p, c) in parts.iter().zip(coeffs) {
            if self.nodes[p.0].data.len() != 1 {
                return Err(Error::Contract(alloc::format!(
                    "lincomb parts must be scalars, got shape {:?}",
                    self.shape(*p)
                )));
            }
            s += c * self.scalar_value(*p);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            vec![s],
            Vec::new(),
            Op::LinComb {
                parts: parts.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            ng,
        ))
    }

    // ── structural ops ───────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c0) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.dims2(*p, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            data,
            vec![rows, c0],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r0, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.dims2(*p, "concat_cols")?;
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; r0 * cols];
        let mut offset = 0;
        for p in parts {
            let (_, c) = self.dims2(*p, "concat_cols")?;
            let pd = &self.nodes[p.0].data;
            for i in 0..r0 {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            data,
            vec![r0, cols],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Contract(alloc::format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(data, vec![len, c], Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Contract(alloc::format!(
                "slice_cols {start}..{} out of {c} cols",
                start + len
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(data, vec![r, len], Op::SliceCols { x, start }, ng))
    }

    pub fn select_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let (r, c) = self.dims2(m, "select_row")?;
        if row >= r {
            return Err(Error::Contract(alloc::format!(
                "select_row {row} out of {r} rows"
            )));
        }
        let data = self.nodes[m.0].data[row * c..(row + 1) * c].to_vec();
        let ng = self.ng(m);
        Ok(self.push(data, vec![c], Op::SelectRow { m, row }, ng))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if index >= n {
            return Err(Error::Contract(alloc::format!(
                "pick index {index} out of {n} elements"
            )));
        }
        let v = self.nodes[x.0].data[index];
        let ng = self.ng(x);
        Ok(self.push(vec![v], Vec::new(), Op::Pick { x, index }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Contract(alloc::format!(
                "cannot reshape {} elements into {:?}",
                self.nodes[x.0].data.len(),
                shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.ng(x);
        Ok(self.push(data, shape, Op::Reshape { x }, ng))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse topological sweep from a scalar root. Gradients accumulate
    /// additively across fan-out; only `requires_grad` leaves retain theirs.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.backprop_node(id, &g, &mut grads);
            if is_leaf {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulate `add` into the gradient slot of `v` (skipping frozen branches).
        macro_rules! acc {
            ($v:expr, $f:expr) => {
                if self.nodes[$v.0].needs_grad {
                    let slot = grads[$v.0]
                        .get_or_insert_with(|| vec![0.0; self.nodes[$v.0].data.len()]);
                    let apply: &mut dyn FnMut(&mut [f64]) = &mut $f;
                    apply(slot);
                }
            };
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc!(a, |d: &mut [f64]| axpy(d, 1.0, g));
                acc!(b, |d: &mut [f64]| axpy(d, 1.0, g));
            }
            Op::Sub { a, b } => {
                acc!(a, |d: &mut [f64]| axpy(d, 1.0, g));
                acc!(b, |d: &mut [f64]| axpy(d, -1.0, g));
            }
            Op::Mul { a, b } => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                acc!(a, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                acc!(b, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div { a, b } => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                acc!(a, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bd[i];
                    }
                });
                acc!(b, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::ScaleConst { x, c } => {
                let c = *c;
                acc!(x, |d: &mut [f64]| axpy(d, c, g));
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                // dA = G · Bᵀ
                acc!(a, |d: &mut [f64]| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            d[i * k + kk] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc!(b, |d: &mut [f64]| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av != 0.0 {
                                let drow = &mut d[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (node.shape[0], node.shape[1]); // output dims
                acc!(x, |d: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (rows, din) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dout = self.nodes[w.0].shape[0];
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                // dX = G · W
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        let grow = &g[r * dout..(r + 1) * dout];
                        let drow = &mut d[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = grow[o];
                            if gv != 0.0 {
                                let wrow = &wd[o * din..(o + 1) * din];
                                for dd in 0..din {
                                    drow[dd] += gv * wrow[dd];
                                }
                            }
                        }
                    }
                });
                // dW = Gᵀ · X
                acc!(w, |d: &mut [f64]| {
                    for r in 0..rows {
                        let grow = &g[r * dout..(r + 1) * dout];
                        let xrow = &xd[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = grow[o];
                            if gv != 0.0 {
                                let drow = &mut d[o * din..(o + 1) * din];
                                for dd in 0..din {
                                    drow[dd] += gv * xrow[dd];
                                }
                            }
                        }
                    }
                });
                if let Some(bv) = b {
                    acc!(bv, |d: &mut [f64]| {
                        for r in 0..rows {
                            for o in 0..dout {
                                d[o] += g[r * dout + o];
                            }
                        }
                    });
                }
            }
            Op::AddRowVec { x, v } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc!(x, |d: &mut [f64]| axpy(d, 1.0, g));
                acc!(v, |d: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::MulRowVec { x, v } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xd = &self.nodes[x.0].data;
                let vd = &self.nodes[v.0].data;
                acc!(x, |d: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] * vd[j];
                        }
                    }
                });
                acc!(v, |d: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xd[i * c + j];
                        }
                    }
                });
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.nodes[s.0].data[0];
                let xd = &self.nodes[x.0].data;
                acc!(x, |d: &mut [f64]| axpy(d, sv, g));
                acc!(s, |d: &mut [f64]| {
                    let mut acc = 0.0;
                    for i in 0..xd.len() {
                        acc += g[i] * xd[i];
                    }
                    d[0] += acc;
                });
            }
            Op::Normalize { x } => {
                let k = *node.shape.last().expect("rank >= 1");
                let rows = node.data.len() / k;
                let y = &node.data;
                let aux = &node.aux;
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        let inv = aux[2 * r + 1];
                        let grow = &g[r * k..(r + 1) * k];
                        let yrow = &y[r * k..(r + 1) * k];
                        let mean_g: f64 = grow.iter().sum::<f64>() / k as f64;
                        let mean_gy: f64 =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                        for j in 0..k {
                            d[r * k + j] += inv * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let k = *node.shape.last().expect("rank >= 1");
                let rows = node.data.len() / k;
                let p = &node.data;
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        let prow = &p[r * k..(r + 1) * k];
                        let grow = &g[r * k..(r + 1) * k];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            d[r * k + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp { x } => {
                let xs = &self.nodes[x.0].data;
                let rows = node.data.len();
                let k = xs.len() / rows;
                let out = &node.data;
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..k {
                            d[r * k + j] += g[r] * math::exp(xs[r * k + j] - out[r]);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = &self.nodes[x.0].data;
                acc!(x, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_tanh_grad(xd[i]);
                    }
                });
            }
            Op::Exp { x } => {
                let out = &node.data;
                acc!(x, |d: &mut [f64]| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                });
            }
            Op::RowSum { x } => {
                let (rows, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..k {
                            d[r * k + j] += g[r];
                        }
                    }
                });
            }
            Op::MeanRows { x } => {
                let (rows, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let scale = 1.0 / rows as f64;
                acc!(x, |d: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..k {
                            d[r * k + j] += g[j] * scale;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                acc!(x, |d: &mut [f64]| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::LinComb { parts, coeffs } => {
                for (p, c) in parts.iter().zip(coeffs) {
                    let c = *c;
                    acc!(p, |d: &mut [f64]| d[0] += c * g[0]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].data.len();
                    acc!(p, |d: &mut [f64]| axpy(d, 1.0, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let cols = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    acc!(p, |d: &mut [f64]| {
                        for i in 0..rows {
                            for j in 0..c {
                                d[i * c + j] += g[i * cols + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.nodes[x.0].shape[1];
                let start = *start;
                acc!(x, |d: &mut [f64]| {
                    axpy(&mut d[start * c..start * c + g.len()], 1.0, g)
                });
            }
            Op::SliceCols { x, start } => {
                let (_, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (r_out, c_out) = (node.shape[0], node.shape[1]);
                let start = *start;
                acc!(x, |d: &mut [f64]| {
                    for i in 0..r_out {
                        for j in 0..c_out {
                            d[i * c + start + j] += g[i * c_out + j];
                        }
                    }
                });
            }
            Op::SelectRow { m, row } => {
                let c = self.nodes[m.0].shape[1];
                let row = *row;
                acc!(m, |d: &mut [f64]| {
                    axpy(&mut d[row * c..(row + 1) * c], 1.0, g)
                });
            }
            Op::Pick { x, index } => {
                let index = *index;
                acc!(x, |d: &mut [f64]| d[index] += g[0]);
            }
            Op::Reshape { x } => {
                acc!(x, |d: &mut [f64]| axpy(d, 1.0, g));
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests;
