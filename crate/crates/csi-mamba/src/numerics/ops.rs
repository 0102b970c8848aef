//! Tensor operations: forward kernels plus recorded adjoints.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept equal
//! shapes or a one-element tensor against anything. Affine maps go through
//! [`linear`] rather than broadcasting a bias row.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::profile;
use super::tensor::{grad_enabled, BackwardCtx, Node, Tensor};

/// Threshold above which softplus falls back to the identity branch.
const SOFTPLUS_CUTOFF: f64 = 30.0;

pub(crate) fn from_op<E: Scalar>(
    data: Vec<E>,
    shape: Vec<usize>,
    parents: Vec<Tensor<E>>,
    adjoint: impl Fn(&BackwardCtx<'_, E>) -> Vec<Option<Vec<E>>> + 'static,
) -> Tensor<E> {
    let connected = grad_enabled()
        && parents
            .iter()
            .any(|p| p.requires_grad() || p.has_node());
    if connected {
        Tensor::make(
            data,
            shape,
            false,
            Some(Node {
                parents,
                adjoint: Box::new(adjoint),
            }),
        )
    } else {
        Tensor::make(data, shape, false, None)
    }
}

fn needs<E: Scalar>(t: &Tensor<E>) -> bool {
    t.requires_grad() || t.has_node()
}

// ── Raw kernels ──────────────────────────────────────────────────────

fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    profile::add_macs((m * k * n) as u64);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// a[m×k] · b[n×k]ᵀ -> [m×n], i.e. row-by-row dot products.
fn matmul_nt_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    profile::add_macs((m * k * n) as u64);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// aᵀ[k×m] · b[k×n] -> [m×n]; used by adjoints.
fn matmul_tn_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn sigmoid_raw<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn softplus_raw<E: Scalar>(x: E) -> E {
    if x.to_f64() > SOFTPLUS_CUTOFF {
        x
    } else {
        x.exp().ln_1p()
    }
}

// ── Matrix products ──────────────────────────────────────────────────

impl<E: Scalar> Tensor<E> {
    /// Standard matrix product. Rank-2 operands only.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.cols() != other.rows() {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (needs(&a), needs(&b));
        Ok(from_op(
            data,
            vec![m, n],
            vec![a.clone(), b.clone()],
            move |ctx| {
                let ga = na.then(|| matmul_nt_raw(ctx.grad, b.data(), m, n, k));
                let gb = nb.then(|| matmul_tn_raw(a.data(), ctx.grad, k, m, n));
                vec![ga, gb]
            },
        ))
    }

    /// self[m×k] · otherᵀ where other is [n×k]. The natural kernel for
    /// attention scores and affine maps stored row-per-output.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.cols() != other.cols() {
            return Err(Error::dim("matmul_nt", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let data = matmul_nt_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (needs(&a), needs(&b));
        Ok(from_op(
            data,
            vec![m, n],
            vec![a.clone(), b.clone()],
            move |ctx| {
                let ga = na.then(|| matmul_raw(ctx.grad, b.data(), m, n, k));
                let gb = nb.then(|| matmul_tn_raw(ctx.grad, a.data(), n, m, k));
                vec![ga, gb]
            },
        ))
    }
}

/// Affine map `x·wᵀ (+ bias)` with `w` stored `[out×in]`.
///
/// Accepts rank-1 or rank-2 `x`; the output keeps the input rank.
pub fn linear<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    if x.shape().len() > 2 || w.shape().len() != 2 || x.cols() != w.cols() {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (t, d_in, d_out) = (x.rows(), x.cols(), w.rows());
    if let Some(b) = bias {
        if b.numel() != d_out {
            return Err(Error::dim("linear bias", b.shape(), w.shape()));
        }
    }
    let mut data = matmul_nt_raw(x.data(), w.data(), t, d_in, d_out);
    if let Some(b) = bias {
        for row in data.chunks_exact_mut(d_out) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    let out_shape = if x.shape().len() == 1 {
        vec![d_out]
    } else {
        vec![t, d_out]
    };
    let (xc, wc) = (x.clone(), w.clone());
    let bc = bias.cloned();
    let (nx, nw) = (needs(&xc), needs(&wc));
    let nb = bc.as_ref().map(needs).unwrap_or(false);
    let mut parents = vec![xc.clone(), wc.clone()];
    if let Some(b) = &bc {
        parents.push(b.clone());
    }
    Ok(from_op(data, out_shape, parents, move |ctx| {
        let gx = nx.then(|| matmul_raw(ctx.grad, wc.data(), t, d_out, d_in));
        let gw = nw.then(|| matmul_tn_raw(ctx.grad, xc.data(), d_out, t, d_in));
        let mut grads = vec![gx, gw];
        if bc.is_some() {
            grads.push(nb.then(|| {
                let mut gb = vec![E::zero(); d_out];
                for row in ctx.grad.chunks_exact(d_out) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g = *g + v;
                    }
                }
                gb
            }));
        }
        grads
    }))
}

// ── Elementwise ──────────────────────────────────────────────────────

enum Broadcast {
    Equal,
    ScalarLhs,
    ScalarRhs,
}

fn broadcast_kind<E: Scalar>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Equal)
    } else if a.numel() == 1 {
        Ok(Broadcast::ScalarLhs)
    } else if b.numel() == 1 {
        Ok(Broadcast::ScalarRhs)
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

macro_rules! binary_elementwise {
    ($name:ident, $opname:literal, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
            let kind = broadcast_kind($opname, self, other)?;
            let (a, b) = (self.clone(), other.clone());
            let fwd = $fwd;
            let data: Vec<E> = match kind {
                Broadcast::Equal => a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| fwd(x, y))
                    .collect(),
                Broadcast::ScalarLhs => {
                    let s = a.data()[0];
                    b.data().iter().map(|&y| fwd(s, y)).collect()
                }
                Broadcast::ScalarRhs => {
                    let s = b.data()[0];
                    a.data().iter().map(|&x| fwd(x, s)).collect()
                }
            };
            profile::add_macs(data.len() as u64);
            let shape = if matches!(kind, Broadcast::ScalarLhs) {
                b.shape().to_vec()
            } else {
                a.shape().to_vec()
            };
            let (na, nb) = (needs(&a), needs(&b));
            let (ac, bc) = (a.clone(), b.clone());
            Ok(from_op(
                data,
                shape,
                vec![a, b],
                move |ctx| {
                    let da = $da;
                    let db = $db;
                    let expand = |want: usize, full: Vec<E>| -> Vec<E> {
                        if want == full.len() {
                            full
                        } else {
                            // Reduce to the scalar operand.
                            vec![full.into_iter().fold(E::zero(), |s, v| s + v)]
                        }
                    };
                    let at = |i: usize, t: &Tensor<E>| -> E {
                        if t.numel() == 1 {
                            t.data()[0]
                        } else {
                            t.data()[i]
                        }
                    };
                    let ga = na.then(|| {
                        let full: Vec<E> = ctx
                            .grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| da(g, at(i, &ac), at(i, &bc)))
                            .collect();
                        expand(ac.numel(), full)
                    });
                    let gb = nb.then(|| {
                        let full: Vec<E> = ctx
                            .grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| db(g, at(i, &ac), at(i, &bc)))
                            .collect();
                        expand(bc.numel(), full)
                    });
                    vec![ga, gb]
                },
            ))
        }
    };
}

macro_rules! unary_elementwise {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self) -> Tensor<E> {
            let fwd = $fwd;
            let data: Vec<E> = self.data().iter().map(|&x| fwd(x)).collect();
            profile::add_macs(data.len() as u64);
            let x = self.clone();
            let nx = needs(&x);
            let xc = x.clone();
            from_op(data, self.shape().to_vec(), vec![x], move |ctx| {
                let bwd = $bwd;
                vec![nx.then(|| {
                    ctx.grad
                        .iter()
                        .zip(xc.data().iter().zip(ctx.out))
                        .map(|(&g, (&x, &y))| g * bwd(x, y))
                        .collect()
                })]
            })
        }
    };
}

impl<E: Scalar> Tensor<E> {
    binary_elementwise!(
        add,
        "add",
        |x: E, y: E| x + y,
        |g: E, _a: E, _b: E| g,
        |g: E, _a: E, _b: E| g
    );
    binary_elementwise!(
        sub,
        "sub",
        |x: E, y: E| x - y,
        |g: E, _a: E, _b: E| g,
        |g: E, _a: E, _b: E| -g
    );
    binary_elementwise!(
        mul,
        "mul",
        |x: E, y: E| x * y,
        |g: E, _a: E, b: E| g * b,
        |g: E, a: E, _b: E| g * a
    );

    // bwd closures receive (input, output).
    unary_elementwise!(sigmoid, sigmoid_raw, |_x: E, y: E| y * (E::one() - y));
    unary_elementwise!(softplus, softplus_raw, |x: E, _y: E| sigmoid_raw(x));
    unary_elementwise!(silu, |x: E| x * sigmoid_raw(x), |x: E, _y: E| {
        let s = sigmoid_raw(x);
        s * (E::one() + x * (E::one() - s))
    });
    unary_elementwise!(exp, |x: E| x.exp(), |_x: E, y: E| y);

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| x * c).collect();
        profile::add_macs(data.len() as u64);
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, self.shape().to_vec(), vec![x], move |ctx| {
            vec![nx.then(|| ctx.grad.iter().map(|&g| g * c).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::one())
    }
}

/// Elementwise operation selector mirroring a single dispatch surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Softplus,
    Sigmoid,
    Silu,
    Exp,
    Add,
    Mul,
}

/// Dispatches to the corresponding elementwise kernel. Unary kinds take one
/// argument, binary kinds two.
pub fn elementwise<E: Scalar>(op: ElementwiseOp, args: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let arity = match op {
        ElementwiseOp::Add | ElementwiseOp::Mul => 2,
        _ => 1,
    };
    if args.len() != arity {
        return Err(Error::Config(format!(
            "elementwise {op:?} expects {arity} arguments, got {}",
            args.len()
        )));
    }
    Ok(match op {
        ElementwiseOp::Softplus => args[0].softplus(),
        ElementwiseOp::Sigmoid => args[0].sigmoid(),
        ElementwiseOp::Silu => args[0].silu(),
        ElementwiseOp::Exp => args[0].exp(),
        ElementwiseOp::Add => args[0].add(args[1])?,
        ElementwiseOp::Mul => args[0].mul(args[1])?,
    })
}

// ── Reductions ───────────────────────────────────────────────────────

impl<E: Scalar> Tensor<E> {
    pub fn sum_all(&self) -> Tensor<E> {
        let total = self.data().iter().copied().fold(E::zero(), |s, v| s + v);
        let n = self.numel();
        let x = self.clone();
        let nx = needs(&x);
        from_op(vec![total], vec![1], vec![x], move |ctx| {
            vec![nx.then(|| vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum_all().scale(E::one() / n)
    }

    /// Column means of a rank-2 tensor: `[R×D] -> [D]`.
    pub fn mean_rows(&self) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2, "mean_rows requires rank 2");
        let (r, d) = (self.rows(), self.cols());
        let inv = E::one() / E::from_f64(r as f64);
        let mut out = vec![E::zero(); d];
        for row in self.data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        profile::add_macs(d as u64);
        let x = self.clone();
        let nx = needs(&x);
        from_op(out, vec![d], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = Vec::with_capacity(r * d);
                for _ in 0..r {
                    g.extend(ctx.grad.iter().map(|&v| v * inv));
                }
                g
            })]
        })
    }
}

// ── Shape manipulation ───────────────────────────────────────────────

impl<E: Scalar> Tensor<E> {
    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2);
        let (r, d) = (self.rows(), self.cols());
        assert!(start + len <= r, "narrow_rows {start}+{len} > {r}");
        let data = self.data()[start * d..(start + len) * d].to_vec();
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, vec![len, d], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = vec![E::zero(); r * d];
                g[start * d..(start + len) * d].copy_from_slice(ctx.grad);
                g
            })]
        })
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2);
        let (r, d) = (self.rows(), self.cols());
        assert!(start + len <= d, "narrow_cols {start}+{len} > {d}");
        let mut data = Vec::with_capacity(r * len);
        for row in self.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, vec![r, len], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = vec![E::zero(); r * d];
                for (i, grow) in ctx.grad.chunks_exact(len).enumerate() {
                    g[i * d + start..i * d + start + len].copy_from_slice(grow);
                }
                g
            })]
        })
    }

    /// Rows selected by index, in order. Duplicate indices accumulate in the
    /// adjoint.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2);
        let (r, d) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < r, "gather_rows index {i} out of {r}");
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, vec![indices.len(), d], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = vec![E::zero(); r * d];
                for (j, &i) in idx.iter().enumerate() {
                    for (gd, &gs) in g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&ctx.grad[j * d..(j + 1) * d])
                    {
                        *gd = *gd + gs;
                    }
                }
                g
            })]
        })
    }

    /// Row order reversed.
    pub fn reverse_rows(&self) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2);
        let (r, d) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * d);
        for i in (0..r).rev() {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, vec![r, d], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = Vec::with_capacity(r * d);
                for i in (0..r).rev() {
                    g.extend_from_slice(&ctx.grad[i * d..(i + 1) * d]);
                }
                g
            })]
        })
    }

    /// Row-wise softmax of a rank-2 tensor, numerically stabilized.
    pub fn softmax_rows(&self) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2);
        let (r, d) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * d);
        for row in self.data().chunks_exact(d) {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let exps: Vec<E> = row.iter().map(|&v| (v - m).exp()).collect();
            let z = exps.iter().copied().fold(E::zero(), |s, v| s + v);
            data.extend(exps.into_iter().map(|e| e / z));
        }
        profile::add_macs((r * d) as u64);
        let x = self.clone();
        let nx = needs(&x);
        from_op(data, vec![r, d], vec![x], move |ctx| {
            vec![nx.then(|| {
                let mut g = Vec::with_capacity(r * d);
                for (yrow, grow) in ctx.out.chunks_exact(d).zip(ctx.grad.chunks_exact(d)) {
                    let dot = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&y, &gy)| y * gy)
                        .fold(E::zero(), |s, v| s + v);
                    g.extend(yrow.iter().zip(grow).map(|(&y, &gy)| y * (gy - dot)));
                }
                g
            })]
        })
    }
}

/// Vertical concatenation of rank-2 tensors with matching column counts.
pub fn concat_rows<E: Scalar>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    assert!(!parts.is_empty());
    let d = parts[0].cols();
    let mut data = Vec::new();
    let mut total = 0usize;
    for p in parts {
        if p.shape().len() != 2 || p.cols() != d {
            return Err(Error::dim("concat_rows", parts[0].shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
        total += p.rows();
    }
    let owned: Vec<Tensor<E>> = parts.iter().map(|&p| p.clone()).collect();
    let sizes: Vec<usize> = owned.iter().map(|p| p.rows()).collect();
    let need: Vec<bool> = owned.iter().map(needs).collect();
    Ok(from_op(data, vec![total, d], owned, move |ctx| {
        let mut grads = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for (rows, &n) in sizes.iter().zip(&need) {
            let len = rows * d;
            grads.push(n.then(|| ctx.grad[off..off + len].to_vec()));
            off += len;
        }
        grads
    }))
}

/// Horizontal concatenation of rank-2 tensors with matching row counts.
pub fn concat_cols<E: Scalar>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    assert!(!parts.is_empty());
    let r = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    for p in parts {
        if p.shape().len() != 2 || p.rows() != r {
            return Err(Error::dim("concat_cols", parts[0].shape(), p.shape()));
        }
    }
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    let owned: Vec<Tensor<E>> = parts.iter().map(|&p| p.clone()).collect();
    let need: Vec<bool> = owned.iter().map(needs).collect();
    let w2 = widths.clone();
    Ok(from_op(data, vec![r, total], owned, move |ctx| {
        let mut grads: Vec<Option<Vec<E>>> = w2
            .iter()
            .zip(&need)
            .map(|(&w, &n)| n.then(|| Vec::with_capacity(r * w)))
            .collect();
        for row in ctx.grad.chunks_exact(total) {
            let mut off = 0;
            for (g, &w) in grads.iter_mut().zip(&w2) {
                if let Some(g) = g {
                    g.extend_from_slice(&row[off..off + w]);
                }
                off += w;
            }
        }
        grads
    }))
}

// ── Normalization ────────────────────────────────────────────────────

/// Root-mean-square normalization along the last axis, scaled by `gain`.
pub fn rms_normalize<E: Scalar>(x: &Tensor<E>, gain: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::dim("rms_normalize", x.shape(), gain.shape()));
    }
    let r = x.rows();
    let dn = E::from_f64(d as f64);
    let mut data = Vec::with_capacity(r * d);
    let mut invs = Vec::with_capacity(r);
    for row in x.data().chunks_exact(d) {
        let ms = row.iter().map(|&v| v * v).fold(E::zero(), |s, v| s + v) / dn;
        let inv = E::one() / (ms + eps).sqrt();
        invs.push(inv);
        data.extend(row.iter().zip(gain.data()).map(|(&v, &g)| v * inv * g));
    }
    profile::add_macs((3 * r * d) as u64);
    let (xc, gc) = (x.clone(), gain.clone());
    let (nx, ng) = (needs(&xc), needs(&gc));
    Ok(from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone()],
        move |ctx| {
            let gx = nx.then(|| {
                let mut out = Vec::with_capacity(r * d);
                for (i, (xrow, grow)) in xc
                    .data()
                    .chunks_exact(d)
                    .zip(ctx.grad.chunks_exact(d))
                    .enumerate()
                {
                    let inv = invs[i];
                    let s = xrow
                        .iter()
                        .zip(grow.iter().zip(gc.data()))
                        .map(|(&xv, (&gy, &gv))| gy * gv * xv)
                        .fold(E::zero(), |a, v| a + v);
                    let k = inv * inv * inv / dn * s;
                    out.extend(
                        xrow.iter()
                            .zip(grow.iter().zip(gc.data()))
                            .map(|(&xv, (&gy, &gv))| gy * gv * inv - xv * k),
                    );
                }
                out
            });
            let gg = ng.then(|| {
                let mut out = vec![E::zero(); d];
                for (i, (xrow, grow)) in xc
                    .data()
                    .chunks_exact(d)
                    .zip(ctx.grad.chunks_exact(d))
                    .enumerate()
                {
                    let inv = invs[i];
                    for ((o, &xv), &gy) in out.iter_mut().zip(xrow).zip(grow) {
                        *o = *o + gy * xv * inv;
                    }
                }
                out
            });
            vec![gx, gg]
        },
    ))
}

// ── Depthwise 1-D convolution ────────────────────────────────────────

/// Per-channel 1-D convolution of `x`[T×C] with `kernel`[K×C].
///
/// With `causal_pad`, K−1 zeros are conceptually prepended so output t
/// depends only on inputs at or before t (kernel row 0 multiplies the
/// current step). Without it, the window is centered (zero "same" padding).
pub fn conv1d_depthwise<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    causal_pad: bool,
) -> Result<Tensor<E>> {
    if x.shape().len() != 2 || kernel.shape().len() != 2 || x.cols() != kernel.cols() {
        return Err(Error::dim("conv1d_depthwise", x.shape(), kernel.shape()));
    }
    let (t_len, c) = (x.rows(), x.cols());
    let k_len = kernel.rows();
    let lead: isize = if causal_pad { 0 } else { (k_len as isize - 1) / 2 };
    let mut data = vec![E::zero(); t_len * c];
    let mut macs = 0u64;
    for t in 0..t_len {
        let orow = &mut data[t * c..(t + 1) * c];
        for k in 0..k_len {
            let src = t as isize + lead - k as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            macs += c as u64;
            let xrow = &x.data()[src as usize * c..(src as usize + 1) * c];
            let krow = &kernel.data()[k * c..(k + 1) * c];
            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                *o = *o + xv * kv;
            }
        }
    }
    profile::add_macs(macs);
    let (xc, kc) = (x.clone(), kernel.clone());
    let (nx, nk) = (needs(&xc), needs(&kc));
    Ok(from_op(
        data,
        vec![t_len, c],
        vec![x.clone(), kernel.clone()],
        move |ctx| {
            let gx = nx.then(|| {
                let mut g = vec![E::zero(); t_len * c];
                for t in 0..t_len {
                    let grow = &ctx.grad[t * c..(t + 1) * c];
                    for k in 0..k_len {
                        let src = t as isize + lead - k as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let gxrow = src as usize * c;
                        let krow = &kc.data()[k * c..(k + 1) * c];
                        for i in 0..c {
                            g[gxrow + i] = g[gxrow + i] + grow[i] * krow[i];
                        }
                    }
                }
                g
            });
            let gk = nk.then(|| {
                let mut g = vec![E::zero(); k_len * c];
                for t in 0..t_len {
                    let grow = &ctx.grad[t * c..(t + 1) * c];
                    for k in 0..k_len {
                        let src = t as isize + lead - k as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let xrow = &xc.data()[src as usize * c..(src as usize + 1) * c];
                        for i in 0..c {
                            g[k * c + i] = g[k * c + i] + grow[i] * xrow[i];
                        }
                    }
                }
                g
            });
            vec![gx, gk]
        },
    ))
}

// ── Classification loss ──────────────────────────────────────────────

/// Mean cross-entropy between `logits`[B×K] rows and integer `targets`,
/// computed with the log-sum-exp trick.
pub fn cross_entropy_logits<E: Scalar>(logits: &Tensor<E>, targets: &[usize]) -> Result<Tensor<E>> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::dim("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let (b, k) = (logits.rows(), logits.cols());
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Config(format!(
            "cross_entropy target {bad} out of range for {k} classes"
        )));
    }
    let mut total = E::zero();
    for (row, &t) in logits.data().chunks_exact(k).zip(targets) {
        let m = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = m + row
            .iter()
            .map(|&v| (v - m).exp())
            .fold(E::zero(), |s, v| s + v)
            .ln();
        total = total + lse - row[t];
    }
    let inv_b = E::one() / E::from_f64(b as f64);
    let loss = total * inv_b;
    profile::add_macs((b * k) as u64);
    let lc = logits.clone();
    let nl = needs(&lc);
    let tg = targets.to_vec();
    Ok(from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        move |ctx| {
            vec![nl.then(|| {
                let g0 = ctx.grad[0] * inv_b;
                let mut g = Vec::with_capacity(b * k);
                for (row, &t) in lc.data().chunks_exact(k).zip(&tg) {
                    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                    let exps: Vec<E> = row.iter().map(|&v| (v - m).exp()).collect();
                    let z = exps.iter().copied().fold(E::zero(), |s, v| s + v);
                    for (j, e) in exps.into_iter().enumerate() {
                        let p = e / z;
                        let y = if j == t { E::one() } else { E::zero() };
                        g.push(g0 * (p - y));
                    }
                }
                g
            })]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_gradient;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_preserves_operand() {
        let a = Tensor::<f64>::new(vec![3.0, -1.0, 2.5, 7.0], &[2, 2]);
        let eye = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::new(vec![5.0, 6.0], &[2, 1]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_backward_is_ones_times_b_transposed() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::new(vec![0.5, 0.3, 0.7, 0.1], &[2, 2]);
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        // ones · bᵀ: row i of grad = column sums pattern [0.8, 0.8].
        assert_close(&a.grad().unwrap(), &[0.8, 0.8, 0.8, 0.8], 1e-12);
    }

    #[test]
    fn matmul_associativity_at_tolerance() {
        let mut v = 0.37f64;
        let mut next = || {
            v = (v * 997.0 + 0.1).fract();
            v - 0.5
        };
        let a = Tensor::<f64>::new((0..16).map(|_| next()).collect(), &[4, 4]);
        let b = Tensor::<f64>::new((0..16).map(|_| next()).collect(), &[4, 4]);
        let c = Tensor::<f64>::new((0..16).map(|_| next()).collect(), &[4, 4]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let max = left
            .data()
            .iter()
            .zip(right.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10, "max diff {max}");
    }

    #[test]
    fn elementwise_zero_points() {
        let z = Tensor::<f64>::scalar(0.0);
        assert_eq!(z.silu().item(), 0.0);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert!((z.softplus().item() - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn softplus_large_input_branch() {
        let x = Tensor::<f64>::scalar(100.0);
        assert_eq!(x.softplus().item(), 100.0);
        let x32 = Tensor::<f32>::scalar(100.0);
        assert_eq!(x32.softplus().item(), 100.0);
    }

    #[test]
    fn broadcast_scalar_and_mismatch() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]);
        let s = Tensor::<f64>::scalar(10.0);
        assert_eq!(a.add(&s).unwrap().data(), &[11.0, 12.0]);
        assert_eq!(s.mul(&a).unwrap().data(), &[10.0, 20.0]);
        let b = Tensor::<f64>::new(vec![1.0, 2.0, 3.0], &[3]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let a = Tensor::<f64>::scalar(1.0);
        assert!(elementwise(ElementwiseOp::Silu, &[&a, &a]).is_err());
        assert!(elementwise(ElementwiseOp::Add, &[&a]).is_err());
        let out = elementwise(ElementwiseOp::Add, &[&a, &a]).unwrap();
        assert_eq!(out.item(), 2.0);
    }

    #[test]
    fn rms_normalize_constant_and_zero_rows() {
        let x = Tensor::<f64>::new(vec![2.0, 2.0, 2.0, 2.0], &[1, 4]);
        let gain = Tensor::<f64>::ones(&[4]);
        let out = rms_normalize(&x, &gain, 1e-12).unwrap();
        assert_close(out.data(), &[1.0, 1.0, 1.0, 1.0], 1e-6);

        let z = Tensor::<f64>::zeros(&[1, 4]);
        let out = rms_normalize(&z, &gain, 1e-6).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rms_normalize_gradient_matches_finite_differences() {
        let xv = vec![0.3, -1.2, 0.8, 2.1, -0.4, 0.05];
        let gv = vec![1.1, 0.9, -0.7];
        let f = |x: &Tensor<f64>| {
            let gain = Tensor::new(gv.clone(), &[3]);
            Ok(rms_normalize(x, &gain, 1e-8)?.mul(x)?.sum_all())
        };
        let x = Tensor::<f64>::param(xv.clone(), &[2, 3]);
        let loss = f(&x).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let fd = finite_difference_gradient(f, &Tensor::new(xv, &[2, 3]), 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(fd.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn conv_identity_shift_and_zero_kernels() {
        let x = Tensor::<f64>::new(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], &[3, 2]);
        let delta = Tensor::<f64>::new(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[4, 2]);
        let out = conv1d_depthwise(&x, &delta, true).unwrap();
        assert_eq!(out.data(), x.data());

        let shift = Tensor::<f64>::new(vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[4, 2]);
        let out = conv1d_depthwise(&x, &shift, true).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 10.0, 2.0, 20.0]);

        let zero = Tensor::<f64>::zeros(&[4, 2]);
        let out = conv1d_depthwise(&x, &zero, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::<f64>::zeros(&[4, 3]);
        assert!(conv1d_depthwise(&x, &bad, true).is_err());
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let xv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let kv = vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2, 0.15, -0.1];
        let f = |k: &Tensor<f64>| {
            let x = Tensor::new(xv.clone(), &[4, 2]);
            let c = conv1d_depthwise(&x, k, true)?;
            Ok(c.mul(&c)?.sum_all())
        };
        let k = Tensor::<f64>::param(kv.clone(), &[4, 2]);
        let loss = f(&k).unwrap();
        loss.backward().unwrap();
        let fd = finite_difference_gradient(f, &Tensor::new(kv, &[4, 2]), 1e-6).unwrap();
        assert_close(&k.grad().unwrap(), fd.data(), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0], &[2, 3]);
        let s = x.softmax_rows();
        for row in s.data().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // Uniform logits over 4 classes: loss = ln 4.
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let loss = cross_entropy_logits(&logits, &[1, 3]).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let lv = vec![0.5, -0.3, 1.2, 0.1, -0.8, 0.4];
        let f = |x: &Tensor<f64>| cross_entropy_logits(x, &[2, 0]);
        let x = Tensor::<f64>::param(lv.clone(), &[2, 3]);
        f(&x).unwrap().backward().unwrap();
        let fd = finite_difference_gradient(f, &Tensor::new(lv, &[2, 3]), 1e-6).unwrap();
        assert_close(&x.grad().unwrap(), fd.data(), 1e-7);
    }

    #[test]
    fn shape_ops_roundtrip() {
        let x = Tensor::<f64>::new((0..12).map(|v| v as f64).collect(), &[3, 4]);
        assert_eq!(x.narrow_rows(1, 2).data(), &x.data()[4..12]);
        assert_eq!(x.narrow_cols(1, 2).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        assert_eq!(x.reverse_rows().reverse_rows().data(), x.data());
        assert_eq!(x.gather_rows(&[2, 0]).data()[0..4], x.data()[8..12]);

        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[1, 2]);
        assert_eq!(concat_rows(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(concat_cols(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(concat_cols(&[&a, &b]).unwrap().shape(), &[1, 4]);
    }

    #[test]
    fn linear_bias_and_gradients() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = Tensor::<f64>::param(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let b = Tensor::<f64>::param(vec![0.1, 0.2, 0.3], &[3]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_close(y.data(), &[1.1, 2.2, 3.3, 3.1, 4.2, 7.3], 1e-12);
        y.sum_all().backward().unwrap();
        // db = column sums of ones = [2,2,2].
        assert_close(&b.grad().unwrap(), &[2.0, 2.0, 2.0], 1e-12);
        // dx = g·W = ones[2x3]·W[3x2] summed rows of W.
        assert_close(&x.grad().unwrap(), &[2.0, 2.0, 2.0, 2.0], 1e-12);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let x = Tensor::<f32>::param(vec![0.3, -0.7, 1.9, 0.01], &[2, 2]);
            let w = Tensor::<f32>::new(vec![0.5, -0.25, 0.125, 1.5], &[2, 2]);
            let y = x.matmul(&w).unwrap().silu().sum_all();
            y.backward().unwrap();
            (
                y.item().to_bits(),
                x.grad()
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
