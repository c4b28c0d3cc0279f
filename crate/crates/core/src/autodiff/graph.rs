//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op as a node holding its value. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{split_axis, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddBias(Var, Var),
    Affine(Var, R),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Broadcast0(Var),
    Pool {
        x: Var,
        h: usize,
        w: usize,
        lead: usize,
    },
    HeadScores {
        q: Var,
        k: Var,
        heads: usize,
    },
    HeadMix {
        p: Var,
        v: Var,
        heads: usize,
    },
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<R>>>,
}

/// Batch view `[B, n, d]` of a 2-D or 3-D shape.
fn bnd(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, d] => Ok((1, n, d)),
        [b, n, d] => Ok((b, n, d)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a 2-D or 3-D tensor, got {shape:?}"),
        )),
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softplus<R: Real>(x: R) -> R {
    // log(1 + e^x) without overflow
    x.max(R::zero()) + (-(x.abs())).exp().ln_1p()
}

/// Neighbor count and accumulation pattern for 3x3 valid pooling at (y, x).
fn pool_window(h: usize, w: usize, y: usize, x: usize) -> impl Iterator<Item = usize> {
    let y0 = y.saturating_sub(1);
    let y1 = (y + 1).min(h - 1);
    let x0 = x.saturating_sub(1);
    let x1 = (x + 1).min(w - 1);
    (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| yy * w + xx))
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is kept after `backward` (see [`Graph::grad`]).
    pub fn variable(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Stops gradient flow: the value is copied onto a fresh constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        mk: fn(Var, Var) -> Op<R>,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, mk(a, b), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, mk: fn(Var) -> Op<R>) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, mk(x), ng)
    }

    /// `a[.., k] x b[k, c] -> [.., c]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let c = sb[1];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let r = va.len() / k;
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let arow = &va[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (p, &av) in arow.iter().enumerate() {
                if av == R::zero() {
                    continue;
                }
                let brow = &vb[p * c..(p + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = c;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("need 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum)
    }

    /// Adds a bias vector `[c]` to every row of `x[.., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let vb = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&vb) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// `x * a + b` elementwise with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: R, b: R) -> Var {
        let out = self.value(x).map(|v| v * a + b);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, a), ng)
    }

    pub fn scale(&mut self, x: Var, a: R) -> Var {
        self.affine(x, a, R::zero())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -R::one(), R::zero())
    }

    pub fn add_scalar(&mut self, x: Var, b: R) -> Var {
        self.affine(x, R::one(), b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > R::zero() { v } else { R::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    /// `log(1 + exp(x))`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: R = v.data().iter().copied().sum::<R>() / R::from_usize(v.len()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean over the leading axis; the output keeps that axis with extent 1.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(TensorError::invalid("mean_axis0", "scalar input"));
        }
        let b = s[0];
        let inner = self.value(x).len() / b;
        let v = self.value(x).data();
        let inv = R::one() / R::from_usize(b).unwrap();
        let mut out = vec![R::zero(); inner];
        for blk in v.chunks(inner) {
            for (o, &x) in out.iter_mut().zip(blk) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = s;
        shape[0] = 1;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis0(x), ng))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.last_dim();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = R::lit(1e-5);
        let cn = R::from_usize(c).unwrap();
        let v = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = v.len() / c;
        let mut xhat = vec![R::zero(); v.len()];
        let mut inv_std = vec![R::zero(); rows];
        let mut out = vec![R::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<R>() / cn;
            let var = row.iter().map(|&t| (t - mu) * (t - mu)).sum::<R>() / cn;
            let is = R::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let ax = v.shape()[axis];
                let base = o * ax * inner;
                data.extend_from_slice(&v.data()[base..base + ax * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Selects blocks along the leading axis (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.is_empty() {
            return Err(TensorError::invalid("gather", "empty selection or scalar input"));
        }
        let block = self.value(x).len() / s[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} outside leading extent {}", s[0]),
            ));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            data.extend_from_slice(&v[i * block..(i + 1) * block]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Repeats a tensor with leading extent 1 to leading extent `b`.
    pub fn broadcast0(&mut self, x: Var, b: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&1) {
            return Err(TensorError::invalid(
                "broadcast0",
                format!("leading extent must be 1, got {s:?}"),
            ));
        }
        if b == 1 {
            return Ok(x);
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(v.len() * b);
        for _ in 0..b {
            data.extend_from_slice(v);
        }
        let mut shape = s;
        shape[0] = b;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Broadcast0(x), ng))
    }

    /// 3x3 mean pooling over an `h x w` patch grid, averaging only the
    /// in-grid neighbors (divisor 9 interior, 6 edge, 4 corner).
    ///
    /// `x` is `[B, lead + h*w, d]` (or `[lead + h*w, d]`); the first `lead`
    /// rows of each batch entry are passed through unchanged.
    pub fn mean_pool_3x3_valid(&mut self, x: Var, h: usize, w: usize, lead: usize) -> Result<Var> {
        let (b, n, d) = bnd(self.shape(x), "mean_pool_3x3_valid")?;
        if h == 0 || w == 0 || n != lead + h * w {
            return Err(TensorError::invalid(
                "mean_pool_3x3_valid",
                format!("grid {h}x{w} with {lead} leading rows does not match {n} tokens"),
            ));
        }
        let v = self.value(x).data();
        let mut out = v.to_vec();
        for bi in 0..b {
            let base = bi * n * d + lead * d;
            for y in 0..h {
                for xx in 0..w {
                    let cell = y * w + xx;
                    let center = &v[base + cell * d..base + (cell + 1) * d];
                    let mut acc = vec![R::zero(); d];
                    let mut count = 0usize;
                    for nb in pool_window(h, w, y, xx) {
                        count += 1;
                        let row = &v[base + nb * d..base + (nb + 1) * d];
                        for j in 0..d {
                            acc[j] += row[j] - center[j];
                        }
                    }
                    let inv = R::from_usize(count).unwrap();
                    let o = &mut out[base + cell * d..base + (cell + 1) * d];
                    for j in 0..d {
                        // centred sum keeps constant grids exact
                        o[j] = center[j] + acc[j] / inv;
                    }
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Pool { x, h, w, lead }, ng))
    }

    /// Raw per-head dot-product scores.
    ///
    /// `q: [B, n, d]`, `k: [Bk, m, d]` with `Bk` either 1 or `B`; output
    /// `[B, heads, n, m]` where head `h` uses feature columns
    /// `h*d/heads .. (h+1)*d/heads`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (b, n, d) = bnd(self.shape(q), "head_scores")?;
        let (bk, m, dk) = bnd(self.shape(k), "head_scores")?;
        if d != dk || (bk != 1 && bk != b) || heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "head_scores",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let hd = d / heads;
        let vq = self.value(q).data();
        let vk = self.value(k).data();
        let mut out = vec![R::zero(); b * heads * n * m];
        for bi in 0..b {
            let kb = if bk == 1 { 0 } else { bi };
            for h in 0..heads {
                for i in 0..n {
                    let qrow = &vq[(bi * n + i) * d + h * hd..(bi * n + i) * d + (h + 1) * hd];
                    let orow = &mut out[((bi * heads + h) * n + i) * m..][..m];
                    for (j, o) in orow.iter_mut().enumerate() {
                        let krow = &vk[(kb * m + j) * d + h * hd..][..hd];
                        *o = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum();
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(
            Tensor::new([b, heads, n, m], out)?,
            Op::HeadScores { q, k, heads },
            ng,
        ))
    }

    /// Per-head weighted sum of values, heads concatenated along features.
    ///
    /// `p: [B, heads, n, m]`, `v: [Bv, m, d]` with `Bv` 1 or `B`; output `[B, n, d]`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        let (bv, m, d) = bnd(self.shape(v), "head_mix")?;
        if sp.len() != 4 || sp[1] != heads || sp[3] != m || (bv != 1 && bv != sp[0]) || d % heads != 0
        {
            return Err(TensorError::ShapeMismatch {
                op: "head_mix",
                lhs: sp,
                rhs: self.shape(v).to_vec(),
            });
        }
        let (b, n) = (sp[0], sp[2]);
        let hd = d / heads;
        let vp = self.value(p).data();
        let vv = self.value(v).data();
        let mut out = vec![R::zero(); b * n * d];
        for bi in 0..b {
            let vb = if bv == 1 { 0 } else { bi };
            for h in 0..heads {
                for i in 0..n {
                    let prow = &vp[((bi * heads + h) * n + i) * m..][..m];
                    let orow = &mut out[(bi * n + i) * d + h * hd..][..hd];
                    for (j, &pw) in prow.iter().enumerate() {
                        let vrow = &vv[(vb * m + j) * d + h * hd..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pw * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(p) || self.ng(v);
        Ok(self.push(
            Tensor::new([b, n, d], out)?,
            Op::HeadMix { p, v, heads },
            ng,
        ))
    }

    /// Cosine similarity of two equally sized tensors; 0 when either is zero.
    pub fn cosine(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.value(x).len() != self.value(y).len() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(y).to_vec(),
            });
        }
        let (dot, nx, ny) = cos_parts(self.value(x).data(), self.value(y).data());
        let c = if nx == R::zero() || ny == R::zero() {
            R::zero()
        } else {
            dot / (nx * ny)
        };
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(x, y), ng))
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the store (accumulating across calls until `zero_grad`); gradients of
    /// every reached node stay available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            if let Op::Param(id) = self.nodes[i].op {
                store.accumulate_grad(id, &g);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, c) = (sb[0], sb[1]);
                let va = val(*a);
                let vb = val(*b);
                let r = va.len() / k;
                if let Some(ga) = slot!(*a) {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let brow = &vb[p * c..(p + 1) * c];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<R>();
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == R::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = slot!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / vb[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * va[j] / (vb[j] * vb[j]);
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_a = matches!(node.op, Op::Minimum(..));
                let (va, vb) = (val(*a), val(*b));
                let take_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| if pick_a { x <= y } else { x >= y })
                    .collect();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        if take_a[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        if !take_a[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot!(*b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Affine(x, a) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *a);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        if vx[j] > R::zero() {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (R::one() - y[j]);
                    }
                }
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * sigmoid(vx[j]);
                    }
                }
            }
            Op::Abs(x) => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        let s = if vx[j] > R::zero() {
                            R::one()
                        } else if vx[j] < R::zero() {
                            -R::one()
                        } else {
                            R::zero()
                        };
                        gx[j] += g[j] * s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let d = g[0] / R::from_usize(gx.len()).unwrap();
                    gx.iter_mut().for_each(|o| *o += d);
                }
            }
            Op::MeanAxis0(x) => {
                let b = nodes[x.0].value.shape()[0];
                let inv = R::one() / R::from_usize(b).unwrap();
                if let Some(gx) = slot!(*x) {
                    for blk in gx.chunks_mut(g.len()) {
                        blk.iter_mut().zip(g).for_each(|(o, &v)| *o += v * inv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                if let Some(gx) = slot!(*x) {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let cn = R::from_usize(c).unwrap();
                let vg = val(*gamma);
                if let Some(gb) = slot!(*beta) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = slot!(*gamma) {
                    for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * xr[j];
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for r in 0..inv_std.len() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for j in 0..c {
                            let dxh = gr[j] * vg[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= cn;
                        m2 /= cn;
                        for j in 0..c {
                            let dxh = gr[j] * vg[j];
                            gx[r * c + j] += inv_std[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = nodes[x.0].value.shape().to_vec();
                let len = node.value.shape()[*axis];
                let (outer, ax, inner) = split_axis(&sx, *axis);
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = o * ax * inner + start * inner;
                        add_into(&mut gx[base..base + len * inner], src);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let so = node.value.shape().to_vec();
                let (outer, total, inner) = split_axis(&so, *axis);
                let mut offset = 0;
                for x in xs {
                    let ax = nodes[x.0].value.shape()[*axis];
                    if let Some(gx) = slot!(*x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..ax * inner];
                            add_into(&mut gx[o * ax * inner..(o + 1) * ax * inner], src);
                        }
                    }
                    offset += ax;
                }
            }
            Op::Gather { x, idx } => {
                let block = g.len() / idx.len();
                if let Some(gx) = slot!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * block..(i + 1) * block], &g[k * block..(k + 1) * block]);
                    }
                }
            }
            Op::Broadcast0(x) => {
                if let Some(gx) = slot!(*x) {
                    let n = gx.len();
                    for blk in g.chunks(n) {
                        add_into(gx, blk);
                    }
                }
            }
            Op::Pool { x, h, w, lead } => {
                let (b, n, d) = bnd(nodes[x.0].value.shape(), "mean_pool_3x3_valid")?;
                let (h, w, lead) = (*h, *w, *lead);
                if let Some(gx) = slot!(*x) {
                    for bi in 0..b {
                        let base = bi * n * d;
                        add_into(&mut gx[base..base + lead * d], &g[base..base + lead * d]);
                        let base = base + lead * d;
                        for y in 0..h {
                            for xx in 0..w {
                                let cell = y * w + xx;
                                let count = pool_window(h, w, y, xx).count();
                                let inv = R::one() / R::from_usize(count).unwrap();
                                for nb in pool_window(h, w, y, xx) {
                                    for j in 0..d {
                                        gx[base + nb * d + j] += g[base + cell * d + j] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadScores { q, k, heads } => {
                let (b, n, d) = bnd(nodes[q.0].value.shape(), "head_scores")?;
                let (bk, m, _) = bnd(nodes[k.0].value.shape(), "head_scores")?;
                let heads = *heads;
                let hd = d / heads;
                let vq = val(*q);
                let vk = val(*k);
                if let Some(gq) = slot!(*q) {
                    for bi in 0..b {
                        let kb = if bk == 1 { 0 } else { bi };
                        for h in 0..heads {
                            for i in 0..n {
                                let grow = &g[((bi * heads + h) * n + i) * m..][..m];
                                let gqrow = &mut gq[(bi * n + i) * d + h * hd..][..hd];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let krow = &vk[(kb * m + j) * d + h * hd..][..hd];
                                    for (o, &kv) in gqrow.iter_mut().zip(krow) {
                                        *o += gv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot!(*k) {
                    for bi in 0..b {
                        let kb = if bk == 1 { 0 } else { bi };
                        for h in 0..heads {
                            for i in 0..n {
                                let grow = &g[((bi * heads + h) * n + i) * m..][..m];
                                let qrow = &vq[(bi * n + i) * d + h * hd..][..hd];
                                for (j, &gv) in grow.iter().enumerate() {
                                    let gkrow = &mut gk[(kb * m + j) * d + h * hd..][..hd];
                                    for (o, &qv) in gkrow.iter_mut().zip(qrow) {
                                        *o += gv * qv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadMix { p, v, heads } => {
                let sp = nodes[p.0].value.shape();
                let (b, n, m) = (sp[0], sp[2], sp[3]);
                let (bv, _, d) = bnd(nodes[v.0].value.shape(), "head_mix")?;
                let heads = *heads;
                let hd = d / heads;
                let vp = val(*p);
                let vv = val(*v);
                if let Some(gp) = slot!(*p) {
                    for bi in 0..b {
                        let vb = if bv == 1 { 0 } else { bi };
                        for h in 0..heads {
                            for i in 0..n {
                                let grow = &g[(bi * n + i) * d + h * hd..][..hd];
                                let gprow = &mut gp[((bi * heads + h) * n + i) * m..][..m];
                                for (j, o) in gprow.iter_mut().enumerate() {
                                    let vrow = &vv[(vb * m + j) * d + h * hd..][..hd];
                                    *o += grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum::<R>();
                                }
                            }
                        }
                    }
                }
                if let Some(gv) = slot!(*v) {
                    for bi in 0..b {
                        let vb = if bv == 1 { 0 } else { bi };
                        for h in 0..heads {
                            for i in 0..n {
                                let grow = &g[(bi * n + i) * d + h * hd..][..hd];
                                let prow = &vp[((bi * heads + h) * n + i) * m..][..m];
                                for (j, &pw) in prow.iter().enumerate() {
                                    let gvrow = &mut gv[(vb * m + j) * d + h * hd..][..hd];
                                    for (o, &gg) in gvrow.iter_mut().zip(grow) {
                                        *o += pw * gg;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Cosine(x, y) => {
                let (vx, vy) = (val(*x), val(*y));
                let (dot, nx, ny) = cos_parts(vx, vy);
                if nx > R::zero() && ny > R::zero() {
                    let c = dot / (nx * ny);
                    let inv = R::one() / (nx * ny);
                    if let Some(gx) = slot!(*x) {
                        for j in 0..vx.len() {
                            gx[j] += g[0] * (vy[j] * inv - c * vx[j] / (nx * nx));
                        }
                    }
                    if let Some(gy) = slot!(*y) {
                        for j in 0..vy.len() {
                            gy[j] += g[0] * (vx[j] * inv - c * vy[j] / (ny * ny));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'a, R: Real>(
    grads: &'a mut [Option<Vec<R>>],
    nodes: &[Node<R>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); nodes[v.0].value.len()]))
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn cos_parts<R: Real>(x: &[R], y: &[R]) -> (R, R, R) {
    let dot = x.iter().zip(y).map(|(&a, &b)| a * b).sum::<R>();
    let nx = x.iter().map(|&a| a * a).sum::<R>().sqrt();
    let ny = y.iter().map(|&a| a * a).sum::<R>().sqrt();
    (dot, nx, ny)
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut s = R::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
