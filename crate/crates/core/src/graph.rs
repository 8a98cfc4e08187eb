//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run the vector-Jacobian product later. Nodes are only
//! ever appended, so tape order is a valid topological order and the
//! backward pass is a single reverse sweep.
//!
//! Spatial maps are stored channels-last (`[H, W, C]`), which makes a
//! token matrix `[H*W, C]` the same buffer as its grid; `reshape` is free.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const GELU_COEF: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    SpaceToDepth {
        x: Var,
        r: usize,
    },
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf with zeros substituted for unreachable leaves.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows to it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {name} (shape {:?})",
                value.shape()
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!(
                "matmul needs rank-2 inputs, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner extents disagree: {sa:?} x {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    out[i * n + j] = dot(arow, brow);
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], orow);
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias[c]` to every row of `x[..., c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        if vb.len() != c {
            return Err(Error::dim(format!(
                "bias of {} values for last axis {c}",
                vb.len()
            )));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push("scale", value, Op::Scale { x, factor: f }, &[x])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let value = Tensor::new(vx.shape(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Normalizes over the last axis (biased variance, eps 1e-5), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != c || b.len() != c {
            return Err(Error::dim(format!(
                "layer_norm affine of {}/{} values for last axis {c}",
                g.len(),
                b.len()
            )));
        }
        let rows = vx.len() / c;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(LN_EPS);
        for (r, row) in vx.data().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    // ---------------------------------------------------------------------
    // Spatial
    // ---------------------------------------------------------------------

    /// Cross-correlation of `x[H,W,Cin]` with `w[k,k,Cin,Cout]` plus
    /// `b[Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[2] {
            return Err(Error::dim(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        if self.value(b).len() != cout {
            return Err(Error::dim("conv2d bias length != Cout"));
        }
        let ho = out_extent(h, k, stride, pad)?;
        let wo = out_extent(wd, k, stride, pad)?;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                o.copy_from_slice(bd);
                for ky in 0..k {
                    let Some(iy) = src_index(oy, ky, stride, pad, h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = src_index(ox, kx, stride, pad, wd) else {
                            continue;
                        };
                        let xpix = &xd[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        let wbase = (ky * k + kx) * cin * cout;
                        for (ci, &xv) in xpix.iter().enumerate() {
                            axpy(xv, &wdat[wbase + ci * cout..wbase + (ci + 1) * cout], o);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[ho, wo, cout], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        )
    }

    /// Per-channel convolution of `x[H,W,C]` with `w[k,k,C]` plus `b[C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sw[1] || sw[2] != sx[2] {
            return Err(Error::dim(format!(
                "depthwise_conv2d: input {sx:?}, weight {sw:?}"
            )));
        }
        let (h, wd, c) = (sx[0], sx[1], sx[2]);
        let k = sw[0];
        if self.value(b).len() != c {
            return Err(Error::dim("depthwise_conv2d bias length != C"));
        }
        let ho = out_extent(h, k, stride, pad)?;
        let wo = out_extent(wd, k, stride, pad)?;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                o.copy_from_slice(bd);
                for ky in 0..k {
                    let Some(iy) = src_index(oy, ky, stride, pad, h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = src_index(ox, kx, stride, pad, wd) else {
                            continue;
                        };
                        let xpix = &xd[(iy * wd + ix) * c..(iy * wd + ix + 1) * c];
                        let wk = &wdat[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for ((o, &xv), &wv) in o.iter_mut().zip(xpix).zip(wk) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        self.push(
            "depthwise_conv2d",
            value,
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        )
    }

    /// Bilinear upsampling of `x[h,w,c]` by an integer factor with
    /// half-pixel centers (align-corners false).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Argument("upsample factor must be positive".into()));
        }
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim(format!("upsample needs [h,w,c], got {sx:?}")));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h * factor, w * factor);
        let ty = interp_table(h, factor);
        let tx = interp_table(w, factor);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); ho * wo * c];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                let corners = [
                    (y0, x0, hy * hx),
                    (y0, x1, hy * lx),
                    (y1, x0, ly * hx),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wgt) in corners {
                    axpy(wgt, &xd[(yy * w + xx) * c..(yy * w + xx + 1) * c], o);
                }
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        self.push("upsample", value, Op::Upsample { x, factor }, &[x])
    }

    /// Concatenates every `r×r` spatial block of `x[H,W,c]` (raster order
    /// inside the block) into one vector: `[H/r, W/r, r·r·c]`.
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || r == 0 || !sx[0].is_multiple_of(r) || !sx[1].is_multiple_of(r) {
            return Err(Error::config(format!(
                "reduction {r} does not tile grid {sx:?}"
            )));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let (hb, wb) = (h / r, w / r);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); h * w * c];
        for (src, dst) in s2d_pairs(h, w, r) {
            out[dst * c..(dst + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        let value = Tensor::new(&[hb, wb, r * r * c], out)?;
        self.push("space_to_depth", value, Op::SpaceToDepth { x, r }, &[x])
    }

    // ---------------------------------------------------------------------
    // Shape plumbing
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("slice {start}+{len} of last axis {c}")));
        }
        let mut data = Vec::with_capacity(vx.len() / c * len);
        for row in vx.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        self.push("slice_last", value, Op::SliceLast { x, start }, &[x])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat leading axes differ: {lead:?} vs {s:?}"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&v, &cw) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + cw]
                    .copy_from_slice(&src[r * cw..(r + 1) * cw]);
            }
            off += cw;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push("concat_last", value, Op::ConcatLast(xs.to_vec()), xs)
    }

    // ---------------------------------------------------------------------
    // Reductions and losses
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.sum() / T::from_f64(vx.len() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[..., K]` against one class
    /// index per row, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let vl = self.value(logits);
        let k = vl.last_dim();
        let rows = vl.len() / k;
        if labels.len() != rows {
            return Err(Error::dim(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Argument(format!("label {bad} outside 0..{k}")));
        }
        let mut total = 0.0f64;
        for (row, &l) in vl.data().chunks_exact(k).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += (lse - row[l as usize]).as_f64();
        }
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar node. Returns gradients for every leaf
    /// that requires one and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        if *trans_b {
                            // b is [n,k]
                            for j in 0..n {
                                axpy(grow[j], &bd[j * k..(j + 1) * k], darow);
                            }
                        } else {
                            for p in 0..k {
                                darow[p] += dot(grow, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        if *trans_b {
                            for j in 0..n {
                                axpy(grow[j], arow, &mut db[j * k..(j + 1) * k]);
                            }
                        } else {
                            for p in 0..k {
                                axpy(arow[p], grow, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(bd) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(ad) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let c = self.value(*bias).len();
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |d| {
                    for (d, &gi) in d.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xd) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *x, |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gd = val(*gain);
                self.accumulate(grads, *x, |d| {
                    let inv_c = T::from_f64(1.0 / c as f64);
                    for (r, (drow, grow)) in
                        d.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate()
                    {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let (m1, m2) = (s1 * inv_c, s2 * inv_c);
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            drow[j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |d| {
                    for (grow, xh) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for grow in g.chunks_exact(c) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (h, wd, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[3]);
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let (xd, wdat) = (val(*x), val(*w));
                let (s, p) = (*stride, *pad);
                self.accumulate(grads, *x, |dx| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for ky in 0..k {
                                let Some(iy) = src_index(oy, ky, s, p, h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = src_index(ox, kx, s, p, wd) else {
                                        continue;
                                    };
                                    let base = (iy * wd + ix) * cin;
                                    let wbase = (ky * k + kx) * cin * cout;
                                    for ci in 0..cin {
                                        dx[base + ci] += dot(
                                            go,
                                            &wdat[wbase + ci * cout..wbase + (ci + 1) * cout],
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for ky in 0..k {
                                let Some(iy) = src_index(oy, ky, s, p, h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = src_index(ox, kx, s, p, wd) else {
                                        continue;
                                    };
                                    let base = (iy * wd + ix) * cin;
                                    let wbase = (ky * k + kx) * cin * cout;
                                    for ci in 0..cin {
                                        axpy(
                                            xd[base + ci],
                                            go,
                                            &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout],
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for go in g.chunks_exact(cout) {
                        add_into(db, go);
                    }
                });
            }
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let sx = self.shape(*x);
                let (h, wd, c) = (sx[0], sx[1], sx[2]);
                let k = self.shape(*w)[0];
                let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                let (xd, wdat) = (val(*x), val(*w));
                let (s, p) = (*stride, *pad);
                self.accumulate(grads, *x, |dx| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                            for ky in 0..k {
                                let Some(iy) = src_index(oy, ky, s, p, h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = src_index(ox, kx, s, p, wd) else {
                                        continue;
                                    };
                                    let d = &mut dx[(iy * wd + ix) * c..(iy * wd + ix + 1) * c];
                                    let wk = &wdat[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                                    for ((d, &gv), &wv) in d.iter_mut().zip(go).zip(wk) {
                                        *d += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                            for ky in 0..k {
                                let Some(iy) = src_index(oy, ky, s, p, h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = src_index(ox, kx, s, p, wd) else {
                                        continue;
                                    };
                                    let xs = &xd[(iy * wd + ix) * c..(iy * wd + ix + 1) * c];
                                    let d = &mut dw[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                                    for ((d, &gv), &xv) in d.iter_mut().zip(go).zip(xs) {
                                        *d += gv * xv;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for go in g.chunks_exact(c) {
                        add_into(db, go);
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let sx = self.shape(*x);
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                let wo = w * factor;
                let ty = interp_table(h, *factor);
                let tx = interp_table(w, *factor);
                self.accumulate(grads, *x, |dx| {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                            let go = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                            let corners = [
                                (y0, x0, hy * hx),
                                (y0, x1, hy * lx),
                                (y1, x0, ly * hx),
                                (y1, x1, ly * lx),
                            ];
                            for (yy, xx, wgt) in corners {
                                axpy(wgt, go, &mut dx[(yy * w + xx) * c..(yy * w + xx + 1) * c]);
                            }
                        }
                    }
                });
            }
            Op::SpaceToDepth { x, r } => {
                let sx = self.shape(*x);
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                self.accumulate(grads, *x, |dx| {
                    for (src, dst) in s2d_pairs(h, w, *r) {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
            }
            Op::SliceLast { x, start } => {
                let c = self.value(*x).last_dim();
                let len = node.value.last_dim();
                self.accumulate(grads, *x, |d| {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::ConcatLast(xs) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &v in xs {
                    let cw = self.value(v).last_dim();
                    self.accumulate(grads, v, |d| {
                        for (drow, grow) in d.chunks_exact_mut(cw).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[off..off + cw]);
                        }
                    });
                    off += cw;
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::from_f64(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::CrossEntropy { logits, labels } => {
                let vl = self.value(*logits);
                let k = vl.last_dim();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                self.accumulate(grads, *logits, |d| {
                    let mut p = vec![T::zero(); k];
                    for ((drow, row), &l) in d
                        .chunks_exact_mut(k)
                        .zip(vl.data().chunks_exact(k))
                        .zip(labels)
                    {
                        p.copy_from_slice(row);
                        softmax_row(&mut p);
                        p[l as usize] -= T::one();
                        axpy(scale, &p, drow);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(buf);
    }
}

// -------------------------------------------------------------------------
// Scalar kernels
// -------------------------------------------------------------------------

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let u = k * (x + T::from_f64(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    let du = k * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || n + 2 * pad < k {
        return Err(Error::dim(format!(
            "convolution with k={k}, s={stride}, p={pad} on extent {n} has no output"
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

#[inline]
fn src_index(o: usize, kk: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + kk).checked_sub(pad)?;
    (i < n).then_some(i)
}

/// Per output coordinate: (lower source, upper source, upper weight).
fn interp_table(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// (source pixel, destination slot) pairs of the block concatenation, both
/// in units of whole channel vectors.
fn s2d_pairs(h: usize, w: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let wb = w / r;
    (0..h).flat_map(move |y| {
        (0..w).map(move |x| {
            let (by, bx, dy, dx) = (y / r, x / r, y % r, x % r);
            ((y * w + x), (by * wb + bx) * r * r + dy * r + dx)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.input(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t64(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(g.matmul_bt(a, b).is_ok());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[3]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.input(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-30);
    }

    #[test]
    fn conv_identity_kernel_and_patch_embed_extent() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.input(t64(&[4, 4, 1], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.input(t64(&[3, 3, 1, 1], &k));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let x = g.input(Tensor::ones(&[8, 8, 3]));
        let w = g.input(Tensor::ones(&[7, 7, 3, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 4, 3).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2]);
    }

    #[test]
    fn conv_without_output_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(&[2, 2, 1]));
        let w = g.input(Tensor::ones(&[7, 7, 1, 1]));
        let b = g.input(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(20.0f64) - 20.0).abs() < 1e-9);
        assert!(gelu_scalar(-20.0f64).abs() < 1e-9);
        // closed form evaluated independently:
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) = 0.841192
        assert!((gelu_scalar(1.0f64) - 0.841192).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let mut g = Graph::<f64>::new();
        let gain = g.input(Tensor::ones(&[4]));
        let bias = g.input(Tensor::zeros(&[4]));
        let x = g.input(Tensor::full(&[4], 3.5));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.input(Tensor::ones(&[2]));
        let bias = g.input(Tensor::zeros(&[2]));
        let x = g.input(t64(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((g.value(y).data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn upsample_identity_constant_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.upsample_bilinear(x, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let c = g.input(Tensor::full(&[3, 2, 2], 1.25));
        let y = g.upsample_bilinear(c, 3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-12));

        // Independent evaluation of the half-pixel formula
        // src = (dst + 0.5) / 2 - 0.5, clamped to [0, 1].
        let y = g.upsample_bilinear(x, 2).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn space_to_depth_layout() {
        let mut g = Graph::<f64>::new();
        // 4x4 grid, 1 channel, values = raster index
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.input(t64(&[4, 4, 1], &data));
        let y = g.space_to_depth(x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 4]);
        assert_eq!(&g.value(y).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.value(y).data()[12..], &[10.0, 11.0, 14.0, 15.0]);
        let bad = g.input(Tensor::zeros(&[3, 4, 1]));
        assert!(matches!(g.space_to_depth(bad, 2), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(&[4, 4, 2]));
        let loss = g
            .cross_entropy(l, &[0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 0, 1])
            .unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[2; 16]).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2], 1e308));
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_reaches_only_dependencies() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t64(&[2], &[1.0, 2.0]));
        let b = g.param(t64(&[2], &[3.0, 4.0]));
        let y = g.mul(a, a).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 4.0]);
        assert!(grads.get(b).is_none());
        assert!(g.backward(y).is_err());
    }
}
