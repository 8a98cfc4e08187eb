//! Layers shared by the encoder and decoder. Layers hold only parameter
//! ids; values live in a [`ParamStore`](crate::params::ParamStore) and are
//! bound to a graph per forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Real;

pub const PROJ_STD: f64 = 0.02;

/// Pointwise affine map over the last axis: `x[..., in] -> [..., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Linear {
                weight: i.trunc_normal("weight", &[in_dim, out_dim], PROJ_STD)?,
                bias: i.zeros("bias", &[out_dim])?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if c != self.in_dim {
            return Err(Error::dim(format!(
                "linear expects last axis {}, got {shape:?}",
                self.in_dim
            )));
        }
        let rows = shape.iter().product::<usize>() / c;
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, c])?
        };
        let y = g.matmul(flat, p.var(self.weight))?;
        let y = g.add_bias(y, p.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out)
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(LayerNorm {
                gain: i.ones("weight", &[dim])?,
                bias: i.zeros("bias", &[dim])?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Dense convolution, weights `[k,k,in,out]`, fan-in scaled init.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let std = (2.0 / (kernel * kernel * cin) as f64).sqrt();
        init.scoped(name, |i| {
            Ok(Conv {
                weight: i.trunc_normal("weight", &[kernel, kernel, cin, cout], std)?,
                bias: i.zeros("bias", &[cout])?,
                kernel,
                stride,
                pad,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            self.pad,
        )
    }
}

/// 3×3 depthwise convolution, stride 1, padding 1.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DwConv {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        let std = (2.0f64 / 9.0).sqrt();
        init.scoped(name, |i| {
            Ok(DwConv {
                weight: i.trunc_normal("weight", &[3, 3, dim], std)?,
                bias: i.zeros("bias", &[dim])?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv2d(x, p.var(self.weight), p.var(self.bias), 1, 1)
    }
}

/// `x + fc2(gelu(dwconv(fc1(norm(x)))))`: a feed-forward sublayer whose
/// 3×3 depthwise convolution supplies positional information.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub dw: DwConv,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        expansion: usize,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::config("Mix-FFN expansion must be positive"));
        }
        let hidden = dim * expansion;
        init.scoped(name, |i| {
            Ok(MixFfn {
                norm: LayerNorm::new(i, "norm", dim)?,
                fc1: Linear::new(i, "fc1", dim, hidden)?,
                dw: DwConv::new(i, "dwconv", hidden)?,
                fc2: Linear::new(i, "fc2", hidden, dim)?,
            })
        })
    }

    /// `tokens` is `[n, c]` or `[H, W, c]`; `grid` gives its 2D layout.
    /// Returns the same shape as `tokens`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        let c = *shape.last().unwrap();
        let n = shape.iter().product::<usize>() / c;
        if n != grid.0 * grid.1 {
            return Err(Error::dim(format!(
                "{n} tokens do not fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let x = if shape.len() == 3 {
            tokens
        } else {
            g.reshape(tokens, &[grid.0, grid.1, c])?
        };
        let h = self.norm.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = self.dw.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let out = g.add(x, h)?;
        if shape.len() == 3 {
            Ok(out)
        } else {
            g.reshape(out, &shape)
        }
    }
}

/// Concatenates each `r×r` neighbourhood of the grid into one `r²c`
/// vector and projects it back to `c`, followed by a layer norm.
#[derive(Debug, Clone)]
pub struct SpatialReduction {
    pub r: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl SpatialReduction {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        r: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(SpatialReduction {
                r,
                proj: Linear::new(i, "proj", r * r * dim, dim)?,
                norm: LayerNorm::new(i, "norm", dim)?,
            })
        })
    }

    /// `x[H,W,c] -> [H/r, W/r, c]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let blocks = g.space_to_depth(x, self.r)?;
        let y = self.proj.forward(g, p, blocks)?;
        self.norm.forward(g, p, y)
    }
}

/// Where an attention matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnSource {
    Encoder {
        stage: usize,
        block: usize,
        head: usize,
    },
    /// Queries from task `task`, keys/values from task `source`.
    Cross {
        task: usize,
        source: usize,
        head: usize,
    },
}

/// A recorded softmax node: rows are query tokens on `grid`, columns are
/// reduced key positions on `reduced_grid`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub source: AttnSource,
    pub probs: Var,
    pub grid: (usize, usize),
    pub reduced_grid: (usize, usize),
    pub reduction: usize,
}

/// Multi-head scaled dot-product attention. `q` is `[n, c]`, `k`/`v` are
/// `[m, c]`; returns the concatenated heads `[n, c]` and one softmax node
/// per head.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let c = *g.shape(q).last().unwrap();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_last(q, h * dh, dh)?,
                g.slice_last(k, h * dh, dh)?,
                g.slice_last(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores)?;
        outs.push(g.matmul(a, vh)?);
        probs.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat_last(&outs)?
    };
    Ok((out, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_keeps_leading_axes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng), "l", 3, 5).unwrap();
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let x = g.input(Tensor::ones(&[2, 4, 3]));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5]);
        let bad = g.input(Tensor::ones(&[2, 4]));
        assert!(lin.forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn mix_ffn_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ffn = MixFfn::new(&mut Init::new(&mut store, &mut rng), "ffn", 4, 4).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let x = g.input(Tensor::uniform(&[12, 4], -1.0, 1.0, &mut rng));
        let y = ffn.forward(&mut g, &p, x, (3, 4)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(matches!(
            ffn.forward(&mut g, &p, x, (3, 3)),
            Err(Error::Dimension(_))
        ));
    }
}
