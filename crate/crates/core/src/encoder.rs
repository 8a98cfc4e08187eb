//! Four-stage hierarchical transformer encoder.
//!
//! Stage 1 embeds overlapping 7×7 patches with stride 4; stages 2–4 merge
//! overlapping 3×3 neighbourhoods with stride 2. Each stage then runs
//! `depth` blocks of efficient self-attention followed by Mix-FFN, both
//! pre-norm with residual connections. The outputs are the maps at 1/4,
//! 1/8, 1/16 and 1/32 of the input resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    multi_head_attention, AttentionTrace, AttnSource, Conv, LayerNorm, Linear, MixFfn,
    SpatialReduction,
};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Real;

/// Total downsampling of the last stage.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub reductions: [usize; 4],
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Small test configuration.
    pub fn t0() -> Self {
        EncoderConfig {
            embed_dims: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 1, 2, 2],
            reductions: [4, 2, 1, 1],
            mlp_ratio: 4,
        }
    }

    /// SegFormer-B0 sized configuration.
    pub fn b0() -> Self {
        EncoderConfig {
            embed_dims: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 5, 8],
            reductions: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t0" => Ok(Self::t0()),
            "b0" => Ok(Self::b0()),
            other => Err(Error::config(format!("unknown encoder config {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (c, h) = (self.embed_dims[i], self.heads[i]);
            if c == 0 || h == 0 || self.depths[i] == 0 || self.reductions[i] == 0 {
                return Err(Error::config(format!("stage {} has a zero setting", i + 1)));
            }
            if c % h != 0 {
                return Err(Error::config(format!(
                    "stage {}: {c} channels not divisible by {h} heads",
                    i + 1
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Grid extents `(h_i, w_i)` for the four stages of an `h×w` input.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        check_input_extent(h, w)?;
        Ok([1, 2, 3, 4].map(|i| (h >> (i + 1), w >> (i + 1))))
    }
}

pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::config(format!(
            "input {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Overlapping strided convolution followed by layer norm. Used for both
/// the stage-1 patch embedding (k=7, s=4, p=3) and the stage 2–4 patch
/// merging (k=3, s=2, p=1).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dims: (usize, usize),
        first: bool,
    ) -> Result<Self> {
        let (k, s, p) = if first { (7, 4, 3) } else { (3, 2, 1) };
        init.scoped(name, |i| {
            Ok(PatchEmbed {
                conv: Conv::new(i, "proj", dims, k, s, p)?,
                norm: LayerNorm::new(i, "norm", dims.1)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        self.norm.forward(g, p, y)
    }

    /// Patch embedding of an `h×w×3` image into an `(h/4)×(w/4)×c1` grid.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 3 {
            return Err(Error::dim(format!("image must be [h,w,3], got {s:?}")));
        }
        check_input_extent(s[0], s[1])?;
        self.forward(g, p, image)
    }

    /// Halves the grid of an `H×W×c_in` map.
    pub fn merge<T: Real>(&self, g: &mut Graph<T>, p: &Bound, map: Var) -> Result<Var> {
        let s = g.shape(map);
        if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return Err(Error::dim(format!(
                "patch merge needs even extents, got {s:?}"
            )));
        }
        self.forward(g, p, map)
    }
}

/// Multi-head self-attention whose keys and values come from `r×r`
/// spatially reduced tokens.
#[derive(Debug, Clone)]
pub struct EfficientSelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub reduce: Option<SpatialReduction>,
    pub proj: Linear,
    pub heads: usize,
    pub reduction: usize,
}

impl EfficientSelfAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        reduction: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(EfficientSelfAttention {
                norm: LayerNorm::new(i, "norm", dim)?,
                q: Linear::new(i, "q", dim, dim)?,
                k: Linear::new(i, "k", dim, dim)?,
                v: Linear::new(i, "v", dim, dim)?,
                reduce: if reduction > 1 {
                    Some(SpatialReduction::new(i, "sr", dim, reduction)?)
                } else {
                    None
                },
                proj: Linear::new(i, "proj", dim, dim)?,
                heads,
                reduction,
            })
        })
    }

    /// `tokens` is `[n, c]` or `[H, W, c]` laid out on `grid`. Returns the
    /// residual output in the same shape and the per-head attention
    /// matrices `n × (n/r²)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(tokens).to_vec();
        let c = *shape.last().unwrap();
        let n = shape.iter().product::<usize>() / c;
        let (gh, gw) = grid;
        if n != gh * gw {
            return Err(Error::dim(format!(
                "{n} tokens do not fill a {gh}x{gw} grid"
            )));
        }
        let r = self.reduction;
        if gh % r != 0 || gw % r != 0 {
            return Err(Error::config(format!(
                "reduction {r}x{r} does not tile the {gh}x{gw} token grid"
            )));
        }
        let x = g.reshape(tokens, &[gh, gw, c])?;
        let h = self.norm.forward(g, p, x)?;
        let hq = g.reshape(h, &[n, c])?;
        let q = self.q.forward(g, p, hq)?;
        let kv_src = match &self.reduce {
            Some(sr) => {
                let red = sr.forward(g, p, h)?;
                g.reshape(red, &[n / (r * r), c])?
            }
            None => hq,
        };
        let k = self.k.forward(g, p, kv_src)?;
        let v = self.v.forward(g, p, kv_src)?;
        let (att, probs) = multi_head_attention(g, q, k, v, self.heads)?;
        let out = self.proj.forward(g, p, att)?;
        let xf = g.reshape(x, &[n, c])?;
        let y = g.add(xf, out)?;
        Ok((g.reshape(y, &shape)?, probs))
    }

    pub fn residual_output_ids(&self) -> [ParamId; 2] {
        self.proj.param_ids()
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn: EfficientSelfAttention,
    pub ffn: MixFfn,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub patch: PatchEmbed,
    pub blocks: Vec<Block>,
}

/// The four encoder maps, each `[h_i, w_i, c_i]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub maps: [Var; 4],
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        init.scoped("encoder", |init| {
            for s in 0..4 {
                let cin = if s == 0 { 3 } else { config.embed_dims[s - 1] };
                let c = config.embed_dims[s];
                let stage = init.scoped(&format!("stage{}", s + 1), |i| {
                    let patch = PatchEmbed::new(i, "patch", (cin, c), s == 0)?;
                    let blocks = (0..config.depths[s])
                        .map(|b| {
                            i.scoped(&format!("block{b}"), |i| {
                                Ok(Block {
                                    attn: EfficientSelfAttention::new(
                                        i,
                                        "attn",
                                        c,
                                        config.heads[s],
                                        config.reductions[s],
                                    )?,
                                    ffn: MixFfn::new(i, "ffn", c, config.mlp_ratio)?,
                                })
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Stage { patch, blocks })
                })?;
                stages.push(stage);
            }
            Ok(())
        })?;
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    /// Runs all four stages on an `[h, w, 3]` image. Attention matrices are
    /// appended to `traces`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<FeaturePyramid> {
        let mut maps = Vec::with_capacity(4);
        let mut x = image;
        for (si, stage) in self.stages.iter().enumerate() {
            x = if si == 0 {
                stage.patch.embed(g, p, x)?
            } else {
                stage.patch.merge(g, p, x)?
            };
            let s = g.shape(x).to_vec();
            let grid = (s[0], s[1]);
            let r = self.config.reductions[si];
            for (bi, block) in stage.blocks.iter().enumerate() {
                let (y, probs) = block.attn.forward(g, p, x, grid)?;
                for (head, probs) in probs.into_iter().enumerate() {
                    traces.push(AttentionTrace {
                        source: AttnSource::Encoder {
                            stage: si,
                            block: bi,
                            head,
                        },
                        probs,
                        grid,
                        reduced_grid: (grid.0 / r, grid.1 / r),
                        reduction: r,
                    });
                }
                x = block.ffn.forward(g, p, y, grid)?;
            }
            maps.push(x);
        }
        Ok(FeaturePyramid {
            maps: [maps[0], maps[1], maps[2], maps[3]],
        })
    }

    /// Output projections of every residual branch (attention `proj` and
    /// Mix-FFN `fc2`).
    pub fn residual_branch_outputs(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .flat_map(|b| {
                let mut v = b.attn.residual_output_ids().to_vec();
                v.extend(b.ffn.fc2.param_ids());
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &EncoderConfig) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (enc, store)
    }

    #[test]
    fn t0_pyramid_extents_for_64() {
        let (enc, store) = build(&EncoderConfig::t0());
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = g.input(Tensor::uniform(&[64, 64, 3], -1.0, 1.0, &mut rng));
        let mut tr = Vec::new();
        let pyr = enc.encode(&mut g, &p, img, &mut tr).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.maps.iter().map(|&m| g.shape(m).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![16, 16, 8],
                vec![8, 8, 16],
                vec![4, 4, 24],
                vec![2, 2, 32]
            ]
        );
        // stage 1: 256 tokens against 16 reduced positions
        assert_eq!(g.shape(tr[0].probs), &[256, 16]);
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let (enc, store) = build(&EncoderConfig::t0());
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let img = g.input(Tensor::zeros(&[48, 64, 3]));
        assert!(matches!(
            enc.encode(&mut g, &p, img, &mut Vec::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pre_norm_tokens() {
        let (enc, store) = build(&EncoderConfig::t0());
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let img = g.input(Tensor::zeros(&[32, 32, 3]));
        let conv = enc.stages[0].patch.conv.forward(&mut g, &p, img).unwrap();
        assert_eq!(g.shape(conv), &[8, 8, 8]);
        assert!(g.value(conv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_rejects_odd_extents() {
        let (enc, store) = build(&EncoderConfig::t0());
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let m = g.input(Tensor::zeros(&[5, 4, 8]));
        assert!(matches!(
            enc.stages[1].patch.merge(&mut g, &p, m),
            Err(Error::Dimension(_))
        ));
        let m = g.input(Tensor::zeros(&[16, 16, 8]));
        let y = enc.stages[1].patch.merge(&mut g, &p, m).unwrap();
        assert_eq!(g.shape(y), &[8, 8, 16]);
    }

    #[test]
    fn attention_reduction_must_tile_grid() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = EfficientSelfAttention::new(&mut Init::new(&mut store, &mut rng), "a", 4, 1, 2)
            .unwrap();
        let mut g = Graph::new();
        let p = store.attach(&mut g, false);
        let x = g.input(Tensor::ones(&[9, 4]));
        assert!(matches!(
            att.forward(&mut g, &p, x, (3, 3)),
            Err(Error::Config(_))
        ));
        let x = g.input(Tensor::ones(&[16, 4]));
        let (_, probs) = att.forward(&mut g, &p, x, (4, 4)).unwrap();
        assert_eq!(g.shape(probs[0]), &[16, 4]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::t0();
        cfg.heads[2] = 5;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::by_name("b5").is_err());
        assert_eq!(EncoderConfig::by_name("B0").unwrap(), EncoderConfig::b0());
    }
}
