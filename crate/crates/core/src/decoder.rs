//! Multi-task decoder with cross-task attention.
//!
//! The four encoder maps are projected to `c` channels, upsampled to the
//! 1/4 grid and concatenated (`4c`). A per-task pointwise layer produces
//! one branch per task. In the multi-task block every task queries the
//! keys and values of every *other* task; the resulting cross features are
//! summed over source tasks, added to the branch, and passed through a
//! per-task Mix-FFN. Each branch finally predicts 2-class logits.

use rand::Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    multi_head_attention, AttentionTrace, AttnSource, LayerNorm, Linear, MixFfn, SpatialReduction,
};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Real;

pub const CLASSES_PER_TASK: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Unified channel width `c`.
    pub channels: usize,
    pub tasks: usize,
    pub heads: usize,
    /// Spatial reduction `r_d` of cross-task keys/values.
    pub cross_reduction: usize,
    /// `false` removes cross-task attention; branches then proceed
    /// independently.
    pub cross_attention: bool,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn new(channels: usize, tasks: usize) -> Self {
        DecoderConfig {
            channels,
            tasks,
            heads: 1,
            cross_reduction: 1,
            cross_attention: true,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("decoder channels must be positive"));
        }
        if self.tasks < 2 {
            return Err(Error::config(format!(
                "multi-task decoder needs at least 2 tasks, got {}",
                self.tasks
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} decoder channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.cross_reduction == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "cross_reduction and mlp_ratio must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-task projections used by cross-task attention. Task `t` uses its
/// `q` when it asks; its `k`/`v` are only read by the other tasks.
#[derive(Debug, Clone)]
pub struct CrossProjection {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub reduce: Option<SpatialReduction>,
}

impl CrossProjection {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids().to_vec();
        ids.extend(self.q.param_ids());
        ids.extend(self.k.param_ids());
        ids.extend(self.v.param_ids());
        if let Some(r) = &self.reduce {
            ids.extend(r.proj.param_ids());
            ids.extend(r.norm.param_ids());
        }
        ids
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub fuse: Vec<Linear>,
    pub branch: Vec<Linear>,
    pub cross: Option<Vec<CrossProjection>>,
    pub ffn: Vec<MixFfn>,
    pub head: Vec<Linear>,
}

/// Per-task maps on the 1/4 grid, each `[h/4, w/4, c]`.
#[derive(Debug, Clone)]
pub struct TaskBranches {
    pub maps: Vec<Var>,
}

impl Decoder {
    /// `init` creates the fusion, branch, Mix-FFN and head parameters;
    /// `cross_init` creates the cross-attention projections, so toggling
    /// cross attention leaves every other weight identical.
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        cross_init: &mut Init<'_, T, R>,
        config: &DecoderConfig,
        encoder_dims: [usize; 4],
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let dec = init.scoped("decoder", |i| {
            let fuse = (0..4)
                .map(|s| Linear::new(i, &format!("fuse{}", s + 1), encoder_dims[s], c))
                .collect::<Result<Vec<_>>>()?;
            let branch = (0..config.tasks)
                .map(|t| Linear::new(i, &format!("task{t}.branch"), 4 * c, c))
                .collect::<Result<Vec<_>>>()?;
            let ffn = (0..config.tasks)
                .map(|t| MixFfn::new(i, &format!("task{t}.ffn"), c, config.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            let head = (0..config.tasks)
                .map(|t| Linear::new(i, &format!("task{t}.head"), c, CLASSES_PER_TASK))
                .collect::<Result<Vec<_>>>()?;
            Ok(Decoder {
                config: config.clone(),
                fuse,
                branch,
                cross: None,
                ffn,
                head,
            })
        })?;
        let cross = if config.cross_attention {
            let r = config.cross_reduction;
            Some(cross_init.scoped("decoder", |i| {
                (0..config.tasks)
                    .map(|t| {
                        i.scoped(&format!("task{t}.cross"), |i| {
                            Ok(CrossProjection {
                                norm: LayerNorm::new(i, "norm", c)?,
                                q: Linear::new(i, "q", c, c)?,
                                k: Linear::new(i, "k", c, c)?,
                                v: Linear::new(i, "v", c, c)?,
                                reduce: if r > 1 {
                                    Some(SpatialReduction::new(i, "sr", c, r)?)
                                } else {
                                    None
                                },
                            })
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?)
        } else {
            None
        };
        Ok(Decoder { cross, ..dec })
    }

    /// Projects each pyramid level to `c` channels, upsamples levels 2–4 by
    /// 2/4/8 and concatenates in order F1..F4: `[h/4, w/4, 4c]`.
    pub fn fuse_mlp_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<Var> {
        let base = g.shape(pyramid.maps[0]).to_vec();
        if base.len() != 3 {
            return Err(Error::dim(format!("pyramid level 1 has shape {base:?}")));
        }
        let mut parts = Vec::with_capacity(4);
        for (s, &m) in pyramid.maps.iter().enumerate() {
            let f = 1usize << s;
            let sh = g.shape(m).to_vec();
            if sh.len() != 3 || sh[0] * f != base[0] || sh[1] * f != base[1] {
                return Err(Error::dim(format!(
                    "pyramid level {} has shape {sh:?}, expected {}x{} grid",
                    s + 1,
                    base[0] / f,
                    base[1] / f
                )));
            }
            let y = self.fuse[s].forward(g, p, m)?;
            parts.push(if f == 1 {
                y
            } else {
                g.upsample_bilinear(y, f)?
            });
        }
        g.concat_last(&parts)
    }

    pub fn task_branch_init<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        fused: Var,
    ) -> Result<TaskBranches> {
        let maps = self
            .branch
            .iter()
            .map(|b| b.forward(g, p, fused))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskBranches { maps })
    }

    /// For every task `t`, `sum_{u != t} softmax(Q_t K_uᵀ / sqrt(d)) V_u`.
    pub fn cross_task_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        branches: &TaskBranches,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<Vec<Var>> {
        let cross = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::config("decoder was built without cross-task attention"))?;
        let tasks = branches.maps.len();
        if tasks < 2 || tasks != cross.len() {
            return Err(Error::config(format!(
                "cross-task attention needs {} >= 2 branches, got {tasks}",
                cross.len()
            )));
        }
        let shape = g.shape(branches.maps[0]).to_vec();
        let (gh, gw, c) = (shape[0], shape[1], shape[2]);
        let n = gh * gw;
        let r = self.config.cross_reduction;
        if gh % r != 0 || gw % r != 0 {
            return Err(Error::config(format!(
                "cross reduction {r} does not tile the {gh}x{gw} branch grid"
            )));
        }
        let m = n / (r * r);

        let mut q = Vec::with_capacity(tasks);
        let mut k = Vec::with_capacity(tasks);
        let mut v = Vec::with_capacity(tasks);
        for (proj, &map) in cross.iter().zip(&branches.maps) {
            if g.shape(map) != shape.as_slice() {
                return Err(Error::dim("task branches differ in extent"));
            }
            let h = proj.norm.forward(g, p, map)?;
            let hq = g.reshape(h, &[n, c])?;
            q.push(proj.q.forward(g, p, hq)?);
            let src = match &proj.reduce {
                Some(sr) => {
                    let red = sr.forward(g, p, h)?;
                    g.reshape(red, &[m, c])?
                }
                None => hq,
            };
            k.push(proj.k.forward(g, p, src)?);
            v.push(proj.v.forward(g, p, src)?);
        }

        let mut out = Vec::with_capacity(tasks);
        for (t, &qt) in q.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for u in (0..tasks).filter(|&u| u != t) {
                let (vt, probs) = multi_head_attention(g, qt, k[u], v[u], self.config.heads)?;
                for (head, probs) in probs.into_iter().enumerate() {
                    traces.push(AttentionTrace {
                        source: AttnSource::Cross {
                            task: t,
                            source: u,
                            head,
                        },
                        probs,
                        grid: (gh, gw),
                        reduced_grid: (gh / r, gw / r),
                        reduction: r,
                    });
                }
                acc = Some(match acc {
                    None => vt,
                    Some(a) => g.add(a, vt)?,
                });
            }
            let feat = acc.expect("at least one other task");
            out.push(g.reshape(feat, &[gh, gw, c])?);
        }
        Ok(out)
    }

    /// `F_t + V_t` followed by the task's Mix-FFN. Without cross attention
    /// only the Mix-FFN runs.
    pub fn multitask_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        branches: &TaskBranches,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<TaskBranches> {
        if branches.maps.len() != self.config.tasks {
            return Err(Error::config(format!(
                "{} branches for {} tasks",
                branches.maps.len(),
                self.config.tasks
            )));
        }
        let mixed: Vec<Var> = if self.cross.is_some() {
            let cross = self.cross_task_attention(g, p, branches, traces)?;
            branches
                .maps
                .iter()
                .zip(cross)
                .map(|(&f, v)| g.add(f, v))
                .collect::<Result<_>>()?
        } else {
            branches.maps.clone()
        };
        let maps = mixed
            .into_iter()
            .zip(&self.ffn)
            .map(|(f, ffn)| {
                let s = g.shape(f).to_vec();
                ffn.forward(g, p, f, (s[0], s[1]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskBranches { maps })
    }

    /// Per-task 2-class logits, upsampled by `upsample` (4 restores the
    /// input resolution).
    pub fn predict_heads<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        branches: &TaskBranches,
        upsample: usize,
    ) -> Result<Vec<Var>> {
        branches
            .maps
            .iter()
            .zip(&self.head)
            .map(|(&f, head)| {
                let y = head.forward(g, p, f)?;
                if upsample == 1 {
                    Ok(y)
                } else {
                    g.upsample_bilinear(y, upsample)
                }
            })
            .collect()
    }

    pub fn cross_param_ids(&self) -> Vec<ParamId> {
        self.cross
            .iter()
            .flatten()
            .flat_map(|c| c.param_ids())
            .collect()
    }

    /// Value projections of cross attention and the Mix-FFN output layers:
    /// zeroing these makes the block an identity on the branches.
    pub fn residual_branch_outputs(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .cross
            .iter()
            .flatten()
            .flat_map(|c| c.v.param_ids())
            .collect();
        ids.extend(self.ffn.iter().flat_map(|f| f.fc2.param_ids()));
        ids
    }
}
