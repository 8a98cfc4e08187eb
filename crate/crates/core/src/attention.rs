//! Cross-task attention maps for inspection.

use std::path::Path;

use crate::data::io::write_pgm;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{image_tensor, Model};
use crate::nn::AttnSource;
use crate::params::ParamStore;
use crate::raster::RgbImage;

/// Attention weights at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttentionMap {
    /// Min-max scaled to 0..=255; a constant map becomes all zeros.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self
            .values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        if !(hi > lo) {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    }

    /// Fraction of the `top_fraction` highest-weighted pixels for which
    /// `inside` holds. Ties at the threshold are all included.
    pub fn top_overlap(&self, top_fraction: f64, inside: impl Fn(usize, usize) -> bool) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = ((sorted.len() as f64 * top_fraction).ceil() as usize).clamp(1, sorted.len());
        let thresh = sorted[k - 1];
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, &v) in self.values.iter().enumerate() {
            if v >= thresh {
                total += 1;
                if inside(i / self.width, i % self.width) {
                    hit += 1;
                }
            }
        }
        hit as f64 / total as f64
    }
}

/// Where task `task`'s cross-task attention looks when queried from image
/// pixel `(row, col)`. Averages over heads and source tasks; each key
/// weight is spread over the pixels of its (reduced) token.
pub fn cross_attention_map(
    model: &Model,
    store: &ParamStore<f32>,
    image: &RgbImage,
    task: usize,
    pixel: (usize, usize),
) -> Result<AttentionMap> {
    if task >= model.tasks() {
        return Err(Error::Argument(format!(
            "task index {task} out of range for {} tasks",
            model.tasks()
        )));
    }
    if model.decoder.cross.is_none() {
        return Err(Error::Argument("model has no cross-task attention".into()));
    }
    let (py, px) = pixel;
    if py >= image.height || px >= image.width {
        return Err(Error::Argument(format!(
            "pixel ({py},{px}) outside {}x{} image",
            image.height, image.width
        )));
    }
    let mut g = Graph::<f32>::new();
    let p = store.attach(&mut g, false);
    let x = g.input(image_tensor(image)?);
    let out = model.forward(&mut g, &p, x)?;

    let (h, w) = (image.height, image.width);
    let mut acc = vec![0f32; h * w];
    let mut used = 0usize;
    for tr in &out.attention {
        let AttnSource::Cross { task: t, .. } = tr.source else {
            continue;
        };
        if t != task {
            continue;
        }
        let (gh, gw) = tr.grid;
        let (rh, rw) = tr.reduced_grid;
        // decoder grid is a quarter of the input
        let (sy, sx) = (h / gh, w / gw);
        let q = (py / sy) * gw + px / sx;
        let probs = g.value(tr.probs);
        let row = &probs.data()[q * rh * rw..(q + 1) * rh * rw];
        let (ky, kx) = (h / rh, w / rw);
        for y in 0..h {
            for xx in 0..w {
                acc[y * w + xx] += row[(y / ky) * rw + xx / kx];
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Argument(format!(
            "no cross-attention recorded for task {task}"
        )));
    }
    for v in &mut acc {
        *v /= used as f32;
    }
    Ok(AttentionMap {
        height: h,
        width: w,
        values: acc,
    })
}

pub fn export_attention(path: &Path, map: &AttentionMap) -> Result<()> {
    write_pgm(path, map.height, map.width, &map.to_gray())
}
