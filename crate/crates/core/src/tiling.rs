//! Overlapping-patch inference on images larger than the model input.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::raster::{Mask, RgbImage};
use crate::skeleton::skeletonize;

/// Patch origins covering an `height`×`width` image with 50% overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Row-major `(row, col)` origins.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(extent: usize, patch: usize) -> Vec<usize> {
    let stride = patch / 2;
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + patch < extent)
        .collect();
    out.push(extent - patch);
    out.dedup();
    out
}

pub fn make_grid(height: usize, width: usize, patch: usize) -> Result<TileGrid> {
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "patch size {patch} must be even and positive"
        )));
    }
    if patch > height || patch > width {
        return Err(Error::Argument(format!(
            "patch size {patch} exceeds image {height}x{width}"
        )));
    }
    let rows = axis_origins(height, patch);
    let cols = axis_origins(width, patch);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileGrid {
        height,
        width,
        patch,
        origins,
    })
}

/// Collapses per-task binary masks into one label raster: task `t` becomes
/// label `t + 1` and the highest label present wins (for crop scenes:
/// gap over line over background).
pub fn priority_labels(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("no task masks to merge".into()))?;
    let mut out = Mask::new(first.height, first.width);
    for (t, m) in masks.iter().enumerate() {
        if !m.same_extent(first) {
            return Err(Error::dim("task masks differ in extent"));
        }
        let label = u8::try_from(t + 1).map_err(|_| Error::Argument("too many tasks".into()))?;
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            if v != 0 {
                *o = (*o).max(label);
            }
        }
    }
    Ok(out)
}

/// Merges per-patch, per-task predictions: each pixel takes the highest
/// label any covering patch assigned it.
pub fn merge_priority(preds: &[Vec<Mask>], grid: &TileGrid) -> Result<Mask> {
    if preds.len() != grid.origins.len() {
        return Err(Error::Argument(format!(
            "{} patch predictions for {} patches",
            preds.len(),
            grid.origins.len()
        )));
    }
    let mut out = Mask::new(grid.height, grid.width);
    for (i, (task_masks, &(r, c))) in preds.iter().zip(&grid.origins).enumerate() {
        if task_masks.is_empty() {
            return Err(Error::Argument(format!(
                "patch {i} has no task predictions"
            )));
        }
        let labels = priority_labels(task_masks)?;
        if labels.height != grid.patch || labels.width != grid.patch {
            return Err(Error::dim(format!(
                "patch {i} prediction is {}x{}, expected {p}x{p}",
                labels.height,
                labels.width,
                p = grid.patch
            )));
        }
        for y in 0..grid.patch {
            for x in 0..grid.patch {
                let v = labels.get(y, x);
                if v > out.get(r + y, c + x) {
                    out.set(r + y, c + x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Label raster as 8-bit gray: labels spread evenly over 0..=255.
pub fn label_gray(labels: &Mask, tasks: usize) -> Vec<u8> {
    let t = tasks.max(1) as u32;
    labels
        .data
        .iter()
        .map(|&v| ((v as u32 * 255 + t / 2) / t).min(255) as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullPrediction {
    pub merged: Mask,
    /// One skeleton per task label.
    pub skeletons: Vec<Mask>,
}

/// Tiles `image`, predicts every patch, merges with the priority rule and
/// skeletonizes each class.
pub fn infer_full(
    model: &Model,
    store: &ParamStore<f32>,
    image: &RgbImage,
    patch: usize,
) -> Result<FullPrediction> {
    let grid = make_grid(image.height, image.width, patch)?;
    let preds = grid
        .origins
        .iter()
        .map(|&(r, c)| model.predict(store, &image.crop(r, c, patch, patch)?))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_priority(&preds, &grid)?;
    let skeletons = (0..model.tasks())
        .map(|t| skeletonize(&merged.class_mask(t as u8 + 1)))
        .collect();
    Ok(FullPrediction { merged, skeletons })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(make_grid(64, 64, 64).unwrap().origins, vec![(0, 0)]);
        let g = make_grid(128, 128, 64).unwrap();
        assert_eq!(g.origins.len(), 9);
        assert_eq!(axis_origins(128, 64), vec![0, 32, 64]);
        // last origin clamped to the border
        assert_eq!(axis_origins(100, 64), vec![0, 32, 36]);
        assert!(make_grid(32, 64, 64).is_err());
        assert!(make_grid(64, 64, 31).is_err());
    }

    #[test]
    fn label_gray_levels() {
        let m = Mask::from_raw(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(label_gray(&m, 2), vec![0, 128, 255]);
    }

    #[test]
    fn merge_requires_every_patch() {
        let g = make_grid(64, 64, 32).unwrap();
        let preds = vec![vec![Mask::new(32, 32), Mask::new(32, 32)]; g.origins.len() - 1];
        assert!(merge_priority(&preds, &g).is_err());
    }
}
