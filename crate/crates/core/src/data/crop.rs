//! Crop-row scenes: parallel planting lines with missing segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::texture::{value_noise, Palette};
use super::Sample;
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

pub const TASKS: [&str; 2] = ["line", "gap"];

/// Pixels kept between a gap and the frame edge along a trajectory.
const GAP_MARGIN: usize = 3;

const SOIL: Palette = Palette {
    base: [128.0, 96.0, 66.0],
    smooth: 28.0,
    grain: 12.0,
};
const PLANT: Palette = Palette {
    base: [58.0, 142.0, 52.0],
    smooth: 34.0,
    grain: 14.0,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CropSceneParams {
    pub height: usize,
    pub width: usize,
    pub line_count: usize,
    /// Perpendicular distance between neighbouring lines.
    pub line_spacing: f64,
    /// Line direction in radians, measured from the +x axis towards +y.
    pub angle: f64,
    /// Perpendicular shift of the line set from the image centre.
    pub offset: f64,
    /// Width of the painted plant band.
    pub thickness: f64,
    pub gap_count: usize,
    /// Gap length in trajectory pixels.
    pub gap_length: usize,
    pub plant_noise: f32,
    pub background_noise: f32,
    pub seed: u64,
}

impl CropSceneParams {
    /// Draws a plausible scene for an `h`×`w` frame. Spacing stays above
    /// 50 px so 1-px lines cover under 2% of the frame.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        let line_spacing = rng.random_range(52.0..60.0);
        let diag = ((h * h + w * w) as f64).sqrt();
        let line_count = (diag / line_spacing).ceil() as usize + 1;
        let short = h.min(w) as f64;
        CropSceneParams {
            height: h,
            width: w,
            line_count,
            line_spacing,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            offset: rng.random_range(-0.5..0.5) * line_spacing,
            thickness: rng.random_range(4.0..6.5),
            gap_count: rng.random_range(1..=2),
            gap_length: rng
                .random_range((short / 10.0) as usize..=(short / 5.0) as usize)
                .max(2),
            plant_noise: rng.random_range(0.4..1.0),
            background_noise: rng.random_range(0.4..1.0),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Params(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(INPUT_MULTIPLE)
            || !self.width.is_multiple_of(INPUT_MULTIPLE)
        {
            return bad(format!(
                "scene extents {}x{} must be positive multiples of {INPUT_MULTIPLE}",
                self.height, self.width
            ));
        }
        if self.line_count == 0 {
            return bad("line_count must be at least 1".into());
        }
        if !(self.thickness > 0.0) || !(self.line_spacing > self.thickness) {
            return bad(format!(
                "line spacing {} must exceed thickness {} > 0",
                self.line_spacing, self.thickness
            ));
        }
        if self.gap_count > 0 && self.gap_length == 0 {
            return bad("gap_length must be positive when gaps are requested".into());
        }
        if !self.angle.is_finite() || !self.offset.is_finite() {
            return bad("angle and offset must be finite".into());
        }
        Ok(())
    }

    /// Perpendicular offsets of every line from the image centre.
    pub fn line_offsets(&self) -> Vec<f64> {
        let mid = (self.line_count as f64 - 1.0) / 2.0;
        (0..self.line_count)
            .map(|k| (k as f64 - mid) * self.line_spacing + self.offset)
            .collect()
    }

    pub fn centre(&self) -> (f64, f64) {
        (
            (self.height as f64 - 1.0) / 2.0,
            (self.width as f64 - 1.0) / 2.0,
        )
    }

    /// Unsigned distance from pixel `(y, x)` to the nearest continuous line.
    pub fn distance_to_lines(&self, y: usize, x: usize) -> f64 {
        let (cy, cx) = self.centre();
        let (ny, nx) = (self.angle.cos(), -self.angle.sin());
        let s = (y as f64 - cy) * ny + (x as f64 - cx) * nx;
        self.line_offsets()
            .iter()
            .map(|o| (s - o).abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn meta(&self) -> Vec<(String, String)> {
        let offsets: Vec<String> = self.line_offsets().iter().map(|o| o.to_string()).collect();
        vec![
            ("generator".into(), "crop".into()),
            ("seed".into(), self.seed.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("line_count".into(), self.line_count.to_string()),
            ("line_spacing".into(), self.line_spacing.to_string()),
            ("angle".into(), self.angle.to_string()),
            ("offset".into(), self.offset.to_string()),
            ("thickness".into(), self.thickness.to_string()),
            ("gap_count".into(), self.gap_count.to_string()),
            ("gap_length".into(), self.gap_length.to_string()),
            ("plant_noise".into(), self.plant_noise.to_string()),
            ("background_noise".into(), self.background_noise.to_string()),
            ("line_offsets".into(), offsets.join(",")),
        ]
    }
}

/// Ordered 8-connected pixels of one infinite line clipped to the frame.
fn trajectory(p: &CropSceneParams, offset: f64) -> Vec<(usize, usize)> {
    let (cy, cx) = p.centre();
    let (dy, dx) = (p.angle.sin(), p.angle.cos());
    // normal (ny, nx) = (cos, -sin)
    let (py, px) = (cy + offset * dx, cx - offset * dy);
    let mut out = Vec::new();
    if dx.abs() >= dy.abs() {
        for x in 0..p.width {
            let t = (x as f64 - px) / dx;
            let y = (py + t * dy).round();
            if y >= 0.0 && (y as usize) < p.height {
                out.push((y as usize, x));
            }
        }
    } else {
        for y in 0..p.height {
            let t = (y as f64 - py) / dy;
            let x = (px + t * dx).round();
            if x >= 0.0 && (x as usize) < p.width {
                out.push((y, x as usize));
            }
        }
    }
    out
}

/// Renders a crop scene. Task 0 is the 1-px line skeleton with gaps
/// removed, task 1 the removed gap pixels.
pub fn gen_crop_scene(p: &CropSceneParams) -> Result<Sample> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (h, w) = (p.height, p.width);
    let trajectories: Vec<Vec<(usize, usize)>> =
        p.line_offsets().iter().map(|&o| trajectory(p, o)).collect();

    let mut gap = Mask::new(h, w);
    if p.gap_count > 0 {
        let hosts: Vec<usize> = (0..trajectories.len())
            .filter(|&i| trajectories[i].len() >= p.gap_length + 2 * GAP_MARGIN)
            .collect();
        if hosts.is_empty() {
            return Err(Error::Params(format!(
                "no line is long enough in frame for a {}-px gap",
                p.gap_length
            )));
        }
        for _ in 0..p.gap_count {
            let t = &trajectories[hosts[rng.random_range(0..hosts.len())]];
            let start = rng.random_range(GAP_MARGIN..=t.len() - p.gap_length - GAP_MARGIN);
            for &(y, x) in &t[start..start + p.gap_length] {
                gap.set(y, x, 1);
            }
        }
    }
    let mut line = Mask::new(h, w);
    for &(y, x) in trajectories.iter().flatten() {
        if gap.get(y, x) == 0 {
            line.set(y, x, 1);
        }
    }

    // Plant band: every pixel within thickness/2 of a visible line pixel.
    let r = p.thickness / 2.0;
    let ri = r.ceil() as isize;
    let mut plant = Mask::new(h, w);
    for (y, x) in line.foreground().collect::<Vec<_>>() {
        for oy in -ri..=ri {
            for ox in -ri..=ri {
                let (yy, xx) = (y as isize + oy, x as isize + ox);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                if ((oy * oy + ox * ox) as f64) <= r * r {
                    plant.set(yy as usize, xx as usize, 1);
                }
            }
        }
    }

    let soil_tex = value_noise(h, w, 9, &mut rng);
    let plant_tex = value_noise(h, w, 3, &mut rng);
    let mut image = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = if plant.get(y, x) != 0 {
                PLANT.shade(plant_tex[i], p.plant_noise, &mut rng)
            } else {
                SOIL.shade(soil_tex[i], p.background_noise, &mut rng)
            };
            image.set(y, x, px);
        }
    }
    Ok(Sample {
        image,
        masks: vec![line, gap],
        meta: p.meta(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CropSceneParams {
        CropSceneParams {
            height: 64,
            width: 64,
            line_count: 2,
            line_spacing: 24.0,
            angle: 0.3,
            offset: 0.0,
            thickness: 5.0,
            gap_count: 2,
            gap_length: 8,
            plant_noise: 0.7,
            background_noise: 0.7,
            seed: 11,
        }
    }

    #[test]
    fn trajectories_are_thin_and_connected() {
        let p = params();
        for o in p.line_offsets() {
            let t = trajectory(&p, o);
            assert!(t.len() >= 60);
            for pair in t.windows(2) {
                let dy = pair[0].0.abs_diff(pair[1].0);
                let dx = pair[0].1.abs_diff(pair[1].1);
                assert!(dy <= 1 && dx <= 1 && dy + dx >= 1);
            }
        }
    }

    #[test]
    fn gaps_sit_on_trajectories() {
        let p = params();
        let s = gen_crop_scene(&p).unwrap();
        assert!(s.masks[1].count() > 0);
        for (y, x) in s.masks[1].foreground() {
            assert!(p.distance_to_lines(y, x) <= 1.0);
            assert_eq!(s.masks[0].get(y, x), 0);
        }
    }

    #[test]
    fn gap_free_scene() {
        let p = CropSceneParams {
            gap_count: 0,
            ..params()
        };
        let s = gen_crop_scene(&p).unwrap();
        assert_eq!(s.masks[1].count(), 0);
        assert!(s.masks[0].count() > 0);
    }

    #[test]
    fn rejects_bad_geometry() {
        let p = CropSceneParams {
            line_spacing: 4.0,
            ..params()
        };
        assert!(matches!(gen_crop_scene(&p), Err(Error::Params(_))));
        let p = CropSceneParams {
            height: 50,
            ..params()
        };
        assert!(gen_crop_scene(&p).is_err());
    }
}
