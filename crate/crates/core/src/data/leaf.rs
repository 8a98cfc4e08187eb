//! Leaf scenes: a perturbed ellipse with holes and bites taken out.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::texture::{value_noise, Palette};
use super::Sample;
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

pub const TASKS: [&str; 2] = ["leaf", "defoliation"];

/// Number of boundary harmonics.
const HARMONICS: usize = 3;

const CLUTTER: Palette = Palette {
    base: [150.0, 138.0, 118.0],
    smooth: 40.0,
    grain: 14.0,
};
const LEAF: Palette = Palette {
    base: [64.0, 150.0, 56.0],
    smooth: 24.0,
    grain: 10.0,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LeafSceneParams {
    pub height: usize,
    pub width: usize,
    /// Semi-axes of the unperturbed ellipse.
    pub axis_major: f64,
    pub axis_minor: f64,
    pub angle: f64,
    /// Relative radial perturbation of the boundary.
    pub boundary_amplitude: f64,
    pub hole_count: usize,
    pub hole_radius: f64,
    pub bite_count: usize,
    pub bite_radius: f64,
    pub clutter: f32,
    pub seed: u64,
}

impl LeafSceneParams {
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        let s = h.min(w) as f64;
        LeafSceneParams {
            height: h,
            width: w,
            axis_major: rng.random_range(0.28..0.38) * s,
            axis_minor: rng.random_range(0.16..0.24) * s,
            angle: rng.random_range(0.0..PI),
            boundary_amplitude: rng.random_range(0.02..0.1),
            hole_count: rng.random_range(0..=3),
            hole_radius: rng.random_range(0.03..0.06) * s,
            bite_count: rng.random_range(0..=3),
            bite_radius: rng.random_range(0.05..0.1) * s,
            clutter: rng.random_range(0.4..1.0),
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
        if !(self.axis_minor > 0.0) || !(self.axis_major >= self.axis_minor) {
            return bad(format!(
                "need 0 < minor <= major axis, got {} and {}",
                self.axis_minor, self.axis_major
            ));
        }
        if !(0.0..0.5).contains(&self.boundary_amplitude) {
            return bad(format!(
                "boundary amplitude {} outside [0, 0.5)",
                self.boundary_amplitude
            ));
        }
        if (self.hole_count > 0 && !(self.hole_radius > 0.0))
            || (self.bite_count > 0 && !(self.bite_radius > 0.0))
        {
            return bad("hole and bite radii must be positive".into());
        }
        // Worst-case reach of the perturbed outline from the centre.
        let reach = self.axis_major * (1.0 + self.boundary_amplitude);
        let (cy, cx) = self.centre();
        if reach > cy || reach > cx {
            return bad(format!(
                "leaf reach {reach:.1} px does not fit a {}x{} frame",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn centre(&self) -> (f64, f64) {
        (
            (self.height as f64 - 1.0) / 2.0,
            (self.width as f64 - 1.0) / 2.0,
        )
    }

    fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("generator".into(), "leaf".into()),
            ("seed".into(), self.seed.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("axis_major".into(), self.axis_major.to_string()),
            ("axis_minor".into(), self.axis_minor.to_string()),
            ("angle".into(), self.angle.to_string()),
            (
                "boundary_amplitude".into(),
                self.boundary_amplitude.to_string(),
            ),
            ("hole_count".into(), self.hole_count.to_string()),
            ("hole_radius".into(), self.hole_radius.to_string()),
            ("bite_count".into(), self.bite_count.to_string()),
            ("bite_radius".into(), self.bite_radius.to_string()),
            ("clutter".into(), self.clutter.to_string()),
        ]
    }
}

struct Outline {
    coeff: [f64; HARMONICS],
    phase: [f64; HARMONICS],
}

impl Outline {
    /// Radial scale of the boundary at polar angle `theta`.
    fn radius(&self, theta: f64, amplitude: f64) -> f64 {
        let wobble: f64 = (0..HARMONICS)
            .map(|k| self.coeff[k] * ((k as f64 + 2.0) * theta + self.phase[k]).sin())
            .sum();
        1.0 + amplitude * wobble / HARMONICS as f64
    }
}

fn disc(mask: &mut Mask, cy: f64, cx: f64, r: f64) {
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil() as usize);
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil() as usize);
    for y in y0..=y1.min(mask.height - 1) {
        for x in x0..=x1.min(mask.width - 1) {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                mask.set(y, x, 1);
            }
        }
    }
}

/// Renders a leaf scene. Task 0 is the visible leaf, task 1 the
/// defoliated part of the ideal outline; together they tile it exactly.
pub fn gen_leaf_scene(p: &LeafSceneParams) -> Result<Sample> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (h, w) = (p.height, p.width);
    let (cy, cx) = p.centre();
    let outline = Outline {
        coeff: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        phase: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
    };
    let (sa, ca) = p.angle.sin_cos();
    // Leaf-frame coordinates: u along the major axis, v along the minor.
    let to_leaf = |y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        (dx * ca + dy * sa, -dx * sa + dy * ca)
    };
    let from_leaf = |u: f64, v: f64| (cy + u * sa + v * ca, cx + u * ca - v * sa);
    let ideal = Mask::from_fn(h, w, |y, x| {
        let (u, v) = to_leaf(y as f64, x as f64);
        let (a, b) = (u / p.axis_major, v / p.axis_minor);
        let rho = (a * a + b * b).sqrt();
        rho <= outline.radius(b.atan2(a), p.boundary_amplitude)
    });

    let mut cut = Mask::new(h, w);
    let inside: Vec<(usize, usize)> = ideal.foreground().collect();
    for _ in 0..p.hole_count {
        if inside.is_empty() {
            break;
        }
        let (y, x) = inside[rng.random_range(0..inside.len())];
        disc(&mut cut, y as f64, x as f64, p.hole_radius);
    }
    for _ in 0..p.bite_count {
        let theta: f64 = rng.random_range(0.0..TAU);
        let rho = outline.radius(theta, p.boundary_amplitude);
        let (y, x) = from_leaf(
            rho * theta.cos() * p.axis_major,
            rho * theta.sin() * p.axis_minor,
        );
        disc(&mut cut, y, x, p.bite_radius);
    }
    let defoliation = cut.intersection(&ideal)?;
    let leaf = Mask::from_fn(h, w, |y, x| {
        ideal.get(y, x) != 0 && defoliation.get(y, x) == 0
    });

    let clutter_tex = value_noise(h, w, 7, &mut rng);
    let leaf_tex = value_noise(h, w, 5, &mut rng);
    let mut image = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = if leaf.get(y, x) != 0 {
                let (_, v) = to_leaf(y as f64, x as f64);
                let mut c = LEAF.shade(leaf_tex[i], 1.0, &mut rng);
                if v.abs() < 0.8 {
                    // midrib
                    c = [c[0].saturating_add(30), c[1].saturating_add(30), c[2]];
                }
                c
            } else {
                CLUTTER.shade(clutter_tex[i], p.clutter, &mut rng)
            };
            image.set(y, x, px);
        }
    }
    Ok(Sample {
        image,
        masks: vec![leaf, defoliation],
        meta: p.meta(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> LeafSceneParams {
        LeafSceneParams {
            height: 64,
            width: 64,
            axis_major: 22.0,
            axis_minor: 13.0,
            angle: 0.4,
            boundary_amplitude: 0.08,
            hole_count: 2,
            hole_radius: 3.0,
            bite_count: 2,
            bite_radius: 5.0,
            clutter: 0.7,
            seed: 3,
        }
    }

    #[test]
    fn leaf_and_defoliation_partition_the_outline() {
        let s = gen_leaf_scene(&params()).unwrap();
        let (leaf, def) = (&s.masks[0], &s.masks[1]);
        assert_eq!(leaf.intersection(def).unwrap().count(), 0);
        assert!(def.count() > 0);
        let bare = gen_leaf_scene(&LeafSceneParams {
            hole_count: 0,
            bite_count: 0,
            ..params()
        })
        .unwrap();
        assert_eq!(bare.masks[1].count(), 0);
        // same seed, same outline
        assert_eq!(leaf.union(def).unwrap(), bare.masks[0]);
    }

    #[test]
    fn leaf_must_fit() {
        let p = LeafSceneParams {
            axis_major: 40.0,
            ..params()
        };
        assert!(matches!(gen_leaf_scene(&p), Err(Error::Params(_))));
    }
}
