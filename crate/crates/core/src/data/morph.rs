//! Binary dilation with a square structuring element.

use crate::raster::Mask;

/// Structuring-element size used for thin training labels.
pub const THIN_LABEL_ELEMENT: usize = 6;

/// Anchor of a `size`×`size` element: the element covers offsets
/// `-anchor ..= size-1-anchor` around each foreground pixel.
pub fn element_anchor(size: usize) -> usize {
    size.saturating_sub(1) / 2
}

/// Dilates `mask` with a `size`×`size` square. Out-of-frame pixels count
/// as background.
pub fn dilate_mask(mask: &Mask, size: usize) -> Mask {
    if size <= 1 {
        return Mask::from_fn(mask.height, mask.width, |y, x| mask.get(y, x) != 0);
    }
    let lo = element_anchor(size);
    let hi = size - 1 - lo;
    let (h, w) = (mask.height, mask.width);
    // The square is separable: dilate along rows, then columns.
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 0 {
                let a = x.saturating_sub(lo);
                let b = (x + hi).min(w - 1);
                rows[y * w + a..=y * w + b].fill(1);
            }
        }
    }
    let mut out = Mask::new(h, w);
    for x in 0..w {
        for y in 0..h {
            if rows[y * w + x] != 0 {
                let a = y.saturating_sub(lo);
                let b = (y + hi).min(h - 1);
                for yy in a..=b {
                    out.set(yy, x, 1);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_block() {
        let mut m = Mask::new(20, 20);
        m.set(10, 10, 1);
        let d = dilate_mask(&m, 6);
        assert_eq!(d.count(), 36);
        for y in 0..20 {
            for x in 0..20 {
                let inside = (8..=13).contains(&y) && (8..=13).contains(&x);
                assert_eq!(d.get(y, x) == 1, inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn clipped_at_border() {
        let mut m = Mask::new(5, 5);
        m.set(0, 4, 1);
        let d = dilate_mask(&m, 6);
        // rows 0..=3, cols 2..=4
        assert_eq!(d.count(), 4 * 3);
        assert_eq!(dilate_mask(&Mask::new(4, 4), 6).count(), 0);
    }
}
