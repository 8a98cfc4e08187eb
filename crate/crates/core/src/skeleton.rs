//! Topology-preserving thinning to 1-px skeletons.
//!
//! Candidates are chosen with the two directional Zhang–Suen
//! sub-iterations, but each is deleted sequentially and only while it is
//! still a simple point (8-connected foreground, 4-connected background)
//! and not a line end. A final pass removes simple pixels from any 2×2
//! block that survived. Iterates to a fixed point.

use crate::raster::Mask;

/// Neighbour offsets P2..P9, clockwise from north.
const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

fn ring(m: &Mask, y: usize, x: usize) -> [bool; 8] {
    std::array::from_fn(|i| {
        let (dy, dx) = RING[i];
        m.get_or_zero(y as isize + dy, x as isize + dx) != 0
    })
}

/// Foreground 8-components and 4-adjacent background 4-components within
/// the 3×3 neighbourhood.
fn topological_numbers(n: &[bool; 8]) -> (usize, usize) {
    let mut fg_seen = [false; 8];
    let mut fg = 0;
    for s in 0..8 {
        if !n[s] || fg_seen[s] {
            continue;
        }
        fg += 1;
        let mut stack = vec![s];
        fg_seen[s] = true;
        while let Some(i) = stack.pop() {
            for j in 0..8 {
                if n[j] && !fg_seen[j] && ring_adjacent8(i, j) {
                    fg_seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    let mut bg_seen = [false; 8];
    let mut bg = 0;
    for s in (0..8).step_by(2) {
        if n[s] || bg_seen[s] {
            continue;
        }
        bg += 1;
        let mut stack = vec![s];
        bg_seen[s] = true;
        while let Some(i) = stack.pop() {
            for j in [(i + 1) % 8, (i + 7) % 8] {
                if !n[j] && !bg_seen[j] {
                    bg_seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    (fg, bg)
}

/// 8-adjacency between two ring positions.
fn ring_adjacent8(i: usize, j: usize) -> bool {
    let (a, b) = (RING[i], RING[j]);
    i != j && (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
}

fn is_simple(n: &[bool; 8]) -> bool {
    topological_numbers(n) == (1, 1)
}

fn count(n: &[bool; 8]) -> usize {
    n.iter().filter(|&&b| b).count()
}

/// Zhang–Suen candidate test for sub-iteration `pass` (0 or 1).
fn zs_candidate(n: &[bool; 8], pass: usize) -> bool {
    let b = count(n);
    if !(2..=6).contains(&b) {
        return false;
    }
    let transitions = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
    if transitions != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = *n;
    if pass == 0 {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// Deletes `(y, x)` if it is still removable in the current image.
fn try_delete(m: &mut Mask, y: usize, x: usize) -> bool {
    let n = ring(m, y, x);
    if count(&n) >= 2 && is_simple(&n) {
        m.set(y, x, 0);
        true
    } else {
        false
    }
}

fn zs_pass(m: &mut Mask, pass: usize) -> bool {
    let candidates: Vec<(usize, usize)> = m
        .foreground()
        .filter(|&(y, x)| zs_candidate(&ring(m, y, x), pass))
        .collect();
    let mut changed = false;
    for (y, x) in candidates {
        changed |= try_delete(m, y, x);
    }
    changed
}

fn block_pass(m: &mut Mask) -> bool {
    let mut changed = false;
    for y in 0..m.height.saturating_sub(1) {
        for x in 0..m.width.saturating_sub(1) {
            let cells = [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)];
            if cells.iter().all(|&(a, b)| m.get(a, b) != 0) {
                for (a, b) in cells {
                    if try_delete(m, a, b) {
                        changed = true;
                        break;
                    }
                }
            }
        }
    }
    changed
}

/// 1-px skeleton of a binary mask.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut m = Mask::from_fn(mask.height, mask.width, |y, x| mask.get(y, x) != 0);
    loop {
        let mut changed = false;
        changed |= zs_pass(&mut m, 0);
        changed |= zs_pass(&mut m, 1);
        if !changed {
            changed |= block_pass(&mut m);
        }
        if !changed {
            return m;
        }
    }
}

const EDGE: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Labels 8-connected foreground components; returns (labels, count).
/// Labels start at 1, background is 0.
pub fn label_components8(m: &Mask) -> (Vec<u32>, usize) {
    label_components(m, &RING)
}

fn label_components(m: &Mask, nbrs: &[(isize, isize)]) -> (Vec<u32>, usize) {
    let (h, w) = (m.height, m.width);
    let mut labels = vec![0u32; h * w];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n as u32;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in nbrs {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if m.data[j] != 0 && labels[j] == 0 {
                    labels[j] = n as u32;
                    stack.push(j);
                }
            }
        }
    }
    (labels, n)
}

pub fn count_components8(m: &Mask) -> usize {
    label_components8(m).1
}

pub fn count_components4(m: &Mask) -> usize {
    label_components(m, &EDGE).1
}

/// Whether any 2×2 window is entirely foreground.
pub fn has_full_2x2(m: &Mask) -> bool {
    (0..m.height.saturating_sub(1)).any(|y| {
        (0..m.width.saturating_sub(1)).any(|x| {
            m.get(y, x) != 0
                && m.get(y, x + 1) != 0
                && m.get(y + 1, x) != 0
                && m.get(y + 1, x + 1) != 0
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_point_classification() {
        // end of a horizontal run: one neighbour east
        let mut n = [false; 8];
        n[2] = true;
        assert_eq!(topological_numbers(&n), (1, 1));
        // bridge between west and east
        n[6] = true;
        assert_eq!(topological_numbers(&n), (2, 2));
        assert!(!is_simple(&[false; 8]));
        // interior pixel
        assert_eq!(topological_numbers(&[true; 8]), (1, 0));
    }

    #[test]
    fn trivial_masks() {
        assert_eq!(skeletonize(&Mask::new(5, 5)).count(), 0);
        let mut m = Mask::new(5, 5);
        m.set(2, 2, 1);
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn thick_bar_becomes_centerline() {
        let m = Mask::from_fn(20, 50, |y, x| (7..13).contains(&y) && (5..45).contains(&x));
        let s = skeletonize(&m);
        assert!(!has_full_2x2(&s));
        assert_eq!(count_components8(&s), 1);
        let cols: Vec<usize> = s.foreground().map(|(_, x)| x).collect();
        let span = cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1;
        assert!((37..=43).contains(&span), "span {span}");
        for x in 10..40 {
            assert_eq!((0..20).filter(|&y| s.get(y, x) != 0).count(), 1, "col {x}");
        }
    }

    #[test]
    fn square_keeps_one_component() {
        let m = Mask::from_fn(6, 6, |y, x| (1..5).contains(&y) && (1..5).contains(&x));
        let s = skeletonize(&m);
        assert_eq!(count_components8(&s), 1);
        assert!(!has_full_2x2(&s));
        assert!(s.is_subset_of(&m));
    }

    #[test]
    fn ring_keeps_its_hole() {
        let m = Mask::from_fn(12, 12, |y, x| {
            let inner = (4..8).contains(&y) && (4..8).contains(&x);
            (1..11).contains(&y) && (1..11).contains(&x) && !inner
        });
        let s = skeletonize(&m);
        let bg = Mask::from_fn(12, 12, |y, x| s.get(y, x) == 0);
        assert_eq!(count_components8(&s), 1);
        // background still splits into outside and the hole
        assert_eq!(count_components4(&bg), 2);
    }
}
