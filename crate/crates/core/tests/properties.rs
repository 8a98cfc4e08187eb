use std::path::Path;

use proptest::prelude::*;

use mtlseg::checkpoint::{decode, encode};
use mtlseg::data::io::{
    decode_binary_pgm, decode_ppm, encode_binary_pgm, encode_ppm, format_meta, parse_meta,
};
use mtlseg::data::morph::dilate_mask;
use mtlseg::metrics::{detection_counts, seg_metrics};
use mtlseg::optim::poly_lr;
use mtlseg::params::ParamStore;
use mtlseg::raster::{Mask, RgbImage};
use mtlseg::skeleton::{count_components8, has_full_2x2, skeletonize};
use mtlseg::tiling::{make_grid, merge_priority, priority_labels};
use mtlseg::Tensor;

fn mask(max: usize) -> impl Strategy<Value = Mask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |v| Mask::from_raw(h, w, v.into_iter().map(u8::from).collect()).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let m = move || {
            prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| {
                Mask::from_raw(h, w, v.into_iter().map(u8::from).collect()).unwrap()
            })
        };
        (m(), m())
    })
}

/// Sparse blobs: random rectangles on an empty frame.
fn blobs(size: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec((0..size, 0..size, 1..8usize, 1..8usize), 1..5).prop_map(move |rects| {
        Mask::from_fn(size, size, |y, x| {
            rects
                .iter()
                .any(|&(r, c, h, w)| (r..r + h).contains(&y) && (c..c + w).contains(&x))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dilation_matches_definition(m in mask(16), size in 1usize..8) {
        let d = dilate_mask(&m, size);
        let lo = (size as isize - 1) / 2;
        let hi = size as isize - 1 - lo;
        for y in 0..m.height as isize {
            for x in 0..m.width as isize {
                let hit = (-hi..=lo).any(|dy| (-hi..=lo).any(|dx| m.get_or_zero(y + dy, x + dx) != 0));
                prop_assert_eq!(d.get(y as usize, x as usize) != 0, hit);
            }
        }
    }

    #[test]
    fn dilation_is_extensive_and_monotone((a, b) in mask_pair(16)) {
        let small = a.intersection(&b).unwrap();
        prop_assert!(small.is_subset_of(&dilate_mask(&small, 6)));
        prop_assert!(dilate_mask(&small, 6).is_subset_of(&dilate_mask(&a, 6)));
    }

    #[test]
    fn seg_scores_are_consistent((p, g) in mask_pair(12)) {
        let s = seg_metrics(&p, &g, 1).unwrap();
        let r = seg_metrics(&g, &p, 1).unwrap();
        prop_assert_eq!(s.precision, r.recall);
        prop_assert_eq!(s.recall, r.precision);
        prop_assert_eq!(s.f1, r.f1);
        prop_assert!(s.iou <= s.f1 + 1e-12);
        prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        let same = seg_metrics(&g, &g, 1).unwrap();
        prop_assert_eq!(same.f1, 1.0);
        prop_assert_eq!(same.iou, 1.0);
    }

    #[test]
    fn detection_grows_with_tolerance((p, g) in mask_pair(12)) {
        let near = detection_counts(&p, &g, 1.0).unwrap();
        let far = detection_counts(&p, &g, 3.0).unwrap();
        prop_assert!(far.tp >= near.tp);
        prop_assert!(far.fn_ <= near.fn_);
        prop_assert_eq!(near.tp + near.fp, near.pred);
        prop_assert_eq!(near.pred as usize, p.count());
        prop_assert_eq!(near.gt as usize, g.count());
    }

    #[test]
    fn skeleton_properties(m in blobs(24)) {
        let s = skeletonize(&m);
        prop_assert!(s.is_subset_of(&m));
        prop_assert!(!has_full_2x2(&s));
        prop_assert_eq!(count_components8(&s), count_components8(&m));
        prop_assert_eq!(skeletonize(&s), s);
    }

    #[test]
    fn tiled_merge_reproduces_full_labels(
        (line, gap) in mask_pair(40).prop_filter("fits a patch", |(a, _)| a.height >= 8 && a.width >= 8)
    ) {
        let full = priority_labels(&[line.clone(), gap.clone()]).unwrap();
        let grid = make_grid(line.height, line.width, 8).unwrap();
        let preds: Vec<Vec<Mask>> = grid
            .origins
            .iter()
            .map(|&(r, c)| vec![line.crop(r, c, 8, 8), gap.crop(r, c, 8, 8)])
            .collect();
        prop_assert_eq!(&merge_priority(&preds, &grid).unwrap(), &full);
        // every pixel covered, and every gap pixel wins
        for (i, &v) in full.data.iter().enumerate() {
            prop_assert_eq!(v == 2, gap.data[i] != 0);
        }
    }

    #[test]
    fn image_io_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let data: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let img = RgbImage::from_raw(h, w, data).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap(), img);
    }

    #[test]
    fn mask_io_round_trip(m in mask(12)) {
        prop_assert_eq!(decode_binary_pgm(&encode_binary_pgm(&m), Path::new("x")).unwrap(), m);
    }

    #[test]
    fn meta_round_trip(kv in prop::collection::vec(("[a-z_]{1,8}", "[a-zA-Z0-9.+-]{0,10}"), 0..6)) {
        let meta: Vec<(String, String)> = kv;
        prop_assert_eq!(parse_meta(&format_meta(&meta), Path::new("x")).unwrap(), meta);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        tensors in prop::collection::vec(
            prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), prop::collection::vec(any::<u32>(), n))
            }),
            1..5,
        )
    ) {
        let mut store = ParamStore::<f32>::new();
        for (i, (shape, bits)) in tensors.iter().enumerate() {
            let data = bits.iter().map(|&b| f32::from_bits(b)).collect();
            store.insert(&format!("p{i}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let bytes = encode(&store);
        let back = decode(&bytes, Path::new("x")).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back.names(), store.names());
    }

    #[test]
    fn poly_lr_decays_to_zero(total in 1usize..500, power in 0.5f64..3.0) {
        prop_assert_eq!(poly_lr(0, total, 6e-5, power), 6e-5);
        prop_assert_eq!(poly_lr(total, total, 6e-5, power), 0.0);
        for s in 1..=total {
            prop_assert!(poly_lr(s, total, 6e-5, power) <= poly_lr(s - 1, total, 6e-5, power));
        }
    }
}
