use proptest::prelude::*;
use sge_core::mask::{gen_center_mask, gen_irregular_mask, hole_fraction, irregular_strokes, IrregularMaskSpec};
use sge_core::scene::{gen_scene, Sample, SceneSpec};
use sge_core::CoreError;

fn zero_rect(m: &[f32], w: usize) -> Option<(usize, usize, usize, usize)> {
    let zeros: Vec<(usize, usize)> = m
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 0.0)
        .map(|(i, _)| (i / w, i % w))
        .collect();
    if zeros.is_empty() {
        return None;
    }
    let r0 = zeros.iter().map(|z| z.0).min()?;
    let r1 = zeros.iter().map(|z| z.0).max()? + 1;
    let c0 = zeros.iter().map(|z| z.1).min()?;
    let c1 = zeros.iter().map(|z| z.1).max()? + 1;
    assert_eq!(zeros.len(), (r1 - r0) * (c1 - c0), "holes form a full rectangle");
    Some((r0, r1, c0, c1))
}

#[test]
fn center_hole_256_matches_half_side_ratio() {
    let m = gen_center_mask((256, 256), (128, 128)).unwrap();
    assert_eq!(zero_rect(m.data(), 256), Some((64, 192, 64, 192)));
}

#[test]
fn center_hole_64() {
    let m = gen_center_mask((64, 64), (32, 32)).unwrap();
    assert_eq!(zero_rect(m.data(), 64), Some((16, 48, 16, 48)));
}

#[test]
fn empty_center_hole_is_all_ones() {
    let m = gen_center_mask((16, 16), (0, 0)).unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));
}

#[test]
fn odd_remainder_rounds_toward_top_left() {
    let m = gen_center_mask((9, 9), (4, 4)).unwrap();
    assert_eq!(zero_rect(m.data(), 9), Some((2, 6, 2, 6)));
}

#[test]
fn oversized_hole_is_config_error() {
    assert!(matches!(gen_center_mask((8, 8), (9, 2)), Err(CoreError::Config(_))));
}

const MEASURED_PRESENCE: [usize; 4] = [1000, 1000, 828, 843];

#[test]
fn every_class_appears_in_most_scenes() {
    // Generator is deterministic, so the measured counts are pinned exactly.
    let mut present = [0usize; 4];
    for seed in 0..1000 {
        let s = gen_scene(&SceneSpec::new(seed, (64, 64), 4)).unwrap();
        for (c, n) in present.iter_mut().enumerate() {
            if s.labels.contains(&(c as u8)) {
                *n += 1;
            }
        }
    }
    assert_eq!(present, MEASURED_PRESENCE);
    for (c, &n) in present.iter().enumerate() {
        assert!(n >= 600, "class {c} present in only {n}/1000 scenes");
    }
}

#[test]
fn class_count_outside_range_is_config_error() {
    for k in [0, 1, 9] {
        assert!(matches!(gen_scene(&SceneSpec::new(1, (16, 16), k)), Err(CoreError::Config(_))));
    }
}

#[test]
fn irregular_hole_fraction_is_clamped() {
    let spec = IrregularMaskSpec::for_size((64, 64));
    for seed in 0..500 {
        let m = gen_irregular_mask(seed, (64, 64), &spec).unwrap();
        let f = hole_fraction(m.data());
        assert!((0.10..=0.50).contains(&f), "seed {seed}: fraction {f}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn irregular_mask_is_deterministic() {
    let spec = IrregularMaskSpec::for_size((64, 64));
    assert_eq!(
        gen_irregular_mask(9, (64, 64), &spec).unwrap(),
        gen_irregular_mask(9, (64, 64), &spec).unwrap()
    );
}

/// Pixel centre inside the union of two end discs and the rectangle spanned
/// by the segment.
fn in_capsule(px: f64, py: f64, a: (f64, f64), b: (f64, f64), r: f64) -> bool {
    let disc = |c: (f64, f64)| (px - c.0).hypot(py - c.1) <= r;
    if disc(a) || disc(b) {
        return true;
    }
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    if len == 0.0 {
        return false;
    }
    let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
    let along = (px - a.0) * ux + (py - a.1) * uy;
    let across = ((px - a.0) * -uy + (py - a.1) * ux).abs();
    (0.0..=len).contains(&along) && across <= r
}

#[test]
fn single_stroke_matches_capsule_oracle() {
    let spec = IrregularMaskSpec {
        strokes: 1..=1,
        brush: 3..=3,
        vertices: 2..=2,
        hole_fraction: 0.0..=1.0,
    };
    for seed in 0..50 {
        let strokes = irregular_strokes(seed, 0, (32, 32), &spec);
        assert_eq!(strokes.len(), 1);
        let s = &strokes[0];
        assert_eq!(s.points.len(), 2);
        let m = gen_irregular_mask(seed, (32, 32), &spec).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let hole = in_capsule(x as f64 + 0.5, y as f64 + 0.5, s.points[0], s.points[1], s.width / 2.0);
                assert_eq!(m.data()[y * 32 + x] == 0.0, hole, "seed {seed} pixel ({y},{x})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sample_invariants(seed in any::<u64>(), k in 2usize..=8, hole in 0usize..=16) {
        let scene = gen_scene(&SceneSpec::new(seed, (16, 16), k)).unwrap();
        let s = Sample::new(&scene, gen_center_mask((16, 16), (hole, hole)).unwrap()).unwrap();
        let hw = 256;
        prop_assert!(s.hole_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for p in 0..hw {
            let sum: f32 = (0..k).map(|c| s.seg_onehot.data()[c * hw + p]).sum();
            prop_assert_eq!(sum, 1.0);
            prop_assert_eq!(s.seg_onehot.data()[s.labels()[p] as usize * hw + p], 1.0);
        }
        for i in 0..3 * hw {
            let m = s.hole_mask.data()[i % hw];
            let expected = if m == 0.0 { 0.0 } else { s.ground_truth.data()[i] };
            prop_assert_eq!(s.corrupted.data()[i], expected);
        }
        prop_assert_eq!(gen_scene(&SceneSpec::new(seed, (16, 16), k)).unwrap(), scene);
    }
}
