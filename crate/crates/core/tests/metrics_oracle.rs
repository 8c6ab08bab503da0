//! Boundary metrics against an O(n^2) all-pairs oracle, plus algebraic
//! properties of the overlap metrics.

mod common;

use common::oracles::{brute_force, random_mask};
use fliplearn::imaging::Mask;
use fliplearn::metrics::{boundary_metrics, overlap_metrics};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn boundary_metrics_match_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let w = rng.random_range(1..=12);
        let h = rng.random_range(1..=12);
        let a = random_mask(&mut rng, w, h);
        let b = random_mask(&mut rng, w, h);
        assert_eq!(boundary_metrics(&a, &b).unwrap(), brute_force(&a, &b));
    }
}

fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(0u8..2, w * h),
            proptest::collection::vec(0u8..2, w * h),
        )
            .prop_map(move |(a, b)| (Mask::from_values(w, h, a).unwrap(), Mask::from_values(w, h, b).unwrap()))
    })
}

fn translate(m: &Mask, dx: usize, dy: usize) -> Mask {
    let mut out = Mask::empty(m.width() + dx, m.height() + dy);
    for y in 0..m.height() {
        for x in 0..m.width() {
            out.set(x + dx, y + dy, m.get(x, y));
        }
    }
    out
}

proptest! {
    #[test]
    fn jaccard_dice_identity((a, b) in mask_strategy()) {
        let o = overlap_metrics(&a, &b).unwrap();
        let d = o.dice / 100.0;
        prop_assert!((o.jac / 100.0 - d / (2.0 - d)).abs() < 1e-9);
        prop_assert!(o.jac <= o.dice + 1e-12);
    }

    #[test]
    fn metrics_are_symmetric((a, b) in mask_strategy()) {
        prop_assert_eq!(overlap_metrics(&a, &b).unwrap(), overlap_metrics(&b, &a).unwrap());
        if !a.is_empty() && !b.is_empty() {
            let (h1, s1) = boundary_metrics(&a, &b).unwrap();
            let (h2, s2) = boundary_metrics(&b, &a).unwrap();
            prop_assert_eq!(h1, h2);
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_translation_invariant((a, b) in mask_strategy(), dx in 0usize..4, dy in 0usize..4) {
        // Translate inside a padded canvas so no boundary pixel touches a new edge.
        let (pa, pb) = (translate(&a, 1, 1), translate(&b, 1, 1));
        let pad = |m: &Mask| { let mut o = Mask::empty(m.width() + 6, m.height() + 6); for y in 0..m.height() { for x in 0..m.width() { o.set(x, y, m.get(x, y)); } } o };
        let (a0, b0) = (pad(&pa), pad(&pb));
        let (a1, b1) = (pad(&translate(&pa, dx, dy)), pad(&translate(&pb, dx, dy)));
        let (a1, b1) = (crop_to(&a1, a0.width(), a0.height()), crop_to(&b1, b0.width(), b0.height()));
        prop_assert_eq!(overlap_metrics(&a0, &b0).unwrap(), overlap_metrics(&a1, &b1).unwrap());
        if !a.is_empty() && !b.is_empty() {
            let (h0, s0) = boundary_metrics(&a0, &b0).unwrap();
            let (h1, s1) = boundary_metrics(&a1, &b1).unwrap();
            prop_assert_eq!(h0, h1);
            prop_assert!((s0 - s1).abs() < 1e-12);
        }
    }
}

fn crop_to(m: &Mask, w: usize, h: usize) -> Mask {
    let mut o = Mask::empty(w, h);
    for y in 0..h.min(m.height()) {
        for x in 0..w.min(m.width()) {
            o.set(x, y, m.get(x, y));
        }
    }
    o
}
