mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use safnet::metrics::*;

#[test]
fn random_pairs_match_direct_counting() {
    let mut r = rng(17);
    let pred: Vec<u32> = (0..1000).map(|_| r.gen_range(0..5)).collect();
    let gt: Vec<u32> = (0..1000).map(|_| r.gen_range(0..5)).collect();
    let cm = confusion(&pred, &gt, 5).unwrap();
    for g in 0..5u32 {
        for p in 0..5u32 {
            let direct = pred.iter().zip(&gt).filter(|(&a, &b)| a == p && b == g).count() as u64;
            assert_eq!(cm.counts[g as usize][p as usize], direct);
        }
    }
    assert_eq!(cm.total(), 1000);
}

proptest! {
    #[test]
    fn miou_is_bounded_and_one_only_when_diagonal(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..200),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let cm = confusion(&pred, &gt, 4).unwrap();
        let s = iou_scores(&cm);
        prop_assert!((0.0..=1.0).contains(&s.miou));
        let diagonal = pred == gt;
        prop_assert_eq!(s.miou == 1.0, diagonal);
        for (c, iou) in s.per_class.iter().enumerate() {
            let present = pred.contains(&(c as u32)) || gt.contains(&(c as u32));
            prop_assert_eq!(iou.is_some(), present);
        }
    }
}
