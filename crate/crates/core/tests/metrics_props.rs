use proptest::prelude::*;
use segfuse::image::BinaryMask;
use segfuse::metrics::{
    boundary_f, build_report, davis_f, davis_j, iou, precision, sequence_stats, ClipEvaluation, MetricsReport,
};

const SIDE: usize = 16;

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), SIDE * SIDE)
        .prop_map(|bits| BinaryMask::new(SIDE, SIDE, bits.into_iter().map(u8::from).collect()).unwrap())
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let (mut agree, mut inter, mut union) = (0, 0, 0);
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        let (p, g) = (p != 0, g != 0);
        agree += usize::from(p == g);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    (agree, inter, union)
}

fn rect(x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
    BinaryMask::from_fn(32, 32, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

proptest! {
    #[test]
    fn precision_and_iou_match_pixel_counts(pred in mask_strategy(), gt in mask_strategy()) {
        let (agree, inter, union) = counts(&pred, &gt);
        let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert!((precision(&pred, &gt).unwrap() - agree as f64 / (SIDE * SIDE) as f64).abs() < 1e-12);
        prop_assert!((iou(&pred, &gt).unwrap() - j).abs() < 1e-12);
    }

    #[test]
    fn precision_is_invariant_under_relabeling(pred in mask_strategy(), gt in mask_strategy()) {
        let a = precision(&pred, &gt).unwrap();
        prop_assert_eq!(a, precision(&pred.inverted(), &gt.inverted()).unwrap());
        prop_assert_eq!(a, precision(&gt, &pred).unwrap());
        prop_assert_eq!(iou(&pred, &gt).unwrap(), iou(&gt, &pred).unwrap());
    }

    #[test]
    fn iou_of_a_mask_with_itself_is_one(m in mask_strategy()) {
        prop_assert_eq!(iou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn iou_grows_with_intersection_at_fixed_union(w in 4usize..16, shift in 1usize..4) {
        // gt fixed, prediction slides into it while staying inside the union
        let gt = rect(8, 8, w, 8);
        let union = rect(8, 8, w + shift, 8);
        let far = rect(8 + shift, 8, w, 8);
        let mut near = far.clone();
        near.set(8, 8, true);
        let both = |m: &BinaryMask| counts(m, &gt).2;
        prop_assert_eq!(both(&far), union.count());
        prop_assert_eq!(both(&near), union.count());
        prop_assert!(iou(&near, &gt).unwrap() > iou(&far, &gt).unwrap());
    }

    #[test]
    fn constant_quality_has_zero_decay(q in 0.0f64..=1.0, n in 4usize..40) {
        prop_assert_eq!(sequence_stats(&vec![q; n]).unwrap().decay, Some(0.0));
    }

    #[test]
    fn constant_masks_have_zero_j_and_f_decay(pred in mask_strategy(), gt in mask_strategy(), n in 5usize..12) {
        let p = vec![pred; n];
        let g = vec![gt; n];
        prop_assert_eq!(davis_j(&p, &g).unwrap().decay, Some(0.0));
        prop_assert_eq!(davis_f(&p, &g, 1).unwrap().decay, Some(0.0));
    }

    #[test]
    fn unbounded_tolerance_gives_perfect_f(pred in mask_strategy(), gt in mask_strategy()) {
        prop_assume!(!pred.is_empty() && !gt.is_empty());
        prop_assert_eq!(boundary_f(&pred, &gt, 2 * SIDE).unwrap(), 1.0);
    }

    #[test]
    fn recall_counts_strictly_above_half(scores in prop::collection::vec(0.0f64..=1.0, 1..30)) {
        let expected = scores.iter().filter(|&&s| s > 0.5).count() as f64 / scores.len() as f64;
        prop_assert_eq!(sequence_stats(&scores).unwrap().recall, expected);
    }
}

#[test]
fn report_roundtrips_through_json() {
    let gt: Vec<BinaryMask> = (0..6).map(|t| rect(4 + t, 5, 9, 7)).collect();
    let pred: Vec<BinaryMask> = (0..6).map(|t| rect(5 + t, 5, 9, 8)).collect();
    let clips = vec![
        ClipEvaluation::compute("a", &pred, &gt, 2).unwrap(),
        ClipEvaluation::compute("b", &gt, &gt, 2).unwrap(),
    ];
    let report = build_report("fusion", "test", clips).unwrap();
    assert_eq!(MetricsReport::from_json(&report.to_json()).unwrap(), report);
}

#[test]
fn single_clip_report_equals_clip() {
    let gt: Vec<BinaryMask> = (0..5).map(|t| rect(3, 3 + t, 10, 10)).collect();
    let pred: Vec<BinaryMask> = (0..5).map(|t| rect(4, 3 + t, 10, 10)).collect();
    let clip = ClipEvaluation::compute("only", &pred, &gt, 1).unwrap();
    let report = build_report("segnet", "test", vec![clip.clone()]).unwrap();
    assert_eq!(report.precision, clip.precision);
    assert_eq!(report.iou, clip.iou);
    assert!(build_report("segnet", "test", Vec::new()).is_err());
}
