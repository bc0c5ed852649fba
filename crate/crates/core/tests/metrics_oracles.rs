mod support;

use gadolab::metrics::{self, SegmentationSource, SsimParams};
use gadolab::Mask;
use support::metric_oracles::{segment_mismatches, worst_dice_error, worst_pearson_error, worst_ssim_error};

#[test]
fn dice_jaccard_matches_set_oracle() {
    let e = worst_dice_error(300, 1);
    assert!(e <= 1e-9, "worst error {e}");
}

#[test]
fn threshold_segment_matches_rank_oracle() {
    assert_eq!(segment_mismatches(300, 2), 0);
}

#[test]
fn pearson_matches_raw_sum_oracle() {
    let (r, p) = worst_pearson_error(300, 3);
    assert!(r <= 1e-9 && p <= 1e-9, "worst r error {r}, p error {p}");
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let e = worst_ssim_error(120, 4);
    assert!(e <= 1e-6, "worst error {e}");
}

#[test]
fn identical_images_have_unit_ssim_and_zero_error() {
    let a: Vec<f32> = (0..16 * 16).map(|i| (i % 7) as f32).collect();
    assert!((metrics::ssim(&a, &a, 16, 16, &SsimParams::with_range(6.0)).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics::mae(&a, &a, None).unwrap(), 0.0);
}

#[test]
fn segmentation_is_a_subset_of_the_roi_with_the_right_size() {
    let field: Vec<f32> = (0..100).map(|i| ((i * 37) % 23) as f32 - 11.0).collect();
    let roi = Mask::new(&[10, 10], (0..100).map(|i| i % 3 != 0).collect()).unwrap();
    for p in 1..=30 {
        let s = metrics::threshold_segment(&field, &roi, p as f64, SegmentationSource::Dm).unwrap();
        assert!(s.mask.is_subset_of(&roi));
        assert_eq!(s.mask.count(), metrics::selection_count(roi.count(), p as f64));
    }
}

#[test]
fn relative_error_skips_unchanged_voxels() {
    let (re, skip) = metrics::relative_error(&[1.0, 2.0, 5.0], &[1.0, 4.0, 5.0], &[0.0, 2.0, 5.0]).unwrap();
    assert_eq!(skip, vec![false, false, true]);
    assert_eq!(re, vec![0.0, 1.0, 0.0]);
}
