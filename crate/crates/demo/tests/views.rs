use cbsa_core::optim::OneCycle;
use cbsa_demo::{curve_view, partition_view, threshold_view};

#[test]
fn default_world_partitions_into_the_planted_blocks() {
    let v = partition_view(1, 600, 0.05, 0.03, 3).unwrap();
    assert_eq!(v.n_labeled, 30);
    assert!(v.matches_planted);
    assert!(v.ncut <= v.ncut_planted + 1e-12);
    assert_eq!(v.affinity.len(), 12);
    assert!(serde_json::to_string(&v).unwrap().contains("\"eigenvalues\""));
}

#[test]
fn partition_rejects_k_above_c() {
    assert!(partition_view(1, 200, 0.1, 0.03, 13).is_err());
    let one = partition_view(1, 200, 0.1, 0.03, 1).unwrap();
    assert!(one.assignment.iter().all(|&a| a == 0));
}

#[test]
fn threshold_bands_follow_the_priors() {
    let v = threshold_view(3, 200, 40, 4, 1.5, 0.9).unwrap();
    for band in &v.classes {
        let expect_pos = (band.prior * 200.0 - 1e-9).ceil() as usize;
        assert_eq!(band.positives, expect_pos);
        assert_eq!(band.negatives, (0.9 * (200 - expect_pos) as f64 + 1e-9).floor() as usize);
        assert_eq!(band.positives + band.negatives + band.ignored, 200);
    }
    let sharp = threshold_view(3, 200, 40, 4, 6.0, 0.9).unwrap();
    assert!(sharp.cf1 > v.cf1);
}

#[test]
fn curves_cover_the_schedule_and_grid() {
    let schedule = OneCycle::default();
    let v = curve_view(schedule, 100, 0.0, 2.0).unwrap();
    assert_eq!(v.lr.len(), 100);
    let peak = v.lr.iter().cloned().fold(f64::MIN, f64::max);
    assert!((peak - schedule.max_lr).abs() < 1e-3 * schedule.max_lr);
    // Focusing only lowers the negative branch; the positive one is BCE.
    assert_eq!(v.asl_pos, v.bce_pos);
    assert!(v.asl_neg.iter().zip(&v.bce_neg).all(|(a, b)| a <= b));
    assert!(curve_view(schedule, 10, -1.0, 2.0).is_err());
}
