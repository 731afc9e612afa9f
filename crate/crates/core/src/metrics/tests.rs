use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;

#[test]
fn rounding() {
    assert_eq!(round_count(2.5), 3);
    assert_eq!(round_count(2.49), 2);
    assert_eq!(round_count(-0.7), 0);
    assert_eq!(round_count(-3.0), 0);
    assert_eq!(round_count(0.5), 1);
}

#[test]
fn family_examples() {
    let t = CountTable::from_rows(&[vec![2], vec![6]], &[vec![2.4], vec![5.0]]).unwrap();
    let f = rmse_family(&t).unwrap();
    assert_abs_diff_eq!(f.mrmse, 0.5f64.sqrt(), epsilon = 1e-9);
    assert_abs_diff_eq!(f.m_relrmse, (1.0f64 / 7.0 / 2.0).sqrt(), epsilon = 1e-9);
    assert_abs_diff_eq!(f.m_relrmse, 0.2673, epsilon = 1e-4);
    // every GT is nonzero, so the nz variants agree
    assert_eq!(f.mrmse, f.mrmse_nz);

    let p = CountTable::from_rows(&[vec![3, 0], vec![1, 4]], &[vec![3.0, 0.2], vec![1.1, 4.0]]).unwrap();
    let f = rmse_family(&p).unwrap();
    assert_eq!((f.mrmse, f.mrmse_nz, f.m_relrmse, f.m_relrmse_nz), (0.0, 0.0, 0.0, 0.0));

    assert!(rmse_family(&CountTable::new(3)).is_err());
}

#[test]
fn nz_excludes_categories_without_positives() {
    let t = CountTable::from_rows(&[vec![0, 2], vec![0, 4]], &[vec![1.0, 2.0], vec![0.0, 5.0]]).unwrap();
    let f = rmse_family(&t).unwrap();
    assert_eq!(f.per_category[0].rmse_nz, None);
    assert_abs_diff_eq!(f.mrmse_nz, 0.5f64.sqrt(), epsilon = 1e-9);
}

#[test]
fn gating_absent_categories_never_hurts() {
    let gt = vec![vec![0, 3], vec![2, 0]];
    let ungated = vec![vec![1.2, 3.0], vec![2.0, 0.8]];
    let gated = vec![vec![0.0, 3.0], vec![2.0, 0.0]];
    let a = rmse_family(&CountTable::from_rows(&gt, &gated).unwrap()).unwrap();
    let b = rmse_family(&CountTable::from_rows(&gt, &ungated).unwrap()).unwrap();
    assert!(a.mrmse <= b.mrmse);
}

#[test]
fn band_restricts_images() {
    let t = CountTable::from_rows(&[vec![6], vec![1], vec![8]], &[vec![5.0], vec![9.0], vec![8.0]]).unwrap();
    assert_abs_diff_eq!(band_mrmse(&t, 5, 8).unwrap(), 0.5f64.sqrt(), epsilon = 1e-9);
    assert_eq!(band_mrmse(&t, 20, 30), None);
}

#[test]
fn total_examples() {
    assert_eq!(total_count_metrics(&[(10, 10.0)]).unwrap(), (0.0, 0.0));
    let (r, rel) = total_count_metrics(&[(10, 12.0)]).unwrap();
    assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(rel, 0.6030, epsilon = 1e-4);
    let (r, _) = total_count_metrics(&[(4, 5.0), (9, 9.0)]).unwrap();
    assert_abs_diff_eq!(r, 0.5f64.sqrt(), epsilon = 1e-12);
}

#[test]
fn game_examples() {
    let mut d = Tensor::zeros(&[4, 4]);
    d.data_mut()[0] = 1.0;
    let pts = [(3u32, 3u32)];
    assert_abs_diff_eq!(game(&d, &pts, 0).unwrap(), 0.0);
    assert_abs_diff_eq!(game(&d, &pts, 1).unwrap(), 2.0);

    let mut exact = Tensor::zeros(&[8, 8]);
    let pts = [(1u32, 2u32), (6, 7), (5, 0)];
    for &(r, c) in &pts {
        exact.data_mut()[r as usize * 8 + c as usize] = 1.0;
    }
    let empty = Tensor::zeros(&[8, 8]);
    for n in 0..=3 {
        assert_abs_diff_eq!(game(&exact, &pts, n).unwrap(), 0.0);
        assert_abs_diff_eq!(game(&empty, &pts, n).unwrap(), 3.0);
    }
    assert!(game(&empty, &[(8, 0)], 1).is_err());
}

#[test]
fn game_pads_indivisible_maps() {
    let d = Tensor::full(&[5, 5], 0.04);
    // 2x2 grid of 3x3 cells: masses 0.36, 0.24, 0.24, 0.16
    let g = game(&d, &[], 1).unwrap();
    assert_abs_diff_eq!(g, 1.0, epsilon = 1e-6);
}

#[test]
fn report_csv_has_rows_per_category() {
    let t = CountTable::from_rows(&[vec![1, 0]], &[vec![1.0, 0.0]]).unwrap();
    let f = rmse_family(&t).unwrap();
    let r = MetricsReport {
        config_hash: "abc".into(),
        seed: 1,
        num_images: 1,
        mrmse: f.mrmse,
        mrmse_nz: f.mrmse_nz,
        m_relrmse: f.m_relrmse,
        m_relrmse_nz: f.m_relrmse_nz,
        band_mrmse: None,
        total_rmse: 0.0,
        total_relrmse: 0.0,
        total_source: "sum".into(),
        game: None,
        game_padded: false,
        per_category: f.per_category,
    };
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "category_id,rmse,rmse_nz,relrmse,relrmse_nz");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("1,0.000000,,"));
}

proptest! {
    #[test]
    fn game_is_monotone_in_level(
        vals in prop::collection::vec(0.0f32..1.0, 64),
        pts in prop::collection::vec((0u32..8, 0u32..8), 0..6),
    ) {
        let d = Tensor::new(vec![8, 8], vals).unwrap();
        let mut prev = game(&d, &pts, 0).unwrap();
        for n in 1..=3 {
            let g = game(&d, &pts, n).unwrap();
            prop_assert!(g + 1e-9 >= prev);
            prev = g;
        }
    }
}
