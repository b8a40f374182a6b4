use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;

use selftune::evaluator::{compute_metrics, median_scale, EvalClamp};
use selftune::geometry::{inv_depth_to_depth, DepthMap, DepthRange, PoseSE3};
use selftune::losses::{align_eta, median, total_loss, LossParts, LossWeights};

fn map(size: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, size * size).prop_map(move |v| Array2::from_shape_vec((size, size), v).unwrap())
}

fn pose() -> impl Strategy<Value = PoseSE3> {
    (-3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64, prop::array::uniform3(-5.0..5.0f64))
        .prop_map(|(y, p, r, t)| PoseSE3::from_euler_yxz(y, p, r, Vector3::from(t)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_inverse_composes_to_identity(g in pose(), p in prop::array::uniform3(-10.0..10.0f64)) {
        let p = Vector3::from(p);
        let back = g.inverse().transform_point(&g.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
        prop_assert!(g.compose(&g.inverse()).max_abs_diff(&PoseSE3::identity()) < 1e-9);
    }

    #[test]
    fn inverse_depth_mapping_is_decreasing_and_in_range(a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let r = DepthRange::default();
        let d = inv_depth_to_depth(Array2::from_shape_vec((1, 2), vec![a, b]).unwrap().view(), &r).unwrap();
        let (da, db) = (d.values[[0, 0]], d.values[[0, 1]]);
        prop_assert!((r.d_min..=r.d_max).contains(&da));
        if a < b {
            prop_assert!(da > db);
        }
    }

    #[test]
    fn eta_is_invariant_to_positive_affine_maps(d in map(6, 0.0, 5.0), s in 1e-2..1e2f64, t in -5.0..5.0f64) {
        prop_assume!(d.iter().any(|v| (v - d[[0, 0]]).abs() > 1e-3));
        let a = align_eta(d.view()).unwrap();
        let b = align_eta(d.mapv(|v| s * v + t).view()).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn deltas_are_ordered_and_errors_non_negative(p in map(5, 0.05, 12.0), g in map(5, 0.05, 12.0)) {
        let m = compute_metrics(&DepthMap::dense(p).unwrap(), &DepthMap::dense(g).unwrap(), EvalClamp::default()).unwrap();
        prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
    }

    #[test]
    fn median_scaling_matches_medians(p in map(5, 0.1, 10.0), g in map(5, 0.1, 10.0)) {
        let gt = DepthMap::dense(g.clone()).unwrap();
        let (_, scaled) = median_scale(&DepthMap::dense(p).unwrap(), &gt).unwrap();
        let ms = median(scaled.values.as_slice().unwrap());
        let mg = median(g.as_slice().unwrap());
        prop_assert!((ms - mg).abs() < 1e-9 * mg);
    }

    #[test]
    fn total_equals_weighted_parts(v in prop::array::uniform5(0.0..3.0f64), w in prop::array::uniform3(0.0..1.0f64)) {
        let weights = LossWeights { distill: w[0], smooth: w[1], consistency: w[2] };
        let b = total_loss(&LossParts::all(v[0], v[1], v[2], v[3], v[4]), &weights);
        prop_assert!((b.total - b.reconstructed_total()).abs() < 1e-12);
    }
}
