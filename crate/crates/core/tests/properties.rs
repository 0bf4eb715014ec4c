use gsvr::forward::{convolve_covariance, PsfModel};
use gsvr::geom::{axis_angle_quat, build_covariance, quat_to_rotation, GaussianField, Quat};
use gsvr::io::field_file::{decode_field, encode_field};
use gsvr::knn::{squared_distance, NeighborIndex};
use gsvr::metrics::motion_error;
use gsvr::motion::SliceState;
use gsvr::train::recenter_pose;
use proptest::prelude::*;
use std::path::Path;

fn point(h: f64) -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-h..h)
}

fn quat() -> impl Strategy<Value = Quat> {
    (point(1.0), 0.0..std::f64::consts::PI)
        .prop_filter("axis must be nonzero", |(a, _)| a.iter().any(|v| v.abs() > 1e-3))
        .prop_map(|(a, t)| axis_angle_quat(a, t))
}

fn pose() -> impl Strategy<Value = SliceState> {
    (quat(), point(5.0), -0.5..0.5f64).prop_map(|(quat, trans, log_sigma)| SliceState {
        quat,
        trans,
        log_sigma,
        eta: 0.0,
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rotation_ignores_quaternion_norm(q in quat(), s in 0.1..10.0f64) {
        let r = quat_to_rotation(&q).unwrap();
        let rs = quat_to_rotation(&q.map(|c| c * s)).unwrap();
        prop_assert!((r - rs).amax() < 1e-12);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!(close(r.determinant(), 1.0, 1e-12));
    }

    #[test]
    fn covariance_trace_ignores_orientation(ls in point(1.5), q in quat()) {
        let cov = build_covariance(&ls, &q).unwrap();
        let expected: f64 = ls.iter().map(|l| (2.0 * l).exp()).sum();
        prop_assert!(close(cov.trace(), expected, 1e-12));
        prop_assert!(cov.0.eigenvalues().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn psf_widening_adds_traces(ls in point(1.0), q in quat(), rq in quat(), sigma in prop::array::uniform3(0.0..2.0f64)) {
        let cov = build_covariance(&ls, &q).unwrap().0;
        let psf = PsfModel::from_sigmas(sigma).unwrap();
        let rot = quat_to_rotation(&rq).unwrap();
        let obs = convolve_covariance(&cov, &rot, &psf);
        let psf_trace: f64 = sigma.iter().map(|s| s * s).sum();
        prop_assert!(close(obs.trace(), cov.trace() + psf_trace, 1e-12));
        let floor = cov.eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(obs.eigenvalues().iter().all(|&e| e >= floor * (1.0 - 1e-9)));
    }

    #[test]
    fn neighbor_queries_match_brute_force(
        means in prop::collection::vec(point(10.0), 1..200),
        queries in prop::collection::vec(point(12.0), 1..50),
        k in 1usize..16,
    ) {
        let k = k.min(means.len());
        let nb = NeighborIndex::build(&means, k).unwrap().query(&queries, k).unwrap();
        for (p, x) in queries.iter().enumerate() {
            let mut d: Vec<(f64, u32)> = means.iter().enumerate().map(|(i, m)| (squared_distance(m, x), i as u32)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<u32> = d[..k].iter().map(|e| e.1).collect();
            prop_assert_eq!(nb.row(p), expected.as_slice());
        }
    }

    #[test]
    fn field_file_round_trips_f32_values(
        prims in prop::collection::vec((point(50.0), point(2.0), prop::array::uniform4(-1.0..1.0f64), -2.0..2.0f64), 1..64),
    ) {
        let narrow = |v: f64| v as f32 as f64;
        let means = prims.iter().map(|p| p.0.map(narrow)).collect();
        let log_scales = prims.iter().map(|p| p.1.map(narrow)).collect();
        let quats = prims.iter().map(|p| p.2.map(narrow)).collect();
        let intensities = prims.iter().map(|p| narrow(p.3)).collect();
        let field = GaussianField::new(means, log_scales, quats, intensities).unwrap();
        let bytes = encode_field(&field);
        let back = decode_field(&bytes, Path::new("prop.gsvr")).unwrap();
        prop_assert_eq!(&back, &field);
        prop_assert_eq!(encode_field(&back), bytes);
    }

    #[test]
    fn pose_recentering_is_invisible_to_motion_error(
        states in prop::collection::vec(pose(), 3..12),
        weights in prop::collection::vec(0.1..5.0f64, 12),
    ) {
        let mut field = GaussianField::isotropic(vec![[0.0; 3]], 1.0, vec![1.0]).unwrap();
        let mut moved = states.clone();
        recenter_pose(&mut field, &mut moved, &weights[..states.len()]);
        for e in motion_error(&moved, &states).unwrap() {
            prop_assert!(e.degrees < 1e-6 && e.mm < 1e-6, "{:?}", e);
        }
    }
}
