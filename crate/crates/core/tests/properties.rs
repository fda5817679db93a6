//! Property tests over the public API.

use std::sync::Arc;

use lord::config::RunConfig;
use lord::ffd::{ControlGrid, HierarchicalFFD};
use lord::metrics::{coordinate_mse, voxel_centers, Identity};
use lord::phantom::Blueprint;
use lord::sphere::{line_angle, watson_weights, DirectionSet};
use lord::volume::{read_lsdv, write_lsdv, SpatioDirectionalImage};
use lord::{Mat3, Vec3};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-3)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

fn random_ffd(dims: [usize; 3], spacing: f64, coeffs: &[f64]) -> HierarchicalFFD {
    let mut g = ControlGrid::for_domain(dims, spacing, 1).unwrap();
    for (i, c) in g.coeffs_mut().iter_mut().enumerate() {
        let k = 3 * i % coeffs.len();
        *c = Vec3::new(coeffs[k], coeffs[(k + 1) % coeffs.len()], coeffs[(k + 2) % coeffs.len()]);
    }
    HierarchicalFFD::from_grids(vec![g]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn watson_weights_are_a_distribution(kappa in 0.0f64..60.0, q in unit(), seed in 0u64..4) {
        let dirs = DirectionSet::generate(30, seed).unwrap();
        let w = watson_weights(&dirs, kappa, &q).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        // antipodal symmetry
        let wn = watson_weights(&dirs, kappa, &(-q)).unwrap();
        for (a, b) in w.iter().zip(&wn) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn line_angle_is_a_symmetric_axis_distance(a in unit(), b in unit()) {
        let t = line_angle(&a, &b);
        prop_assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&t));
        prop_assert!((t - line_angle(&b, &a)).abs() < 1e-12);
        prop_assert!((t - line_angle(&a, &(-b))).abs() < 1e-12);
    }

    #[test]
    fn linear_grids_reproduce_their_map(
        m in prop::array::uniform9(-0.2f64..0.2),
        x in 2.0f64..9.0, y in 2.0f64..9.0, z in 2.0f64..9.0,
    ) {
        let a = Mat3::identity() + Mat3::from_row_slice(&m);
        let center = Vec3::new(5.0, 5.0, 5.0);
        let dims = [12, 12, 12];
        let ffd = HierarchicalFFD::from_grids(vec![ControlGrid::from_linear_map(dims, 3.0, 1, &a, &center).unwrap()]).unwrap();
        let p = Vec3::new(x, y, z);
        prop_assert!((ffd.deform(&p) - (a * (p - center) + center)).norm() < 1e-10);
        prop_assert!((ffd.spatial_jacobian(&p) - a).norm() < 1e-10);
    }

    #[test]
    fn ffd_text_round_trip_is_exact(coeffs in prop::collection::vec(-2.0f64..2.0, 3..40), spacing in 2.0f64..6.0) {
        let ffd = random_ffd([9, 7, 5], spacing, &coeffs);
        let back = HierarchicalFFD::from_text(&ffd.to_text()).unwrap();
        prop_assert_eq!(back, ffd);
    }

    #[test]
    fn reorientation_gives_unit_vectors_and_is_trivial_at_identity(v in unit(), coeffs in prop::collection::vec(-0.3f64..0.3, 3..30)) {
        let p = Vec3::new(3.3, 2.1, 4.7);
        let id = HierarchicalFFD::identity();
        prop_assert!((id.reorient(&p, &v).unwrap() - v).norm() < 1e-12);
        let ffd = random_ffd([8, 8, 8], 3.0, &coeffs);
        let w = ffd.reorient(&p, &v).unwrap();
        prop_assert!((w.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coordinate_mse_is_a_squared_distance(coeffs in prop::collection::vec(-1.0f64..1.0, 3..30)) {
        let dims = [6, 5, 4];
        let probes = voxel_centers(dims);
        let ffd = random_ffd(dims, 3.0, &coeffs);
        prop_assert_eq!(coordinate_mse(&ffd, &ffd, &probes).unwrap(), 0.0);
        let d = coordinate_mse(&ffd, &Identity, &probes).unwrap();
        prop_assert!((d - coordinate_mse(&Identity, &ffd, &probes).unwrap()).abs() < 1e-14);
        let direct = probes.iter().map(|p| ffd.displacement(p).norm_squared()).sum::<f64>() / probes.len() as f64;
        prop_assert!((d - direct).abs() < 1e-12);
    }

    #[test]
    fn lsdv_round_trip_is_exact(data in prop::collection::vec(0.0f64..5.0, 2 * 3 * 2 * 7)) {
        let dirs = Arc::new(DirectionSet::generate(7, 3).unwrap());
        let img = SpatioDirectionalImage::new([2, 3, 2], dirs, data).unwrap();
        let mut buf = Vec::new();
        write_lsdv(&mut buf, &img).unwrap();
        let back = read_lsdv(std::io::Cursor::new(buf)).unwrap();
        prop_assert_eq!(back.data(), img.data());
        prop_assert_eq!(back.dirs().as_slice(), img.dirs().as_slice());
    }

    #[test]
    fn blueprint_text_round_trip_is_exact(
        fibers in prop::collection::vec((0usize..6, 0usize..5, unit(), 0.1f64..1.0), 0..20),
        iso in prop::collection::vec((0usize..6, 0usize..5), 0..4),
    ) {
        let mut bp = Blueprint::new([6, 5, 1]).unwrap();
        for (i, j, t, w) in fibers {
            bp.add_fiber(i, j, 0, t, w).unwrap();
        }
        for (i, j) in iso {
            bp.set_isotropic(i, j, 0);
        }
        let back = Blueprint::from_text(&bp.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), bp.to_text());
    }

    #[test]
    fn config_round_trip_is_the_identity(
        sigma in 0.0f64..5.0, lambda in 0.0f64..1.0, beta in 0.0f64..5.0,
        seed in any::<u64>(), kappa in 0.0f64..40.0, dirs in prop::option::of(1usize..200),
    ) {
        let mut cfg = RunConfig::phantom();
        cfg.sigma = sigma;
        cfg.lambda = lambda;
        cfg.beta = beta;
        cfg.seed = seed;
        cfg.directions = dirs;
        cfg.schedule.iter_mut().for_each(|s| s.kappa = kappa);
        let once = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&once, &cfg);
        prop_assert_eq!(RunConfig::from_json(&once.to_json()).unwrap(), once);
    }
}
