use confined_nav::mapping::{ElevationPrior, MappingParams};
use confined_nav::sim::{make_world, SensorModel, TaskKind};
use confined_nav::{classify, fuse, Classification, Configuration, DepthMeasurement, ElevationEstimate, MultiElevationMap, RobotModel};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn fusion_shrinks_variance(
        mean in -2.0..2.0f64, var in 1e-8..1.0f64, h in -2.0..2.0f64, mvar in 1e-8..1.0f64,
    ) {
        let post = fuse(&ElevationEstimate::new(mean, var), h, mvar).unwrap();
        prop_assert!(post.variance < var);
        prop_assert!(post.variance < mvar);
    }

    #[test]
    fn fusion_is_order_symmetric(
        mean in -2.0..2.0f64, var in 1e-6..1.0f64,
        a in -2.0..2.0f64, va in 1e-6..1.0f64,
        b in -2.0..2.0f64, vb in 1e-6..1.0f64,
    ) {
        let prior = ElevationEstimate::new(mean, var);
        let ab = fuse(&fuse(&prior, a, va).unwrap(), b, vb).unwrap();
        let ba = fuse(&fuse(&prior, b, vb).unwrap(), a, va).unwrap();
        let scale = mean.abs().max(a.abs()).max(b.abs()).max(1.0);
        prop_assert!((ab.mean - ba.mean).abs() <= 1e-12 * scale);
        prop_assert!((ab.variance - ba.variance).abs() <= 1e-12 * ab.variance);
    }

    #[test]
    fn points_above_body_never_join_a_lone_floor(
        floor in -0.5..0.5f64, sigma in 1e-3..0.5f64, body in 0.0..1.0f64, above in 1e-6..2.0f64,
    ) {
        let f = ElevationEstimate::new(floor, sigma * sigma);
        let c = classify(body + above, &f, &ElevationEstimate::INVALID, body, &ElevationPrior::default());
        prop_assert_eq!(c, Classification::NewCeiling);
        // a floor above the body would be pushed down by the new ceiling
        let body = body.max(floor + 0.01);

        let mut map = MultiElevationMap::new(MappingParams { side_length: 1.0, ..MappingParams::default() }, (0.0, 0.0)).unwrap();
        let (ix, iy) = map.cell_of(0.01, 0.01).unwrap();
        map.set_cell(ix, iy, f, ElevationEstimate::INVALID);
        map.ingest_scan(&[DepthMeasurement { point: Vector3::new(0.01, 0.01, body + above), variance: 1e-4 }], body).unwrap();
        prop_assert_eq!(*map.floor(ix, iy), f);
    }

    #[test]
    fn overhang_layers_stay_ordered(height in 0.2..0.6f64, seed in 0u64..1000, x0 in -0.5..1.0f64) {
        let m = RobotModel::default();
        let scenario = make_world(TaskKind::LowOverhang, height).unwrap();
        let sensor = SensorModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = MultiElevationMap::new(MappingParams::default(), (x0, 0.0)).unwrap();
        for k in 0..3 {
            let pose = Configuration::nominal(&m, x0 + 0.3 * k as f64, 0.0, 0.0);
            map.recenter((pose.x, pose.y));
            map.propagate_motion(0.3);
            let scan = sensor.render_depth(&scenario.world, &pose, &mut rng);
            map.ingest_scan(&scan, pose.z).unwrap();
        }
        let n = map.cells_per_side();
        for iy in 0..n {
            for ix in 0..n {
                let (f, c) = (map.floor(ix, iy), map.ceiling(ix, iy));
                prop_assert!(!(f.valid && c.valid && c.mean <= f.mean), "cell {ix},{iy}: {f:?} {c:?}");
            }
        }
    }
}
