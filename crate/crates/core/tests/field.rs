use confined_nav::field::{squared_edt, GridGeometry};
use confined_nav::{build_sdf, obstacle_cost, OccupancyGrid};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(dims: [usize; 3], site: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let sites: Vec<[usize; 3]> = (0..nz)
        .flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
        .filter(|&[x, y, z]| site[(z * ny + y) * nx + x])
        .collect();
    (0..nz)
        .flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
        .map(|p| {
            sites
                .iter()
                .map(|q| (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn edt_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..60 {
        let dims = if trial < 10 {
            [16, 16, 16]
        } else {
            [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)]
        };
        let density = rng.gen_range(0.0..0.3);
        let site: Vec<bool> = (0..dims.iter().product()).map(|_| rng.gen_bool(density)).collect();
        let fast = squared_edt(dims, &site);
        let slow = brute_force(dims, &site);
        assert_eq!(fast, slow, "dims {dims:?} density {density}");
    }
}

fn sphere_sdf() -> (confined_nav::SdfGrid, Vector3<f64>, f64) {
    let geometry = GridGeometry {
        origin: Vector3::zeros(),
        dims: [40, 40, 40],
        resolution: 0.05,
    };
    let mut occ = OccupancyGrid::new_free(geometry);
    let center = Vector3::new(1.0, 1.0, 1.0);
    let radius = 0.3;
    for iz in 0..40 {
        for iy in 0..40 {
            for ix in 0..40 {
                if (geometry.voxel_center(ix, iy, iz) - center).norm() <= radius {
                    occ.set(ix, iy, iz, true);
                }
            }
        }
    }
    (build_sdf(&occ, 2.0), center, radius)
}

#[test]
fn unit_gradient_away_from_surfaces() {
    let (sdf, center, radius) = sphere_sdf();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 300 {
        let p = Vector3::new(rng.gen_range(0.2..1.8), rng.gen_range(0.2..1.8), rng.gen_range(0.2..1.8));
        let r = (p - center).norm();
        // medial axis of the sphere's outside is its center; keep off the
        // surface and off the grid faces
        let off_faces = (0..3).all(|a| p[a] > 0.15 && p[a] < 1.85);
        if r < radius + 0.1 || !off_faces {
            continue;
        }
        let (_, g) = sdf.query(&p).unwrap();
        assert!((g.norm() - 1.0).abs() < 0.15, "|grad| {} at {p:?}", g.norm());
        checked += 1;
    }
}

proptest! {
    #[test]
    fn distance_is_lipschitz(
        a in prop::array::uniform3(0.0..1.95f64), b in prop::array::uniform3(0.0..1.95f64),
    ) {
        let (sdf, _, _) = sphere_sdf();
        let (p, q) = (Vector3::from(a), Vector3::from(b));
        let dp = sdf.distance_at(&p).unwrap();
        let dq = sdf.distance_at(&q).unwrap();
        prop_assert!((dp - dq).abs() <= (p - q).norm() + 2.0 * 0.05);
    }
}

#[test]
fn cost_is_continuous_at_the_seams() {
    let eps = 0.08;
    let delta = 1e-9;
    for d in [0.0, eps] {
        let (lo, _) = obstacle_cost(d - delta, eps);
        let (hi, _) = obstacle_cost(d + delta, eps);
        assert!((lo - hi).abs() < 1e-8, "jump {} at {d}", (lo - hi).abs());
    }
}
