use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regmod::featuremap::{assemble, build_dense_feature, VertexEmbeddings};
use regmod::frame::{FrameGeometry, GeometryParams};
use regmod::geometry::{make_intrinsics, CameraPose, Intrinsics, TriMesh};
use regmod::plane::FeaturePlane;
use regmod::visibility::Bvh;

struct Scene {
    mesh: TriMesh,
    pose: CameraPose,
    intr: Intrinsics,
    params: GeometryParams,
    frame: FrameGeometry,
}

fn scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = TriMesh::icosphere(2);
    let bvh = Bvh::build(&mesh).unwrap();
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let eye = Point3::new(3.5 * angle.cos(), rng.gen_range(-1.0..1.0), 3.5 * angle.sin());
    let pose = CameraPose::look_at(eye, Point3::origin(), Vector3::y()).unwrap();
    let intr = make_intrinsics(32, 28, 40.0).unwrap();
    let params = GeometryParams {
        alpha: 0.065,
        k: rng.gen_range(1..6),
    };
    let frame = FrameGeometry::compute(&mesh, &bvh, &pose, &intr, &params).unwrap();
    Scene {
        mesh,
        pose,
        intr,
        params,
        frame,
    }
}

fn region_of(frame: &FrameGeometry) -> Vec<u8> {
    let mut region = vec![0u8; frame.height * frame.width];
    for s in &frame.sites {
        region[s.pixel.index(frame.width)] |= 1;
    }
    for p in &frame.interior {
        region[p.index(frame.width)] |= 2;
    }
    for p in frame.background_pixels() {
        region[p.index(frame.width)] |= 4;
    }
    region
}

#[test]
fn sites_interior_and_background_partition_the_grid() {
    for seed in 0..4 {
        let s = scene(seed);
        let region = region_of(&s.frame);
        assert!(region.iter().all(|&r| r == 1 || r == 2 || r == 4), "seed {seed}");
        assert!(!s.frame.interior.is_empty());
    }
}

#[test]
fn stale_frame_is_rejected() {
    let s = scene(1);
    let emb = VertexEmbeddings::xavier(s.mesh.vertex_count(), 4, 0);
    let other = GeometryParams { alpha: 0.03, ..s.params };
    assert!(build_dense_feature::<f64>(&s.mesh, &s.pose, &s.intr, &other, &emb, &s.frame).is_err());
    let fresh = build_dense_feature::<f64>(&s.mesh, &s.pose, &s.intr, &s.params, &emb, &s.frame).unwrap();
    let direct = assemble::<f64>(&s.frame, &emb).unwrap();
    assert_eq!(fresh, direct);
}

#[test]
fn pixels_only_depend_on_their_neighbors() {
    let s = scene(2);
    let emb = VertexEmbeddings::xavier(s.mesh.vertex_count(), 3, 1);
    let base = assemble::<f64>(&s.frame, &emb).unwrap();
    let v = s.frame.sites[s.frame.sites.len() / 2].vertex;
    let mut bumped = emb.clone();
    bumped.row_mut(v as usize).iter_mut().for_each(|x| *x += 1.0);
    let moved = assemble::<f64>(&s.frame, &bumped).unwrap();
    let touching = s.frame.pixels_touching(v);
    for row in 0..s.frame.height {
        for col in 0..s.frame.width {
            let changed = base.at(row, col) != moved.at(row, col);
            let expected = touching.iter().any(|p| p.row == row && p.col == col);
            assert_eq!(changed, expected, "pixel ({row}, {col})");
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let s = scene(3);
    let n = s.mesh.vertex_count();
    let dim = 2;
    let emb = VertexEmbeddings::xavier(n, dim, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probe = FeaturePlane::from_fn(s.frame.height, s.frame.width, dim, |_, _, _| rng.gen_range(-1.0..1.0));
    let loss = |e: &VertexEmbeddings| {
        let p = assemble::<f64>(&s.frame, e).unwrap();
        p.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let (grad_e, grad_b) = s.frame.backward(&probe, n).unwrap();
    let h = 1e-6;
    for v in s.frame.sites.iter().map(|s| s.vertex as usize).take(12) {
        for c in 0..dim {
            let mut plus = emb.clone();
            plus.row_mut(v)[c] += h;
            let mut minus = emb.clone();
            minus.row_mut(v)[c] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((numeric - grad_e[v * dim + c]).abs() < 1e-6);
        }
    }
    for c in 0..dim {
        let mut plus = emb.clone();
        plus.background_mut()[c] += h;
        let mut minus = emb.clone();
        minus.background_mut()[c] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((numeric - grad_b[c]).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn assembly_is_linear(seed in 0u64..6, a in -2.0f64..2.0, b in -2.0f64..2.0, e1 in 0u64..1000, e2 in 0u64..1000) {
        let s = scene(seed);
        let x = VertexEmbeddings::xavier(s.mesh.vertex_count(), 3, e1);
        let y = VertexEmbeddings::xavier(s.mesh.vertex_count(), 3, e2);
        let lhs = assemble::<f64>(&s.frame, &x.combine(a, &y, b)).unwrap();
        let px = assemble::<f64>(&s.frame, &x).unwrap();
        let py = assemble::<f64>(&s.frame, &y).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(px.data()).zip(py.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_values_are_convex_combinations(seed in 0u64..6, e in 0u64..1000) {
        let s = scene(seed);
        let emb = VertexEmbeddings::xavier(s.mesh.vertex_count(), 4, e);
        let plane = assemble::<f64>(&s.frame, &emb).unwrap();
        for (q, &px) in s.frame.interior.iter().enumerate() {
            let (sites, _) = s.frame.knn.neighbors(q);
            for c in 0..4 {
                let vals = sites.iter().map(|&i| emb.row(s.frame.sites[i as usize].vertex as usize)[c]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                let v = plane.pixel(px)[c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sites_and_background_are_copied(seed in 0u64..6, e in 0u64..1000) {
        let s = scene(seed);
        let emb = VertexEmbeddings::xavier(s.mesh.vertex_count(), 3, e);
        let plane = assemble::<f32>(&s.frame, &emb).unwrap();
        for site in &s.frame.sites {
            let expected: Vec<f32> = emb.row(site.vertex as usize).iter().map(|&v| v as f32).collect();
            prop_assert_eq!(plane.pixel(site.pixel), &expected[..]);
        }
        let bg: Vec<f32> = emb.background().iter().map(|&v| v as f32).collect();
        for px in s.frame.background_pixels() {
            prop_assert_eq!(plane.pixel(px), &bg[..]);
        }
    }
}
