mod common;

use std::f64::consts::FRAC_PI_2;

use common::*;
use gibly::composite::CompositeWeights;
use gibly::geometry::rotation_matrix;
use gibly::kernels::eval_gib;
use gibly::normalization::normalized_eval;
use gibly::{with_workers, Error, GibKind, GiblyConfig, GiblyLayer, NeighborhoodIndex, PointCloud, RotationAngles, ScaleSchedule, Vec3};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_scale(seed: u64) -> GiblyConfig {
    GiblyConfig {
        schedule: ScaleSchedule::new(0.4, 2.0, 1).unwrap(),
        mc_samples: 64,
        global_seed: seed,
        ..GiblyConfig::default()
    }
}

/// W = I and a projection that copies the composite block.
fn identity_wired(config: GiblyConfig) -> GiblyLayer {
    let mut config = config;
    let m = config.num_gibs();
    config.num_composites = m;
    config.projection_dim = m * config.schedule.num_scales;
    let mut layer = GiblyLayer::new(config, 0).unwrap();
    layer.weights = CompositeWeights::identity(m);
    let width = layer.pre_projection_width();
    layer.set_projection(Array2::eye(width), Array1::zeros(width)).unwrap();
    layer
}

#[test]
fn single_point_scores_are_the_kernel_at_zero() {
    let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap();
    let layer = GiblyLayer::new(one_scale(1), 0).unwrap();
    let index = NeighborhoodIndex::new(cloud.coords(), 0.4).unwrap();
    let pass = layer.forward(&cloud, &index).unwrap();
    let mc = &layer.mc_sets()[0];
    for (j, p) in layer.gib_params.iter().enumerate() {
        assert_eq!(pass.gib_scores(0, 0)[j], normalized_eval(p, Vec3::ZERO, mc));
    }
}

#[test]
fn identity_wiring_passes_raw_scores_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(40, 0.6, &mut rng);
    let layer = identity_wired(one_scale(2));
    let index = NeighborhoodIndex::new(cloud.coords(), 0.4).unwrap();
    let pass = layer.forward(&cloud, &index).unwrap();
    let mc = &layer.mc_sets()[0];
    for (i, &q) in cloud.coords().iter().enumerate() {
        let neighbors = index.radius_neighbors(q, 0.4);
        for (j, p) in layer.gib_params.iter().enumerate() {
            let mean = neighbors
                .iter()
                .map(|&k| normalized_eval(p, cloud.coords()[k] - q, mc))
                .sum::<f64>()
                / neighbors.len() as f64;
            let got = pass.output[[i, j]];
            assert!((got - mean).abs() < 1e-12, "point {i} gib {j}: {got} vs {mean}");
            assert_eq!(got, pass.gib_scores(i, 0)[j]);
        }
    }
}

#[test]
fn aligned_cylinder_beats_a_crossed_one_on_a_line() {
    let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, -0.1), Vec3::ZERO, Vec3::new(0.0, 0.0, 0.1)]).unwrap();
    let mut layer = GiblyLayer::new(GiblyConfig { gibs_per_kind: 2, ..one_scale(3) }, 0).unwrap();
    assert_eq!(layer.gib_params[0].kind, GibKind::Cylinder);
    assert_eq!(layer.gib_params[1].kind, GibKind::Cylinder);
    for p in &mut layer.gib_params[..2] {
        p.r = 0.05;
        p.angles = RotationAngles::IDENTITY;
    }
    layer.gib_params[1].angles.phi_x = FRAC_PI_2;
    let index = NeighborhoodIndex::new(cloud.coords(), 0.4).unwrap();
    let pass = layer.forward(&cloud, &index).unwrap();
    for i in 0..3 {
        let s = pass.gib_scores(i, 0);
        assert!(s[0] > s[1], "point {i}: {} vs {}", s[0], s[1]);
    }
}

#[test]
fn default_shape_contract() {
    let layer = GiblyLayer::new(GiblyConfig::default(), 3).unwrap();
    assert_eq!(layer.num_gibs(), 16);
    assert_eq!(layer.pre_projection_width(), 3 + 48);
    let geometric_only = GiblyLayer::new(GiblyConfig::default(), 0).unwrap();
    assert_eq!(geometric_only.pre_projection_width(), 48);
}

#[test]
fn input_features_are_concatenated_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = Array2::from_shape_fn((20, 2), |_| rng.gen_range(-1.0..1.0));
    let cloud = random_cloud(20, 0.5, &mut rng).with_features(features.clone()).unwrap();
    let layer = GiblyLayer::new(small_config(4), 2).unwrap();
    let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius()).unwrap();
    let pass = layer.forward(&cloud, &index).unwrap();
    assert_eq!(pass.pre_projection.slice(ndarray::s![.., ..2]), features);
    assert_eq!(pass.pre_projection.ncols(), 2 + 4 * 3);
}

#[test]
fn dyadic_translation_is_bit_exact() {
    // Coordinates on a 1/64 grid: every difference is exact in f64, so the
    // translated cloud must yield identical offsets and identical features.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords: Vec<Vec3> = (0..200)
        .map(|_| Vec3::new(rng.gen_range(-64..64) as f64 / 64.0, rng.gen_range(-64..64) as f64 / 64.0, rng.gen_range(-64..64) as f64 / 64.0))
        .collect();
    let cloud = PointCloud::new(coords).unwrap();
    let shifted = cloud.translated(Vec3::new(12.5, -3.25, 7.0));
    let layer = GiblyLayer::new(GiblyConfig::default(), 0).unwrap();
    let r = layer.config().schedule.max_radius();
    let a = layer.forward(&cloud, &NeighborhoodIndex::new(cloud.coords(), r).unwrap()).unwrap();
    let b = layer.forward(&shifted, &NeighborhoodIndex::new(shifted.coords(), r).unwrap()).unwrap();
    assert_eq!(a.pre_projection, b.pre_projection);
}

#[test]
fn general_translation_is_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(150, 1.0, &mut rng);
    let shifted = cloud.translated(Vec3::new(0.123, -4.56, 7.89));
    let layer = GiblyLayer::new(GiblyConfig::default(), 0).unwrap();
    let r = layer.config().schedule.max_radius();
    let a = layer.forward(&cloud, &NeighborhoodIndex::new(cloud.coords(), r).unwrap()).unwrap();
    let b = layer.forward(&shifted, &NeighborhoodIndex::new(shifted.coords(), r).unwrap()).unwrap();
    let diff = (&a.pre_projection - &b.pre_projection).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn rotation_angles_match_prerotated_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in GibKind::ALL {
        for _ in 0..20 {
            let params = random_params(kind, &mut rng);
            let offset = random_offset(&mut rng, 1.0);
            let mut upright = params;
            upright.angles = RotationAngles::IDENTITY;
            let prerotated = rotation_matrix(params.angles).transpose_mul_vec(offset);
            let a = eval_gib(&params, offset);
            let b = eval_gib(&upright, prerotated);
            assert!((a - b).abs() < 1e-13, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn forward_and_backward_ignore_worker_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(300, 1.0, &mut rng);
    let layer = GiblyLayer::new(GiblyConfig::default(), 0).unwrap();
    let upstream = Array2::from_shape_fn((cloud.len(), layer.output_dim()), |_| rng.gen_range(-1.0..1.0));
    let run = |workers| {
        with_workers(workers, || {
            let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius()).unwrap();
            let pass = layer.forward(&cloud, &index).unwrap();
            let grads = layer.backward(&cloud, &index, &pass, upstream.view()).unwrap();
            (pass.output, grads.to_vec())
        })
        .unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
    assert_eq!(one, run(1));
}

#[test]
fn index_over_another_cloud_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(10, 1.0, &mut rng);
    let other = random_cloud(11, 1.0, &mut rng);
    let layer = GiblyLayer::new(small_config(0), 0).unwrap();
    let index = NeighborhoodIndex::new(other.coords(), 0.6).unwrap();
    assert!(matches!(layer.forward(&cloud, &index), Err(Error::IndexCloudMismatch { .. })));
}

#[test]
fn parameter_projection() {
    let mut layer = GiblyLayer::new(GiblyConfig::default(), 0).unwrap();
    let before = layer.params_to_vec();
    layer.project_parameters();
    assert_eq!(layer.params_to_vec(), before, "initial parameters are already in range");

    layer.gib_params[0].beta = 0.7;
    layer.gib_params[1].r = -1.0;
    layer.gib_params[2].angles.phi_z = 4.0;
    layer.project_parameters();
    assert_eq!(layer.gib_params[0].beta, 0.499);
    assert!(layer.gib_params[1].r > 0.0);
    let phi = layer.gib_params[2].angles.phi_z;
    assert!(phi > -std::f64::consts::PI && phi <= std::f64::consts::PI);
    let once = layer.params_to_vec();
    layer.project_parameters();
    assert_eq!(layer.params_to_vec(), once);
}

#[test]
fn params_round_trip_through_flat_vector() {
    let mut layer = GiblyLayer::new(small_config(1), 2).unwrap();
    let v = layer.params_to_vec();
    assert_eq!(v.len(), layer.num_params());
    let shifted: Vec<f64> = v.iter().map(|x| x + 0.25).collect();
    layer.set_params_from_slice(&shifted).unwrap();
    assert_eq!(layer.params_to_vec(), shifted);
    assert!(layer.set_params_from_slice(&v[1..]).is_err());
}
