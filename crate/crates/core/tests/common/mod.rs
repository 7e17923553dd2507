#![allow(dead_code)]

use std::f64::consts::PI;

use gibly::kernels::{eval_gib, eval_gib_grad, raw_from_positive, HEIGHT_FLOOR};
use gibly::layer::GiblyConfig;
use gibly::neighborhood::{CapMode, NeighborCap};
use gibly::normalization::{normalized_eval, normalized_eval_grad, McSampleSet};
use gibly::training::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use gibly::training::scene::{generate_scene, PrimitiveShape, PrimitiveSpec, SyntheticSceneSpec};
use gibly::{GibKind, GibParams, PointCloud, RotationAngles, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference settings for isolated kernels. Gradients below 1e-4 in
/// magnitude are compared absolutely, since their relative error is dominated
/// by cancellation in the difference quotient.
pub fn kernel_options() -> GradcheckOptions {
    GradcheckOptions::relative(1e-5, 1e-5).with_abs_fallback(1e-4, 1e-9)
}

pub fn layer_options() -> GradcheckOptions {
    GradcheckOptions::relative(1e-5, 1e-4).with_abs_fallback(1e-4, 1e-8)
}

pub fn random_params(kind: GibKind, rng: &mut ChaCha8Rng) -> GibParams {
    let mut p = GibParams::new(kind);
    p.r = rng.gen_range(0.2..1.0);
    p.t = rng.gen_range(0.2..1.0);
    p.beta = rng.gen_range(0.05..0.45);
    p.w = rng.gen_range(-0.5..0.5);
    p.angles = RotationAngles::from_array([rng.gen_range(-PI..PI), rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)]);
    for s in p.ell_scales.iter_mut() {
        *s = raw_from_positive(rng.gen_range(0.5..2.0));
    }
    p
}

pub fn random_offset(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half))
}

/// True when `offset` sits within `margin` of a point where the kernel is
/// not differentiable (the axis, the cone height floor, the disk plane).
pub fn near_kink(params: &GibParams, offset: Vec3, margin: f64) -> bool {
    let z = gibly::geometry::canonical_offset(Vec3::ZERO, offset, params.angles);
    let axis = z.radial() < margin;
    match params.kind {
        GibKind::Cylinder | GibKind::Ellipsoid => false,
        GibKind::HollowCylinder | GibKind::HollowEllipsoid => axis || offset.norm() < margin,
        GibKind::Cone => (z.z3 - HEIGHT_FLOOR).abs() < margin,
        GibKind::HollowCone => axis || (z.z3 - HEIGHT_FLOOR).abs() < margin,
        GibKind::Disk => (params.w - z.z3).abs() < margin,
        GibKind::HollowDisk => axis || (params.w - z.z3).abs() < margin,
    }
}

pub fn kernel_gradcheck(params: &GibParams, offset: Vec3) -> GradcheckReport {
    let loss = |v: &[f64]| {
        let mut p = *params;
        p.set_from_slice(v);
        let (value, grad) = eval_gib_grad(&p, offset);
        (value, grad.to_array().to_vec())
    };
    let report = gradcheck(loss, &params.to_array(), kernel_options());
    debug_assert_eq!(eval_gib(params, offset), eval_gib_grad(params, offset).0);
    report
}

pub fn normalized_gradcheck(params: &GibParams, offset: Vec3, mc: &McSampleSet) -> GradcheckReport {
    let loss = |v: &[f64]| {
        let mut p = *params;
        p.set_from_slice(v);
        let (value, grad) = normalized_eval_grad(&p, offset, mc);
        (value, grad.to_array().to_vec())
    };
    let report = gradcheck(loss, &params.to_array(), kernel_options());
    debug_assert_eq!(normalized_eval(params, offset, mc), normalized_eval_grad(params, offset, mc).0);
    report
}

/// A layer small enough for per-parameter finite differences, on the
/// default scale schedule.
pub fn small_config(seed: u64) -> GiblyConfig {
    GiblyConfig {
        gibs_per_kind: 1,
        num_composites: 4,
        mc_samples: 32,
        projection_dim: 3,
        global_seed: seed,
        ..GiblyConfig::default()
    }
}

pub fn random_cloud(n: usize, half: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| random_offset(rng, half)).collect()).expect("non-empty")
}

/// Lateral surface of a z-aligned cylinder centred at the origin.
pub fn cylinder_surface(points: usize, radius: f64, height: f64, seed: u64) -> PointCloud {
    let spec = SyntheticSceneSpec::new(
        seed,
        vec![PrimitiveSpec::new(PrimitiveShape::Cylinder, 0, points).radius(radius).height(height)],
    );
    generate_scene(&spec).expect("valid spec")
}

/// Two upright poles (label 0) and two uniformly filled boxes (label 1).
pub fn cylinder_vs_noise_spec(points_per_object: usize, seed: u64) -> SyntheticSceneSpec {
    let pole = |c: [f64; 3]| {
        PrimitiveSpec::new(PrimitiveShape::Cylinder, 0, points_per_object)
            .radius(0.3)
            .height(2.0)
            .noise(0.01)
            .at(c)
    };
    let noise = |c: [f64; 3]| {
        PrimitiveSpec::new(PrimitiveShape::Box, 1, points_per_object)
            .extent([2.0, 2.0, 2.0])
            .volume()
            .at(c)
    };
    SyntheticSceneSpec::new(
        seed,
        vec![pole([0.0, 0.0, 1.0]), noise([3.0, 0.0, 1.0]), pole([3.0, 3.0, 1.0]), noise([0.0, 3.0, 1.0])],
    )
}

pub fn training_cap() -> Option<NeighborCap> {
    Some(NeighborCap { max: 16, mode: CapMode::Strided })
}

/// True when any neighbor or Monte-Carlo offset seen by `layer` on `cloud`
/// lies within `margin` of a kernel kink. Self-offsets are exactly zero under
/// every parameter perturbation and are skipped.
pub fn scene_near_kink(layer: &gibly::GiblyLayer, cloud: &PointCloud, margin: f64) -> bool {
    let radius = layer.config().schedule.max_radius();
    let index = gibly::NeighborhoodIndex::new(cloud.coords(), radius).expect("valid radius");
    let pts = cloud.coords();
    layer.gib_params.iter().any(|p| {
        let pairs = pts.iter().enumerate().any(|(i, &q)| {
            index.radius_neighbors(q, radius).into_iter().any(|k| k != i && near_kink(p, pts[k] - q, margin))
        });
        pairs || layer.mc_sets().iter().any(|mc| mc.samples().iter().any(|&y| near_kink(p, y, margin)))
    })
}
