//! Browser bindings for three interactive views: a kernel field slice, a
//! 1-D objective scan over the radius, and a radius fit.
//!
//! Every export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use gibly::normalization::{make_mc_samples, normalized_eval};
use gibly::training::fit::{fit_problem, FitOptions, FitProblem};
use gibly::training::scene::{generate_scene, PrimitiveShape, PrimitiveSpec, SyntheticSceneSpec};
use gibly::{GibKind, GibParams, RotationAngles, Vec3};
use wasm_bindgen::prelude::*;

/// Monte-Carlo samples used for the normalized field.
const FIELD_MC_SAMPLES: usize = 256;
const FIT_POINTS: usize = 2000;
const CYLINDER_HEIGHT: f64 = 6.0;

fn params(kind: &str, r: f64, t: f64, beta: f64, w: f64, angles: [f64; 3]) -> Result<GibParams, String> {
    let kind: GibKind = kind.parse().map_err(|e: gibly::Error| e.to_string())?;
    let mut p = GibParams::new(kind)
        .with_r(r)
        .with_t(t)
        .with_beta(beta)
        .with_w(w)
        .with_angles(RotationAngles::from_array(angles));
    p.project();
    Ok(p)
}

/// Kernel values on a `res × res` grid over the x–z plane through the query,
/// spanning `[-extent, extent]²`, row-major with z decreasing down the rows.
/// With `normalized`, the Monte-Carlo ball of radius `extent` supplies the
/// subtracted mean.
#[allow(clippy::too_many_arguments)]
pub fn field_slice(
    kind: &str,
    r: f64,
    t: f64,
    beta: f64,
    w: f64,
    angles: [f64; 3],
    normalized: bool,
    extent: f64,
    res: usize,
) -> Result<Vec<f64>, String> {
    if !(2..=512).contains(&res) {
        return Err("resolution must be between 2 and 512".into());
    }
    let p = params(kind, r, t, beta, w, angles)?;
    let mc = make_mc_samples(FIELD_MC_SAMPLES, extent, 0).map_err(|e| e.to_string())?;
    let step = 2.0 * extent / (res - 1) as f64;
    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        let z = extent - row as f64 * step;
        for col in 0..res {
            let x = -extent + col as f64 * step;
            let offset = Vec3::new(x, 0.0, z);
            out.push(if normalized {
                normalized_eval(&p, offset, &mc)
            } else {
                gibly::kernels::eval_gib(&p, offset)
            });
        }
    }
    Ok(out)
}

fn cylinder_problem(radius: f64, noise: f64, seed: u64) -> Result<FitProblem, String> {
    let spec = SyntheticSceneSpec::new(
        seed,
        vec![PrimitiveSpec::new(PrimitiveShape::Cylinder, 0, FIT_POINTS)
            .radius(radius)
            .height(CYLINDER_HEIGHT)
            .noise(noise)],
    );
    let cloud = generate_scene(&spec).map_err(|e| e.to_string())?;
    FitProblem::new(&cloud, 256, 0).map_err(|e| e.to_string())
}

fn hollow(r: f64, t: f64) -> GibParams {
    GibParams::new(GibKind::HollowCylinder).with_r(r).with_t(t)
}

/// Objective of a hollow-cylinder kernel on a sampled cylinder surface at
/// `samples` radii evenly spaced over `[r_min, r_max]`.
pub fn radius_scan(radius: f64, noise: f64, t: f64, r_min: f64, r_max: f64, samples: usize) -> Result<Vec<f64>, String> {
    if samples < 2 || !(r_min > 0.0 && r_max > r_min) {
        return Err("need at least 2 samples and 0 < r_min < r_max".into());
    }
    let problem = cylinder_problem(radius, noise, 11)?;
    let step = (r_max - r_min) / (samples - 1) as f64;
    Ok((0..samples).map(|k| problem.objective(&hollow(r_min + k as f64 * step, t))).collect())
}

/// Fits the radius from `r0`. Returns the fitted radius followed by the
/// objective after every step.
pub fn radius_fit(radius: f64, noise: f64, t: f64, r0: f64, steps: usize, lr: f64) -> Result<Vec<f64>, String> {
    let problem = cylinder_problem(radius, noise, 11)?;
    let mask = FitOptions::mask_from_names(["r"]).map_err(|e| e.to_string())?;
    let fit = fit_problem(&problem, hollow(r0, t), &FitOptions::new(steps, lr, mask)).map_err(|e| e.to_string())?;
    let mut out = vec![fit.params.r];
    out.extend(fit.trajectory);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = fieldSlice)]
pub fn field_slice_js(
    kind: &str,
    r: f64,
    t: f64,
    beta: f64,
    w: f64,
    phi_x: f64,
    phi_y: f64,
    phi_z: f64,
    normalized: bool,
    extent: f64,
    res: usize,
) -> Result<Vec<f64>, JsError> {
    field_slice(kind, r, t, beta, w, [phi_x, phi_y, phi_z], normalized, extent, res).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = radiusScan)]
pub fn radius_scan_js(radius: f64, noise: f64, t: f64, r_min: f64, r_max: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    radius_scan(radius, noise, t, r_min, r_max, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = radiusFit)]
pub fn radius_fit_js(radius: f64, noise: f64, t: f64, r0: f64, steps: usize, lr: f64) -> Result<Vec<f64>, JsError> {
    radius_fit(radius, noise, t, r0, steps, lr).map_err(|e| JsError::new(&e))
}
