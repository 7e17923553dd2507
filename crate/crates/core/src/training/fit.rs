//! Fitting one kernel's parameters to a cloud by gradient ascent on its mean
//! normalized score.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kernels::{GibGrad, GibParams, PreparedGib};
use crate::neighborhood::PointCloud;
use crate::normalization::{make_mc_samples, mean_grad_prepared, omega_prepared, McSampleSet, DEFAULT_MC_SAMPLES};
use crate::training::optim::{AdamWConfig, OptimizerState};

/// Objective drops larger than this reject the step and halve the rate.
pub const ACCEPT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    /// Which of the ten scalars (see [`GibParams::NUM_SCALARS`]) are updated.
    pub trainable: [bool; GibParams::NUM_SCALARS],
    pub mc_samples: usize,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(steps: usize, lr: f64, trainable: [bool; GibParams::NUM_SCALARS]) -> Self {
        FitOptions {
            steps,
            lr,
            trainable,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }

    /// Mask selecting slots by name: `r`, `t`, `beta`, `w`, `angles`,
    /// `precisions`, or `all`.
    pub fn mask_from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<[bool; GibParams::NUM_SCALARS]> {
        let mut mask = [false; GibParams::NUM_SCALARS];
        for name in names {
            let slots: &[usize] = match name.trim() {
                "r" => &[0],
                "t" => &[1],
                "beta" => &[2],
                "w" => &[3],
                "angles" => &[4, 5, 6],
                "precisions" => &[7, 8, 9],
                "all" => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
                "" => &[],
                other => return Err(Error::Config(format!("unknown trainable parameter `{other}`"))),
            };
            for &s in slots {
                mask[s] = true;
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: GibParams,
    /// Objective before the first step and after every step.
    pub trajectory: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Fixed inputs of the objective: the points, their centroid and the
/// sample set over the cloud's bounding ball.
#[derive(Debug, Clone)]
pub struct FitProblem {
    points: Vec<Vec3>,
    center: Vec3,
    mc: McSampleSet,
}

impl FitProblem {
    pub fn new(cloud: &PointCloud, mc_samples: usize, seed: u64) -> Result<Self> {
        let center = cloud.centroid();
        let radius = cloud
            .coords()
            .iter()
            .map(|p| p.distance_squared(center))
            .fold(0.0, f64::max)
            .sqrt();
        // A single-point cloud has no extent; use a unit ball.
        let radius = if radius > 0.0 { radius } else { 1.0 };
        Ok(FitProblem {
            points: cloud.coords().to_vec(),
            center,
            mc: make_mc_samples(mc_samples, radius, seed)?,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn mc(&self) -> &McSampleSet {
        &self.mc
    }

    /// Mean normalized score of every point about the centroid.
    pub fn objective(&self, params: &GibParams) -> f64 {
        let gib = PreparedGib::new(params);
        let sum: f64 = self.points.iter().map(|&p| gib.eval(p - self.center)).sum();
        sum / self.points.len() as f64 - omega_prepared(&gib, &self.mc) / self.mc.len() as f64
    }

    pub fn objective_grad(&self, params: &GibParams) -> (f64, GibGrad) {
        let gib = PreparedGib::new(params);
        let mut value = 0.0;
        let mut grad = GibGrad::default();
        for &p in &self.points {
            let (v, g) = gib.eval_grad(p - self.center);
            value += v;
            grad.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / self.points.len() as f64;
        let mut grad = grad.scaled(inv);
        grad.add_scaled(&mean_grad_prepared(&gib, &self.mc), -1.0);
        (value * inv - omega_prepared(&gib, &self.mc) / self.mc.len() as f64, grad)
    }
}

/// Gradient ascent with adaptive moments on the masked parameters. A step
/// that lowers the objective by more than [`ACCEPT_TOLERANCE`] is undone
/// and the rate halved.
pub fn fit_shape(cloud: &PointCloud, params: GibParams, options: &FitOptions) -> Result<FitResult> {
    let problem = FitProblem::new(cloud, options.mc_samples, options.seed)?;
    fit_problem(&problem, params, options)
}

pub fn fit_problem(problem: &FitProblem, params: GibParams, options: &FitOptions) -> Result<FitResult> {
    let mut params = params;
    params.project();
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr: options.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
        GibParams::NUM_SCALARS,
    );
    let (mut value, mut grad) = problem.objective_grad(&params);
    let mut trajectory = Vec::with_capacity(options.steps + 1);
    trajectory.push(value);
    let (mut accepted, mut rejected) = (0, 0);
    for _ in 0..options.steps {
        let mut descent = grad.to_array();
        for (d, &on) in descent.iter_mut().zip(&options.trainable) {
            *d = if on { -*d } else { 0.0 };
        }
        let saved = opt.clone();
        let mut flat = params.to_array();
        opt.step(&mut flat, &descent, None)?;
        let mut candidate = params;
        candidate.set_from_slice(&flat);
        candidate.project();
        let (new_value, new_grad) = problem.objective_grad(&candidate);
        if new_value.is_finite() && new_value >= value - ACCEPT_TOLERANCE {
            params = candidate;
            value = new_value;
            grad = new_grad;
            accepted += 1;
        } else {
            opt = saved;
            opt.config.lr *= 0.5;
            rejected += 1;
        }
        trajectory.push(value);
    }
    Ok(FitResult {
        params,
        trajectory,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}
