//! Labeled synthetic scenes built from posed primitives.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, RotationAngles, Vec3};
use crate::neighborhood::PointCloud;
use crate::normalization::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveShape {
    /// Axis along local z, spanning `[-height/2, height/2]`.
    Cylinder,
    /// Apex at the local origin, opening along +z to `radius` at `height`.
    Cone,
    /// Flat in the local xy plane; `height` is the slab thickness in volume mode.
    Disk,
    /// Semi-axes along local x, y, z.
    Ellipsoid,
    /// Axis-aligned box with full side lengths `extent`.
    Box,
}

/// One posed primitive and how to sample it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpec {
    pub shape: PrimitiveShape,
    pub label: u16,
    pub points: usize,
    #[serde(default)]
    pub center: [f64; 3],
    /// Rotation angles (radians) applied about x, then y, then z.
    #[serde(default)]
    pub angles: [f64; 3],
    #[serde(default)]
    pub radius: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub semi_axes: [f64; 3],
    #[serde(default)]
    pub extent: [f64; 3],
    /// Sample the boundary (true) or the interior (false).
    #[serde(default = "default_surface")]
    pub surface: bool,
    #[serde(default)]
    pub noise: f64,
}

fn default_surface() -> bool {
    true
}

impl PrimitiveSpec {
    pub fn new(shape: PrimitiveShape, label: u16, points: usize) -> Self {
        PrimitiveSpec {
            shape,
            label,
            points,
            center: [0.0; 3],
            angles: [0.0; 3],
            radius: 0.0,
            height: 0.0,
            semi_axes: [0.0; 3],
            extent: [0.0; 3],
            surface: true,
            noise: 0.0,
        }
    }

    pub fn at(mut self, center: [f64; 3]) -> Self {
        self.center = center;
        self
    }

    pub fn rotated(mut self, angles: [f64; 3]) -> Self {
        self.angles = angles;
        self
    }

    pub fn radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn height(mut self, height: f64) -> Self {
        self.height = height;
        self
    }

    pub fn semi_axes(mut self, semi_axes: [f64; 3]) -> Self {
        self.semi_axes = semi_axes;
        self
    }

    pub fn extent(mut self, extent: [f64; 3]) -> Self {
        self.extent = extent;
        self
    }

    pub fn volume(mut self) -> Self {
        self.surface = false;
        self
    }

    pub fn noise(mut self, sigma: f64) -> Self {
        self.noise = sigma;
        self
    }

    fn validate(&self, i: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidSpec(format!("primitive {i}: {what}")));
        if self.points == 0 {
            return bad("points must be at least 1");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and non-negative");
        }
        if !self.center.iter().chain(&self.angles).all(|v| v.is_finite()) {
            return bad("center and angles must be finite");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self.shape {
            PrimitiveShape::Cylinder | PrimitiveShape::Cone => {
                if !positive(self.radius) || !positive(self.height) {
                    return bad("radius and height must be positive");
                }
            }
            PrimitiveShape::Disk => {
                if !positive(self.radius) {
                    return bad("radius must be positive");
                }
                if !self.surface && !positive(self.height) {
                    return bad("a volume disk needs a positive height (thickness)");
                }
            }
            PrimitiveShape::Ellipsoid => {
                if !self.semi_axes.iter().all(|&a| positive(a)) {
                    return bad("semi_axes must be positive");
                }
            }
            PrimitiveShape::Box => {
                if !self.extent.iter().all(|&a| positive(a)) {
                    return bad("extent must be positive");
                }
            }
        }
        Ok(())
    }

    /// One point in the primitive's local frame.
    fn sample_local(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let (r, h) = (self.radius, self.height);
        match (self.shape, self.surface) {
            (PrimitiveShape::Cylinder, true) => {
                let a = rng.gen_range(0.0..2.0 * PI);
                Vec3::new(r * a.cos(), r * a.sin(), h * (rng.gen::<f64>() - 0.5))
            }
            (PrimitiveShape::Cylinder, false) => {
                let (x, y) = disk_point(rng, r);
                Vec3::new(x, y, h * (rng.gen::<f64>() - 0.5))
            }
            (PrimitiveShape::Cone, true) => {
                // Lateral area density grows linearly with height.
                let z = h * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..2.0 * PI);
                let rho = r * z / h;
                Vec3::new(rho * a.cos(), rho * a.sin(), z)
            }
            (PrimitiveShape::Cone, false) => {
                let z = h * rng.gen::<f64>().cbrt();
                let (x, y) = disk_point(rng, r * z / h);
                Vec3::new(x, y, z)
            }
            (PrimitiveShape::Disk, true) => {
                let (x, y) = disk_point(rng, r);
                Vec3::new(x, y, 0.0)
            }
            (PrimitiveShape::Disk, false) => {
                let (x, y) = disk_point(rng, r);
                Vec3::new(x, y, h * (rng.gen::<f64>() - 0.5))
            }
            (PrimitiveShape::Ellipsoid, surface) => {
                let d = unit_direction(rng);
                let scale = if surface { 1.0 } else { rng.gen::<f64>().cbrt() };
                let a = self.semi_axes;
                Vec3::new(a[0] * d.x * scale, a[1] * d.y * scale, a[2] * d.z * scale)
            }
            (PrimitiveShape::Box, false) => {
                let e = self.extent;
                Vec3::new(
                    e[0] * (rng.gen::<f64>() - 0.5),
                    e[1] * (rng.gen::<f64>() - 0.5),
                    e[2] * (rng.gen::<f64>() - 0.5),
                )
            }
            (PrimitiveShape::Box, true) => {
                let e = self.extent;
                let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let pick = rng.gen::<f64>() * areas.iter().sum::<f64>();
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let mut c = [0.0; 3];
                for (k, v) in c.iter_mut().enumerate() {
                    *v = e[k] * (rng.gen::<f64>() - 0.5);
                }
                c[axis] = if rng.gen::<bool>() { 0.5 } else { -0.5 } * e[axis];
                Vec3::from_array(c)
            }
        }
    }
}

fn disk_point(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let rho = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..2.0 * PI);
    (rho * a.cos(), rho * a.sin())
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v * (1.0 / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<PrimitiveSpec>,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64, primitives: Vec<PrimitiveSpec>) -> Self {
        SyntheticSceneSpec { seed, primitives }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidSpec("scene needs at least one primitive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSceneSpec = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn total_points(&self) -> usize {
        self.primitives.iter().map(|p| p.points).sum()
    }
}

/// Samples every primitive in order from its own seeded stream.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut coords = Vec::with_capacity(spec.total_points());
    let mut labels = Vec::with_capacity(spec.total_points());
    for (i, p) in spec.primitives.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
        let rot = rotation_matrix(RotationAngles::from_array(p.angles));
        let center = Vec3::from_array(p.center);
        let noise = (p.noise > 0.0).then(|| Normal::new(0.0, p.noise).expect("sigma validated"));
        for _ in 0..p.points {
            let mut x = center + rot.mul_vec(p.sample_local(&mut rng));
            if let Some(n) = &noise {
                x = x + Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
            }
            coords.push(x);
            labels.push(p.label);
        }
    }
    PointCloud::new(coords)?.with_labels(labels)
}

/// The four-class benchmark scene: cylinder, cone shell, disk and ellipsoid,
/// two instances of each on a 4×2 grid with 3 m spacing in a checkerboard
/// arrangement, so that position alone does not identify the class.
/// `points_per_class` is split evenly between the two instances.
pub fn four_class_scene(points_per_class: usize, noise: f64, seed: u64) -> SyntheticSceneSpec {
    use PrimitiveShape::*;
    let first = points_per_class / 2;
    let second = points_per_class - first;
    let layout: [[u16; 4]; 2] = [[0, 1, 2, 3], [2, 3, 0, 1]];
    let mut primitives = Vec::with_capacity(8);
    for (row, classes) in layout.iter().enumerate() {
        for (col, &class) in classes.iter().enumerate() {
            let (x, y) = (3.0 * col as f64, 3.0 * row as f64);
            let n = if row == 0 { first } else { second };
            let tilt = 0.15 * (col as f64 - 1.5);
            let p = match class {
                0 => PrimitiveSpec::new(Cylinder, 0, n).at([x, y, 1.0]).radius(0.3).height(2.0),
                1 => PrimitiveSpec::new(Cone, 1, n).at([x, y, 0.0]).radius(0.7).height(1.6),
                2 => PrimitiveSpec::new(Disk, 2, n).at([x, y, 0.8]).radius(1.0),
                _ => PrimitiveSpec::new(Ellipsoid, 3, n).at([x, y, 0.9]).semi_axes([0.8, 0.5, 0.6]),
            };
            primitives.push(p.rotated([tilt, -tilt, 0.0]).noise(noise));
        }
    }
    SyntheticSceneSpec::new(seed, primitives)
}

/// `n` points uniform in the cube `[-half, half]³`, unlabeled.
pub fn uniform_cloud(n: usize, half: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
            )
        })
        .collect();
    PointCloud::new(coords)
}

/// A street-like tile roughly 40 × 40 × 10 m: a ground slab with poles,
/// cone-shaped trees, ellipsoidal shrubs and flat disks scattered over it.
/// About half the points go to the ground. Labels: 0 ground, 1 pole,
/// 2 tree, 3 shrub, 4 disk.
pub fn tile_scene(total_points: usize, seed: u64) -> SyntheticSceneSpec {
    use PrimitiveShape::*;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let objects = 48;
    let ground = (total_points / 2).max(1);
    let per_object = ((total_points - ground.min(total_points)) / objects).max(1);
    let mut primitives = vec![PrimitiveSpec::new(Box, 0, ground)
        .at([0.0, 0.0, -0.05])
        .extent([40.0, 40.0, 0.1])
        .volume()];
    for k in 0..objects {
        let x = rng.gen_range(-18.0..18.0);
        let y = rng.gen_range(-18.0..18.0);
        let p = match k % 4 {
            0 => PrimitiveSpec::new(Cylinder, 1, per_object).at([x, y, 5.0]).radius(0.15).height(10.0),
            1 => PrimitiveSpec::new(Cone, 2, per_object)
                .at([x, y, 7.0])
                .rotated([PI, 0.0, 0.0])
                .radius(1.8)
                .height(6.0),
            2 => PrimitiveSpec::new(Ellipsoid, 3, per_object).at([x, y, 0.8]).semi_axes([1.2, 0.9, 0.8]),
            _ => PrimitiveSpec::new(Disk, 4, per_object).at([x, y, 2.5]).radius(1.5),
        };
        primitives.push(p.noise(0.02));
    }
    SyntheticSceneSpec::new(seed, primitives)
}
