//! Points, rotations and the per-kernel canonical frame.
//!
//! Rotations use the fixed intrinsic order `R = Rz(φz) · Ry(φy) · Rx(φx)`.
//! A neighbor `x` seen from query `q` lands in a kernel's canonical frame as
//! `z = Rᵀ (x − q)`; the axis of symmetry of every kernel family is the
//! canonical z-axis.

use std::f64::consts::PI;
use std::ops::{Add, Index, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance_squared(self, other: Vec3) -> f64 {
        (self - other).norm_squared()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        let mut t = [[0.0; 3]; 3];
        for (i, row) in t.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Mat3(t)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn transpose_mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    pub fn max_abs_diff(&self, other: &Mat3) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        worst
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// Euler angles in radians, applied as `Rz(z) · Ry(y) · Rx(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotationAngles {
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
}

impl RotationAngles {
    pub const IDENTITY: RotationAngles = RotationAngles::new(0.0, 0.0, 0.0);

    pub const fn new(phi_x: f64, phi_y: f64, phi_z: f64) -> Self {
        RotationAngles { phi_x, phi_y, phi_z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.phi_x, self.phi_y, self.phi_z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        RotationAngles::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.phi_x.is_finite() && self.phi_y.is_finite() && self.phi_z.is_finite()
    }

    /// Each angle mapped into (−π, π]. In-range angles are returned untouched.
    pub fn wrapped(self) -> Self {
        RotationAngles::new(wrap_angle(self.phi_x), wrap_angle(self.phi_y), wrap_angle(self.phi_z))
    }
}

/// Maps an angle into (−π, π]; values already in range are returned bit-identical.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
}

pub fn rotation_matrix(angles: RotationAngles) -> Mat3 {
    rot_z(angles.phi_z) * rot_y(angles.phi_y) * rot_x(angles.phi_x)
}

/// `[∂R/∂φx, ∂R/∂φy, ∂R/∂φz]`.
pub fn rotation_matrix_grad(angles: RotationAngles) -> [Mat3; 3] {
    let (rx, ry, rz) = (rot_x(angles.phi_x), rot_y(angles.phi_y), rot_z(angles.phi_z));
    [
        rz * ry * d_rot_x(angles.phi_x),
        rz * d_rot_y(angles.phi_y) * rx,
        d_rot_z(angles.phi_z) * ry * rx,
    ]
}

/// Offset of a neighbor expressed in a kernel's canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CanonicalOffset {
    pub z1: f64,
    pub z2: f64,
    pub z3: f64,
}

impl CanonicalOffset {
    pub fn new(z1: f64, z2: f64, z3: f64) -> Self {
        CanonicalOffset { z1, z2, z3 }
    }

    pub fn from_vec(v: Vec3) -> Self {
        CanonicalOffset::new(v.x, v.y, v.z)
    }

    pub fn to_vec(self) -> Vec3 {
        Vec3::new(self.z1, self.z2, self.z3)
    }

    /// Distance from the canonical z-axis, `sqrt(z1² + z2²)`.
    ///
    /// Every axial kernel family reads its radial distance through this accessor.
    pub fn radial(self) -> f64 {
        self.z1.hypot(self.z2)
    }

    /// Height along the canonical axis.
    pub fn height(self) -> f64 {
        self.z3
    }
}

/// `Rᵀ (neighbor − query)` for a precomputed rotation.
pub fn canonical_offset_with(rotation: &Mat3, query: Vec3, neighbor: Vec3) -> CanonicalOffset {
    let d = neighbor - query;
    CanonicalOffset::from_vec(rotation.transpose_mul_vec(d))
}

pub fn canonical_offset(query: Vec3, neighbor: Vec3, angles: RotationAngles) -> CanonicalOffset {
    canonical_offset_with(&rotation_matrix(angles), query, neighbor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Mat3, b: &Mat3, tol: f64) {
        let err = a.max_abs_diff(b);
        assert!(err < tol, "max abs diff {err} >= {tol}\n{a:?}\n{b:?}");
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(rotation_matrix(RotationAngles::IDENTITY), Mat3::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_matrix(RotationAngles::new(0.0, 0.0, PI / 2.0));
        let v = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn generator_about_z_at_origin() {
        let g = rotation_matrix_grad(RotationAngles::IDENTITY);
        let expected = Mat3([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_close(&g[2], &expected, 1e-15);
    }

    #[test]
    fn self_offset_is_zero() {
        let p = Vec3::new(0.3, -1.2, 4.0);
        let z = canonical_offset(p, p, RotationAngles::new(0.4, 1.1, -2.0));
        assert_eq!(z, CanonicalOffset::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn identity_frame_passes_offset_through() {
        let z = canonical_offset(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0), RotationAngles::IDENTITY);
        assert_eq!(z, CanonicalOffset::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn translation_is_bit_identical() {
        let a = RotationAngles::new(0.7, -0.3, 2.9);
        let q = Vec3::new(0.25, 0.5, -0.125);
        let x = Vec3::new(1.5, -0.75, 0.375);
        let t = Vec3::new(10.0, -4.0, 7.0);
        assert_eq!(canonical_offset(q, x, a), canonical_offset(q + t, x + t, a));
    }

    #[test]
    fn wrap_keeps_range_and_is_idempotent() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(0.5), 0.5);
        let w = wrap_angle(-PI);
        assert!((w - PI).abs() < 1e-15);
        for a in [7.0, -7.0, 3.5 * PI, -100.25, 1e6] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI, "{a} -> {w}");
            assert_eq!(wrap_angle(w), w);
            let turns = (a - w) / (2.0 * PI);
            assert!((turns - turns.round()).abs() < 1e-9, "{a} -> {w}");
        }
    }

    #[test]
    fn pi_over_four_about_x_y_derivative_matches_central_difference() {
        let a = RotationAngles::new(PI / 4.0, 0.0, 0.0);
        let h = 1e-6;
        let plus = rotation_matrix(RotationAngles::new(a.phi_x, h, 0.0));
        let minus = rotation_matrix(RotationAngles::new(a.phi_x, -h, 0.0));
        let mut fd = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                fd[i][j] = (plus.0[i][j] - minus.0[i][j]) / (2.0 * h);
            }
        }
        assert_close(&rotation_matrix_grad(a)[1], &Mat3(fd), 1e-7);
    }
}
