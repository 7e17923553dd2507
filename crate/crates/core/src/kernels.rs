//! The eight geometric-bias kernels and their analytic parameter gradients.
//!
//! Every kernel has the form `ψ = exp(−e)` where the exponent `e ≥ 0` is a
//! deviation from the kernel's shape, measured in the kernel's canonical
//! frame `z = Rᵀ(x − q)`. Gradients are obtained by differentiating `e` and
//! scaling by `−ψ`; the rotation angles enter only through `z`, so their
//! partials are `∂e/∂z · (∂R/∂φ)ᵀ(x − q)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, rotation_matrix_grad, CanonicalOffset, Mat3, RotationAngles, Vec3};

/// Lower bound for the cone height term.
pub const HEIGHT_FLOOR: f64 = 1e-3;
/// Lower bound enforced on radii and shell thicknesses.
pub const LENGTH_FLOOR: f64 = 1e-3;
pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 0.5 - 1e-3;
/// Added to the softplus of every raw ellipsoid scale.
pub const PRECISION_FLOOR: f64 = 1e-6;
/// Exponents are capped here so that scores stay strictly positive in f64.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GibKind {
    Cylinder,
    HollowCylinder,
    Cone,
    HollowCone,
    Disk,
    HollowDisk,
    Ellipsoid,
    HollowEllipsoid,
}

impl GibKind {
    pub const ALL: [GibKind; 8] = [
        GibKind::Cylinder,
        GibKind::HollowCylinder,
        GibKind::Cone,
        GibKind::HollowCone,
        GibKind::Disk,
        GibKind::HollowDisk,
        GibKind::Ellipsoid,
        GibKind::HollowEllipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GibKind::Cylinder => "cylinder",
            GibKind::HollowCylinder => "hollow_cylinder",
            GibKind::Cone => "cone",
            GibKind::HollowCone => "hollow_cone",
            GibKind::Disk => "disk",
            GibKind::HollowDisk => "hollow_disk",
            GibKind::Ellipsoid => "ellipsoid",
            GibKind::HollowEllipsoid => "hollow_ellipsoid",
        }
    }

    pub fn is_ellipsoid(self) -> bool {
        matches!(self, GibKind::Ellipsoid | GibKind::HollowEllipsoid)
    }

    pub fn is_cylinder_family(self) -> bool {
        matches!(self, GibKind::Cylinder | GibKind::HollowCylinder)
    }

    pub fn uses_r(self) -> bool {
        self != GibKind::Ellipsoid
    }

    pub fn uses_t(self) -> bool {
        matches!(
            self,
            GibKind::HollowCylinder | GibKind::HollowCone | GibKind::HollowDisk | GibKind::HollowEllipsoid
        )
    }

    pub fn uses_beta(self) -> bool {
        matches!(self, GibKind::Cone | GibKind::HollowCone)
    }

    pub fn uses_w(self) -> bool {
        matches!(self, GibKind::Disk | GibKind::HollowDisk)
    }

    /// Which of the [`GibParams::NUM_SCALARS`] flattened slots this kind reads.
    pub fn used_slots(self) -> [bool; GibParams::NUM_SCALARS] {
        let e = self.is_ellipsoid();
        [
            self.uses_r(),
            self.uses_t(),
            self.uses_beta(),
            self.uses_w(),
            true,
            true,
            true,
            e,
            e,
            e,
        ]
    }
}

impl fmt::Display for GibKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GibKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        GibKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown kernel kind '{s}'")))
    }
}

/// Softplus with a small floor; maps a raw scale to a strictly positive precision.
pub fn positive(raw: f64) -> f64 {
    let sp = if raw > 30.0 { raw + (-raw).exp().ln_1p() } else { raw.exp().ln_1p() };
    sp + PRECISION_FLOOR
}

fn positive_grad(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

/// Inverse of [`positive`] for precisions above the floor.
pub fn raw_from_positive(p: f64) -> f64 {
    let s = p - PRECISION_FLOOR;
    if s > 30.0 {
        s + (-(-s).exp()).ln_1p()
    } else {
        s.exp_m1().ln()
    }
}

/// One kernel instance. Only the fields relevant to `kind` are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibParams {
    pub kind: GibKind,
    pub angles: RotationAngles,
    pub r: f64,
    pub t: f64,
    pub beta: f64,
    pub w: f64,
    /// Raw ellipsoid scales; the precisions are `positive(ell_scales[k])`.
    pub ell_scales: [f64; 3],
}

impl GibParams {
    /// Flattened layout: `r, t, beta, w, φx, φy, φz, λ1, λ2, λ3`.
    pub const NUM_SCALARS: usize = 10;

    pub fn new(kind: GibKind) -> Self {
        GibParams {
            kind,
            angles: RotationAngles::IDENTITY,
            r: 1.0,
            t: 0.1,
            beta: 0.25,
            w: 0.0,
            ell_scales: [raw_from_positive(1.0); 3],
        }
    }

    pub fn with_angles(mut self, angles: RotationAngles) -> Self {
        self.angles = angles;
        self
    }

    pub fn with_r(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn with_t(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_w(mut self, w: f64) -> Self {
        self.w = w;
        self
    }

    /// Sets the raw scales so the ellipsoid precisions equal `precisions`.
    pub fn with_precisions(mut self, precisions: [f64; 3]) -> Self {
        self.ell_scales = precisions.map(raw_from_positive);
        self
    }

    pub fn precisions(&self) -> [f64; 3] {
        self.ell_scales.map(positive)
    }

    pub fn to_array(&self) -> [f64; Self::NUM_SCALARS] {
        let a = self.angles;
        let l = self.ell_scales;
        [self.r, self.t, self.beta, self.w, a.phi_x, a.phi_y, a.phi_z, l[0], l[1], l[2]]
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        assert_eq!(v.len(), Self::NUM_SCALARS);
        self.r = v[0];
        self.t = v[1];
        self.beta = v[2];
        self.w = v[3];
        self.angles = RotationAngles::new(v[4], v[5], v[6]);
        self.ell_scales = [v[7], v[8], v[9]];
    }

    /// Clamps r, t and β into their admissible ranges and wraps the angles.
    /// Idempotent.
    pub fn project(&mut self) {
        self.r = self.r.max(LENGTH_FLOOR);
        self.t = self.t.max(LENGTH_FLOOR);
        self.beta = self.beta.clamp(BETA_MIN, BETA_MAX);
        self.angles = self.angles.wrapped();
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.r >= LENGTH_FLOOR
            && self.t >= LENGTH_FLOOR
            && (BETA_MIN..=BETA_MAX).contains(&self.beta)
    }
}

/// Gradient of a kernel score with respect to every field of [`GibParams`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GibGrad {
    pub d_r: f64,
    pub d_t: f64,
    pub d_beta: f64,
    pub d_w: f64,
    pub d_angles: [f64; 3],
    pub d_ell_scales: [f64; 3],
}

impl GibGrad {
    pub fn to_array(&self) -> [f64; GibParams::NUM_SCALARS] {
        let a = self.d_angles;
        let l = self.d_ell_scales;
        [self.d_r, self.d_t, self.d_beta, self.d_w, a[0], a[1], a[2], l[0], l[1], l[2]]
    }

    pub fn from_array(v: [f64; GibParams::NUM_SCALARS]) -> Self {
        GibGrad {
            d_r: v[0],
            d_t: v[1],
            d_beta: v[2],
            d_w: v[3],
            d_angles: [v[4], v[5], v[6]],
            d_ell_scales: [v[7], v[8], v[9]],
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &GibGrad, scale: f64) {
        self.d_r += scale * other.d_r;
        self.d_t += scale * other.d_t;
        self.d_beta += scale * other.d_beta;
        self.d_w += scale * other.d_w;
        for k in 0..3 {
            self.d_angles[k] += scale * other.d_angles[k];
            self.d_ell_scales[k] += scale * other.d_ell_scales[k];
        }
    }

    pub fn scaled(&self, scale: f64) -> GibGrad {
        let mut out = GibGrad::default();
        out.add_scaled(self, scale);
        out
    }
}

/// Partials of the exponent with respect to shape parameters and the canonical offset.
#[derive(Debug, Clone, Copy, Default)]
struct ExponentGrad {
    r: f64,
    t: f64,
    beta: f64,
    w: f64,
    ell: [f64; 3],
    dz: [f64; 3],
}

/// A kernel with its rotation and derived constants precomputed, ready to be
/// evaluated over many offsets.
#[derive(Debug, Clone)]
pub struct PreparedGib {
    params: GibParams,
    rotation: Mat3,
    rotation_grad: [Mat3; 3],
    precisions: [f64; 3],
    precision_grads: [f64; 3],
    tan_beta: f64,
    dtan_dbeta: f64,
}

impl PreparedGib {
    pub fn new(params: &GibParams) -> Self {
        let tan_beta = (params.beta * PI).tan();
        PreparedGib {
            params: *params,
            rotation: rotation_matrix(params.angles),
            rotation_grad: rotation_matrix_grad(params.angles),
            precisions: params.ell_scales.map(positive),
            precision_grads: params.ell_scales.map(positive_grad),
            tan_beta,
            dtan_dbeta: PI * (1.0 + tan_beta * tan_beta),
        }
    }

    pub fn params(&self) -> &GibParams {
        &self.params
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    /// Raw offset `x − q` into the canonical frame.
    #[inline]
    pub fn canonical(&self, offset: Vec3) -> CanonicalOffset {
        CanonicalOffset::from_vec(self.rotation.transpose_mul_vec(offset))
    }

    /// Exponent for a canonical offset.
    #[inline]
    fn exponent(&self, z: CanonicalOffset) -> f64 {
        let p = &self.params;
        let rho2 = z.z1 * z.z1 + z.z2 * z.z2;
        match p.kind {
            GibKind::Cylinder => rho2 / (2.0 * p.r * p.r),
            GibKind::HollowCylinder => {
                let u = rho2.sqrt() - p.r;
                u * u / (2.0 * p.t * p.t)
            }
            GibKind::Cone => {
                let sigma = p.r * z.z3.max(HEIGHT_FLOOR) * self.tan_beta;
                rho2 / (2.0 * sigma * sigma)
            }
            GibKind::HollowCone => {
                let u = rho2.sqrt() - p.r * z.z3.max(HEIGHT_FLOOR) * self.tan_beta;
                u * u / (2.0 * p.t * p.t)
            }
            GibKind::Disk => rho2 / (2.0 * p.r * p.r) * (p.w - z.z3).abs(),
            GibKind::HollowDisk => {
                let u = rho2.sqrt() - p.r;
                u * u / (2.0 * p.t * p.t) * (p.w - z.z3).abs()
            }
            GibKind::Ellipsoid => 0.5 * self.quadratic(z),
            GibKind::HollowEllipsoid => {
                let u = self.quadratic(z).sqrt() - p.r;
                u * u / (2.0 * p.t * p.t)
            }
        }
    }

    /// `dᵀΛd` expressed in the canonical frame: `Σ p_k z_k²`.
    #[inline]
    fn quadratic(&self, z: CanonicalOffset) -> f64 {
        let p = &self.precisions;
        p[0] * z.z1 * z.z1 + p[1] * z.z2 * z.z2 + p[2] * z.z3 * z.z3
    }

    fn exponent_grad(&self, z: CanonicalOffset) -> (f64, ExponentGrad) {
        let p = &self.params;
        let rho2 = z.z1 * z.z1 + z.z2 * z.z2;
        let rho = rho2.sqrt();
        // ∂ρ/∂(z1, z2), with 0 on the axis
        let (drho1, drho2) = if rho > 0.0 { (z.z1 / rho, z.z2 / rho) } else { (0.0, 0.0) };
        let mut g = ExponentGrad::default();
        let e = match p.kind {
            GibKind::Cylinder => {
                let r2 = p.r * p.r;
                g.r = -rho2 / (r2 * p.r);
                g.dz = [z.z1 / r2, z.z2 / r2, 0.0];
                rho2 / (2.0 * r2)
            }
            GibKind::HollowCylinder => {
                let t2 = p.t * p.t;
                let u = rho - p.r;
                let de_du = u / t2;
                g.r = -de_du;
                g.t = -u * u / (t2 * p.t);
                g.dz = [de_du * drho1, de_du * drho2, 0.0];
                u * u / (2.0 * t2)
            }
            GibKind::Cone => {
                let above = z.z3 > HEIGHT_FLOOR;
                let h = z.z3.max(HEIGHT_FLOOR);
                let sigma = p.r * h * self.tan_beta;
                let s2 = sigma * sigma;
                let de_dsigma = -rho2 / (s2 * sigma);
                g.r = de_dsigma * h * self.tan_beta;
                g.beta = de_dsigma * p.r * h * self.dtan_dbeta;
                let dh = if above { de_dsigma * p.r * self.tan_beta } else { 0.0 };
                g.dz = [z.z1 / s2, z.z2 / s2, dh];
                rho2 / (2.0 * s2)
            }
            GibKind::HollowCone => {
                let above = z.z3 > HEIGHT_FLOOR;
                let h = z.z3.max(HEIGHT_FLOOR);
                let t2 = p.t * p.t;
                let u = rho - p.r * h * self.tan_beta;
                let de_du = u / t2;
                // u = ρ − s, so ∂e/∂s = −∂e/∂u
                g.r = -de_du * h * self.tan_beta;
                g.beta = -de_du * p.r * h * self.dtan_dbeta;
                g.t = -u * u / (t2 * p.t);
                let dh = if above { -de_du * p.r * self.tan_beta } else { 0.0 };
                g.dz = [de_du * drho1, de_du * drho2, dh];
                u * u / (2.0 * t2)
            }
            GibKind::Disk => {
                let r2 = p.r * p.r;
                let a = rho2 / (2.0 * r2);
                let gap = p.w - z.z3;
                let b = gap.abs();
                let sign = sign0(gap);
                g.r = -rho2 / (r2 * p.r) * b;
                g.w = a * sign;
                g.dz = [b * z.z1 / r2, b * z.z2 / r2, -a * sign];
                a * b
            }
            GibKind::HollowDisk => {
                let t2 = p.t * p.t;
                let u = rho - p.r;
                let a = u * u / (2.0 * t2);
                let gap = p.w - z.z3;
                let b = gap.abs();
                let sign = sign0(gap);
                let da_du = u / t2;
                g.r = -da_du * b;
                g.t = -u * u / (t2 * p.t) * b;
                g.w = a * sign;
                g.dz = [b * da_du * drho1, b * da_du * drho2, -a * sign];
                a * b
            }
            GibKind::Ellipsoid => {
                let zs = [z.z1, z.z2, z.z3];
                for k in 0..3 {
                    g.ell[k] = 0.5 * zs[k] * zs[k] * self.precision_grads[k];
                    g.dz[k] = self.precisions[k] * zs[k];
                }
                0.5 * self.quadratic(z)
            }
            GibKind::HollowEllipsoid => {
                let zs = [z.z1, z.z2, z.z3];
                let m = self.quadratic(z).sqrt();
                let t2 = p.t * p.t;
                let u = m - p.r;
                let de_dm = u / t2;
                let dm_dq = if m > 0.0 { 0.5 / m } else { 0.0 };
                g.r = -de_dm;
                g.t = -u * u / (t2 * p.t);
                for k in 0..3 {
                    g.ell[k] = de_dm * dm_dq * zs[k] * zs[k] * self.precision_grads[k];
                    g.dz[k] = de_dm * dm_dq * 2.0 * self.precisions[k] * zs[k];
                }
                u * u / (2.0 * t2)
            }
        };
        (e, g)
    }

    /// Score of a raw offset `x − q`.
    #[inline]
    pub fn eval(&self, offset: Vec3) -> f64 {
        self.eval_canonical(self.canonical(offset))
    }

    /// Score of an offset already expressed in this kernel's canonical frame.
    #[inline]
    pub fn eval_canonical(&self, z: CanonicalOffset) -> f64 {
        (-self.exponent(z).min(MAX_EXPONENT)).exp()
    }

    /// Score and full parameter gradient of a raw offset.
    pub fn eval_grad(&self, offset: Vec3) -> (f64, GibGrad) {
        let z = self.canonical(offset);
        let (e, eg) = self.exponent_grad(z);
        if e > MAX_EXPONENT {
            return ((-MAX_EXPONENT).exp(), GibGrad::default());
        }
        let psi = (-e).exp();
        let s = -psi;
        let dz = Vec3::from_array(eg.dz);
        let mut d_angles = [0.0; 3];
        for (k, da) in d_angles.iter_mut().enumerate() {
            // z = Rᵀd  ⇒  ∂z/∂φ_k = (∂R/∂φ_k)ᵀ d
            let dzdphi = self.rotation_grad[k].transpose_mul_vec(offset);
            *da = s * dz.dot(dzdphi);
        }
        let grad = GibGrad {
            d_r: s * eg.r,
            d_t: s * eg.t,
            d_beta: s * eg.beta,
            d_w: s * eg.w,
            d_angles,
            d_ell_scales: eg.ell.map(|v| s * v),
        };
        (psi, grad)
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Alignment score of the raw offset `x − q` under `params`.
pub fn eval_gib(params: &GibParams, offset: Vec3) -> f64 {
    PreparedGib::new(params).eval(offset)
}

pub fn eval_gib_grad(params: &GibParams, offset: Vec3) -> (f64, GibGrad) {
    PreparedGib::new(params).eval_grad(offset)
}

/// `Λ = R · diag(positive(λ)) · Rᵀ` for the ellipsoid families.
pub fn ellipsoid_precision(params: &GibParams) -> Result<Mat3> {
    if !params.kind.is_ellipsoid() {
        return Err(Error::WrongKind(params.kind.name()));
    }
    let r = rotation_matrix(params.angles);
    let p = params.precisions();
    let mut diag = Mat3::ZERO;
    for k in 0..3 {
        diag.0[k][k] = p[k];
    }
    Ok(r * diag * r.transpose())
}
