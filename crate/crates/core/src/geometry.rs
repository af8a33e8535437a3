//! Surfel primitives and the frame changes used by both rendering and training.
//!
//! A primitive is a textured 2D Gaussian disc: an oriented plane patch with
//! per-axis scales, a Gaussian falloff in its canonical frame, a spherical
//! harmonics base color, and (optionally) a world-anchored texture grid that
//! is resolved through the texture module.

use crate::math::{quat_to_mat, sigmoid, Mat3, Vec2, Vec3};

/// Rays with |n·d| at or below this are treated as parallel to the surfel plane.
pub const EPS_PARALLEL: f64 = 1e-8;
/// Intersections closer than this along the ray are rejected (behind/grazing).
pub const T_NEAR: f64 = 1e-4;
/// Falloff magnitude at the ±3σ rim: exp(-4.5).
pub const FALLOFF_3_SIGMA: f64 = 0.011108996538242306;

/// A point on the surfel plane expressed in its 2D tangent frame (world units).
pub type LocalPoint = Vec2;

#[derive(Clone, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

#[derive(Clone, Debug)]
pub struct Primitive {
    pub center: Vec3,
    /// Natural log of the per-axis scales; keeps σ strictly positive under
    /// unconstrained optimizer steps.
    pub log_scales: [f64; 2],
    /// (w, x, y, z), renormalized after every optimizer step.
    pub rotation: [f64; 4],
    /// Pre-activation opacity; activated through a sigmoid.
    pub opacity_logit: f64,
    /// Degree-3 SH, channel-major: 16 coefficients for R, then G, then B.
    pub sh: [f64; 48],
    /// Texel-to-pixel exponent e; texel size = base size · 2^e. At least 1
    /// whenever the primitive carries a texture.
    pub t2p_exponent: u32,
}

impl Primitive {
    pub fn scales(&self) -> [f64; 2] {
        [self.log_scales[0].exp(), self.log_scales[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat(self.rotation)
    }

    /// Plane normal: third column of the rotation matrix.
    pub fn normal(&self) -> Vec3 {
        self.rotation_matrix().column(2).into()
    }
}

/// Ray/plane intersection. Returns the ray parameter and the world-space hit
/// point, or `None` for near-parallel rays and hits at t ≤ `T_NEAR`.
pub fn intersect(prim: &Primitive, ray: &Ray) -> Option<(f64, Vec3)> {
    let n = prim.normal();
    intersect_plane(prim.center, n, ray)
}

/// Same as `intersect` but with the plane given explicitly; the renderer uses
/// this form to reuse a precomputed normal.
pub fn intersect_plane(center: Vec3, normal: Vec3, ray: &Ray) -> Option<(f64, Vec3)> {
    let nd = normal.dot(&ray.dir);
    if nd.abs() <= EPS_PARALLEL {
        return None;
    }
    let t = normal.dot(&(center - ray.origin)) / nd;
    if t <= T_NEAR {
        return None;
    }
    Some((t, ray.origin + ray.dir * t))
}

/// World point → surfel tangent frame. For on-plane points the dropped third
/// component is ~0; callers pass intersection points, so it is discarded.
pub fn to_local(prim: &Primitive, p_world: Vec3) -> LocalPoint {
    let r = prim.rotation_matrix();
    let d = p_world - prim.center;
    Vec2::new(r.column(0).dot(&d), r.column(1).dot(&d))
}

/// Tangent frame → canonical (unit-variance) frame.
pub fn to_canonical(prim: &Primitive, local: LocalPoint) -> Vec2 {
    let s = prim.scales();
    Vec2::new(local.x / s[0], local.y / s[1])
}

/// Gaussian falloff exp(-||x||²/2) in the canonical frame.
pub fn falloff(canonical: Vec2) -> f64 {
    (-0.5 * (canonical.x * canonical.x + canonical.y * canonical.y)).exp()
}

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Degree-3 real SH basis evaluated at a unit direction.
pub fn sh_basis(dir: Vec3) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// View-dependent base color. Unclamped: the texture offset is added and the
/// final pixel is clamped after compositing.
pub fn sh_color(sh: &[f64; 48], dir: Vec3) -> [f64; 3] {
    let b = sh_basis(dir);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let coeffs = &sh[ch * 16..(ch + 1) * 16];
        *o = coeffs.iter().zip(b.iter()).map(|(c, v)| c * v).sum();
    }
    out
}
