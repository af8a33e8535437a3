//! Seeded synthetic scenes with a ground-truth oracle renderer.
//!
//! The oracle works on plainly stored quantities (activated opacity, direct
//! RGB, activated texel offsets) and composites back-to-front with no sorting
//! shortcuts, culling, or early termination — deliberately sharing nothing
//! with the main renderer beyond vector math. Reference images therefore come
//! from an implementation that cannot inherit the renderer's bugs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{Primitive, SH_C0};
use crate::img::Image;
use crate::math::{logit, mat_to_quat, quat_to_mat, Mat3, Vec3};
use crate::scene::Scene;
use crate::texture::{centered_offset, TextureGrid, TexturePool};

use super::{Dataset, ScenePoint};

/// Activated texel offsets on the oracle side: values in (-1, 1) added to the
/// base color inside the grid, zero outside.
#[derive(Clone, Debug)]
pub struct GtTexture {
    pub res: (u32, u32),
    pub texel_size: f64,
    pub offset: (f64, f64),
    pub values: Vec<[f64; 3]>,
}

impl GtTexture {
    fn value(&self, iu: u32, iv: u32) -> [f64; 3] {
        self.values[(iu * self.res.1 + iv) as usize]
    }
}

/// A flat elliptical splat with plainly stored appearance.
#[derive(Clone, Debug)]
pub struct GtSurfel {
    pub center: Vec3,
    /// Unit quaternion (w, x, y, z); tangent axes are the first two columns.
    pub rotation: [f64; 4],
    pub scales: [f64; 2],
    /// Activated opacity in (0, 1].
    pub opacity: f64,
    /// View-independent base RGB.
    pub base_color: [f64; 3],
    pub texture: Option<GtTexture>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub surfels: Vec<GtSurfel>,
}

/// Bilinear interpolation of activated offsets; out-of-grid taps contribute
/// nothing. Independent reimplementation for the oracle.
fn gt_texture_offset(tex: &GtTexture, lx: f64, ly: f64) -> [f64; 3] {
    let u = lx / tex.texel_size + tex.offset.0;
    let v = ly / tex.texel_size + tex.offset.1;
    let fu = u.floor();
    let fv = v.floor();
    let (au, av) = (u - fu, v - fv);
    let (i0, j0) = (fu as i64, fv as i64);
    let mut out = [0.0; 3];
    for (di, dj, wgt) in [
        (0i64, 0i64, (1.0 - au) * (1.0 - av)),
        (1, 0, au * (1.0 - av)),
        (0, 1, (1.0 - au) * av),
        (1, 1, au * av),
    ] {
        let (i, j) = (i0 + di, j0 + dj);
        if i >= 0 && j >= 0 && (i as u32) < tex.res.0 && (j as u32) < tex.res.1 {
            let t = tex.value(i as u32, j as u32);
            for c in 0..3 {
                out[c] += wgt * t[c];
            }
        }
    }
    out
}

/// Direct per-pixel ray trace of the ground truth: intersect every surfel,
/// order by depth, composite back-to-front, clamp.
pub fn oracle_render(gt: &GroundTruth, cam: &Camera) -> Image {
    let frames: Vec<(Mat3, Vec3)> = gt
        .surfels
        .iter()
        .map(|s| {
            let m = quat_to_mat(s.rotation);
            let n = m.column(2).into_owned();
            (m, n)
        })
        .collect();
    Image::from_fn(cam.width as usize, cam.height as usize, |px, py| {
        let ray = cam.pixel_ray(px as u32, py as u32);
        let mut samples: Vec<(f64, usize, f64, [f64; 3])> = Vec::new();
        for (idx, s) in gt.surfels.iter().enumerate() {
            let (frame, normal) = &frames[idx];
            let denom = normal.dot(&ray.dir);
            if denom.abs() <= 1e-8 {
                continue;
            }
            let t = normal.dot(&(s.center - ray.origin)) / denom;
            if t <= 1e-4 {
                continue;
            }
            let hit = ray.origin + ray.dir * t - s.center;
            let lx = frame.column(0).dot(&hit);
            let ly = frame.column(1).dot(&hit);
            let (cx, cy) = (lx / s.scales[0], ly / s.scales[1]);
            let g = (-0.5 * (cx * cx + cy * cy)).exp();
            let alpha = s.opacity * g;
            let mut color = s.base_color;
            if let Some(tex) = &s.texture {
                let off = gt_texture_offset(tex, lx, ly);
                for c in 0..3 {
                    color[c] += off[c];
                }
            }
            samples.push((t, idx, alpha, color));
        }
        samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut out = [0.0; 3];
        for &(_, _, alpha, color) in samples.iter().rev() {
            for c in 0..3 {
                out[c] = alpha * color[c] + (1.0 - alpha) * out[c];
            }
        }
        [
            out[0].clamp(0.0, 1.0),
            out[1].clamp(0.0, 1.0),
            out[2].clamp(0.0, 1.0),
        ]
    })
}

/// Convert ground truth into the trainable representation: logits for opacity,
/// DC spherical harmonics for base color, pre-activation texels.
pub fn to_scene(gt: &GroundTruth) -> Scene {
    let mut prims = Vec::new();
    let mut grids = Vec::new();
    for s in &gt.surfels {
        let mut sh = [0.0; 48];
        for c in 0..3 {
            sh[c * 16] = s.base_color[c] / SH_C0;
        }
        prims.push(Primitive {
            center: s.center,
            log_scales: [s.scales[0].ln(), s.scales[1].ln()],
            rotation: s.rotation,
            opacity_logit: logit(s.opacity),
            sh,
            t2p_exponent: 1,
        });
        grids.push(s.texture.as_ref().map(|tex| TextureGrid {
            res: tex.res,
            texel_size: tex.texel_size,
            offset: tex.offset,
            texels: tex.values.iter().map(|v| {
                [
                    logit((v[0] + 1.0) / 2.0),
                    logit((v[1] + 1.0) / 2.0),
                    logit((v[2] + 1.0) / 2.0),
                ]
            }).collect(),
        }));
    }
    Scene::new(prims, TexturePool::from_grids(grids))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticSpec {
    TexturedQuad,
    TwoQuadsOcclusion,
    HalfFlatHalfNoise,
    BoxRoom,
}

impl SyntheticSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticSpec::TexturedQuad => "textured-quad",
            SyntheticSpec::TwoQuadsOcclusion => "two-quads-occlusion",
            SyntheticSpec::HalfFlatHalfNoise => "half-flat-half-noise",
            SyntheticSpec::BoxRoom => "box-room",
        }
    }

    pub fn all() -> [SyntheticSpec; 4] {
        [
            SyntheticSpec::TexturedQuad,
            SyntheticSpec::TwoQuadsOcclusion,
            SyntheticSpec::HalfFlatHalfNoise,
            SyntheticSpec::BoxRoom,
        ]
    }
}

impl std::str::FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<SyntheticSpec> {
        SyntheticSpec::all()
            .into_iter()
            .find(|spec| spec.name() == s)
            .ok_or_else(|| {
                Error::dataset(format!(
                    "unknown synthetic scene '{s}' (expected one of: textured-quad, \
                     two-quads-occlusion, half-flat-half-noise, box-room)"
                ))
            })
    }
}

const VIEW_SIZE: u32 = 64;
const FOCAL: f64 = 70.0;

/// Cameras on a cone around the -z axis, all aimed at the origin.
fn cap_cameras(n: usize, dist: f64, tilt: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            let pos = Vec3::new(
                dist * tilt.sin() * theta.cos(),
                dist * tilt.sin() * theta.sin(),
                -dist * tilt.cos(),
            );
            Camera::look_at(
                pos,
                Vec3::zeros(),
                Vec3::new(0.0, 1.0, 0.0),
                FOCAL,
                FOCAL,
                VIEW_SIZE,
                VIEW_SIZE,
            )
        })
        .collect()
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Jittered grid of points on a surfel's plane within ±extent, colored by the
/// oracle's surface color at each point.
fn surface_points(
    s: &GtSurfel,
    per_axis: usize,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ScenePoint> {
    let frame = quat_to_mat(s.rotation);
    let r1 = frame.column(0).into_owned();
    let r2 = frame.column(1).into_owned();
    let step = 2.0 * extent / per_axis as f64;
    let mut out = Vec::new();
    for i in 0..per_axis {
        for j in 0..per_axis {
            let lx = -extent + (i as f64 + rng.gen_range(0.25..0.75)) * step;
            let ly = -extent + (j as f64 + rng.gen_range(0.25..0.75)) * step;
            let mut rgb = s.base_color;
            if let Some(tex) = &s.texture {
                let off = gt_texture_offset(tex, lx, ly);
                for c in 0..3 {
                    rgb[c] = (rgb[c] + off[c]).clamp(0.0, 1.0);
                }
            }
            out.push(ScenePoint { xyz: s.center + r1 * lx + r2 * ly, rgb });
        }
    }
    out
}

fn finish(
    gt: GroundTruth,
    cameras: Vec<Camera>,
    points: Vec<ScenePoint>,
) -> (Dataset, GroundTruth) {
    let images: Vec<Image> = cameras.iter().map(|c| oracle_render(&gt, c)).collect();
    let (train, test) = super::default_split(cameras.len());
    (Dataset { cameras, images, train, test, points }, gt)
}

fn textured_quad(seed: u64) -> (Dataset, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = (16u32, 16u32);
    let sigma = 1.3;
    let texel_size = 6.0 * sigma / res.0 as f64;
    let amp = [0.22, 0.18, 0.20];
    let phase: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut values = Vec::new();
    for i in 0..res.0 {
        for j in 0..res.1 {
            let fu = std::f64::consts::TAU * (i as f64 + 0.5) / res.0 as f64;
            let fv = std::f64::consts::TAU * (j as f64 + 0.5) / res.1 as f64;
            values.push([
                amp[0] * (fu + phase[0]).sin() * (fv + phase[1]).cos(),
                amp[1] * (fu + phase[2]).cos() * (fv + phase[3]).sin(),
                amp[2] * ((fu + fv) * 0.5 + phase[4]).sin() * (phase[5]).cos(),
            ]);
        }
    }
    let surfel = GtSurfel {
        center: Vec3::zeros(),
        rotation: identity_quat(),
        scales: [sigma, sigma],
        opacity: 0.95,
        base_color: [0.55, 0.50, 0.45],
        texture: Some(GtTexture { res, texel_size, offset: centered_offset(res), values }),
    };
    let cameras = cap_cameras(8, 3.2, 0.42);
    let points = surface_points(&surfel, 6, 1.8 * sigma, &mut rng);
    finish(GroundTruth { surfels: vec![surfel] }, cameras, points)
}

fn two_quads_occlusion(seed: u64) -> (Dataset, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let front = GtSurfel {
        center: Vec3::zeros(),
        rotation: identity_quat(),
        scales: [1.2, 1.2],
        opacity: 0.5,
        base_color: [0.8, 0.25, 0.2],
        texture: None,
    };
    let back = GtSurfel {
        center: Vec3::new(0.0, 0.0, 0.8),
        rotation: identity_quat(),
        scales: [1.2, 1.2],
        opacity: 0.5,
        base_color: [0.2, 0.3, 0.8],
        texture: None,
    };
    // View 0 sits exactly on the optical axis with the principal point at a
    // pixel center, so the middle pixel composites the two quads with unit
    // falloff: 0.5·front + 0.25·back, a hand-checkable value.
    let mut cameras = vec![Camera {
        rotation: Mat3::identity(),
        translation: Vec3::new(0.0, 0.0, 3.0),
        fx: FOCAL,
        fy: FOCAL,
        cx: 32.5,
        cy: 32.5,
        width: VIEW_SIZE,
        height: VIEW_SIZE,
    }];
    for i in 0..5 {
        let theta = std::f64::consts::TAU * i as f64 / 5.0;
        let pos = Vec3::new(
            3.0 * 0.3f64.sin() * theta.cos(),
            3.0 * 0.3f64.sin() * theta.sin(),
            -3.0 * 0.3f64.cos(),
        );
        cameras.push(Camera::look_at(
            pos,
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            FOCAL,
            FOCAL,
            VIEW_SIZE,
            VIEW_SIZE,
        ));
    }
    let mut points = surface_points(&front, 5, 1.5, &mut rng);
    points.extend(surface_points(&back, 5, 1.5, &mut rng));
    finish(GroundTruth { surfels: vec![front, back] }, cameras, points)
}

fn half_flat_half_noise(seed: u64) -> (Dataset, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 1.6;
    let res = (96u32, 96u32);
    let texel_size = 0.1; // ≈ 2 pixels back-projected from the cap cameras
    let offset = centered_offset(res);
    let mut values = Vec::new();
    for i in 0..res.0 {
        for j in 0..res.1 {
            let lx = (i as f64 - offset.0) * texel_size;
            let _ = j;
            if lx < 0.0 {
                values.push([0.0; 3]);
            } else {
                values.push([
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ]);
            }
        }
    }
    let surfel = GtSurfel {
        center: Vec3::zeros(),
        rotation: identity_quat(),
        scales: [sigma, sigma],
        opacity: 0.95,
        base_color: [0.5, 0.5, 0.5],
        texture: Some(GtTexture { res, texel_size, offset, values }),
    };
    let cameras = cap_cameras(8, 3.2, 0.42);
    let points = surface_points(&surfel, 13, 1.5 * sigma, &mut rng);
    finish(GroundTruth { surfels: vec![surfel] }, cameras, points)
}

fn box_room(seed: u64) -> (Dataset, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 1.5;
    let sigma = 1.4;
    // (center, inward normal, first tangent axis, base color)
    let walls: [(Vec3, Vec3, Vec3, [f64; 3]); 6] = [
        (Vec3::new(half, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), [0.70, 0.30, 0.30]),
        (Vec3::new(-half, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -1.0), [0.30, 0.70, 0.30]),
        (Vec3::new(0.0, half, 0.0), Vec3::new(0.0, -1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), [0.30, 0.30, 0.70]),
        (Vec3::new(0.0, -half, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), [0.70, 0.70, 0.30]),
        (Vec3::new(0.0, 0.0, half), Vec3::new(0.0, 0.0, -1.0), Vec3::new(1.0, 0.0, 0.0), [0.70, 0.30, 0.70]),
        (Vec3::new(0.0, 0.0, -half), Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), [0.30, 0.70, 0.70]),
    ];
    let res = (12u32, 12u32);
    let texel_size = 6.0 * sigma / res.0 as f64;
    let mut surfels = Vec::new();
    for (center, normal, r1, color) in walls {
        let r2 = normal.cross(&r1);
        let rotation = mat_to_quat(&Mat3::from_columns(&[r1, r2, normal]));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut values = Vec::new();
        for i in 0..res.0 {
            for j in 0..res.1 {
                let fu = std::f64::consts::TAU * (i as f64 + 0.5) / res.0 as f64;
                let fv = std::f64::consts::TAU * (j as f64 + 0.5) / res.1 as f64;
                let v = 0.12 * (fu + phase).sin() * fv.cos();
                values.push([v, v * 0.8, v * 0.6]);
            }
        }
        surfels.push(GtSurfel {
            center,
            rotation,
            scales: [sigma, sigma],
            opacity: 0.95,
            base_color: color,
            texture: Some(GtTexture { res, texel_size, offset: centered_offset(res), values }),
        });
    }

    // Three stacked rings — level, pitched up, pitched down — so every room
    // surface including floor and ceiling is covered from nearby viewpoints
    // and held-out views interpolate between trained neighbors.
    let mut cameras = Vec::new();
    for i in 0..36 {
        let ring = i / 12;
        let theta = std::f64::consts::TAU * (i % 12) as f64 / 12.0
            + std::f64::consts::TAU * ring as f64 / 36.0;
        let (cam_y, target_y) = match ring {
            0 => (0.0, 0.0),
            1 => (0.35, 1.6),
            _ => (-0.35, -1.6),
        };
        let pos = Vec3::new(0.3 * theta.cos(), cam_y, 0.3 * theta.sin());
        let target = Vec3::new(1.8 * theta.cos(), target_y, 1.8 * theta.sin());
        cameras.push(Camera::look_at(
            pos,
            target,
            Vec3::new(0.0, 1.0, 0.0),
            FOCAL,
            FOCAL,
            VIEW_SIZE,
            VIEW_SIZE,
        ));
    }

    // Round-robin across walls so any budget-capped prefix still covers the
    // whole room.
    let per_wall: Vec<Vec<ScenePoint>> = surfels
        .iter()
        .map(|s| surface_points(s, 5, 1.5 * sigma, &mut rng))
        .collect();
    let mut points = Vec::new();
    for k in 0..25 {
        for wall in &per_wall {
            points.push(wall[k]);
        }
    }
    finish(GroundTruth { surfels }, cameras, points)
}

/// Build one of the named scenes with a deterministic seed.
pub fn make_synthetic(spec: SyntheticSpec, seed: u64) -> (Dataset, GroundTruth) {
    match spec {
        SyntheticSpec::TexturedQuad => textured_quad(seed),
        SyntheticSpec::TwoQuadsOcclusion => two_quads_occlusion(seed),
        SyntheticSpec::HalfFlatHalfNoise => half_flat_half_noise(seed),
        SyntheticSpec::BoxRoom => box_room(seed),
    }
}
