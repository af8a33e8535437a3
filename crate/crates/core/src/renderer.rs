//! Forward renderer: conservative tile binning, per-ray exact depth sort,
//! front-to-back alpha compositing.
//!
//! Tiling only prunes candidates; the per-pixel hit set is decided by the
//! intersection tests alone, so results are bit-identical for any tile size
//! and any primitive-list permutation (ties broken by list index). Per-tile
//! accumulator partials are merged in tile order, which keeps renders
//! identical across thread counts.

use crate::camera::Camera;
use crate::geometry::{falloff, intersect_plane, sh_color, Ray};
use crate::img::Image;
use crate::math::{Vec2, Vec3};
use crate::scene::Scene;
use crate::texture::{sample_bilinear, uv_fixed, GridView};
use rayon::prelude::*;

pub const TILE: u32 = 16;
/// Hits with falloff below this floor are dropped. The binning radius (below)
/// guarantees every hit above the floor is inside its tile's candidate list.
pub const FALLOFF_FLOOR: f64 = 1e-8;
/// Front-to-back compositing stops once transmittance drops below this;
/// worst-case truncation stays an order of magnitude under the brute-force
/// agreement tolerance.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-6;
/// Canonical-frame binning radius; falloff(6.3) ≈ 2.4e-9 < FALLOFF_FLOOR.
const BIN_RADIUS_SIGMA: f64 = 6.3;

/// One ray/surfel crossing, ready for compositing.
#[derive(Clone, Debug)]
pub struct Hit {
    pub t: f64,
    pub falloff: f64,
    /// Activated opacity.
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Composited {
    /// Unclamped accumulated color.
    pub color: [f64; 3],
    /// Compositing weight per hit, in hit order.
    pub weights: Vec<f64>,
    /// Transmittance remaining behind the last processed hit.
    pub transmittance: f64,
}

/// Front-to-back compositing of depth-sorted hits. Weights are
/// w_i = T_i·o_i·G_i with T the running transmittance; Σw + T_final = 1 holds
/// by construction wherever the loop stops.
pub fn composite(hits: &[Hit]) -> Composited {
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(hits.len());
    let mut t = 1.0;
    for h in hits {
        let alpha = h.opacity * h.falloff;
        let w = t * alpha;
        for c in 0..3 {
            color[c] += w * h.color[c];
        }
        weights.push(w);
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_FLOOR {
            break;
        }
    }
    Composited { color, weights, transmittance: t }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Σ of compositing weights per pixel.
    pub weight_sum: Vec<f64>,
    /// Σ over pixels of each primitive's compositing weights.
    pub prim_weight: Vec<f64>,
    /// Per-pixel (primitive, weight) contributions; filled on request.
    pub contributions: Option<Vec<Vec<(u32, f64)>>>,
}

/// Per-primitive data hoisted out of the pixel loop.
pub(crate) struct PrimPre<'a> {
    pub(crate) center: Vec3,
    pub(crate) r1: Vec3,
    pub(crate) r2: Vec3,
    pub(crate) normal: Vec3,
    pub(crate) inv_scale: [f64; 2],
    pub(crate) opacity: f64,
    pub(crate) sh: &'a [f64; 48],
    pub(crate) grid: Option<GridView<'a>>,
    /// World-space binning radius.
    pub(crate) radius: f64,
}

pub(crate) fn precompute<'a>(scene: &'a Scene) -> Vec<PrimPre<'a>> {
    scene
        .prims
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let r = p.rotation_matrix();
            let s = p.scales();
            PrimPre {
                center: p.center,
                r1: r.column(0).into(),
                r2: r.column(1).into(),
                normal: r.column(2).into(),
                inv_scale: [1.0 / s[0], 1.0 / s[1]],
                opacity: p.opacity(),
                sh: &p.sh,
                grid: scene.textures.grid(i),
                radius: BIN_RADIUS_SIGMA * s[0].max(s[1]),
            }
        })
        .collect()
}

/// Conservative pixel-interval of the bounding sphere along one axis:
/// tangent slopes of the circle (center c, depth z, radius r) seen from the
/// origin, mapped through the focal length.
fn slope_interval(c: f64, z: f64, r: f64) -> Option<(f64, f64)> {
    if z - r <= 1e-9 {
        return None; // sphere reaches the camera plane: no finite bound
    }
    let disc = (c * c + z * z - r * r).sqrt() * r;
    let denom = z * z - r * r;
    Some(((c * z - disc) / denom, (c * z + disc) / denom))
}

pub(crate) fn tile_bins(pre: &[PrimPre], cam: &Camera, tile: u32) -> (u32, u32, Vec<Vec<u32>>) {
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (i, p) in pre.iter().enumerate() {
        let cc = cam.to_camera(p.center);
        if cc.z + p.radius <= 0.0 {
            continue; // entirely behind the camera
        }
        let (tx0, tx1, ty0, ty1) = match (
            slope_interval(cc.x, cc.z, p.radius),
            slope_interval(cc.y, cc.z, p.radius),
        ) {
            (Some((mx0, mx1)), Some((my0, my1))) => {
                let px0 = (mx0 * cam.fx + cam.cx - 0.5).floor();
                let px1 = (mx1 * cam.fx + cam.cx - 0.5).ceil();
                let py0 = (my0 * cam.fy + cam.cy - 0.5).floor();
                let py1 = (my1 * cam.fy + cam.cy - 0.5).ceil();
                if px1 < 0.0 || py1 < 0.0 || px0 >= cam.width as f64 || py0 >= cam.height as f64 {
                    continue;
                }
                (
                    (px0.max(0.0) as u32) / tile,
                    (px1.min((cam.width - 1) as f64) as u32) / tile,
                    (py0.max(0.0) as u32) / tile,
                    (py1.min((cam.height - 1) as f64) as u32) / tile,
                )
            }
            // Sphere touches the camera plane: fall back to every tile.
            _ => (0, tiles_x - 1, 0, tiles_y - 1),
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    (tiles_x, tiles_y, bins)
}

pub(crate) struct PixelHit {
    pub(crate) t: f64,
    pub(crate) prim: u32,
    pub(crate) local: Vec2,
    pub(crate) falloff: f64,
}

pub(crate) fn gather_hits(pre: &[PrimPre], candidates: &[u32], ray: &Ray, out: &mut Vec<PixelHit>) {
    out.clear();
    for &pi in candidates {
        let p = &pre[pi as usize];
        let Some((t, world)) = intersect_plane(p.center, p.normal, ray) else {
            continue;
        };
        let d = world - p.center;
        let local = Vec2::new(p.r1.dot(&d), p.r2.dot(&d));
        let g = falloff(Vec2::new(local.x * p.inv_scale[0], local.y * p.inv_scale[1]));
        if g < FALLOFF_FLOOR {
            continue;
        }
        out.push(PixelHit { t, prim: pi, local, falloff: g });
    }
    out.sort_unstable_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.prim.cmp(&b.prim)));
}

struct TilePartial {
    tile_index: usize,
    /// (pixel index, color, transmittance, weight sum)
    pixels: Vec<(usize, [f64; 3], f64, f64)>,
    prim_weight: Vec<f64>,
    contributions: Option<Vec<(usize, Vec<(u32, f64)>)>>,
}

pub fn render(scene: &Scene, cam: &Camera) -> RenderOutput {
    render_tiled(scene, cam, TILE, false)
}

pub fn render_with_contributions(scene: &Scene, cam: &Camera) -> RenderOutput {
    render_tiled(scene, cam, TILE, true)
}

/// Tile size exposed so equivalence across tilings can be tested directly.
pub fn render_tiled(scene: &Scene, cam: &Camera, tile: u32, keep_contributions: bool) -> RenderOutput {
    assert!(tile > 0);
    let pre = precompute(scene);
    let (tiles_x, tiles_y, bins) = tile_bins(&pre, cam, tile);
    let n_prims = scene.n_prims();
    let (w, h) = (cam.width as usize, cam.height as usize);

    let partials: Vec<TilePartial> = (0..(tiles_x * tiles_y) as usize)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti as u32 % tiles_x, ti as u32 / tiles_x);
            let candidates = &bins[ti];
            let mut partial = TilePartial {
                tile_index: ti,
                pixels: Vec::new(),
                prim_weight: vec![0.0; n_prims],
                contributions: keep_contributions.then(Vec::new),
            };
            let mut hits = Vec::new();
            for py in (ty * tile)..((ty * tile + tile).min(cam.height)) {
                for px in (tx * tile)..((tx * tile + tile).min(cam.width)) {
                    let ray = cam.pixel_ray(px, py);
                    gather_hits(&pre, candidates, &ray, &mut hits);
                    let mut color = [0.0; 3];
                    let mut trans = 1.0;
                    let mut wsum = 0.0;
                    let mut contribs = keep_contributions.then(Vec::new);
                    for hit in &hits {
                        let p = &pre[hit.prim as usize];
                        let alpha = p.opacity * hit.falloff;
                        let wgt = trans * alpha;
                        let mut c = sh_color(p.sh, ray.dir);
                        if let Some(grid) = &p.grid {
                            let uv = uv_fixed(hit.local, grid.texel_size, grid.offset);
                            let tex = sample_bilinear(grid, uv);
                            for k in 0..3 {
                                c[k] += tex[k];
                            }
                        }
                        for k in 0..3 {
                            color[k] += wgt * c[k];
                        }
                        partial.prim_weight[hit.prim as usize] += wgt;
                        wsum += wgt;
                        if let Some(list) = contribs.as_mut() {
                            list.push((hit.prim, wgt));
                        }
                        trans *= 1.0 - alpha;
                        if trans < TRANSMITTANCE_FLOOR {
                            break;
                        }
                    }
                    let pix = py as usize * w + px as usize;
                    partial.pixels.push((pix, color, trans, wsum));
                    if let (Some(all), Some(list)) = (partial.contributions.as_mut(), contribs) {
                        all.push((pix, list));
                    }
                }
            }
            partial
        })
        .collect();

    let mut image = Image::new(w, h);
    let mut transmittance = vec![1.0; w * h];
    let mut weight_sum = vec![0.0; w * h];
    let mut prim_weight = vec![0.0; n_prims];
    let mut contributions = keep_contributions.then(|| vec![Vec::new(); w * h]);
    // Sequential merge in tile order: deterministic across thread counts.
    for partial in partials {
        debug_assert!(partial.tile_index < (tiles_x * tiles_y) as usize);
        for (pix, color, trans, wsum) in partial.pixels {
            image.data[pix] = [
                color[0].clamp(0.0, 1.0),
                color[1].clamp(0.0, 1.0),
                color[2].clamp(0.0, 1.0),
            ];
            transmittance[pix] = trans;
            weight_sum[pix] = wsum;
        }
        for (i, w) in partial.prim_weight.into_iter().enumerate() {
            prim_weight[i] += w;
        }
        if let (Some(all), Some(part)) = (contributions.as_mut(), partial.contributions) {
            for (pix, list) in part {
                all[pix] = list;
            }
        }
    }
    RenderOutput { image, transmittance, weight_sum, prim_weight, contributions }
}

/// Per-primitive (error mass, weight mass) against a reference image:
/// E_i = Σ_pixels mean-abs-channel-error · w_i, w̄_i = Σ_pixels w_i.
/// Requires a render that kept contributions.
pub fn error_accumulate(out: &RenderOutput, reference: &Image) -> Vec<(f64, f64)> {
    let contribs = out
        .contributions
        .as_ref()
        .expect("error_accumulate needs render_with_contributions output");
    assert_eq!((out.image.width, out.image.height), (reference.width, reference.height));
    let n_prims = out.prim_weight.len();
    let mut acc = vec![(0.0, 0.0); n_prims];
    for (pix, list) in contribs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let a = out.image.data[pix];
        let b = reference.data[pix];
        let err = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
        for &(prim, w) in list {
            let e = &mut acc[prim as usize];
            e.0 += err * w;
            e.1 += w;
        }
    }
    acc
}
