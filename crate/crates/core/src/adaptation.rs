//! Content-aware texel-size control and resolution-aware splitting.
//!
//! Texel size per primitive is `k_min · 2^e` with `e` the stored exponent.
//! Every adaptation pass ranks primitives by their contribution-weighted
//! image error and then, per primitive: splits it when its texture resolution
//! outgrew the (decaying) threshold, refines its texels when it is a top
//! offender, or coarsens them when a low-pass of the texture reproduces it
//! within tolerance. Exponent changes resample content in place; coverage
//! maintenance (grow/crop to ±3σ) is a separate periodic concern.

use crate::camera::Camera;
use crate::geometry::{falloff, Primitive};
use crate::math::{logit, Vec2, Vec3};
use crate::scene::Scene;
use crate::texture::{
    centered_offset, crop_pad, required_resolution, resample_double, resample_half,
    sample_bilinear_raw, uv_fixed, TextureGrid, TexturePool, RES_CAP,
};

#[derive(Clone, Copy, Debug)]
pub struct AdaptationConfig {
    /// Downscale fires when the low-pass reconstruction error stays below this.
    pub tau_ds: f64,
    /// Fraction of ranked primitives excluded from the top set (0.9 → top 10%).
    pub quantile: f64,
    /// Resolution threshold ramp for splitting: start value...
    pub tau_tr_start: f64,
    /// ...end value...
    pub tau_tr_end: f64,
    /// ...reached after this many iterations.
    pub tau_tr_ramp_iters: u64,
    /// Smallest exponent the adaptation may leave behind.
    pub floor_exponent: u32,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            tau_ds: 0.01,
            quantile: 0.9,
            tau_tr_start: 64.0,
            tau_tr_end: 32.0,
            tau_tr_ramp_iters: 7000,
            floor_exponent: 1,
        }
    }
}

/// Pixel size back-projected to the primitive's center from the closest
/// training camera: distance over the larger focal length.
pub fn min_texel_size(center: Vec3, cams: &[Camera]) -> f64 {
    assert!(!cams.is_empty(), "need at least one camera");
    cams.iter()
        .map(|c| {
            let dist = (c.position() - center).norm();
            dist / c.fx.max(c.fy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// World texel size for a stored exponent.
pub fn texel_size(k_min: f64, exponent: u32) -> f64 {
    k_min * (exponent as f64).exp2()
}

/// Split threshold on texture resolution: decays linearly over the ramp, then
/// stays at the end value.
pub fn tau_tr(cfg: &AdaptationConfig, iter: u64) -> f64 {
    let ramp = cfg.tau_tr_ramp_iters.max(1) as f64;
    let frac = (iter.min(cfg.tau_tr_ramp_iters) as f64) / ramp;
    cfg.tau_tr_start - (cfg.tau_tr_start - cfg.tau_tr_end) * frac
}

/// Falloff-weighted mean absolute difference (activated values, channel mean)
/// between the texture and its 2× box down/up reconstruction. Zero for any
/// texture constant within each 2×2 block.
pub fn downscale_error(grid: &TextureGrid, scales: [f64; 2]) -> f64 {
    assert!(grid.res.0 > 0 && grid.res.1 > 0, "downscale error needs a non-empty grid");
    let low = resample_double(&resample_half(grid));
    // The round trip lands on the same texel lattice (offsets compose back),
    // so texel (i, j) of the reconstruction aligns with the original.
    let view = grid.view();
    let low_view = low.view();
    let mut num = 0.0;
    let mut den = 0.0;
    for iu in 0..grid.res.0 {
        for iv in 0..grid.res.1 {
            let local = view.texel_center_local(iu, iv);
            let g = falloff(Vec2::new(local.x / scales[0], local.y / scales[1]));
            let a = view.texel(iu, iv);
            let b = low_view.texel(iu, iv);
            let diff: f64 = (0..3)
                .map(|c| (crate::texture::activate(a[c]) - crate::texture::activate(b[c])).abs())
                .sum::<f64>()
                / 3.0;
            num += g * diff;
            den += g;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Contribution-weighted mean of per-view errors: Σ E·w̄ / Σ w̄, zero when the
/// primitive contributed nowhere.
pub fn aggregate_error(per_view: &[(f64, f64)]) -> f64 {
    let wsum: f64 = per_view.iter().map(|(_, w)| w).sum();
    if wsum <= 0.0 {
        return 0.0;
    }
    per_view.iter().map(|(e, w)| e * w).sum::<f64>() / wsum
}

/// Replace a primitive by children displaced ±1σ along each split axis, with
/// half the scale on those axes, opacity scaled by the 1σ falloff, and texels
/// sampled from the parent's raw grid at the child texel centers.
pub fn split(
    prim: &Primitive,
    grid: Option<&TextureGrid>,
    axes: (bool, bool),
) -> Vec<(Primitive, Option<TextureGrid>)> {
    assert!(axes.0 || axes.1, "split needs at least one axis");
    let scales = prim.scales();
    let signs_u: &[f64] = if axes.0 { &[-1.0, 1.0] } else { &[0.0] };
    let signs_v: &[f64] = if axes.1 { &[-1.0, 1.0] } else { &[0.0] };
    let rot = prim.rotation_matrix();
    let r1 = rot.column(0).into_owned();
    let r2 = rot.column(1).into_owned();

    let opacity_factor = (-0.5f64).exp();
    let child_opacity_logit = {
        let o = opacity_factor * prim.opacity();
        if o > 0.0 && o < 1.0 {
            logit(o)
        } else {
            // Underflowed opacity: in log-odds the factor is an exact shift.
            prim.opacity_logit - 0.5
        }
    };

    let mut out = Vec::new();
    for &su in signs_u {
        for &sv in signs_v {
            // In-plane displacement in the shared tangent frame.
            let shift = Vec2::new(su * scales[0], sv * scales[1]);
            let mut child = prim.clone();
            child.center = prim.center + r1 * shift.x + r2 * shift.y;
            if axes.0 {
                child.log_scales[0] = prim.log_scales[0] - std::f64::consts::LN_2;
            }
            if axes.1 {
                child.log_scales[1] = prim.log_scales[1] - std::f64::consts::LN_2;
            }
            child.opacity_logit = child_opacity_logit;

            let child_grid = grid.map(|g| {
                let res = required_resolution(child.scales(), g.texel_size);
                let offset = centered_offset(res);
                let mut texels = Vec::with_capacity((res.0 * res.1) as usize);
                let parent_view = g.view();
                for iu in 0..res.0 {
                    for iv in 0..res.1 {
                        let child_local = Vec2::new(
                            (iu as f64 - offset.0) * g.texel_size,
                            (iv as f64 - offset.1) * g.texel_size,
                        );
                        let parent_local = child_local + shift;
                        let uv = uv_fixed(parent_local, g.texel_size, g.offset);
                        texels.push(sample_bilinear_raw(&parent_view, uv));
                    }
                }
                TextureGrid { res, texel_size: g.texel_size, offset, texels }
            });
            out.push((child, child_grid));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutationAction {
    Split,
    Upscale,
    Downscale,
    Prune,
}

impl MutationAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            MutationAction::Split => "split",
            MutationAction::Upscale => "upscale",
            MutationAction::Downscale => "downscale",
            MutationAction::Prune => "prune",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MutationRecord {
    /// Index of the primitive in the scene the pass started from.
    pub prim_id: usize,
    pub action: MutationAction,
    pub detail: String,
}

/// Where each post-pass primitive came from; the optimizer uses this to carry
/// or reset per-parameter state.
#[derive(Clone, Copy, Debug)]
pub struct PrimProvenance {
    pub parent: usize,
    /// True for split children: primitive parameters are new.
    pub fresh_prim: bool,
    /// True whenever texel storage was rebuilt (split, upscale, downscale).
    pub fresh_texture: bool,
}

pub struct AdaptOutcome {
    pub scene: Scene,
    pub provenance: Vec<PrimProvenance>,
    pub mutations: Vec<MutationRecord>,
}

fn finer(grid: &TextureGrid) -> TextureGrid {
    let doubled = resample_double(grid);
    if doubled.res.0 > RES_CAP || doubled.res.1 > RES_CAP {
        crop_pad(&doubled, (doubled.res.0.min(RES_CAP), doubled.res.1.min(RES_CAP)))
    } else {
        doubled
    }
}

/// One adaptation pass. `stats[i]` is the aggregated error and total
/// contribution weight of primitive `i`; primitives that contributed nowhere
/// are ineligible for the top set. `point_budget` caps the primitive count by
/// skipping splits that would exceed it.
pub fn adapt_step(
    scene: &Scene,
    stats: &[(f64, f64)],
    cfg: &AdaptationConfig,
    iter: u64,
    point_budget: Option<usize>,
) -> AdaptOutcome {
    let n = scene.n_prims();
    assert_eq!(stats.len(), n, "one (error, weight) pair per primitive");

    // Top set: the highest-error slice of the primitives that were seen at all.
    let mut eligible: Vec<usize> = (0..n).filter(|&i| stats[i].1 > 0.0).collect();
    eligible.sort_unstable_by(|&a, &b| {
        stats[b].0.partial_cmp(&stats[a].0).unwrap().then(a.cmp(&b))
    });
    let top_count = if eligible.is_empty() {
        0
    } else {
        ((eligible.len() as f64) * (1.0 - cfg.quantile)).floor().max(1.0) as usize
    };
    let mut in_top = vec![false; n];
    for &i in eligible.iter().take(top_count) {
        in_top[i] = true;
    }

    let threshold = tau_tr(cfg, iter);
    let mut count = n;
    let mut prims = Vec::with_capacity(n);
    let mut grids: Vec<Option<TextureGrid>> = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let mut mutations = Vec::new();

    for i in 0..n {
        let prim = &scene.prims[i];
        let grid = scene.textures.grid_owned(i);

        let (res, exponent) = match &grid {
            Some(g) => (g.res, prim.t2p_exponent),
            None => ((0, 0), prim.t2p_exponent),
        };
        let has_grid = grid.is_some();
        let axes = (res.0 as f64 > threshold, res.1 as f64 > threshold);
        let split_wanted = has_grid && in_top[i] && (axes.0 || axes.1);
        let upscale_fire = has_grid && in_top[i] && exponent > cfg.floor_exponent;

        let split_fire = if split_wanted {
            let children = if axes.0 && axes.1 { 4 } else { 2 };
            let fits = point_budget.map_or(true, |b| count + (children - 1) <= b);
            if fits {
                count += children - 1;
            }
            fits
        } else {
            false
        };

        if split_fire {
            let children = split(prim, grid.as_ref(), axes);
            let axes_str = match axes {
                (true, false) => "u",
                (false, true) => "v",
                _ => "uv",
            };
            mutations.push(MutationRecord {
                prim_id: i,
                action: MutationAction::Split,
                detail: format!("axes={axes_str} children={} res={}x{}", children.len(), res.0, res.1),
            });
            if upscale_fire {
                mutations.push(MutationRecord {
                    prim_id: i,
                    action: MutationAction::Upscale,
                    detail: format!("exponent {}->{} (applied to children)", exponent, exponent - 1),
                });
            }
            for (mut child, child_grid) in children {
                let child_grid = if upscale_fire {
                    child.t2p_exponent = exponent - 1;
                    child_grid.as_ref().map(finer)
                } else {
                    child_grid
                };
                prims.push(child);
                grids.push(child_grid);
                provenance.push(PrimProvenance { parent: i, fresh_prim: true, fresh_texture: true });
            }
            continue;
        }

        if upscale_fire {
            let g = grid.as_ref().unwrap();
            let refined = finer(g);
            mutations.push(MutationRecord {
                prim_id: i,
                action: MutationAction::Upscale,
                detail: format!(
                    "exponent {}->{} res={}x{}->{}x{}",
                    exponent,
                    exponent - 1,
                    res.0,
                    res.1,
                    refined.res.0,
                    refined.res.1
                ),
            });
            let mut p = prim.clone();
            p.t2p_exponent = exponent - 1;
            prims.push(p);
            grids.push(Some(refined));
            provenance.push(PrimProvenance { parent: i, fresh_prim: false, fresh_texture: true });
            continue;
        }

        // Downscale is the alternative to upscaling only; a 1×1 grid has
        // nothing left to coarsen.
        let downscale_fire = has_grid
            && res != (1, 1)
            && downscale_error(grid.as_ref().unwrap(), prim.scales()) < cfg.tau_ds;
        if downscale_fire {
            let coarse = resample_half(grid.as_ref().unwrap());
            mutations.push(MutationRecord {
                prim_id: i,
                action: MutationAction::Downscale,
                detail: format!(
                    "exponent {}->{} res={}x{}->{}x{}",
                    exponent,
                    exponent + 1,
                    res.0,
                    res.1,
                    coarse.res.0,
                    coarse.res.1
                ),
            });
            let mut p = prim.clone();
            p.t2p_exponent = exponent + 1;
            prims.push(p);
            grids.push(Some(coarse));
            provenance.push(PrimProvenance { parent: i, fresh_prim: false, fresh_texture: true });
            continue;
        }

        prims.push(prim.clone());
        grids.push(grid);
        provenance.push(PrimProvenance { parent: i, fresh_prim: false, fresh_texture: false });
    }

    let scene = Scene::new(prims, TexturePool::from_grids(grids));
    AdaptOutcome { scene, provenance, mutations }
}

/// Drop primitives whose activated opacity fell below the threshold. Returns
/// the surviving scene, the kept original indices (for state remapping), and
/// prune records.
pub fn prune_step(scene: &Scene, min_opacity: f64) -> (Scene, Vec<usize>, Vec<MutationRecord>) {
    let mut kept = Vec::new();
    let mut mutations = Vec::new();
    let mut prims = Vec::new();
    let mut grids = Vec::new();
    for (i, prim) in scene.prims.iter().enumerate() {
        let o = prim.opacity();
        if o < min_opacity {
            mutations.push(MutationRecord {
                prim_id: i,
                action: MutationAction::Prune,
                detail: format!("opacity {o:.6}"),
            });
        } else {
            kept.push(i);
            prims.push(prim.clone());
            grids.push(scene.textures.grid_owned(i));
        }
    }
    (Scene::new(prims, TexturePool::from_grids(grids)), kept, mutations)
}
