//! World-anchored texture grids attached to surfels.
//!
//! Texels store unactivated color offsets; activation maps them into (-1, 1)
//! per texel *before* bilinear interpolation, so out-of-grid texels (activated
//! zero) blend toward the SH base color instead of dragging samples to black.
//! The UV mapping depends only on the tangent-frame point and the texel size,
//! never on the primitive's scales: texels keep their world positions while
//! the footprint optimizes.

use crate::math::{sigmoid, Vec2};

/// Hard per-axis resolution limit.
pub const RES_CAP: u32 = 256;
/// Texel extent along each axis covers ±3σ: 6σ / texel size texels.
pub const COVERAGE_SIGMA: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TextureGrid {
    pub res: (u32, u32),
    /// World units per texel.
    pub texel_size: f64,
    /// UV of the tangent-frame origin; texel (i, j) center sits at
    /// local = ((i - offset.0) · texel_size, (j - offset.1) · texel_size).
    pub offset: (f64, f64),
    /// Pre-activation values, u-major: index = iu · res_v + iv.
    pub texels: Vec<[f64; 3]>,
}

/// Borrowed view of a grid; sampling functions take this so pooled and owned
/// grids share one code path.
#[derive(Clone, Copy, Debug)]
pub struct GridView<'a> {
    pub res: (u32, u32),
    pub texel_size: f64,
    pub offset: (f64, f64),
    pub texels: &'a [[f64; 3]],
}

impl TextureGrid {
    /// Fresh zeroed grid covering ±3σ at the given texel size, exactly centered.
    pub fn allocate(scales: [f64; 2], texel_size: f64) -> TextureGrid {
        let res = required_resolution(scales, texel_size);
        TextureGrid {
            res,
            texel_size,
            offset: centered_offset(res),
            texels: vec![[0.0; 3]; (res.0 * res.1) as usize],
        }
    }

    pub fn view(&self) -> GridView<'_> {
        GridView {
            res: self.res,
            texel_size: self.texel_size,
            offset: self.offset,
            texels: &self.texels,
        }
    }

    pub fn texel_count(&self) -> usize {
        self.texels.len()
    }
}

impl<'a> GridView<'a> {
    pub fn texel(&self, iu: u32, iv: u32) -> [f64; 3] {
        self.texels[(iu * self.res.1 + iv) as usize]
    }

    /// Tangent-frame position of a texel center.
    pub fn texel_center_local(&self, iu: u32, iv: u32) -> Vec2 {
        Vec2::new(
            (iu as f64 - self.offset.0) * self.texel_size,
            (iv as f64 - self.offset.1) * self.texel_size,
        )
    }
}

pub fn centered_offset(res: (u32, u32)) -> (f64, f64) {
    (res.0 as f64 / 2.0 - 0.5, res.1 as f64 / 2.0 - 0.5)
}

/// Per-texel activation into (-1, 1).
pub fn activate(x: f64) -> f64 {
    2.0 * sigmoid(x) - 1.0
}

/// Derivative of `activate`.
pub fn activate_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    2.0 * s * (1.0 - s)
}

/// World-fixed UV: tangent-frame point over texel size, plus the grid offset.
/// Has no dependence on the primitive's scales by construction.
pub fn uv_fixed(local: Vec2, texel_size: f64, offset: (f64, f64)) -> Vec2 {
    Vec2::new(local.x / texel_size + offset.0, local.y / texel_size + offset.1)
}

/// Scale-coupled UV used only as an ablation: canonical coordinates stretched
/// over a ±s extent and scaled by the resolution, so texture content deforms
/// whenever the footprint changes.
pub fn uv_naive(canonical: Vec2, s_extent: f64, res: (u32, u32)) -> Vec2 {
    Vec2::new(
        (canonical.x / (2.0 * s_extent) + 0.5) * res.0 as f64,
        (canonical.y / (2.0 * s_extent) + 0.5) * res.1 as f64,
    )
}

/// Up to four in-range bilinear taps: (texel index, interpolation weight).
pub type Taps = [Option<(usize, f64)>; 4];

fn tap_setup(uv: Vec2) -> (i64, i64, f64, f64) {
    let i0 = uv.x.floor();
    let j0 = uv.y.floor();
    (i0 as i64, j0 as i64, uv.x - i0, uv.y - j0)
}

fn tap_index(view: &GridView, i: i64, j: i64) -> Option<usize> {
    if i >= 0 && j >= 0 && (i as u32) < view.res.0 && (j as u32) < view.res.1 {
        Some((i as u32 * view.res.1 + j as u32) as usize)
    } else {
        None
    }
}

/// Bilinear sample of *activated* texels; taps outside the grid contribute 0.
pub fn sample_bilinear(view: &GridView, uv: Vec2) -> [f64; 3] {
    let (i0, j0, fu, fv) = tap_setup(uv);
    let mut out = [0.0; 3];
    for (di, dj, w) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        if let Some(idx) = tap_index(view, i0 + di, j0 + dj) {
            let t = view.texels[idx];
            for c in 0..3 {
                out[c] += w * activate(t[c]);
            }
        }
    }
    out
}

/// Bilinear sample of raw (pre-activation) texels with zero padding; used when
/// resampling content onto children during splits.
pub fn sample_bilinear_raw(view: &GridView, uv: Vec2) -> [f64; 3] {
    let (i0, j0, fu, fv) = tap_setup(uv);
    let mut out = [0.0; 3];
    for (di, dj, w) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        if let Some(idx) = tap_index(view, i0 + di, j0 + dj) {
            let t = view.texels[idx];
            for c in 0..3 {
                out[c] += w * t[c];
            }
        }
    }
    out
}

/// Sample plus everything the backward pass needs: value, d(value)/d(uv) per
/// channel, and the in-range taps for texel gradients.
pub fn sample_bilinear_with_grad(view: &GridView, uv: Vec2) -> ([f64; 3], [f64; 3], [f64; 3], Taps) {
    let (i0, j0, fu, fv) = tap_setup(uv);
    let mut value = [0.0; 3];
    let mut d_u = [0.0; 3];
    let mut d_v = [0.0; 3];
    let mut taps: Taps = [None; 4];
    let corners = [
        (0, 0, (1.0 - fu) * (1.0 - fv), -(1.0 - fv), -(1.0 - fu)),
        (1, 0, fu * (1.0 - fv), 1.0 - fv, -fu),
        (0, 1, (1.0 - fu) * fv, -fv, 1.0 - fu),
        (1, 1, fu * fv, fv, fu),
    ];
    for (k, (di, dj, w, dw_du, dw_dv)) in corners.into_iter().enumerate() {
        if let Some(idx) = tap_index(view, i0 + di, j0 + dj) {
            taps[k] = Some((idx, w));
            let t = view.texels[idx];
            for c in 0..3 {
                let a = activate(t[c]);
                value[c] += w * a;
                d_u[c] += dw_du * a;
                d_v[c] += dw_dv * a;
            }
        }
    }
    (value, d_u, d_v, taps)
}

/// Texels needed to span ±3σ per axis, clamped to [1, RES_CAP].
pub fn required_resolution(scales: [f64; 2], texel_size: f64) -> (u32, u32) {
    let axis = |s: f64| {
        let n = (COVERAGE_SIGMA * s / texel_size).ceil();
        (n.max(1.0) as u64).min(RES_CAP as u64) as u32
    };
    (axis(scales[0]), axis(scales[1]))
}

/// Integer crop/pad to a new resolution, most-centered placement. Retained
/// texels keep their world positions exactly (the offset shifts by the pad
/// amounts); new texels are zero.
pub fn crop_pad(grid: &TextureGrid, new_res: (u32, u32)) -> TextureGrid {
    if new_res == grid.res {
        return grid.clone();
    }
    let pad_u = (new_res.0 as i64 - grid.res.0 as i64).div_euclid(2);
    let pad_v = (new_res.1 as i64 - grid.res.1 as i64).div_euclid(2);
    let mut texels = vec![[0.0; 3]; (new_res.0 * new_res.1) as usize];
    let view = grid.view();
    for iu in 0..new_res.0 {
        let old_u = iu as i64 - pad_u;
        if old_u < 0 || old_u >= grid.res.0 as i64 {
            continue;
        }
        for iv in 0..new_res.1 {
            let old_v = iv as i64 - pad_v;
            if old_v < 0 || old_v >= grid.res.1 as i64 {
                continue;
            }
            texels[(iu * new_res.1 + iv) as usize] = view.texel(old_u as u32, old_v as u32);
        }
    }
    TextureGrid {
        res: new_res,
        texel_size: grid.texel_size,
        offset: (grid.offset.0 + pad_u as f64, grid.offset.1 + pad_v as f64),
        texels,
    }
}

/// Re-fit the grid extent to the current scales at unchanged texel size.
/// Pure crop/pad: never resamples, so content cannot drift.
pub fn reallocate(grid: &TextureGrid, scales: [f64; 2]) -> TextureGrid {
    crop_pad(grid, required_resolution(scales, grid.texel_size))
}

/// Halve the resolution by averaging 2×2 blocks of pre-activation values
/// (partial rim blocks average their present texels); texel size doubles.
pub fn resample_half(grid: &TextureGrid) -> TextureGrid {
    let new_res = (grid.res.0.div_ceil(2).max(1), grid.res.1.div_ceil(2).max(1));
    let view = grid.view();
    let mut texels = vec![[0.0; 3]; (new_res.0 * new_res.1) as usize];
    for bu in 0..new_res.0 {
        for bv in 0..new_res.1 {
            let mut acc = [0.0; 3];
            let mut count = 0.0;
            for du in 0..2u32 {
                for dv in 0..2u32 {
                    let (iu, iv) = (2 * bu + du, 2 * bv + dv);
                    if iu < grid.res.0 && iv < grid.res.1 {
                        let t = view.texel(iu, iv);
                        for c in 0..3 {
                            acc[c] += t[c];
                        }
                        count += 1.0;
                    }
                }
            }
            for c in 0..3 {
                acc[c] /= count;
            }
            texels[(bu * new_res.1 + bv) as usize] = acc;
        }
    }
    TextureGrid {
        res: new_res,
        texel_size: grid.texel_size * 2.0,
        offset: (grid.offset.0 / 2.0 - 0.25, grid.offset.1 / 2.0 - 0.25),
        texels,
    }
}

/// Double the resolution by nearest-neighbor replication; texel size halves.
/// `resample_half ∘ resample_double` is the identity on pre-activation values.
pub fn resample_double(grid: &TextureGrid) -> TextureGrid {
    let new_res = (grid.res.0 * 2, grid.res.1 * 2);
    let view = grid.view();
    let mut texels = vec![[0.0; 3]; (new_res.0 * new_res.1) as usize];
    for iu in 0..new_res.0 {
        for iv in 0..new_res.1 {
            texels[(iu * new_res.1 + iv) as usize] = view.texel(iu / 2, iv / 2);
        }
    }
    TextureGrid {
        res: new_res,
        texel_size: grid.texel_size * 0.5,
        offset: (grid.offset.0 * 2.0 + 0.5, grid.offset.1 * 2.0 + 0.5),
        texels,
    }
}

/// All per-primitive grids, stored contiguously with an index table. Entry i
/// belongs to primitive i; resolution (0, 0) marks an untextured primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturePool {
    data: Vec<[f64; 3]>,
    entries: Vec<PoolEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub start: usize,
    pub res: (u32, u32),
    pub texel_size: f64,
    pub offset: (f64, f64),
}

impl TexturePool {
    pub fn untextured(n_prims: usize) -> TexturePool {
        TexturePool {
            data: Vec::new(),
            entries: vec![
                PoolEntry { start: 0, res: (0, 0), texel_size: 0.0, offset: (0.0, 0.0) };
                n_prims
            ],
        }
    }

    pub fn from_grids(grids: Vec<Option<TextureGrid>>) -> TexturePool {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(grids.len());
        for g in grids {
            match g {
                Some(g) => {
                    entries.push(PoolEntry {
                        start: data.len(),
                        res: g.res,
                        texel_size: g.texel_size,
                        offset: g.offset,
                    });
                    data.extend_from_slice(&g.texels);
                }
                None => entries.push(PoolEntry {
                    start: data.len(),
                    res: (0, 0),
                    texel_size: 0.0,
                    offset: (0.0, 0.0),
                }),
            }
        }
        TexturePool { data, entries }
    }

    pub fn to_grids(&self) -> Vec<Option<TextureGrid>> {
        (0..self.len()).map(|i| self.grid_owned(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &PoolEntry {
        &self.entries[i]
    }

    pub fn is_textured(&self, i: usize) -> bool {
        self.entries[i].res.0 > 0
    }

    pub fn grid(&self, i: usize) -> Option<GridView<'_>> {
        let e = &self.entries[i];
        if e.res.0 == 0 {
            return None;
        }
        let n = (e.res.0 * e.res.1) as usize;
        Some(GridView {
            res: e.res,
            texel_size: e.texel_size,
            offset: e.offset,
            texels: &self.data[e.start..e.start + n],
        })
    }

    pub fn grid_owned(&self, i: usize) -> Option<TextureGrid> {
        self.grid(i).map(|v| TextureGrid {
            res: v.res,
            texel_size: v.texel_size,
            offset: v.offset,
            texels: v.texels.to_vec(),
        })
    }

    pub fn total_texels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    /// Texel range of primitive i inside `data`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let e = &self.entries[i];
        e.start..e.start + (e.res.0 * e.res.1) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid_from(res: (u32, u32), texel_size: f64, values: Vec<[f64; 3]>) -> TextureGrid {
        assert_eq!(values.len(), (res.0 * res.1) as usize);
        TextureGrid { res, texel_size, offset: centered_offset(res), texels: values }
    }

    fn mono(values: &[f64], res: (u32, u32), k: f64) -> TextureGrid {
        grid_from(res, k, values.iter().map(|&v| [v, v, v]).collect())
    }

    #[test]
    fn fixed_uv_centering_and_scale_independence() {
        let uv = uv_fixed(Vec2::zeros(), 0.5, centered_offset((16, 16)));
        assert_relative_eq!(uv, Vec2::new(7.5, 7.5));
        let uv = uv_fixed(Vec2::new(1.0, -1.0), 0.5, centered_offset((16, 16)));
        assert_relative_eq!(uv, Vec2::new(9.5, 5.5));
        // uv_fixed takes no scales at all; doubling σ elsewhere cannot move it.
    }

    #[test]
    fn naive_uv_corners_and_center() {
        assert_relative_eq!(uv_naive(Vec2::zeros(), 3.0, (16, 16)), Vec2::new(8.0, 8.0));
        assert_relative_eq!(uv_naive(Vec2::new(3.0, 3.0), 3.0, (16, 16)), Vec2::new(16.0, 16.0));
        assert_relative_eq!(uv_naive(Vec2::new(-3.0, -3.0), 3.0, (16, 16)), Vec2::zeros());
    }

    #[test]
    fn activation_reference_values() {
        assert_eq!(activate(0.0), 0.0);
        assert_relative_eq!(activate(1.0), 0.4621171572600098, epsilon = 1e-12);
        assert!(activate(10.0) < 1.0 && activate(10.0) > 0.9999);
        assert_relative_eq!(activate(-1.0), -activate(1.0), epsilon = 1e-15);
    }

    #[test]
    fn bilinear_center_midpoint_and_outside() {
        let g = mono(&[0.0, 1.0, 0.0, 0.0], (2, 2), 1.0);
        let v = g.view();
        // Exactly on texel (0,1): u-major index 1 holds raw 1.0.
        assert_relative_eq!(sample_bilinear(&v, Vec2::new(0.0, 1.0))[0], activate(1.0));
        // Midway between (0,0)=0 and (0,1)=1 along v.
        assert_relative_eq!(sample_bilinear(&v, Vec2::new(0.0, 0.5))[0], activate(1.0) / 2.0);
        // Far outside: every tap out of range.
        assert_eq!(sample_bilinear(&v, Vec2::new(50.0, 50.0)), [0.0; 3]);
        // Half-in: the out-of-range tap contributes activated zero.
        assert_relative_eq!(sample_bilinear(&v, Vec2::new(0.0, 1.5))[0], activate(1.0) / 2.0);
    }

    #[test]
    fn raw_sampling_skips_activation() {
        let g = mono(&[0.0, 1.0, 0.0, 0.0], (2, 2), 1.0);
        assert_relative_eq!(sample_bilinear_raw(&g.view(), Vec2::new(0.0, 0.5))[0], 0.5);
    }

    #[test]
    fn resolution_rule() {
        assert_eq!(required_resolution([1.0, 1.0], 0.5), (12, 12));
        assert_eq!(required_resolution([1.0, 1.0], 1e-3), (RES_CAP, RES_CAP));
        assert_eq!(required_resolution([0.01, 0.01], 10.0), (1, 1));
        assert_eq!(required_resolution([1.0, 0.25], 0.5), (12, 3));
    }

    #[test]
    fn crop_pad_preserves_world_positions() {
        let g = mono(&(0..12).map(|i| i as f64).collect::<Vec<_>>(), (4, 3), 0.5);
        let grown = crop_pad(&g, (6, 5));
        assert_eq!(grown.res, (6, 5));
        for iu in 0..4 {
            for iv in 0..3 {
                let a = g.view().texel_center_local(iu, iv);
                let b = grown.view().texel_center_local(iu + 1, iv + 1);
                assert_relative_eq!(a, b, epsilon = 1e-12);
                assert_eq!(g.view().texel(iu, iv), grown.view().texel(iu + 1, iv + 1));
            }
        }
        let back = crop_pad(&grown, (4, 3));
        assert_eq!(back.texels, g.texels);
        assert_relative_eq!(back.offset.0, g.offset.0);
        assert_relative_eq!(back.offset.1, g.offset.1);

        // Odd growth keeps phase: offsets shift by the integer pad only.
        let odd = crop_pad(&g, (5, 3));
        assert_eq!(odd.offset.0, g.offset.0); // pad_lo = 0 for +1 growth
        assert_eq!(odd.view().texel(0, 0), g.view().texel(0, 0));
    }

    #[test]
    fn reallocate_is_identity_when_resolution_fits() {
        let g = TextureGrid::allocate([1.0, 1.0], 0.5);
        assert_eq!(g.res, (12, 12));
        let r = reallocate(&g, [1.0, 1.0]);
        assert_eq!(r, g);
    }

    #[test]
    fn half_averages_blocks() {
        let g = mono(&[1.0, 1.0, 3.0, 3.0], (2, 2), 1.0);
        let h = resample_half(&g);
        assert_eq!(h.res, (1, 1));
        assert_relative_eq!(h.texels[0][0], 2.0);
        assert_relative_eq!(h.texel_size, 2.0);

        // Partial blocks average present texels only: constant input stays put.
        let g = mono(&[5.0; 9], (3, 3), 1.0);
        let h = resample_half(&g);
        assert_eq!(h.res, (2, 2));
        assert!(h.texels.iter().all(|t| t[0] == 5.0));
    }

    #[test]
    fn double_replicates_and_preserves_constants() {
        let g = mono(&[2.0, 4.0], (2, 1), 1.0);
        let d = resample_double(&g);
        assert_eq!(d.res, (4, 2));
        assert_eq!(d.view().texel(0, 0)[0], 2.0);
        assert_eq!(d.view().texel(1, 1)[0], 2.0);
        assert_eq!(d.view().texel(2, 0)[0], 4.0);
        assert_relative_eq!(d.texel_size, 0.5);
        // Texel centers of the doubled grid tile the original texel footprint.
        let c = g.view().texel_center_local(0, 0);
        let fine = d.view().texel_center_local(0, 0);
        assert_relative_eq!(fine.x, c.x - 0.25);
        assert_relative_eq!(fine.y, c.y - 0.25);
    }

    #[test]
    fn pool_round_trip_and_index_table() {
        let g0 = mono(&[1.0, 2.0], (2, 1), 0.5);
        let g2 = mono(&[3.0; 6], (2, 3), 0.25);
        let pool = TexturePool::from_grids(vec![Some(g0.clone()), None, Some(g2.clone())]);
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.total_texels(), 8);
        assert!(pool.is_textured(0) && !pool.is_textured(1) && pool.is_textured(2));
        assert_eq!(pool.grid_owned(0).unwrap(), g0);
        assert_eq!(pool.grid_owned(1), None);
        assert_eq!(pool.grid_owned(2).unwrap(), g2);
        assert_eq!(pool.range(2), 2..8);
        let rebuilt = TexturePool::from_grids(pool.to_grids());
        assert_eq!(rebuilt, pool);
    }

    proptest! {
        #[test]
        fn half_after_double_is_identity(
            ru in 1u32..9, rv in 1u32..9,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<[f64; 3]> = (0..ru * rv)
                .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let g = TextureGrid { res: (ru, rv), texel_size: 0.37, offset: centered_offset((ru, rv)), texels: vals };
            let round = resample_half(&resample_double(&g));
            // Bit-exact: replication then 4-way averaging of equal values.
            prop_assert_eq!(round.texels, g.texels);
            prop_assert_eq!(round.res, g.res);
            prop_assert_eq!(round.texel_size, g.texel_size);
            prop_assert_eq!(round.offset, g.offset);
        }

        #[test]
        fn sampling_stays_bounded(
            u in -5.0f64..20.0, v in -5.0f64..20.0,
            raw in -6.0f64..6.0,
        ) {
            let g = mono(&[raw; 16], (4, 4), 1.0);
            let s = sample_bilinear(&g.view(), Vec2::new(u, v));
            prop_assert!(s.iter().all(|c| c.abs() < 1.0));
        }
    }
}
