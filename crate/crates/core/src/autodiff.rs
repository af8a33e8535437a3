//! Analytic gradients for the full render-and-compare loss.
//!
//! `backward` re-walks the exact per-pixel hit lists the renderer produced
//! (same binning, same sort, same early termination) and back-propagates the
//! image loss through compositing, shading, texture sampling, the tangent
//! frame, and the ray-plane intersection, down to every stored parameter:
//! centers, log-scales, rotation quaternions, opacity logits, SH coefficients,
//! and raw texels. Order-of-composition subgradients (sorting ties, the hard
//! transmittance cutoff) are treated as locally constant.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::geometry::sh_basis;
use crate::img::Image;
use crate::math::{quat_to_mat_backward, Mat3, Vec2};
use crate::metrics::{l1, ssim_with_grad};
use crate::renderer::{gather_hits, precompute, tile_bins, PixelHit, TILE};
use crate::scene::Scene;
use crate::texture::{activate, activate_grad, sample_bilinear_with_grad, uv_fixed, Taps, TexturePool};

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Share of the image term given to the structural component; the rest is L1.
    pub lambda_ssim: f64,
    /// Coefficient on the summed absolute activated texel offsets.
    pub lambda_texture: f64,
    /// Coefficient on the mean activated opacity.
    pub lambda_opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ssim: 0.2, lambda_texture: 1e-5, lambda_opacity: 0.01 }
    }
}

/// Gradients for one primitive's directly stored parameters.
#[derive(Clone, Debug)]
pub struct PrimGrad {
    pub center: [f64; 3],
    pub log_scales: [f64; 2],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: [f64; 48],
}

impl PrimGrad {
    fn zero() -> PrimGrad {
        PrimGrad {
            center: [0.0; 3],
            log_scales: [0.0; 2],
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: [0.0; 48],
        }
    }
}

/// Gradients for every parameter in a scene. `texels` is laid out exactly like
/// `TexturePool::data()`, so `pool.range(i)` indexes a primitive's slice.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub prims: Vec<PrimGrad>,
    pub texels: Vec<[f64; 3]>,
}

impl GradientSet {
    pub fn zeros(scene: &Scene) -> GradientSet {
        GradientSet {
            prims: vec![PrimGrad::zero(); scene.n_prims()],
            texels: vec![[0.0; 3]; scene.textures.data().len()],
        }
    }

    fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.prims.iter_mut().zip(&other.prims) {
            for k in 0..3 {
                a.center[k] += b.center[k];
            }
            for k in 0..2 {
                a.log_scales[k] += b.log_scales[k];
            }
            for k in 0..4 {
                a.rotation[k] += b.rotation[k];
            }
            a.opacity_logit += b.opacity_logit;
            for k in 0..48 {
                a.sh[k] += b.sh[k];
            }
        }
        for (a, b) in self.texels.iter_mut().zip(&other.texels) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
}

/// Loss value split into its terms; `total = rgb + texture + opacity`.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted image term: (1-λ)·L1 + λ·(1-SSIM).
    pub rgb: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Weighted texel sparsity term.
    pub texture: f64,
    /// Weighted opacity term.
    pub opacity: f64,
}

pub struct BackwardOutput {
    pub loss: LossBreakdown,
    /// The rendered (clamped) image, reusable for metrics.
    pub image: Image,
    pub grads: GradientSet,
}

/// Sum over all texels of the absolute activated offset (all channels), unweighted.
pub fn texel_sparsity(pool: &TexturePool) -> f64 {
    pool.data().iter().map(|t| t.iter().map(|&x| activate(x).abs()).sum::<f64>()).sum()
}

/// Mean activated opacity over the primitive list, unweighted.
pub fn mean_opacity(scene: &Scene) -> f64 {
    if scene.prims.is_empty() {
        return 0.0;
    }
    scene.prims.iter().map(|p| p.opacity()).sum::<f64>() / scene.n_prims() as f64
}

fn breakdown(l1_val: f64, ssim_val: f64, tex_sum: f64, op_mean: f64, w: &LossWeights) -> LossBreakdown {
    let rgb = (1.0 - w.lambda_ssim) * l1_val + w.lambda_ssim * (1.0 - ssim_val);
    let texture = w.lambda_texture * tex_sum;
    let opacity = w.lambda_opacity * op_mean;
    LossBreakdown { total: rgb + texture + opacity, rgb, l1: l1_val, ssim: ssim_val, texture, opacity }
}

/// Loss only (no gradients); the finite-difference harness perturbs parameters
/// and calls this.
pub fn forward_loss(scene: &Scene, cam: &Camera, reference: &Image, weights: &LossWeights) -> (LossBreakdown, Image) {
    let out = crate::renderer::render(scene, cam);
    let l1_val = l1(&out.image, reference);
    let ssim_val = crate::metrics::ssim(&out.image, reference);
    let bd = breakdown(l1_val, ssim_val, texel_sparsity(&scene.textures), mean_opacity(scene), weights);
    (bd, out.image)
}

/// Everything retained per composited hit so the reverse sweep does not have
/// to re-derive intermediate values.
struct HitTape {
    prim: u32,
    t: f64,
    local: Vec2,
    falloff: f64,
    trans_before: f64,
    alpha: f64,
    weight: f64,
    color: [f64; 3],
    tex: Option<TexTape>,
}

struct TexTape {
    d_u: [f64; 3],
    d_v: [f64; 3],
    taps: Taps,
    texel_size: f64,
}

/// Full loss and analytic gradients for one view.
pub fn backward(scene: &Scene, cam: &Camera, reference: &Image, weights: &LossWeights) -> BackwardOutput {
    assert_eq!(
        (reference.width as u32, reference.height as u32),
        (cam.width, cam.height),
        "reference image must match camera dimensions"
    );
    let rendered = crate::renderer::render(scene, cam);
    let l1_val = l1(&rendered.image, reference);
    let (ssim_val, ssim_grad) = ssim_with_grad(&rendered.image, reference);

    // d(loss)/d(clamped pixel): weighted L1 sign plus weighted SSIM descent.
    let n3 = (reference.width * reference.height * 3) as f64;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut d_pixel = vec![[0.0f64; 3]; w * h];
    for (i, d) in d_pixel.iter_mut().enumerate() {
        for c in 0..3 {
            let diff = rendered.image.data[i][c] - reference.data[i][c];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            d[c] = (1.0 - weights.lambda_ssim) * sign / n3 - weights.lambda_ssim * ssim_grad[i][c];
        }
    }

    let pre = precompute(scene);
    let (tiles_x, tiles_y, bins) = tile_bins(&pre, cam, TILE);

    let partials: Vec<(usize, GradientSet)> = (0..(tiles_x * tiles_y) as usize)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti as u32 % tiles_x, ti as u32 / tiles_x);
            let candidates = &bins[ti];
            let mut grads = GradientSet::zeros(scene);
            let mut hits: Vec<PixelHit> = Vec::new();
            let mut tape: Vec<HitTape> = Vec::new();
            for py in (ty * TILE)..((ty * TILE + TILE).min(cam.height)) {
                for px in (tx * TILE)..((tx * TILE + TILE).min(cam.width)) {
                    let ray = cam.pixel_ray(px, py);
                    gather_hits(&pre, candidates, &ray, &mut hits);
                    if hits.is_empty() {
                        continue;
                    }
                    let basis = sh_basis(ray.dir);

                    // Forward walk, mirroring the renderer hit-for-hit while
                    // recording the tape.
                    tape.clear();
                    let mut sum = [0.0f64; 3];
                    let mut trans = 1.0;
                    for hit in &hits {
                        let p = &pre[hit.prim as usize];
                        let alpha = p.opacity * hit.falloff;
                        let wgt = trans * alpha;
                        let mut c = [0.0f64; 3];
                        for ch in 0..3 {
                            let coeffs = &p.sh[ch * 16..(ch + 1) * 16];
                            c[ch] = coeffs.iter().zip(&basis).map(|(a, b)| a * b).sum();
                        }
                        let tex = p.grid.as_ref().map(|grid| {
                            let uv = uv_fixed(hit.local, grid.texel_size, grid.offset);
                            let (val, d_u, d_v, taps) = sample_bilinear_with_grad(grid, uv);
                            for ch in 0..3 {
                                c[ch] += val[ch];
                            }
                            TexTape { d_u, d_v, taps, texel_size: grid.texel_size }
                        });
                        for ch in 0..3 {
                            sum[ch] += wgt * c[ch];
                        }
                        tape.push(HitTape {
                            prim: hit.prim,
                            t: hit.t,
                            local: hit.local,
                            falloff: hit.falloff,
                            trans_before: trans,
                            alpha,
                            weight: wgt,
                            color: c,
                        tex,
                        });
                        trans *= 1.0 - alpha;
                        if trans < crate::renderer::TRANSMITTANCE_FLOOR {
                            break;
                        }
                    }

                    // Clamp gate: gradient passes only where the unclamped sum
                    // is inside [0, 1].
                    let pix = py as usize * w + px as usize;
                    let mut d_sum = [0.0f64; 3];
                    for ch in 0..3 {
                        if sum[ch] >= 0.0 && sum[ch] <= 1.0 {
                            d_sum[ch] = d_pixel[pix][ch];
                        }
                    }
                    if d_sum == [0.0; 3] {
                        continue;
                    }

                    // Reverse sweep. `suffix` is the color composited from the
                    // hits behind the current one with fresh transmittance, so
                    // d(sum)/d(alpha_i) = T_i · (c_i - suffix).
                    let mut suffix = [0.0f64; 3];
                    for rec in tape.iter().rev() {
                        let p = &pre[rec.prim as usize];
                        let gp = &mut grads.prims[rec.prim as usize];

                        let mut d_alpha = 0.0;
                        let mut d_color = [0.0f64; 3];
                        for ch in 0..3 {
                            d_alpha += d_sum[ch] * rec.trans_before * (rec.color[ch] - suffix[ch]);
                            d_color[ch] = d_sum[ch] * rec.weight;
                        }
                        for ch in 0..3 {
                            suffix[ch] = rec.alpha * rec.color[ch] + (1.0 - rec.alpha) * suffix[ch];
                        }

                        // Shading: SH coefficients see the basis directly.
                        for ch in 0..3 {
                            for k in 0..16 {
                                gp.sh[ch * 16 + k] += d_color[ch] * basis[k];
                            }
                        }

                        // Texture: texel gradients through the activation, and
                        // the UV path back into the tangent frame.
                        let mut d_local = Vec2::zeros();
                        if let Some(tex) = &rec.tex {
                            let range = scene.textures.range(rec.prim as usize);
                            let raw = &scene.textures.data()[range.clone()];
                            let mut d_uv = Vec2::zeros();
                            for ch in 0..3 {
                                d_uv.x += d_color[ch] * tex.d_u[ch];
                                d_uv.y += d_color[ch] * tex.d_v[ch];
                            }
                            for tap in tex.taps.iter().flatten() {
                                let (idx, wtap) = *tap;
                                let slot = &mut grads.texels[range.start + idx];
                                for ch in 0..3 {
                                    slot[ch] += d_color[ch] * wtap * activate_grad(raw[idx][ch]);
                                }
                            }
                            d_local.x += d_uv.x / tex.texel_size;
                            d_local.y += d_uv.y / tex.texel_size;
                        }

                        // Opacity and falloff from alpha.
                        let d_falloff = d_alpha * p.opacity;
                        let d_opacity = d_alpha * rec.falloff;
                        gp.opacity_logit += d_opacity * p.opacity * (1.0 - p.opacity);

                        // Falloff to canonical coordinates to local frame and
                        // log-scales: x_i = l_i/σ_i, G = exp(-|x|²/2).
                        let canon = Vec2::new(
                            rec.local.x * p.inv_scale[0],
                            rec.local.y * p.inv_scale[1],
                        );
                        let d_canon = Vec2::new(
                            d_falloff * (-rec.falloff * canon.x),
                            d_falloff * (-rec.falloff * canon.y),
                        );
                        gp.log_scales[0] += -d_canon.x * canon.x;
                        gp.log_scales[1] += -d_canon.y * canon.y;
                        d_local.x += d_canon.x * p.inv_scale[0];
                        d_local.y += d_canon.y * p.inv_scale[1];

                        // Tangent frame: l = (r1·δ, r2·δ) with δ = p_world - μ.
                        let delta = (ray.origin + ray.dir * rec.t) - p.center;
                        let d_delta = p.r1 * d_local.x + p.r2 * d_local.y;
                        let d_r1 = delta * d_local.x;
                        let d_r2 = delta * d_local.y;

                        // δ = o + t·d - μ: the intersection point moves with t,
                        // and t = n·(μ-o)/(n·d) moves with μ and n.
                        let d_t = ray.dir.dot(&d_delta);
                        let nd = p.normal.dot(&ray.dir);
                        let to_center = p.center - ray.origin;
                        let d_normal = (to_center - ray.dir * rec.t) * (d_t / nd);
                        let d_center = -d_delta + p.normal * (d_t / nd);
                        for k in 0..3 {
                            gp.center[k] += d_center[k];
                        }

                        let d_rot = Mat3::from_columns(&[d_r1, d_r2, d_normal]);
                        let dq = quat_to_mat_backward(scene.prims[rec.prim as usize].rotation, &d_rot);
                        for k in 0..4 {
                            gp.rotation[k] += dq[k];
                        }
                    }
                }
            }
            (ti, grads)
        })
        .collect();

    // Deterministic merge in tile order.
    let mut grads = GradientSet::zeros(scene);
    for (ti, partial) in &partials {
        debug_assert!(*ti < (tiles_x * tiles_y) as usize);
        grads.accumulate(partial);
    }

    // Texel sparsity: λ·Σ|activate(raw)|, elementwise through the activation.
    let tex_sum = texel_sparsity(&scene.textures);
    if weights.lambda_texture != 0.0 {
        for (g, t) in grads.texels.iter_mut().zip(scene.textures.data()) {
            for ch in 0..3 {
                let a = activate(t[ch]);
                let sign = if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[ch] += weights.lambda_texture * sign * activate_grad(t[ch]);
            }
        }
    }

    // Opacity term: λ·mean(σ(logit)).
    let op_mean = mean_opacity(scene);
    if weights.lambda_opacity != 0.0 && !scene.prims.is_empty() {
        let scale = weights.lambda_opacity / scene.n_prims() as f64;
        for (g, p) in grads.prims.iter_mut().zip(&scene.prims) {
            let o = p.opacity();
            g.opacity_logit += scale * o * (1.0 - o);
        }
    }

    let loss = breakdown(l1_val, ssim_val, tex_sum, op_mean, weights);
    BackwardOutput { loss, image: rendered.image, grads }
}

/// Addresses one scalar parameter of a scene; used by gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Center(usize, usize),
    LogScale(usize, usize),
    Rotation(usize, usize),
    OpacityLogit(usize),
    Sh(usize, usize),
    /// (index into the pool's flat texel array, channel)
    Texel(usize, usize),
}

/// Every scalar parameter of the scene, in storage order.
pub fn all_params(scene: &Scene) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for i in 0..scene.n_prims() {
        for k in 0..3 {
            out.push(ParamRef::Center(i, k));
        }
        for k in 0..2 {
            out.push(ParamRef::LogScale(i, k));
        }
        for k in 0..4 {
            out.push(ParamRef::Rotation(i, k));
        }
        out.push(ParamRef::OpacityLogit(i));
        for k in 0..48 {
            out.push(ParamRef::Sh(i, k));
        }
    }
    for idx in 0..scene.textures.data().len() {
        for ch in 0..3 {
            out.push(ParamRef::Texel(idx, ch));
        }
    }
    out
}

pub fn get_param(scene: &Scene, p: &ParamRef) -> f64 {
    match *p {
        ParamRef::Center(i, k) => scene.prims[i].center[k],
        ParamRef::LogScale(i, k) => scene.prims[i].log_scales[k],
        ParamRef::Rotation(i, k) => scene.prims[i].rotation[k],
        ParamRef::OpacityLogit(i) => scene.prims[i].opacity_logit,
        ParamRef::Sh(i, k) => scene.prims[i].sh[k],
        ParamRef::Texel(idx, ch) => scene.textures.data()[idx][ch],
    }
}

pub fn set_param(scene: &mut Scene, p: &ParamRef, v: f64) {
    match *p {
        ParamRef::Center(i, k) => scene.prims[i].center[k] = v,
        ParamRef::LogScale(i, k) => scene.prims[i].log_scales[k] = v,
        ParamRef::Rotation(i, k) => scene.prims[i].rotation[k] = v,
        ParamRef::OpacityLogit(i) => scene.prims[i].opacity_logit = v,
        ParamRef::Sh(i, k) => scene.prims[i].sh[k] = v,
        ParamRef::Texel(idx, ch) => scene.textures.data_mut()[idx][ch] = v,
    }
}

pub fn grad_param(grads: &GradientSet, p: &ParamRef) -> f64 {
    match *p {
        ParamRef::Center(i, k) => grads.prims[i].center[k],
        ParamRef::LogScale(i, k) => grads.prims[i].log_scales[k],
        ParamRef::Rotation(i, k) => grads.prims[i].rotation[k],
        ParamRef::OpacityLogit(i) => grads.prims[i].opacity_logit,
        ParamRef::Sh(i, k) => grads.prims[i].sh[k],
        ParamRef::Texel(idx, ch) => grads.texels[idx][ch],
    }
}
