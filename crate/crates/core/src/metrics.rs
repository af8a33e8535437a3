//! Image comparison metrics: L1, PSNR, and windowed SSIM with an analytic
//! gradient for the loss path.

use crate::img::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Reporting cap for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn l1(a: &Image, b: &Image) -> f64 {
    a.mean_abs_diff(b)
}

/// 10·log10(1/MSE) on [0,1] images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.mse(b);
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable zero-padded convolution with the symmetric SSIM window.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let xi = x as i64 + k as i64 - r as i64;
                if xi >= 0 && (xi as usize) < w {
                    acc += wk * plane[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let yi = y as i64 + k as i64 - r as i64;
                if yi >= 0 && (yi as usize) < h {
                    acc += wk * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[c]).collect()
}

/// Mean SSIM over pixels and channels (11×11 Gaussian window, zero-padded).
pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_impl(a, b, false).0
}

/// SSIM plus d(SSIM)/d(a) per pixel and channel.
pub fn ssim_with_grad(a: &Image, b: &Image) -> (f64, Vec<[f64; 3]>) {
    let (v, g) = ssim_impl(a, b, true);
    (v, g.unwrap())
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let mut total = 0.0;
    let mut grad = if want_grad { Some(vec![[0.0; 3]; n]) } else { None };

    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let mu_x = blur(&x, w, h);
        let mu_y = blur(&y, w, h);
        let xx = blur(&x.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let yy = blur(&y.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let xy = blur(&x.iter().zip(&y).map(|(u, v)| u * v).collect::<Vec<_>>(), w, h);

        let mut d_mu = vec![0.0; n];
        let mut d_xx = vec![0.0; n];
        let mut d_xy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            let t1 = 2.0 * mx * my + SSIM_C1;
            let t2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = (t1 * t2) / (b1 * b2);
            total += s;
            if want_grad {
                let g = 1.0 / (n as f64 * 3.0);
                let dt1 = g * t2 / (b1 * b2);
                let dt2 = g * t1 / (b1 * b2);
                let db1 = -g * s / b1;
                let db2 = -g * s / b2;
                // σx² feeds b2 only; σxy feeds t2 only; their local μx terms
                // fold into the μx adjoint below.
                d_mu[i] = dt1 * 2.0 * my + db1 * 2.0 * mx - db2 * 2.0 * mx - 2.0 * dt2 * my;
                d_xx[i] = db2;
                d_xy[i] = 2.0 * dt2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            // The window is symmetric, so pushing adjoints back through the
            // blur is another blur.
            let gm = blur(&d_mu, w, h);
            let gxx = blur(&d_xx, w, h);
            let gxy = blur(&d_xy, w, h);
            for i in 0..n {
                grad[i][c] = gm[i] + 2.0 * x[i] * gxx[i] + y[i] * gxy[i];
            }
        }
    }
    (total / (n as f64 * 3.0), grad)
}
