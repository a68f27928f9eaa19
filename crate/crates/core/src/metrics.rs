//! Image similarity measures shared by the appearance loss and evaluation.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied per channel with zero
//! padding, C1 = 0.01² and C2 = 0.03², averaged over every pixel and channel.

use crate::error::{Error, Result};
use crate::geometry::ImageRgb;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;
pub const PSNR_CAP: f64 = 100.0;

fn kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable same-size Gaussian filter with zero padding.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_shapes(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    Ok(())
}

fn channel(img: &ImageRgb, c: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[c]).collect()
}

struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    sx: Vec<f64>,
    sy: Vec<f64>,
    sxy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Stats {
    let mx = blur(x, w, h, k);
    let my = blur(y, w, h, k);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sx = blur(&xx, w, h, k).iter().zip(&mx).map(|(e, m)| e - m * m).collect();
    let sy = blur(&yy, w, h, k).iter().zip(&my).map(|(e, m)| e - m * m).collect();
    let sxy = blur(&xy, w, h, k)
        .iter()
        .zip(mx.iter().zip(&my))
        .map(|(e, (a, b))| e - a * b)
        .collect();
    Stats { mx, my, sx, sy, sxy }
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let s = stats(&channel(a, c), &channel(b, c), w, h, &k);
        for i in 0..w * h {
            let num = (2.0 * s.mx[i] * s.my[i] + C1) * (2.0 * s.sxy[i] + C2);
            let den = (s.mx[i].powi(2) + s.my[i].powi(2) + C1) * (s.sx[i] + s.sy[i] + C2);
            total += num / den;
        }
    }
    Ok(total / (3 * w * h) as f64)
}

/// Mean SSIM and its gradient with respect to every value of `a`.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb)> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    let n = (3 * w * h) as f64;
    let k = kernel();
    let mut total = 0.0;
    let mut grad = ImageRgb::new(w, h, [0.0; 3]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let s = stats(&x, &y, w, h, &k);
        // per-pixel partials of the map w.r.t. the windowed moments, folded
        // into three maps that are blurred back onto the inputs
        let mut ga = vec![0.0; w * h];
        let mut gb = vec![0.0; w * h];
        let mut gc = vec![0.0; w * h];
        for i in 0..w * h {
            let (mx, my) = (s.mx[i], s.my[i]);
            let n1 = 2.0 * mx * my + C1;
            let n2 = 2.0 * s.sxy[i] + C2;
            let d1 = mx * mx + my * my + C1;
            let d2 = s.sx[i] + s.sy[i] + C2;
            let v = n1 * n2 / (d1 * d2);
            total += v;
            let d_mx = 2.0 * my * n2 / (d1 * d2) - v * 2.0 * mx / d1;
            let d_sx = -v / d2;
            let d_sxy = 2.0 * n1 / (d1 * d2);
            gb[i] = d_sx / n;
            gc[i] = d_sxy / n;
            ga[i] = d_mx / n - 2.0 * gb[i] * mx - gc[i] * my;
        }
        let (ba, bb, bc) = (blur(&ga, w, h, &k), blur(&gb, w, h, &k), blur(&gc, w, h, &k));
        for i in 0..w * h {
            grad.data[i][c] = ba[i] + 2.0 * x[i] * bb[i] + y[i] * bc[i];
        }
    }
    Ok((total / n, grad))
}

/// Structural dissimilarity `(1 − SSIM) / 2` and its gradient w.r.t. `a`.
pub fn dssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb)> {
    let (s, mut g) = ssim_with_grad(a, b)?;
    for p in g.data.iter_mut() {
        *p = p.map(|v| -0.5 * v);
    }
    Ok(((1.0 - s) / 2.0, g))
}

/// Mean absolute difference and its gradient w.r.t. `a` (sign convention: 0 at ties).
pub fn l1_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb)> {
    check_shapes(a, b)?;
    let n = (3 * a.len()) as f64;
    let mut total = 0.0;
    let mut grad = ImageRgb::new(a.width, a.height, [0.0; 3]);
    for (i, (p, q)) in a.data.iter().zip(&b.data).enumerate() {
        for c in 0..3 {
            let d = p[c] - q[c];
            total += d.abs();
            grad.data[i][c] = crate::geo_refine::sign(d) / n;
        }
    }
    Ok((total / n, grad))
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_shapes(a, b)?;
    let n = (3 * a.len()) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}
