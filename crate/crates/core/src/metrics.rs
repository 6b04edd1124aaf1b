//! Image quality metrics on values clamped to `[0, 1]`.

use crate::error::{Error, Result};
use crate::image::Image;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::ShapeMismatch {
            op: "image metric",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// `10·log10(1/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region (no padding).
fn filter(plane: &[f64], width: usize, height: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| w[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| w[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over valid 11×11 windows (σ = 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let k = 2 * SSIM_RADIUS + 1;
    if a.width < k || a.height < k {
        return Err(Error::invalid(format!("SSIM needs at least {k}x{k} pixels")));
    }
    let w = gaussian_window();
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let n = a.width * a.height;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = (0..n).map(|i| a.data[3 * i + c].clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| b.data[3 * i + c].clamp(0.0, 1.0)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter(&x, a.width, a.height, &w);
        let (my, _, _) = filter(&y, a.width, a.height, &w);
        let (sxx, _, _) = filter(&xx, a.width, a.height, &w);
        let (syy, _, _) = filter(&yy, a.width, a.height, &w);
        let (sxy, ow, oh) = filter(&xy, a.width, a.height, &w);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (mx[i], my[i]);
            let vx = sxx[i] - mx * mx;
            let vy = syy[i] - my * my;
            let cov = sxy[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}
