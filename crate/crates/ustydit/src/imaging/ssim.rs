//! Mean structural similarity over 11×11 Gaussian windows (σ = 1.5),
//! K1 = 0.01, K2 = 0.03, dynamic range 1.0. Inputs are converted to luma;
//! only fully-covered windows contribute.

use super::ImageBuffer;
use crate::{Error, Result};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 1.0;

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0; WINDOW * WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            let v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            w[i * WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "ssim inputs {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    if w < WINDOW || h < WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels"
        )));
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let win = gaussian_window();
    let c1 = (K1 * L) * (K1 * L);
    let c2 = (K2 * L) * (K2 * L);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WINDOW {
        for x0 in 0..=w - WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let k = win[i * WINDOW + j];
                    mu_a += k * la[(y0 + i) * w + x0 + j];
                    mu_b += k * lb[(y0 + i) * w + x0 + j];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let k = win[i * WINDOW + j];
                    let da = la[(y0 + i) * w + x0 + j] - mu_a;
                    let db = lb[(y0 + i) * w + x0 + j] - mu_b;
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
