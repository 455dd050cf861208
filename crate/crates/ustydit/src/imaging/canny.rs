//! Canny edge detection: 5×5 Gaussian blur (σ=1.4), 3×3 Sobel, L2
//! magnitude scaled so a full 0→1 step reads 255, 4-direction non-maximum
//! suppression, double threshold, hysteresis over 8-connected weak pixels.

use super::{EdgeMap, ImageBuffer};
use crate::{Error, Result};

fn gaussian_kernel_5x5() -> [[f64; 5]; 5] {
    let sigma = 1.4_f64;
    let mut kernel = [[0.0f64; 5]; 5];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            *k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            sum += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= sum;
        }
    }
    kernel
}

/// Scale gradient magnitudes so the blur+Sobel cascade applied to a full
/// 0→1 step peaks at exactly 255, putting the classic 100/200 thresholds
/// on a meaningful scale for [0,1] images.
pub(crate) fn magnitude_scale() -> f64 {
    let kernel = gaussian_kernel_5x5();
    // 1-D blur weights are the row sums of the separable 2-D kernel
    let mut k1d = [0.0f64; 5];
    for row in &kernel {
        for (j, &v) in row.iter().enumerate() {
            k1d[j] += v;
        }
    }
    // blurred step b(x) = sum of weights whose tap lands past the edge;
    // peak Sobel response is 4·(b(x+1) − b(x−1)) = 4·(k0 + k1)
    let step_peak = 4.0 * (k1d[2] + k1d[3]);
    255.0 / step_peak
}

pub fn canny(img: &ImageBuffer, low_threshold: f64, high_threshold: f64) -> Result<EdgeMap> {
    if low_threshold >= high_threshold {
        return Err(Error::Parameter(format!(
            "low threshold {low_threshold} must be below high threshold {high_threshold}"
        )));
    }
    let (w, h) = (img.width, img.height);
    let luma = img.to_luma();

    let blurred = gaussian_blur_5x5(&luma, w, h);
    let (gx, gy) = sobel(&blurred, w, h);
    let scale = magnitude_scale();
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(x, y)| (x * x + y * y).sqrt() * scale)
        .collect();
    let nms = non_maximum_suppression(&mag, &gx, &gy, w, h);
    let values = hysteresis(&nms, w, h, low_threshold, high_threshold);

    Ok(EdgeMap {
        width: w,
        height: h,
        values,
    })
}

/// 5×5 Gaussian blur, σ = 1.4, with replicate border padding.
pub(crate) fn gaussian_blur_5x5(luma: &[f64], w: usize, h: usize) -> Vec<f64> {
    let kernel = gaussian_kernel_5x5();
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let sy = clamp(y as i64 + i as i64 - 2, h);
                    let sx = clamp(x as i64 + j as i64 - 2, w);
                    acc += k * luma[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// 3×3 Sobel gradients with replicate border padding.
pub(crate) fn sobel(luma: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let at = |x: i64, y: i64| luma[clamp(y, h) * w + clamp(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = -at(x - 1, y - 1) + at(x + 1, y - 1) - 2.0 * at(x - 1, y)
                + 2.0 * at(x + 1, y)
                - at(x - 1, y + 1)
                + at(x + 1, y + 1);
            gy[i] = -at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1)
                + at(x - 1, y + 1)
                + 2.0 * at(x, y + 1)
                + at(x + 1, y + 1);
        }
    }
    (gx, gy)
}

/// Keep a pixel only if its magnitude beats both neighbors along the
/// quantized gradient direction. Ties break toward the positive-direction
/// neighbor (strict against the negative one) so plateaus thin to a single
/// line. Border pixels are suppressed.
pub(crate) fn non_maximum_suppression(
    mag: &[f64],
    gx: &[f64],
    gy: &[f64],
    w: usize,
    h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees();
            let a = ((angle + 180.0) % 180.0 + 22.5).rem_euclid(180.0);
            // quantize into 0, 45, 90, 135 degrees
            let (dx, dy): (i64, i64) = if a < 45.0 {
                (1, 0)
            } else if a < 90.0 {
                (1, 1)
            } else if a < 135.0 {
                (0, 1)
            } else {
                (1, -1)
            };
            let neg = mag[(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
            let pos = mag[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            if mag[i] > neg && mag[i] >= pos {
                out[i] = mag[i];
            }
        }
    }
    out
}

/// Double threshold plus flood-fill from strong pixels through
/// 8-connected weak pixels.
pub(crate) fn hysteresis(nms: &[f64], w: usize, h: usize, low: f64, high: f64) -> Vec<u8> {
    let mut out = vec![0u8; w * h];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if nms[y * w + x] >= high {
                out[y * w + x] = 1;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let i = ny * w + nx;
                if out[i] == 0 && nms[i] >= low {
                    out[i] = 1;
                    stack.push((nx, ny));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image() -> ImageBuffer {
        let mut v = vec![0.0; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                v[y * 16 + x] = 1.0;
            }
        }
        ImageBuffer::new(16, 16, 1, v).unwrap()
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let img = step_image();
        assert!(canny(&img, 200.0, 100.0).is_err());
        assert!(canny(&img, 100.0, 100.0).is_err());
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = ImageBuffer::constant(16, 16, 3, 0.7).unwrap();
        let edges = canny(&img, 100.0, 200.0).unwrap();
        assert!(edges.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn vertical_step_yields_single_edge_column() {
        let edges = canny(&step_image(), 100.0, 200.0).unwrap();
        // interior rows should mark exactly one column at the step
        let mut cols: Vec<usize> = Vec::new();
        for y in 2..14 {
            let row: Vec<usize> = (0..16).filter(|&x| edges.get(x, y) == 1).collect();
            assert_eq!(row.len(), 1, "row {y} has {} edge pixels", row.len());
            cols.push(row[0]);
        }
        assert!(cols.iter().all(|&c| c == cols[0]));
        assert!(cols[0] == 7 || cols[0] == 8);
    }

    #[test]
    fn canny_depends_only_on_luma() {
        // equal RGB channels: permuting them must leave the result unchanged
        let mut v = vec![0.0; 16 * 16 * 3];
        for y in 0..16 {
            for x in 0..16 {
                let g = if x >= 8 { 0.9 } else { 0.1 };
                let i = (y * 16 + x) * 3;
                v[i] = g;
                v[i + 1] = g;
                v[i + 2] = g;
            }
        }
        let img = ImageBuffer::new(16, 16, 3, v).unwrap();
        let gray = ImageBuffer::new(16, 16, 1, img.to_luma()).unwrap();
        assert_eq!(
            canny(&img, 100.0, 200.0).unwrap().values,
            canny(&gray, 100.0, 200.0).unwrap().values
        );
    }

    #[test]
    fn hysteresis_soundness_flood_fill_audit() {
        // every final edge pixel must reach a strong pixel through weak ones
        let mut v = vec![0.0; 24 * 24];
        for y in 0..24 {
            for x in 0..24 {
                // diagonal gradient with a soft patch: mixes strong and weak
                v[y * 24 + x] = (((x + y) % 8) as f64 / 7.0) * if y < 12 { 1.0 } else { 0.6 };
            }
        }
        let img = ImageBuffer::new(24, 24, 1, v).unwrap();
        let (w, h) = (24, 24);
        let luma = img.to_luma();
        let blurred = gaussian_blur_5x5(&luma, w, h);
        let (gx, gy) = sobel(&blurred, w, h);
        let scale = magnitude_scale();
        let mag: Vec<f64> = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| (a * a + b * b).sqrt() * scale)
            .collect();
        let nms = non_maximum_suppression(&mag, &gx, &gy, w, h);
        let (low, high) = (40.0, 120.0);
        let edges = hysteresis(&nms, w, h, low, high);

        // audit: BFS from strong pixels over the weak graph must cover the map
        let mut reachable = vec![false; w * h];
        let mut stack: Vec<usize> = (0..w * h).filter(|&i| nms[i] >= high).collect();
        for &i in &stack {
            reachable[i] = true;
        }
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !reachable[j] && nms[j] >= low {
                        reachable[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        for i in 0..w * h {
            assert_eq!(edges[i] == 1, reachable[i], "pixel {i}");
        }
    }
}
