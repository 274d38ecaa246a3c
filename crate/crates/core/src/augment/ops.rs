//! Pixel-level transforms on [`Tensor3`] images.
//!
//! Geometric warps map each output pixel back to a source location in
//! centered coordinates and fill uncovered pixels with black.

use crate::preprocess::{resize_bilinear, PreprocessError, Tensor3};

const GRAY: [f32; 3] = [0.2989, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

pub fn hflip(img: &Tensor3) -> Tensor3 {
    let (h, w) = (img.height(), img.width());
    let mut out = Tensor3::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(y, w - 1 - x));
        }
    }
    out
}

pub fn vflip(img: &Tensor3) -> Tensor3 {
    let (h, w) = (img.height(), img.width());
    let row = w * 3;
    let mut out = Tensor3::zeros(h, w);
    for y in 0..h {
        let src = (h - 1 - y) * row;
        out.data_mut()[y * row..(y + 1) * row].copy_from_slice(&img.data()[src..src + row]);
    }
    out
}

/// Inverse affine map in centered pixel coordinates, as a row-major 2x3
/// matrix taking output positions to source positions.
pub fn inverse_affine_matrix(
    angle_deg: f64,
    translate: [f64; 2],
    scale: f64,
    shear_deg: [f64; 2],
) -> [f64; 6] {
    let rot = angle_deg.to_radians();
    let sx = shear_deg[0].to_radians();
    let sy = shear_deg[1].to_radians();
    let [tx, ty] = translate;

    // Forward map is T * R * S * Shear; invert the rotation/scale/shear part
    // and fold the translation in afterwards.
    let a = (rot - sy).cos() / sy.cos();
    let b = -(rot - sy).cos() * sx.tan() / sy.cos() - rot.sin();
    let c = (rot - sy).sin() / sy.cos();
    let d = -(rot - sy).sin() * sx.tan() / sy.cos() + rot.cos();

    let mut m = [d, -b, 0.0, -c, a, 0.0].map(|v| v / scale);
    m[2] += m[0] * -tx + m[1] * -ty;
    m[5] += m[3] * -tx + m[4] * -ty;
    m
}

#[inline]
fn sample_nearest(img: &Tensor3, sx: f64, sy: f64) -> [f32; 3] {
    let x = sx.round_ties_even();
    let y = sy.round_ties_even();
    if x < 0.0 || y < 0.0 || x >= img.width() as f64 || y >= img.height() as f64 {
        [0.0; 3]
    } else {
        img.pixel(y as usize, x as usize)
    }
}

#[inline]
fn sample_bilinear(img: &Tensor3, sx: f64, sy: f64) -> [f32; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = (sx - x0) as f32;
    let fy = (sy - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0.0f32; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (xx, yy) = (x0 + dx, y0 + dy);
            let weight = wx * wy;
            if weight == 0.0 || xx < 0 || yy < 0 || xx >= w || yy >= h {
                continue;
            }
            let px = img.pixel(yy as usize, xx as usize);
            for k in 0..3 {
                acc[k] += weight * px[k];
            }
        }
    }
    acc
}

#[inline]
fn sample(img: &Tensor3, sx: f64, sy: f64, interp: Interp) -> [f32; 3] {
    match interp {
        Interp::Nearest => sample_nearest(img, sx, sy),
        Interp::Bilinear => sample_bilinear(img, sx, sy),
    }
}

/// Warp with an inverse affine matrix expressed around the image center.
pub fn warp_affine(img: &Tensor3, m: [f64; 6], interp: Interp) -> Tensor3 {
    let (h, w) = (img.height(), img.width());
    let cx = (w as f64 - 1.0) * 0.5;
    let cy = (h as f64 - 1.0) * 0.5;
    let mut out = Tensor3::zeros(h, w);
    for y in 0..h {
        let yc = y as f64 - cy;
        for x in 0..w {
            let xc = x as f64 - cx;
            let sx = m[0] * xc + m[1] * yc + m[2] + cx;
            let sy = m[3] * xc + m[4] * yc + m[5] + cy;
            out.set_pixel(y, x, sample(img, sx, sy, interp));
        }
    }
    out
}

/// Counter-clockwise rotation about the center.
pub fn rotate(img: &Tensor3, angle_deg: f64, interp: Interp) -> Tensor3 {
    if angle_deg == 0.0 {
        return img.clone();
    }
    warp_affine(img, inverse_affine_matrix(-angle_deg, [0.0; 2], 1.0, [0.0; 2]), interp)
}

pub fn affine(
    img: &Tensor3,
    angle_deg: f64,
    translate: [f64; 2],
    scale: f64,
    shear_deg: [f64; 2],
    interp: Interp,
) -> Tensor3 {
    warp_affine(img, inverse_affine_matrix(angle_deg, translate, scale, shear_deg), interp)
}

fn map_pixels(img: &Tensor3, f: impl Fn([f32; 3]) -> [f32; 3]) -> Tensor3 {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let v = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&v);
    }
    out
}

#[inline]
fn gray(px: [f32; 3]) -> f32 {
    GRAY[0] * px[0] + GRAY[1] * px[1] + GRAY[2] * px[2]
}

#[inline]
fn blend(a: f32, b: f32, ratio: f32) -> f32 {
    (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0)
}

pub fn adjust_brightness(img: &Tensor3, factor: f32) -> Tensor3 {
    map_pixels(img, |px| px.map(|v| blend(v, 0.0, factor)))
}

/// Blend toward the mean gray level of the whole image.
pub fn adjust_contrast(img: &Tensor3, factor: f32) -> Tensor3 {
    let n = (img.height() * img.width()) as f64;
    let mean = (img
        .data()
        .chunks_exact(3)
        .map(|p| gray([p[0], p[1], p[2]]) as f64)
        .sum::<f64>()
        / n) as f32;
    map_pixels(img, |px| px.map(|v| blend(v, mean, factor)))
}

/// Blend toward each pixel's own gray level.
pub fn adjust_saturation(img: &Tensor3, factor: f32) -> Tensor3 {
    map_pixels(img, |px| {
        let g = gray(px);
        px.map(|v| blend(v, g, factor))
    })
}

pub fn rgb_to_hsv(px: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = px;
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let eqc = maxc == minc;
    let cr = maxc - minc;
    let s = cr / if eqc { 1.0 } else { maxc };
    let div = if eqc { 1.0 } else { cr };
    let rc = (maxc - r) / div;
    let gc = (maxc - g) / div;
    let bc = (maxc - b) / div;
    let h = if maxc == r {
        bc - gc
    } else if maxc == g {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    let h = (h / 6.0 + 1.0).rem_euclid(1.0);
    [h, s, maxc]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let i = (i as i32).rem_euclid(6);
    let p = (v * (1.0 - s)).clamp(0.0, 1.0);
    let q = (v * (1.0 - s * f)).clamp(0.0, 1.0);
    let t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotate hue by `shift` turns (|shift| <= 0.5).
pub fn adjust_hue(img: &Tensor3, shift: f32) -> Tensor3 {
    map_pixels(img, |px| {
        let [h, s, v] = rgb_to_hsv(px);
        hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v])
    })
}

/// Crop `[top, top+h) x [left, left+w)` and resize to `size x size`.
pub fn resized_crop(
    img: &Tensor3,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Result<Tensor3, PreprocessError> {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in top..top + h {
        let start = img.index(y, left);
        data.extend_from_slice(&img.data()[start..start + w * 3]);
    }
    resize_bilinear(&Tensor3::new(h, w, data), size, size)
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let half = (size as f64 - 1.0) * 0.5;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / total) as f32).collect()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Tensor3, kernel_size: usize, sigma: f64) -> Tensor3 {
    if kernel_size <= 1 {
        return img.clone();
    }
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = Tensor3::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let px = img.pixel(y, reflect(x as isize + t as isize - r, w));
                for c in 0..3 {
                    acc[c] += kv * px[c];
                }
            }
            tmp.set_pixel(y, x, acc);
        }
    }
    let mut out = Tensor3::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let px = tmp.pixel(reflect(y as isize + t as isize - r, h), x);
                for c in 0..3 {
                    acc[c] += kv * px[c];
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    out
}

/// Blend with a 3x3 smoothed copy (center weight 5, total 13). Border
/// pixels of the smoothed copy keep their original values.
pub fn adjust_sharpness(img: &Tensor3, factor: f32) -> Tensor3 {
    let (h, w) = (img.height(), img.width());
    if h <= 2 || w <= 2 {
        return img.clone();
    }
    let mut smooth = img.clone();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = [0.0f32; 3];
            for dy in 0..3 {
                for dx in 0..3 {
                    let weight = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                    let px = img.pixel(y + dy - 1, x + dx - 1);
                    for c in 0..3 {
                        acc[c] += weight * px[c];
                    }
                }
            }
            smooth.set_pixel(y, x, acc.map(|v| v / 13.0));
        }
    }
    let mut out = img.clone();
    for (o, s) in out.data_mut().iter_mut().zip(smooth.data()) {
        *o = blend(*o, *s, factor);
    }
    out
}

/// Solve the 8-parameter homography taking `end` corners to `start` corners.
pub fn perspective_coeffs(start: [[f64; 2]; 4], end: [[f64; 2]; 4]) -> Option<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [ex, ey] = end[i];
        let [sx, sy] = start[i];
        a[2 * i] = [ex, ey, 1.0, 0.0, 0.0, 0.0, -sx * ex, -sx * ey, sx];
        a[2 * i + 1] = [0.0, 0.0, 0.0, ex, ey, 1.0, -sy * ex, -sy * ey, sy];
    }
    // Gauss-Jordan with partial pivoting on the augmented matrix.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let div = a[col][col];
        for v in a[col].iter_mut() {
            *v /= div;
        }
        for row in 0..8 {
            if row != col {
                let factor = a[row][col];
                if factor != 0.0 {
                    for k in col..9 {
                        a[row][k] -= factor * a[col][k];
                    }
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = a[i][8];
    }
    Some(out)
}

/// Apply a projective warp given by the coefficients from
/// [`perspective_coeffs`], sampling at pixel centers.
pub fn warp_perspective(img: &Tensor3, coeffs: [f64; 8], interp: Interp) -> Tensor3 {
    let (h, w) = (img.height(), img.width());
    let [a, b, c, d, e, f, g, hh] = coeffs;
    let mut out = Tensor3::zeros(h, w);
    for y in 0..h {
        let yo = y as f64 + 0.5;
        for x in 0..w {
            let xo = x as f64 + 0.5;
            let den = g * xo + hh * yo + 1.0;
            let sx = (a * xo + b * yo + c) / den - 0.5;
            let sy = (d * xo + e * yo + f) / den - 0.5;
            out.set_pixel(y, x, sample(img, sx, sy, interp));
        }
    }
    out
}
