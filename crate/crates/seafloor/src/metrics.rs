//! Image quality metrics: PSNR and SSIM (full-reference), UIQM
//! (no-reference).
//!
//! UIQM combines colourfulness (UICM, opponent-channel trimmed statistics),
//! sharpness (UISM, Sobel-weighted block EME) and contrast (UIConM, block
//! logAMEE). The combination weights, trimmed-mean fractions and block
//! conventions follow the metric's original publication and are collected in
//! [`UiqmConfig`] rather than scattered through the code.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imagecore::RasterImage;

/// SSIM window side (Gaussian, sigma 1.5).
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Stability constants on unit dynamic range: (0.01)^2 and (0.03)^2.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Serializes +inf as the string "inf" so JSON consumers see an explicit
/// marker instead of null.
fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Quality report for one image (pair). `niqe` and `ccf` are reserved for
/// scores this crate does not compute (both need pretrained statistics
/// models) and always serialize as null.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub niqe: Option<f64>,
    pub ccf: Option<f64>,
}

/// Peak signal-to-noise ratio in dB over unit dynamic range:
/// `10 log10(1 / MSE)`; identical images return `f64::INFINITY`.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("psnr operands disagree".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn to_gray(img: &RasterImage) -> Vec<f64> {
    if img.channels() == 1 {
        return img.data().to_vec();
    }
    img.data()
        .chunks_exact(img.channels())
        .map(|px| px.iter().sum::<f64>() / px.len() as f64)
        .collect()
}

fn gaussian_kernel(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side / 2) as f64;
    let mut k: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = (i / side) as f64 - half;
            let dx = (i % side) as f64 - half;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// window positions. 3-channel inputs are converted to grayscale by channel
/// mean first.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("ssim operands disagree".into()));
    }
    let h = a.height();
    let w = a.width();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kw = kernel[ky * SSIM_WINDOW + kx];
                    let idx = (y0 + ky) * w + x0 + kx;
                    mu_a += kw * ga[idx];
                    mu_b += kw * gb[idx];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kw = kernel[ky * SSIM_WINDOW + kx];
                    let idx = (y0 + ky) * w + x0 + kx;
                    let da = ga[idx] - mu_a;
                    let db = gb[idx] - mu_b;
                    var_a += kw * da * da;
                    var_b += kw * db * db;
                    cov += kw * da * db;
                }
            }
            let l = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
            let cs = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
            total += l * cs;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Constants of the UIQM family, with the values of the metric's original
/// publication: linear combination weights (c1, c2, c3) =
/// (0.0282, 0.2953, 3.5753); UICM coefficients (-0.0268, 0.1586) with
/// symmetric 10% trimming; UISM channel weights (0.299, 0.587, 0.114) with
/// the `2/(k1 k2) sum ln(max/min)` block EME; UIConM as block logAMEE
/// `1/(k1 k2) sum x ln x`, `x = (max-min)/(max+min)`. Statistics are taken
/// on the 0..255 scale so magnitudes stay comparable to published scores.
#[derive(Debug, Clone)]
pub struct UiqmConfig {
    pub c_uicm: f64,
    pub c_uism: f64,
    pub c_uiconm: f64,
    pub trim_fraction: f64,
    pub uicm_mu_coeff: f64,
    pub uicm_sigma_coeff: f64,
    pub uism_weights: [f64; 3],
    pub block: usize,
}

impl Default for UiqmConfig {
    fn default() -> Self {
        Self {
            c_uicm: 0.0282,
            c_uism: 0.2953,
            c_uiconm: 3.5753,
            trim_fraction: 0.1,
            uicm_mu_coeff: -0.0268,
            uicm_sigma_coeff: 0.1586,
            uism_weights: [0.299, 0.587, 0.114],
            block: 8,
        }
    }
}

/// UIQM score and its components.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UiqmScore {
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

/// No-reference underwater image quality measure, default configuration.
pub fn uiqm(img: &RasterImage) -> Result<UiqmScore> {
    uiqm_with(img, &UiqmConfig::default())
}

pub fn uiqm_with(img: &RasterImage, cfg: &UiqmConfig) -> Result<UiqmScore> {
    if img.channels() != 3 {
        return Err(Error::DimensionMismatch("uiqm needs a 3-channel image".into()));
    }
    if img.height() < 32 || img.width() < 32 {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min: 32,
        });
    }
    let uicm = uicm_component(img, cfg);
    let uism = uism_component(img, cfg);
    let uiconm = uiconm_component(img, cfg);
    Ok(UiqmScore {
        uiqm: cfg.c_uicm * uicm + cfg.c_uism * uism + cfg.c_uiconm * uiconm,
        uicm,
        uism,
        uiconm,
    })
}

/// Asymmetric-trimmed mean and full-population variance about it.
fn trimmed_stats(values: &mut [f64], trim: f64) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let cut = (trim * n as f64).floor() as usize;
    let kept = &values[cut..n - cut];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

fn uicm_component(img: &RasterImage, cfg: &UiqmConfig) -> f64 {
    let n = img.pixel_count();
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0] * 255.0, px[1] * 255.0, px[2] * 255.0);
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let (mu_rg, var_rg) = trimmed_stats(&mut rg, cfg.trim_fraction);
    let (mu_yb, var_yb) = trimmed_stats(&mut yb, cfg.trim_fraction);
    cfg.uicm_mu_coeff * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + cfg.uicm_sigma_coeff * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude, interior pixels only (border stays zero), which
/// keeps the map symmetric under flips and right-angle rotations.
fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let at = |dy: isize, dx: isize| {
                plane[((y as isize + dy) as usize) * w + (x as isize + dx) as usize]
            };
            let gx = at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)
                - at(-1, -1)
                - 2.0 * at(0, -1)
                - at(1, -1);
            let gy = at(1, -1) + 2.0 * at(1, 0) + at(1, 1)
                - at(-1, -1)
                - 2.0 * at(-1, 0)
                - at(-1, 1);
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Block EME: `2/(k1 k2) * sum ln(max/min)` over blocks; degenerate blocks
/// (zero max or min) contribute nothing.
fn block_eme(plane: &[f64], h: usize, w: usize, block: usize) -> f64 {
    let k1 = h / block;
    let k2 = w / block;
    if k1 == 0 || k2 == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let v = plane[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                sum += (hi / lo).ln();
            }
        }
    }
    2.0 / (k1 * k2) as f64 * sum
}

fn uism_component(img: &RasterImage, cfg: &UiqmConfig) -> f64 {
    let h = img.height();
    let w = img.width();
    let mut total = 0.0;
    for c in 0..3 {
        let plane: Vec<f64> = img
            .data()
            .chunks_exact(3)
            .map(|px| px[c] * 255.0)
            .collect();
        let edges = sobel_magnitude(&plane, h, w);
        // Edge-weighted grayscale: edge magnitude times the channel itself.
        let weighted: Vec<f64> = edges.iter().zip(&plane).map(|(e, v)| e * v).collect();
        total += cfg.uism_weights[c] * block_eme(&weighted, h, w, cfg.block);
    }
    total
}

/// Block logAMEE on the grayscale image: `1/(k1 k2) * sum x ln x` with
/// `x = (max-min)/(max+min)`; degenerate blocks contribute nothing.
fn uiconm_component(img: &RasterImage, cfg: &UiqmConfig) -> f64 {
    let h = img.height();
    let w = img.width();
    let gray: Vec<f64> = to_gray(img).iter().map(|v| v * 255.0).collect();
    let block = cfg.block;
    let k1 = h / block;
    let k2 = w / block;
    if k1 == 0 || k2 == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let v = gray[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let top = hi - lo;
            let bot = hi + lo;
            if top > 0.0 && bot > 0.0 {
                let x = top / bot;
                sum += x * x.ln();
            }
        }
    }
    sum / (k1 * k2) as f64
}
