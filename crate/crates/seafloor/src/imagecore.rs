//! Raster containers, pixel arithmetic, percentile statistics and PNG I/O.
//!
//! Everything downstream works on floating-point samples in the nominal
//! range `[0,1]`; 8-bit integers exist only at the file boundary.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major floating-point image, 1 or 3 channels, samples nominally in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    /// Builds an image from raw samples. Length must be `height * width * channels`
    /// and every sample must be finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples for {}x{}x{}, got {}",
                height * width * channels,
                height,
                width,
                channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("raster sample".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image is always well formed")
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn image is always well formed")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// True when `other` has identical height, width and channel count.
    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Clamps every sample into `[0,1]` in place.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Single-channel view of channel `c` as a new image.
    pub fn extract_channel(&self, c: usize) -> Result<RasterImage> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range ({} channels)",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        RasterImage::new(self.height, self.width, 1, data)
    }
}

/// Binary water mask: 1 = water, 0 = land/cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl WaterMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} mask values for {}x{}, got {}",
                height * width,
                height,
                width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid fill value")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_water(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        assert!(v <= 1, "mask values must be 0 or 1");
        self.bits[y * self.width + x] = v;
    }

    /// Number of water pixels.
    pub fn water_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn matches(&self, img: &RasterImage) -> bool {
        self.height == img.height() && self.width == img.width()
    }
}

/// Result of [`linear_stretch`]: the stretched image plus the channels that
/// were constant (those map to all-zeros rather than failing).
#[derive(Debug, Clone)]
pub struct Stretched {
    pub image: RasterImage,
    pub constant_channels: Vec<usize>,
}

/// Linear interpolation percentile over a sorted slice, `p` in `[0,1]`.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let t = p * (n - 1) as f64;
    let lo = t.floor() as usize;
    let hi = t.ceil() as usize;
    let frac = t - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-channel affine stretch mapping the `lo_pct` percentile to 0 and the
/// `hi_pct` percentile to 1, clamped to `[0,1]`.
///
/// A channel whose two percentiles coincide is mapped to all-zeros and
/// reported in `constant_channels`.
pub fn linear_stretch(img: &RasterImage, lo_pct: f64, hi_pct: f64) -> Result<Stretched> {
    if !(0.0..1.0).contains(&lo_pct) || !(0.0..=1.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 1, got ({lo_pct}, {hi_pct})"
        )));
    }
    if img.pixel_count() == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }

    let mut out = img.clone();
    let mut constant_channels = Vec::new();
    for c in 0..img.channels() {
        let mut samples: Vec<f64> = img
            .data()
            .chunks_exact(img.channels())
            .map(|px| px[c])
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let lo = percentile_sorted(&samples, lo_pct);
        let hi = percentile_sorted(&samples, hi_pct);
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            constant_channels.push(c);
            for px in out.data_mut().chunks_exact_mut(img.channels()) {
                px[c] = 0.0;
            }
            continue;
        }
        for px in out.data_mut().chunks_exact_mut(img.channels()) {
            px[c] = ((px[c] - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    Ok(Stretched {
        image: out,
        constant_channels,
    })
}

/// Mean absolute difference over water pixels, across channels.
/// An empty mask yields 0 so that fully-land tiles never abort evaluation.
pub fn masked_mean_abs(a: &RasterImage, b: &RasterImage, m: &WaterMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "images disagree: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    if !m.matches(a) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not match image {}x{}",
            m.height(),
            m.width(),
            a.height(),
            a.width()
        )));
    }
    let channels = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if m.is_water(y, x) {
                for c in 0..channels {
                    sum += (a.get(y, x, c) - b.get(y, x, c)).abs();
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / (count * channels) as f64)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PNG as a raster. Grayscale decodes to 1 channel, everything
/// else to 3 channels; samples map to float via `v / 255`.
pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let dynimg = image::open(path.as_ref()).map_err(|e| Error::Decode(e.to_string()))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            RasterImage::new(h, w, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            RasterImage::new(h, w, 3, data)
        }
    }
}

/// Writes an 8-bit PNG (grayscale for 1 channel, RGB for 3).
/// A write-then-read round trip deviates by at most `1/255` per sample.
pub fn write_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let w = img.width() as u32;
    let h = img.height() as u32;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let result = match img.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer length checked by construction")
            .save(path.as_ref()),
        _ => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer length checked by construction")
            .save(path.as_ref()),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode(other.to_string()),
    })
}

/// Reads a binary mask from an 8-bit grayscale PNG; values >= 128 decode to 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<WaterMask> {
    let dynimg = image::open(path.as_ref()).map_err(|e| Error::Decode(e.to_string()))?;
    let g = dynimg.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let bits = g.into_raw().iter().map(|&v| u8::from(v >= 128)).collect();
    WaterMask::new(h, w, bits)
}

/// Writes a mask as an 8-bit grayscale PNG with water = 255, land = 0.
pub fn write_mask(mask: &WaterMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| b * 255).collect();
    image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer length checked by construction")
        .save(path.as_ref())
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Decode(other.to_string()),
        })
}
