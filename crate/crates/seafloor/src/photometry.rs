//! Grey-world illuminant estimation and closed-form dichromatic
//! decomposition / reconstruction.
//!
//! Observed radiance is modelled as a diffuse body term plus a specular
//! interface term, `I(u,l) = g(u) L(l) S(u,l) + k(u) L(l)`. With a
//! grey-world illuminant the specular coefficient expectation and the
//! combined shading-reflectance product have closed forms:
//!
//! ```text
//! E[k](u)  = mean_i I(u,l_i) / L(l_i)
//! gS(u,l)  = I(u,l) / L(l) - E[k](u)
//! ```
//!
//! Composing them back (`L * gS + E[k] * L`) reproduces the cube exactly,
//! which is the identity the tests and the acceptance suite lean on.

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::imagecore::{linear_stretch, RasterImage, WaterMask};

/// Bands with illuminant below this are excluded from divisions rather than
/// clamped, so sensor noise in a dark band never gets amplified.
pub const ILLUMINANT_EPS: f64 = 1e-6;

/// Default percentile bounds of the linear histogram stretch applied to the
/// decomposition targets.
pub const DEFAULT_STRETCH: (f64, f64) = (0.01, 0.99);

/// Per-band illuminant estimate, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantSpectrum {
    values: Vec<f64>,
}

impl IlluminantSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteInput(
                "illuminant values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean illuminant level across bands.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 0-based indices of bands safe to divide by.
    fn usable_bands(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= ILLUMINANT_EPS)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Grey-world illuminant: per-band arithmetic mean over included pixels.
/// With a mask, only water pixels contribute; land and cloud albedo would
/// otherwise bias the estimate.
pub fn grey_world(cube: &HyperCube, mask: Option<&WaterMask>) -> Result<IlluminantSpectrum> {
    if cube.pixel_count() == 0 {
        return Err(Error::InvalidArgument("empty cube".into()));
    }
    if let Some(m) = mask {
        if m.height() != cube.height() || m.width() != cube.width() {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs cube {}x{}",
                m.height(),
                m.width(),
                cube.height(),
                cube.width()
            )));
        }
        if m.water_count() == 0 {
            return Err(Error::EmptyMask);
        }
    }

    let mut values = Vec::with_capacity(cube.bands());
    for b in 0..cube.bands() {
        let plane = cube.plane(b);
        let (sum, count) = match mask {
            None => (plane.iter().sum::<f64>(), plane.len()),
            Some(m) => {
                let mut s = 0.0;
                let mut n = 0usize;
                for (i, &v) in plane.iter().enumerate() {
                    if m.bits()[i] == 1 {
                        s += v;
                        n += 1;
                    }
                }
                (s, n)
            }
        };
        values.push(sum / count as f64);
    }
    IlluminantSpectrum::new(values)
}

/// Specular coefficient expectation across wavelengths with the bands that
/// were rejected (illuminant below [`ILLUMINANT_EPS`]), reported 1-based.
#[derive(Debug, Clone)]
pub struct SpecularExpectation {
    pub k_expect: RasterImage,
    pub rejected_bands: Vec<usize>,
}

/// Per-pixel mean of `I(u,l)/L(l)` over usable bands.
pub fn specular_expectation(
    cube: &HyperCube,
    illuminant: &IlluminantSpectrum,
) -> Result<SpecularExpectation> {
    check_band_count(cube, illuminant)?;
    let usable = illuminant.usable_bands();
    if usable.is_empty() {
        return Err(Error::ZeroIlluminantBand {
            eps: ILLUMINANT_EPS,
        });
    }
    let n = cube.pixel_count();
    let mut acc = vec![0.0f64; n];
    for &b in &usable {
        let inv_l = 1.0 / illuminant.values()[b];
        for (a, &v) in acc.iter_mut().zip(cube.plane(b)) {
            *a += v * inv_l;
        }
    }
    let scale = 1.0 / usable.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    let k_expect = RasterImage::new(cube.height(), cube.width(), 1, acc)?;
    Ok(SpecularExpectation {
        k_expect,
        rejected_bands: rejected_from(&usable, illuminant.len()),
    })
}

/// Shading-reflectance product per band with rejected bands (zeroed in the
/// output stack), reported 1-based.
#[derive(Debug, Clone)]
pub struct ShadingStack {
    pub gs: HyperCube,
    pub rejected_bands: Vec<usize>,
}

/// Solves `gS(u,l) = I(u,l)/L(l) - E[k](u)` band by band. Rejected bands are
/// excluded from the division and left as zero planes.
pub fn shading_reflectance(
    cube: &HyperCube,
    illuminant: &IlluminantSpectrum,
    k_expect: &RasterImage,
) -> Result<ShadingStack> {
    check_band_count(cube, illuminant)?;
    if k_expect.height() != cube.height()
        || k_expect.width() != cube.width()
        || k_expect.channels() != 1
    {
        return Err(Error::DimensionMismatch(
            "k-expectation map must be a 1-channel raster matching the cube".into(),
        ));
    }
    let usable = illuminant.usable_bands();
    if usable.is_empty() {
        return Err(Error::ZeroIlluminantBand {
            eps: ILLUMINANT_EPS,
        });
    }
    let n = cube.pixel_count();
    let mut planes = vec![0.0f64; cube.bands() * n];
    for &b in &usable {
        let inv_l = 1.0 / illuminant.values()[b];
        let out = &mut planes[b * n..(b + 1) * n];
        for ((o, &v), &k) in out.iter_mut().zip(cube.plane(b)).zip(k_expect.data()) {
            *o = v * inv_l - k;
        }
    }
    let gs = HyperCube::new(
        cube.height(),
        cube.width(),
        cube.wavelengths_nm().to_vec(),
        planes,
    )?;
    Ok(ShadingStack {
        gs,
        rejected_bands: rejected_from(&usable, illuminant.len()),
    })
}

fn rejected_from(usable: &[usize], bands: usize) -> Vec<usize> {
    let mut flags = vec![true; bands];
    for &b in usable {
        flags[b] = false;
    }
    flags
        .iter()
        .enumerate()
        .filter(|(_, &rej)| rej)
        .map(|(i, _)| i + 1)
        .collect()
}

fn check_band_count(cube: &HyperCube, illuminant: &IlluminantSpectrum) -> Result<()> {
    if illuminant.len() != cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "illuminant has {} bands, cube has {}",
            illuminant.len(),
            cube.bands()
        )));
    }
    Ok(())
}

/// Paired diffuse and specular training targets plus the raw fields they
/// were rendered from.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Stretched 3-channel diffuse target.
    pub diffuse: RasterImage,
    /// Stretched 1-channel specular target (`E[k] * mean(L)` before stretch).
    pub specular: RasterImage,
    /// Specular coefficient expectation `E[k]`, unstretched.
    pub k_expect: RasterImage,
    /// Full-band shading-reflectance stack `gS`.
    pub gs: HyperCube,
    pub illuminant: IlluminantSpectrum,
    /// 1-based bands excluded by the illuminant floor.
    pub rejected_bands: Vec<usize>,
    /// Channels of the diffuse / specular targets that stretched to zero.
    pub diffuse_constant_channels: Vec<usize>,
    pub specular_constant_channels: Vec<usize>,
}

/// Grey-world dichromatic decomposition with stretched RGB targets.
///
/// The illuminant comes from [`grey_world`] over the same mask; pass an
/// explicit spectrum via [`decompose_with_illuminant`] when it is known.
pub fn decompose(
    cube: &HyperCube,
    bands: (usize, usize, usize),
    mask: Option<&WaterMask>,
) -> Result<Decomposition> {
    let illuminant = grey_world(cube, mask)?;
    decompose_with_illuminant(cube, bands, illuminant)
}

/// Dichromatic decomposition against a known illuminant spectrum.
pub fn decompose_with_illuminant(
    cube: &HyperCube,
    bands: (usize, usize, usize),
    illuminant: IlluminantSpectrum,
) -> Result<Decomposition> {
    decompose_inner(cube, bands, illuminant, DEFAULT_STRETCH)
}

/// Grey-world decomposition with caller-chosen stretch percentiles.
pub fn decompose_stretched(
    cube: &HyperCube,
    bands: (usize, usize, usize),
    mask: Option<&WaterMask>,
    stretch: (f64, f64),
) -> Result<Decomposition> {
    let illuminant = grey_world(cube, mask)?;
    decompose_inner(cube, bands, illuminant, stretch)
}

fn decompose_inner(
    cube: &HyperCube,
    bands: (usize, usize, usize),
    illuminant: IlluminantSpectrum,
    stretch: (f64, f64),
) -> Result<Decomposition> {
    let band_idx = [
        cube.band_index(bands.0)?,
        cube.band_index(bands.1)?,
        cube.band_index(bands.2)?,
    ];
    let se = specular_expectation(cube, &illuminant)?;
    let stack = shading_reflectance(cube, &illuminant, &se.k_expect)?;

    // Raw targets: diffuse_c = I_c - E[k] L_c (clamped at zero),
    // specular = E[k] * mean(L).
    let l_bar = illuminant.mean();
    let mut diffuse_raw = RasterImage::filled(cube.height(), cube.width(), 3, 0.0);
    for (c, &b0) in band_idx.iter().enumerate() {
        let l_c = illuminant.values()[b0];
        let plane = cube.plane(b0);
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                let k = se.k_expect.get(y, x, 0);
                let v = (plane[y * cube.width() + x] - k * l_c).max(0.0);
                diffuse_raw.set(y, x, c, v);
            }
        }
    }
    let specular_raw = RasterImage::new(
        cube.height(),
        cube.width(),
        1,
        se.k_expect.data().iter().map(|&k| k * l_bar).collect(),
    )?;

    let diffuse_stretched = linear_stretch(&diffuse_raw, stretch.0, stretch.1)?;
    let specular_stretched = linear_stretch(&specular_raw, stretch.0, stretch.1)?;

    Ok(Decomposition {
        diffuse: diffuse_stretched.image,
        specular: specular_stretched.image,
        k_expect: se.k_expect,
        gs: stack.gs,
        illuminant,
        rejected_bands: se.rejected_bands,
        diffuse_constant_channels: diffuse_stretched.constant_channels,
        specular_constant_channels: specular_stretched.constant_channels,
    })
}

/// Forward dichromatic synthesis: `I(u,l) = L(l) gS(u,l) + k(u) L(l)`.
pub fn compose_dichromatic(
    gs: &HyperCube,
    k: &RasterImage,
    illuminant: &IlluminantSpectrum,
) -> Result<HyperCube> {
    check_band_count(gs, illuminant)?;
    if k.height() != gs.height() || k.width() != gs.width() || k.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "specular coefficient map must be a 1-channel raster matching the stack".into(),
        ));
    }
    let n = gs.pixel_count();
    let mut planes = Vec::with_capacity(gs.bands() * n);
    for b in 0..gs.bands() {
        let l = illuminant.values()[b];
        for (&g, &kv) in gs.plane(b).iter().zip(k.data()) {
            planes.push(l * g + kv * l);
        }
    }
    HyperCube::new(gs.height(), gs.width(), gs.wavelengths_nm().to_vec(), planes)
}

/// Masked L2 residual of the dichromatic reconstruction over the RGB bands:
/// `|| I(u,l_c) - (diffuse_c + specular * L(l_c)) ||_2` over water pixels.
///
/// `specular` is the specular coefficient map (an `E[k]` field or a
/// prediction of it); its radiance share in channel `c` is `specular * L_c`.
/// The illuminant is re-estimated from the cube over the same mask.
pub fn reconstruction_residual(
    cube: &HyperCube,
    diffuse: &RasterImage,
    specular: &RasterImage,
    mask: &WaterMask,
    bands: (usize, usize, usize),
) -> Result<f64> {
    if diffuse.height() != cube.height()
        || diffuse.width() != cube.width()
        || diffuse.channels() != 3
    {
        return Err(Error::DimensionMismatch(
            "diffuse must be a 3-channel raster matching the cube".into(),
        ));
    }
    if specular.height() != cube.height()
        || specular.width() != cube.width()
        || specular.channels() != 1
    {
        return Err(Error::DimensionMismatch(
            "specular must be a 1-channel raster matching the cube".into(),
        ));
    }
    if mask.height() != cube.height() || mask.width() != cube.width() {
        return Err(Error::DimensionMismatch("mask does not match cube".into()));
    }
    if mask.water_count() == 0 {
        return Ok(0.0);
    }
    let band_idx = [
        cube.band_index(bands.0)?,
        cube.band_index(bands.1)?,
        cube.band_index(bands.2)?,
    ];
    let illuminant = grey_world(cube, Some(mask))?;
    let mut sum_sq = 0.0;
    for (c, &b0) in band_idx.iter().enumerate() {
        let l_c = illuminant.values()[b0];
        let plane = cube.plane(b0);
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                if mask.is_water(y, x) {
                    let rebuilt = diffuse.get(y, x, c) + specular.get(y, x, 0) * l_c;
                    let d = plane[y * cube.width() + x] - rebuilt;
                    sum_sq += d * d;
                }
            }
        }
    }
    Ok(sum_sq.sqrt())
}
