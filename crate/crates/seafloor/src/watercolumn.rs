//! Underwater image formation: transmission, veiling light, forward
//! synthesis and closed-form dewatering.
//!
//! Observed radiance over water is the attenuated object radiance plus
//! veiling light scaled by the transmission loss,
//!
//! ```text
//! N = J * T + V * (1 - T),      T = exp(-r * alpha)
//! ```
//!
//! and the water column is removed by the exact inverse
//! `J = (N - V) / T + V`. Land pixels pass through both directions
//! untouched.

use crate::error::{Error, Result};
use crate::imagecore::{RasterImage, WaterMask};

/// Transmission floor. Inverting the formation model divides by `T`;
/// an unbounded inverse amplifies noise by `1/T`.
pub const T_FLOOR: f64 = 1e-3;

/// Default attenuation coefficient (absorption plus scattering, per unit
/// range) for deep water with the wavelength dependency folded in.
pub const DEFAULT_ALPHA: f64 = 0.9;

/// Light transmission map with every value clamped into `[T_FLOOR, 1]`.
/// One channel for a scalar attenuation coefficient, three when a
/// per-channel coefficient is used.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    map: RasterImage,
}

impl TransmissionMap {
    /// Wraps a raster, clamping values into `[T_FLOOR, 1]`.
    pub fn new(mut map: RasterImage) -> Self {
        for v in map.data_mut() {
            *v = v.clamp(T_FLOOR, 1.0);
        }
        Self { map }
    }

    pub fn as_raster(&self) -> &RasterImage {
        &self.map
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn channels(&self) -> usize {
        self.map.channels()
    }

    /// Transmission for channel `c`, broadcasting a 1-channel map.
    #[inline]
    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        if self.map.channels() == 1 {
            self.map.get(y, x, 0)
        } else {
            self.map.get(y, x, c)
        }
    }
}

/// Attenuation / veiling parameters of the formation model.
#[derive(Debug, Clone)]
pub struct OpticalParams {
    /// Attenuation coefficient per unit range.
    pub alpha: f64,
    /// Veiling light per channel, in `[0,1]`.
    pub veiling: [f64; 3],
    /// Fixed at 0: the diffuse-attenuation exponential drops out for the
    /// overhead viewpoint, which is what makes the closed-form inverse valid.
    pub zenith_cos: f64,
}

impl Default for OpticalParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            veiling: [0.0, 0.0, 0.0],
            zenith_cos: 0.0,
        }
    }
}

impl OpticalParams {
    pub fn with_veiling(veiling: [f64; 3]) -> Self {
        Self {
            veiling,
            ..Self::default()
        }
    }

    /// Transmission map for a range image under this attenuation coefficient.
    pub fn transmission(&self, range_map: &RasterImage) -> Result<TransmissionMap> {
        transmission_from_range(range_map, self.alpha)
    }

    /// Forward synthesis under these parameters.
    pub fn synthesize(
        &self,
        j: &RasterImage,
        t: &TransmissionMap,
        mask: &WaterMask,
    ) -> Result<RasterImage> {
        synthesize_underwater(j, t, self.veiling, mask)
    }

    /// Water-column removal under these parameters.
    pub fn dewater(
        &self,
        n: &RasterImage,
        t: &TransmissionMap,
        mask: &WaterMask,
    ) -> Result<RasterImage> {
        dewater(n, t, self.veiling, mask)
    }
}

/// `T(u) = exp(-r(u) * alpha)`, clamped into `[T_FLOOR, 1]`.
pub fn transmission_from_range(range_map: &RasterImage, alpha: f64) -> Result<TransmissionMap> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    if range_map.data().iter().any(|&r| r < 0.0) {
        return Err(Error::NegativeRange);
    }
    let mut map = range_map.clone();
    for v in map.data_mut() {
        *v = (-*v * alpha).exp();
    }
    Ok(TransmissionMap::new(map))
}

/// Per-channel transmission from one attenuation coefficient per channel.
/// Produces a 3-channel map even from a 1-channel range map.
pub fn transmission_from_range_rgb(
    range_map: &RasterImage,
    alpha: [f64; 3],
) -> Result<TransmissionMap> {
    if alpha.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
        return Err(Error::NonPositiveAlpha(
            alpha.iter().copied().fold(f64::INFINITY, f64::min),
        ));
    }
    if range_map.data().iter().any(|&r| r < 0.0) {
        return Err(Error::NegativeRange);
    }
    let map = RasterImage::from_fn(range_map.height(), range_map.width(), 3, |y, x, c| {
        let r = if range_map.channels() == 1 {
            range_map.get(y, x, 0)
        } else {
            range_map.get(y, x, c)
        };
        (-r * alpha[c]).exp()
    });
    Ok(TransmissionMap::new(map))
}

/// Veiling light estimate: per-channel mean of `img` over water pixels.
pub fn veiling_grey_world(img: &RasterImage, mask: &WaterMask) -> Result<[f64; 3]> {
    if img.channels() != 3 {
        return Err(Error::DimensionMismatch(
            "veiling estimation needs a 3-channel image".into(),
        ));
    }
    if !mask.matches(img) {
        return Err(Error::DimensionMismatch("mask does not match image".into()));
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.is_water(y, x) {
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += img.get(y, x, c);
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sums.map(|s| s / count as f64))
}

fn check_triple(
    img: &RasterImage,
    t: &TransmissionMap,
    mask: &WaterMask,
    what: &str,
) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "{what} needs a 3-channel image"
        )));
    }
    if t.height() != img.height() || t.width() != img.width() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: transmission {}x{} vs image {}x{}",
            t.height(),
            t.width(),
            img.height(),
            img.width()
        )));
    }
    if !mask.matches(img) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: mask does not match image"
        )));
    }
    Ok(())
}

/// Forward synthesis: water pixels become `J*T + V*(1-T)` (clamped to
/// `[0,1]`), land pixels are copied through bit-identically.
pub fn synthesize_underwater(
    j: &RasterImage,
    t: &TransmissionMap,
    veiling: [f64; 3],
    mask: &WaterMask,
) -> Result<RasterImage> {
    check_triple(j, t, mask, "synthesize")?;
    let mut out = j.clone();
    for y in 0..j.height() {
        for x in 0..j.width() {
            if mask.is_water(y, x) {
                for (c, &vc) in veiling.iter().enumerate() {
                    let tv = t.at(y, x, c);
                    let n = j.get(y, x, c) * tv + vc * (1.0 - tv);
                    out.set(y, x, c, n.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Removes the water column: water pixels become `(N - V)/T + V` (clamped to
/// `[0,1]`), land pixels are copied through bit-identically.
pub fn dewater(
    n: &RasterImage,
    t: &TransmissionMap,
    veiling: [f64; 3],
    mask: &WaterMask,
) -> Result<RasterImage> {
    check_triple(n, t, mask, "dewater")?;
    let mut out = n.clone();
    for y in 0..n.height() {
        for x in 0..n.width() {
            if mask.is_water(y, x) {
                for (c, &vc) in veiling.iter().enumerate() {
                    let tv = t.at(y, x, c);
                    let j = (n.get(y, x, c) - vc) / tv + vc;
                    out.set(y, x, c, j.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: f64) -> RasterImage {
        RasterImage::filled(h, w, 3, v)
    }

    #[test]
    fn transmission_zero_range_is_one() {
        let r = RasterImage::filled(2, 2, 1, 0.0);
        let t = transmission_from_range(&r, DEFAULT_ALPHA).unwrap();
        assert!(t.as_raster().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transmission_matches_exponential_oracle() {
        // r = 1, alpha = 0.9: T = exp(-0.9).
        let r = RasterImage::filled(1, 1, 1, 1.0);
        let t = transmission_from_range(&r, 0.9).unwrap();
        let want = (-0.9f64).exp();
        assert!((t.as_raster().data()[0] - want).abs() < 1e-12);
        assert!((want - 0.406570).abs() < 1e-6);
    }

    #[test]
    fn transmission_clamps_to_floor() {
        // exp(-9) is below the floor.
        let r = RasterImage::filled(1, 1, 1, 10.0);
        let t = transmission_from_range(&r, 0.9).unwrap();
        assert!((-9.0f64).exp() < T_FLOOR);
        assert_eq!(t.as_raster().data()[0], T_FLOOR);
    }

    #[test]
    fn transmission_rejects_bad_inputs() {
        let neg = RasterImage::new(1, 1, 1, vec![-0.5]).unwrap();
        assert!(matches!(
            transmission_from_range(&neg, 0.9),
            Err(Error::NegativeRange)
        ));
        let ok = RasterImage::filled(1, 1, 1, 0.5);
        assert!(matches!(
            transmission_from_range(&ok, 0.0),
            Err(Error::NonPositiveAlpha(_))
        ));
    }

    #[test]
    fn transmission_antitone_in_range_and_alpha() {
        let r1 = RasterImage::filled(1, 1, 1, 0.5);
        let r2 = RasterImage::filled(1, 1, 1, 1.5);
        let a = transmission_from_range(&r1, 0.9).unwrap().as_raster().data()[0];
        let b = transmission_from_range(&r2, 0.9).unwrap().as_raster().data()[0];
        let c = transmission_from_range(&r1, 1.8).unwrap().as_raster().data()[0];
        assert!(b < a && c < a);
    }

    #[test]
    fn veiling_uniform_blue() {
        let img = RasterImage::from_fn(3, 3, 3, |_, _, c| [0.0, 0.0, 0.6][c]);
        let mask = WaterMask::filled(3, 3, 1);
        let v = veiling_grey_world(&img, &mask).unwrap();
        assert_eq!(v, [0.0, 0.0, 0.6]);
    }

    #[test]
    fn veiling_single_pixel_mask() {
        let mut img = gray(2, 2, 0.1);
        img.set(1, 0, 0, 0.9);
        img.set(1, 0, 1, 0.5);
        img.set(1, 0, 2, 0.3);
        let mut mask = WaterMask::filled(2, 2, 0);
        mask.set(1, 0, 1);
        let v = veiling_grey_world(&img, &mask).unwrap();
        assert_eq!(v, [0.9, 0.5, 0.3]);
    }

    #[test]
    fn veiling_matches_masked_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = RasterImage::from_fn(6, 6, 3, |_, _, _| rng.gen::<f64>());
        let bits: Vec<u8> = (0..36).map(|_| rng.gen_range(0..=1u8)).collect();
        let mask = WaterMask::new(6, 6, bits.clone()).unwrap();
        let v = veiling_grey_world(&img, &mask).unwrap();
        for (c, &vc) in v.iter().enumerate() {
            let mut sum = 0.0;
            let mut n = 0;
            for y in 0..6 {
                for x in 0..6 {
                    if bits[y * 6 + x] == 1 {
                        sum += img.get(y, x, c);
                        n += 1;
                    }
                }
            }
            assert!((vc - sum / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn veiling_empty_mask_errors() {
        let img = gray(2, 2, 0.5);
        let mask = WaterMask::filled(2, 2, 0);
        assert!(matches!(
            veiling_grey_world(&img, &mask),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn synthesize_full_transmission_is_identity() {
        let j = gray(2, 2, 0.7);
        let t = TransmissionMap::new(RasterImage::filled(2, 2, 1, 1.0));
        let mask = WaterMask::filled(2, 2, 1);
        let n = synthesize_underwater(&j, &t, [0.2, 0.2, 0.2], &mask).unwrap();
        assert_eq!(n, j);
    }

    #[test]
    fn synthesize_fixed_point_when_object_equals_veiling() {
        let j = gray(2, 2, 0.2);
        let t = TransmissionMap::new(RasterImage::filled(2, 2, 1, 0.002));
        let mask = WaterMask::filled(2, 2, 1);
        let n = synthesize_underwater(&j, &t, [0.2, 0.2, 0.2], &mask).unwrap();
        for &v in n.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_hand_arithmetic() {
        // N = 0.8 * 0.5 + 0.2 * 0.5 = 0.5.
        let j = gray(1, 1, 0.8);
        let t = TransmissionMap::new(RasterImage::filled(1, 1, 1, 0.5));
        let mask = WaterMask::filled(1, 1, 1);
        let n = synthesize_underwater(&j, &t, [0.2, 0.2, 0.2], &mask).unwrap();
        for &v in n.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn dewater_veiling_fixed_point() {
        // N = V gives J = V regardless of T.
        let n = gray(2, 2, 0.2);
        let t = TransmissionMap::new(RasterImage::filled(2, 2, 1, 0.013));
        let mask = WaterMask::filled(2, 2, 1);
        let j = dewater(&n, &t, [0.2, 0.2, 0.2], &mask).unwrap();
        for &v in j.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn dewater_hand_inversion() {
        // J = (0.5 - 0.2)/0.5 + 0.2 = 0.8, inverse of the synthesis example.
        let n = gray(1, 1, 0.5);
        let t = TransmissionMap::new(RasterImage::filled(1, 1, 1, 0.5));
        let mask = WaterMask::filled(1, 1, 1);
        let j = dewater(&n, &t, [0.2, 0.2, 0.2], &mask).unwrap();
        for &v in j.data() {
            assert!((v - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn optical_params_bundle_round_trips() {
        let params = OpticalParams::with_veiling([0.1, 0.2, 0.3]);
        assert_eq!(params.alpha, DEFAULT_ALPHA);
        assert_eq!(params.zenith_cos, 0.0);
        let j = gray(3, 3, 0.6);
        let r = RasterImage::filled(3, 3, 1, 0.8);
        let t = params.transmission(&r).unwrap();
        let mask = WaterMask::filled(3, 3, 1);
        let n = params.synthesize(&j, &t, &mask).unwrap();
        let back = params.dewater(&n, &t, &mask).unwrap();
        for (a, b) in j.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn land_pixels_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let j = RasterImage::from_fn(4, 4, 3, |_, _, _| rng.gen::<f64>());
        let r = RasterImage::from_fn(4, 4, 1, |_, _, _| rng.gen_range(0.0..2.0));
        let t = transmission_from_range(&r, 0.9).unwrap();
        let bits: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let mask = WaterMask::new(4, 4, bits).unwrap();
        let v = [0.1, 0.2, 0.3];
        let n = synthesize_underwater(&j, &t, v, &mask).unwrap();
        let back = dewater(&n, &t, v, &mask).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                if !mask.is_water(y, x) {
                    for c in 0..3 {
                        assert_eq!(n.get(y, x, c).to_bits(), j.get(y, x, c).to_bits());
                        assert_eq!(back.get(y, x, c).to_bits(), j.get(y, x, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn synthesize_output_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let j = RasterImage::from_fn(5, 5, 3, |_, _, _| rng.gen::<f64>());
        let r = RasterImage::from_fn(5, 5, 1, |_, _, _| rng.gen_range(0.0..3.0));
        let t = transmission_from_range(&r, 0.9).unwrap();
        let v = [0.15, 0.25, 0.35];
        let mask = WaterMask::filled(5, 5, 1);
        let n = synthesize_underwater(&j, &t, v, &mask).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                for (c, &vc) in v.iter().enumerate() {
                    let lo = j.get(y, x, c).min(vc) - 1e-12;
                    let hi = j.get(y, x, c).max(vc) + 1e-12;
                    let got = n.get(y, x, c);
                    assert!(got >= lo && got <= hi);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_identity_on_water(seed in 0u64..512) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = RasterImage::from_fn(4, 4, 3, |_, _, _| rng.gen_range(0.05..0.95));
            let r = RasterImage::from_fn(4, 4, 1, |_, _, _| rng.gen_range(0.0..2.0));
            let t = transmission_from_range(&r, 0.9).unwrap();
            let v = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ];
            let mask = WaterMask::new(4, 4, (0..16).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap();
            let n = synthesize_underwater(&j, &t, v, &mask).unwrap();
            let back = dewater(&n, &t, v, &mask).unwrap();
            for (a, b) in j.data().iter().zip(back.data()) {
                proptest::prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
