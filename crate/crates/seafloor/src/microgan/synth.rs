//! Synthetic paired training data: a desk-scale stand-in for a real tiled
//! satellite corpus.
//!
//! Each sample is built forward through the crate's own physics: a
//! piecewise-constant in-air scene J, an exponential transmission map from a
//! smooth range field, grey-world veiling light, and the observed underwater
//! image N from the formation model. Dichromatic targets come from
//! decomposing N (the observed radiance), exactly as a real pipeline would
//! decompose its water-covered cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::imagecore::{RasterImage, WaterMask};
use crate::photometry;
use crate::watercolumn::{self, DEFAULT_ALPHA};

/// One paired training tuple.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Network input: the observed underwater RGB scene (equals `n_real`).
    pub x: RasterImage,
    /// Stretched diffuse target, 3 channels.
    pub diffuse: RasterImage,
    /// Stretched specular target, 1 channel.
    pub specular: RasterImage,
    /// Transmission target, 1 channel.
    pub t_map: RasterImage,
    /// Dewatered radiance target, 3 channels.
    pub j: RasterImage,
    /// Observed underwater image.
    pub n_real: RasterImage,
    pub mask: WaterMask,
    pub veiling: [f64; 3],
}

/// Deterministic batch of `n` synthetic tuples at `size` x `size`,
/// `size` in {16, 32, 64}. Water fraction lands in [0.3, 0.9] by
/// construction and every tuple satisfies the formation-model round trip.
pub fn make_synthetic_batch(seed: u64, n: usize, size: usize) -> Result<Vec<Sample>> {
    if ![16, 32, 64].contains(&size) {
        return Err(Error::InvalidArgument(format!(
            "synthetic tile size must be 16, 32 or 64, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make_sample(&mut rng, size)).collect()
}

fn make_sample(rng: &mut ChaCha8Rng, size: usize) -> Result<Sample> {
    // Land blobs sized so the water fraction stays inside [1/2, 8/9].
    let mut mask = WaterMask::filled(size, size, 1);
    let rects = rng.gen_range(1..=2usize);
    for _ in 0..rects {
        let bh = rng.gen_range(size / 3..=size / 2);
        let bw = rng.gen_range(size / 3..=size / 2);
        let y0 = rng.gen_range(0..size - bh);
        let x0 = rng.gen_range(0..size - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                mask.set(y, x, 0);
            }
        }
    }

    // Piecewise-constant seafloor scene in [0.05, 0.95].
    fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ]
    }
    let base = color(rng);
    let mut j = RasterImage::from_fn(size, size, 3, |_, _, c| base[c]);
    for _ in 0..rng.gen_range(4..=7usize) {
        let fill = color(rng);
        let bh = rng.gen_range(size / 8..=size / 2);
        let bw = rng.gen_range(size / 8..=size / 2);
        let y0 = rng.gen_range(0..size - bh);
        let x0 = rng.gen_range(0..size - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for (c, &fc) in fill.iter().enumerate() {
                    j.set(y, x, c, fc);
                }
            }
        }
    }

    // Smooth range field in [0, 2] (bilinear between random corners).
    let corners = [
        rng.gen_range(0.0..2.0),
        rng.gen_range(0.0..2.0),
        rng.gen_range(0.0..2.0),
        rng.gen_range(0.0..2.0),
    ];
    let denom = (size - 1) as f64;
    let range = RasterImage::from_fn(size, size, 1, |y, x, _| {
        let fy = y as f64 / denom;
        let fx = x as f64 / denom;
        (corners[0] * (1.0 - fy) + corners[2] * fy) * (1.0 - fx)
            + (corners[1] * (1.0 - fy) + corners[3] * fy) * fx
    });

    let t = watercolumn::transmission_from_range(&range, DEFAULT_ALPHA)?;
    let veiling = watercolumn::veiling_grey_world(&j, &mask)?;
    let n = watercolumn::synthesize_underwater(&j, &t, veiling, &mask)?;

    // Dichromatic targets from the observed radiance, as on real data.
    let cube = rgb_as_cube(&n)?;
    let dec = photometry::decompose(&cube, (3, 2, 1), Some(&mask))?;

    Ok(Sample {
        x: n.clone(),
        diffuse: dec.diffuse,
        specular: dec.specular,
        t_map: t.as_raster().clone(),
        j,
        n_real: n,
        mask,
        veiling,
    })
}

/// Views an RGB raster as a 3-band cube (planes ordered blue, green, red so
/// wavelengths increase); band triplet (3,2,1) recovers RGB order.
pub fn rgb_as_cube(img: &RasterImage) -> Result<HyperCube> {
    let n = img.pixel_count();
    let mut planes = Vec::with_capacity(3 * n);
    for c in [2usize, 1, 0] {
        for px in img.data().chunks_exact(3) {
            planes.push(px[c]);
        }
    }
    HyperCube::new(img.height(), img.width(), vec![470.0, 550.0, 640.0], planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_is_deterministic() {
        let a = make_synthetic_batch(100, 4, 16).unwrap();
        let b = make_synthetic_batch(100, 4, 16).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.x, t.x);
            assert_eq!(s.j, t.j);
            assert_eq!(s.mask, t.mask);
        }
    }

    #[test]
    fn water_fraction_in_bounds() {
        for sample in make_synthetic_batch(7, 16, 32).unwrap() {
            let frac = sample.mask.water_count() as f64 / (32.0 * 32.0);
            assert!((0.3..=0.9).contains(&frac), "water fraction {frac}");
        }
    }

    #[test]
    fn tuples_satisfy_formation_round_trip() {
        for sample in make_synthetic_batch(42, 8, 16).unwrap() {
            let t = watercolumn::TransmissionMap::new(sample.t_map.clone());
            let back = watercolumn::dewater(&sample.n_real, &t, sample.veiling, &sample.mask).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    if sample.mask.is_water(y, x) {
                        for c in 0..3 {
                            let err = (back.get(y, x, c) - sample.j.get(y, x, c)).abs();
                            assert!(err <= 1e-6, "round trip error {err}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_unsupported_sizes() {
        assert!(make_synthetic_batch(1, 2, 24).is_err());
    }

    #[test]
    fn rgb_cube_view_composes_back() {
        let img = RasterImage::from_fn(4, 4, 3, |y, x, c| {
            (y as f64 * 0.1 + x as f64 * 0.02 + c as f64 * 0.3).min(1.0)
        });
        let cube = rgb_as_cube(&img).unwrap();
        let back = crate::hypercube::compose_rgb(&cube, 3, 2, 1).unwrap();
        assert_eq!(back, img);
    }
}
