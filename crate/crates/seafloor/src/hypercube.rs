//! Hyperspectral cube container, band math, and the paired dataset builder.
//!
//! A [`HyperCube`] stacks per-band reflectance planes with wavelength
//! metadata. Cubes serialize to the little-endian `HCUB` container (float32
//! planes); the dataset builder tiles a corpus of cubes into RGB / mask /
//! per-band PNG triples with a JSON-lines manifest.
//!
//! Band indices are 1-based in every public operation, matching the usual
//! "bands 33/45/56" numbering of VNIR products; storage is 0-based.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{self, RasterImage, WaterMask};

const MAGIC: &[u8; 4] = b"HCUB";
const VERSION: u32 = 1;

/// H x W x B stack of spectral reflectance planes with wavelength metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    wavelengths_nm: Vec<f64>,
    /// Plane-major samples: `bands` contiguous planes of `height * width`.
    planes: Vec<f64>,
}

impl HyperCube {
    pub fn new(
        height: usize,
        width: usize,
        wavelengths_nm: Vec<f64>,
        planes: Vec<f64>,
    ) -> Result<Self> {
        let bands = wavelengths_nm.len();
        if !wavelengths_nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::WavelengthOrder);
        }
        if planes.len() != bands * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples for {} bands of {}x{}, got {}",
                bands * height * width,
                bands,
                height,
                width,
                planes.len()
            )));
        }
        if planes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("cube sample".into()));
        }
        Ok(Self {
            height,
            width,
            wavelengths_nm,
            planes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn wavelengths_nm(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    /// Plane by 0-based index.
    pub fn plane(&self, band0: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.planes[band0 * n..(band0 + 1) * n]
    }

    /// Sample at 0-based band, row, column.
    #[inline]
    pub fn at(&self, band0: usize, y: usize, x: usize) -> f64 {
        self.planes[band0 * self.pixel_count() + y * self.width + x]
    }

    /// Converts a 1-based user-facing band number to the internal index.
    pub fn band_index(&self, band: usize) -> Result<usize> {
        if band == 0 || band > self.bands() {
            return Err(Error::BandOutOfRange {
                band,
                bands: self.bands(),
            });
        }
        Ok(band - 1)
    }

    /// 1-based index of the band whose centre wavelength is closest to `nm`.
    pub fn band_nearest_wavelength(&self, nm: f64) -> usize {
        let (idx, _) = self
            .wavelengths_nm
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - nm).abs().partial_cmp(&(*b - nm).abs()).unwrap()
            })
            .expect("cube has at least one band");
        idx + 1
    }

    /// Axis-aligned crop of `tile_h` x `tile_w` pixels starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, tile_h: usize, tile_w: usize) -> Result<HyperCube> {
        if y0 + tile_h > self.height || x0 + tile_w > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop ({y0},{x0})+{tile_h}x{tile_w} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut planes = Vec::with_capacity(self.bands() * tile_h * tile_w);
        for b in 0..self.bands() {
            let plane = self.plane(b);
            for y in y0..y0 + tile_h {
                planes.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + tile_w]);
            }
        }
        HyperCube::new(tile_h, tile_w, self.wavelengths_nm.clone(), planes)
    }
}

/// Writes the `HCUB` container: magic, version, dims, float32 planes, then
/// float32 wavelengths. Samples are truncated to f32 precision on disk.
pub fn save_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(cube.height() as u32)?;
    w.write_u32::<LittleEndian>(cube.width() as u32)?;
    w.write_u32::<LittleEndian>(cube.bands() as u32)?;
    for &v in &cube.planes {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    for &nm in &cube.wavelengths_nm {
        w.write_f32::<LittleEndian>(nm as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `HCUB` container written by [`save_cube`].
pub fn load_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let mut r = BufReader::new(fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::TruncatedFile("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::TruncatedFile("missing version".into()))?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let height = read_dim(&mut r, "height")?;
    let width = read_dim(&mut r, "width")?;
    let bands = read_dim(&mut r, "bands")?;
    let n = bands
        .checked_mul(height * width)
        .ok_or_else(|| Error::TruncatedFile("dimension overflow".into()))?;
    let mut planes = Vec::with_capacity(n);
    for _ in 0..n {
        planes.push(
            r.read_f32::<LittleEndian>()
                .map_err(|_| Error::TruncatedFile("plane data".into()))? as f64,
        );
    }
    let mut wavelengths = Vec::with_capacity(bands);
    for _ in 0..bands {
        wavelengths.push(
            r.read_f32::<LittleEndian>()
                .map_err(|_| Error::TruncatedFile("wavelengths".into()))? as f64,
        );
    }
    HyperCube::new(height, width, wavelengths, planes)
}

fn read_dim(r: &mut impl Read, what: &str) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>()
        .map_err(|_| Error::TruncatedFile(format!("missing {what}")))? as usize)
}

/// 3-channel raster from three distinct 1-based band numbers, clamped to [0,1].
pub fn compose_rgb(
    cube: &HyperCube,
    r_band: usize,
    g_band: usize,
    b_band: usize,
) -> Result<RasterImage> {
    if r_band == g_band || g_band == b_band || r_band == b_band {
        return Err(Error::InvalidArgument(format!(
            "band triplet must be distinct, got ({r_band},{g_band},{b_band})"
        )));
    }
    let idx = [
        cube.band_index(r_band)?,
        cube.band_index(g_band)?,
        cube.band_index(b_band)?,
    ];
    let mut img = RasterImage::filled(cube.height(), cube.width(), 3, 0.0);
    for (c, &b0) in idx.iter().enumerate() {
        let plane = cube.plane(b0);
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                img.set(y, x, c, plane[y * cube.width() + x].clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Thresholds a near-infrared band: water absorbs NIR, so pixels whose NIR
/// reflectance falls below `threshold` are marked water (1).
pub fn infer_water_mask(cube: &HyperCube, nir_band: usize, threshold: f64) -> Result<WaterMask> {
    let b0 = cube.band_index(nir_band)?;
    let plane = cube.plane(b0);
    let bits = plane.iter().map(|&v| u8::from(v < threshold)).collect();
    WaterMask::new(cube.height(), cube.width(), bits)
}

/// One emitted tile: where its files live and where it came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub source_id: String,
    pub row: usize,
    pub col: usize,
    pub rgb: String,
    pub mask: String,
    pub bands: Vec<String>,
}

/// Knobs for [`build_dataset`]. Defaults follow the VNIR recipe this crate
/// targets: RGB from bands 33/45/56, 256-pixel tiles, NIR mask threshold 0.1.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub band_triplet: (usize, usize, usize),
    pub tile: usize,
    /// Mask band is chosen as the band nearest this wavelength.
    pub nir_wavelength_nm: f64,
    pub water_threshold: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            band_triplet: (33, 45, 56),
            tile: 256,
            nir_wavelength_nm: 860.0,
            water_threshold: 0.1,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Tiles every `*.hcub` under `cube_dir` and emits, per tile, an RGB PNG, a
/// water-mask PNG and one grayscale PNG per band, plus a JSON-lines manifest.
///
/// Partial edge tiles are dropped. Output is deterministic: cubes are visited
/// in filename order and records are ordered by (source, row, col), so two
/// runs over the same corpus produce byte-identical manifests and files.
pub fn build_dataset(
    cube_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &DatasetConfig,
) -> Result<Vec<DatasetRecord>> {
    if cfg.tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let out_dir = out_dir.as_ref();
    let mut cube_paths: Vec<PathBuf> = fs::read_dir(cube_dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "hcub"))
        .collect();
    cube_paths.sort();
    if cube_paths.is_empty() {
        return Err(Error::NoCubesFound(cube_dir.as_ref().to_path_buf()));
    }
    fs::create_dir_all(out_dir)?;

    let mut records = Vec::new();
    for path in &cube_paths {
        let cube = load_cube(path)?;
        let source_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rows = cube.height() / cfg.tile;
        let cols = cube.width() / cfg.tile;
        let nir_band = cube.band_nearest_wavelength(cfg.nir_wavelength_nm);
        let coords: Vec<(usize, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .collect();
        // Tiles are independent; collect() preserves coordinate order.
        let tile_records: Vec<Result<DatasetRecord>> = coords
            .par_iter()
            .map(|&(row, col)| {
                emit_tile(&cube, &source_id, row, col, nir_band, cfg, out_dir)
            })
            .collect();
        for rec in tile_records {
            records.push(rec?);
        }
    }

    records.sort_by(|a, b| {
        (&a.source_id, a.row, a.col).cmp(&(&b.source_id, b.row, b.col))
    });
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut mf = BufWriter::new(fs::File::create(manifest_path)?);
    for rec in &records {
        serde_json::to_writer(&mut mf, rec).map_err(|e| Error::Decode(e.to_string()))?;
        mf.write_all(b"\n")?;
    }
    mf.flush()?;
    Ok(records)
}

fn emit_tile(
    cube: &HyperCube,
    source_id: &str,
    row: usize,
    col: usize,
    nir_band: usize,
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<DatasetRecord> {
    let tile = cube.crop(row * cfg.tile, col * cfg.tile, cfg.tile, cfg.tile)?;
    let (rb, gb, bb) = cfg.band_triplet;
    let rgb = compose_rgb(&tile, rb, gb, bb)?;
    let mask = infer_water_mask(&tile, nir_band, cfg.water_threshold)?;

    let stem = format!("{source_id}_r{row:03}_c{col:03}");
    let rgb_name = format!("{stem}_rgb.png");
    let mask_name = format!("{stem}_mask.png");
    imagecore::write_image(&rgb, out_dir.join(&rgb_name))?;
    imagecore::write_mask(&mask, out_dir.join(&mask_name))?;

    let mut band_names = Vec::with_capacity(tile.bands());
    for b0 in 0..tile.bands() {
        let name = format!("{stem}_b{:02}.png", b0 + 1);
        let mut plane = RasterImage::new(tile.height(), tile.width(), 1, tile.plane(b0).to_vec())?;
        plane.clamp_unit();
        imagecore::write_image(&plane, out_dir.join(&name))?;
        band_names.push(name);
    }

    Ok(DatasetRecord {
        source_id: source_id.to_string(),
        row,
        col,
        rgb: rgb_name,
        mask: mask_name,
        bands: band_names,
    })
}

/// Reads a manifest written by [`build_dataset`].
pub fn read_manifest(out_dir: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(out_dir.as_ref().join(MANIFEST_NAME))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Decode(e.to_string())))
        .collect()
}

/// Outcome of a dataset verification pass.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub records: usize,
    pub files_checked: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks that every file referenced by the manifest exists and that all
/// files of a record share the record's dimensions.
pub fn verify_dataset(out_dir: impl AsRef<Path>) -> Result<VerifyReport> {
    let out_dir = out_dir.as_ref();
    let records = read_manifest(out_dir)?;
    let mut problems = Vec::new();
    let mut files_checked = 0usize;

    for rec in &records {
        let mut dims: Option<(usize, usize)> = None;
        let mut check = |name: &str, problems: &mut Vec<String>| {
            files_checked += 1;
            match imagecore::read_image(out_dir.join(name)) {
                Ok(img) => {
                    let d = (img.height(), img.width());
                    match dims {
                        None => dims = Some(d),
                        Some(expect) if expect != d => problems.push(format!(
                            "{name}: dimensions {d:?} differ from record dimensions {expect:?}"
                        )),
                        _ => {}
                    }
                }
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        };
        check(&rec.rgb, &mut problems);
        check(&rec.mask, &mut problems);
        for band in &rec.bands {
            check(band, &mut problems);
        }
    }

    Ok(VerifyReport {
        records: records.len(),
        files_checked,
        problems,
    })
}

/// Deterministic demo scene: water (NIR-dark, blue-green) and rectangular
/// land blobs (NIR-bright). Samples are quantized to f32 so the cube
/// round-trips the `HCUB` container bit-exactly. Used by the examples and
/// test fixtures; real corpora come from actual VNIR products.
pub fn demo_cube(seed: u64, height: usize, width: usize, bands: usize) -> HyperCube {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let wavelengths: Vec<f64> = (0..bands)
        .map(|i| {
            let nm = 400.0 + 610.0 * i as f64 / (bands.max(2) - 1) as f64;
            (nm as f32) as f64
        })
        .collect();

    // A few rectangular land blobs on a water background.
    let mut land = vec![false; height * width];
    for _ in 0..3 {
        let bh = rng.gen_range(height / 8..=height / 3 + 1);
        let bw = rng.gen_range(width / 8..=width / 3 + 1);
        let y0 = rng.gen_range(0..height.saturating_sub(bh).max(1));
        let x0 = rng.gen_range(0..width.saturating_sub(bw).max(1));
        for y in y0..(y0 + bh).min(height) {
            for x in x0..(x0 + bw).min(width) {
                land[y * width + x] = true;
            }
        }
    }

    let mut planes = Vec::with_capacity(bands * height * width);
    let noise: Vec<f64> = (0..height * width)
        .map(|_| rng.gen_range(-0.02..0.02))
        .collect();
    for b in 0..bands {
        let frac = b as f64 / (bands.max(2) - 1) as f64;
        for (i, &is_land) in land.iter().enumerate() {
            let v = if is_land {
                // Vegetation-like: moderate visible, strong NIR plateau.
                0.18 + 0.45 * (1.0 / (1.0 + (-12.0 * (frac - 0.55)).exp()))
            } else {
                // Water: blue-green peak decaying to near-zero NIR.
                0.32 * (-3.0 * frac).exp() + 0.01
            };
            planes.push(((v + noise[i]).clamp(0.0, 1.0) as f32) as f64);
        }
    }
    HyperCube::new(height, width, wavelengths, planes).expect("demo cube is well formed")
}
