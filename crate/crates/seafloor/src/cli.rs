//! Command-line entry points: one subcommand per pipeline stage.
//!
//! Every subcommand prints machine-readable JSON to stdout and writes images
//! to the path given by its output flag. Exit codes: 0 success, 1 module
//! error, 2 usage error. Set `DEWATER_LOG=debug` for diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypercube::{self, DatasetConfig};
use crate::imagecore::{self, RasterImage, WaterMask};
use crate::metrics::{self, MetricReport};
use crate::microgan::{checkpoint, TrainConfig, Trainer};
use crate::objectives::{self, LossTerms, LossWeights};
use crate::photometry;
use crate::watercolumn::{self, TransmissionMap};

#[derive(Parser)]
#[command(
    name = "seafloor",
    version,
    about = "Water-column removal and in-air seafloor colour restoration",
    after_help = "Defaults follow the published recipe: RGB bands 33,45,56; \
attenuation 0.9; loss weights gamma=30 sigma=90 iota=100 tau=50 nu=10; \
Adam lr 2e-4 with betas (0.5, 0.999); seed 100."
)]
struct Cli {
    /// Worker threads for batch subcommands (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a directory of HCUB cubes into RGB / mask / per-band PNGs plus a
    /// JSON-lines manifest.
    BuildDataset(BuildDatasetArgs),
    /// Dichromatic decomposition of a cube into diffuse / specular targets.
    Decompose(DecomposeArgs),
    /// Synthesize an underwater image from in-air radiance and a range map.
    Synthesize(SynthesizeArgs),
    /// Remove the water column from an underwater image.
    Dewater(DewaterArgs),
    /// Image quality metrics or loss terms for image pairs.
    Evaluate(EvaluateArgs),
    /// Train the toy four-generator adversarial model on synthetic data.
    TrainToy(TrainToyArgs),
    /// Check that a built dataset is complete and internally consistent.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Directory containing *.hcub cubes.
    #[arg(long)]
    cubes: PathBuf,
    /// Output directory for PNGs and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// 1-based R,G,B band numbers [published default: 33,45,56].
    #[arg(long, default_value = "33,45,56")]
    bands: String,
    /// Tile edge in pixels; partial edge tiles are dropped.
    #[arg(long, default_value_t = 256)]
    tile: usize,
    /// Mask band is the band nearest this wavelength (nm).
    #[arg(long, default_value_t = 860.0)]
    nir_wavelength: f64,
    /// NIR reflectance below this is water.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Input HCUB cube.
    #[arg(long)]
    cube: PathBuf,
    /// Output directory for diffuse.png, specular.png, k_expect.png.
    #[arg(long)]
    out: PathBuf,
    /// 1-based R,G,B band numbers [published default: 33,45,56].
    #[arg(long, default_value = "33,45,56")]
    bands: String,
    /// Optional water mask PNG; restricts the grey-world illuminant.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Lower stretch percentile.
    #[arg(long, default_value_t = 0.01)]
    lo: f64,
    /// Upper stretch percentile.
    #[arg(long, default_value_t = 0.99)]
    hi: f64,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// In-air radiance J (RGB PNG).
    #[arg(long)]
    input: PathBuf,
    /// Range map r (grayscale PNG); transmission is exp(-r * alpha).
    #[arg(long)]
    range: PathBuf,
    /// Water mask PNG (water = 255).
    #[arg(long)]
    mask: PathBuf,
    /// Veiling light: "auto" (grey world over water) or "r,g,b".
    #[arg(long, default_value = "auto")]
    veiling: String,
    /// Attenuation coefficient, scalar or "r,g,b" [published default: 0.9].
    #[arg(long, default_value = "0.9")]
    alpha: String,
    /// Output underwater image N (PNG).
    #[arg(long)]
    out: PathBuf,
    /// Also write the transmission map here (PNG).
    #[arg(long)]
    trans_out: Option<PathBuf>,
}

#[derive(Args)]
struct DewaterArgs {
    /// Observed underwater image N (RGB PNG).
    #[arg(long)]
    input: PathBuf,
    /// Transmission map T (grayscale PNG); alternative to --range.
    #[arg(long)]
    trans: Option<PathBuf>,
    /// Range map r (grayscale PNG); T = exp(-r * alpha).
    #[arg(long)]
    range: Option<PathBuf>,
    /// Water mask PNG (water = 255).
    #[arg(long)]
    mask: PathBuf,
    /// Veiling light: "auto" (grey world over water) or "r,g,b".
    #[arg(long, default_value = "auto")]
    veiling: String,
    /// Attenuation coefficient, scalar or "r,g,b" [published default: 0.9].
    #[arg(long, default_value = "0.9")]
    alpha: String,
    /// Output dewatered image J (PNG).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference image for full-reference metrics.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Image under test.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma list from {psnr, ssim, uiqm}.
    #[arg(long, default_value = "psnr,ssim,uiqm")]
    metrics: String,
    /// Emit loss terms for the pair instead of quality metrics.
    #[arg(long, default_value_t = false)]
    losses: bool,
    /// Mask PNG for the loss terms (defaults to all-water).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Batch mode: dataset directory with a manifest; no-reference metrics
    /// are computed per record (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Tile size (16, 32 or 64).
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Training steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// RNG seed [published default: 100].
    #[arg(long, default_value_t = 100)]
    seed: u64,
    /// Batch size [published default: 6].
    #[arg(long, default_value_t = 6)]
    batch: usize,
    /// Synthetic tuples in the fixed training set.
    #[arg(long, default_value_t = 16)]
    dataset_size: usize,
    /// Adam learning rate [published default: 0.0002].
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Adam beta1 [published default: 0.5].
    #[arg(long, default_value_t = 0.5)]
    beta1: f64,
    /// Adam beta2 [published default: 0.999].
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Reflection loss weight gamma [published default: 30].
    #[arg(long, default_value_t = 30.0)]
    gamma: f64,
    /// Radiance reconstruction weight sigma [published default: 90].
    #[arg(long, default_value_t = 90.0)]
    sigma: f64,
    /// Dewatered radiance weight iota [published default: 100].
    #[arg(long, default_value_t = 100.0)]
    iota: f64,
    /// Transmission weight tau [published default: 50].
    #[arg(long, default_value_t = 50.0)]
    tau: f64,
    /// Resynthesis weight nu [published default: 10].
    #[arg(long, default_value_t = 10.0)]
    nu: f64,
    /// Write a sample grid PNG every N steps (0 = never).
    #[arg(long, default_value_t = 50)]
    sample_every: usize,
    /// Output directory for the loss CSV, sample grids and checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Dataset directory containing manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
}

/// Parses arguments from the process environment and runs one subcommand.
/// Returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DEWATER_LOG")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Best effort; a later init in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildDataset(args) => build_dataset(args),
        Command::Decompose(args) => decompose(args),
        Command::Synthesize(args) => synthesize(args),
        Command::Dewater(args) => dewater(args),
        Command::Evaluate(args) => evaluate(args),
        Command::TrainToy(args) => train_toy(args),
        Command::Verify(args) => verify(args),
    }
}

fn parse_triplet(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad band triplet '{s}'")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "band triplet needs three values, got '{s}'"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_alpha(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad alpha '{s}'")))?;
    if parts.len() != 1 && parts.len() != 3 {
        return Err(Error::InvalidArgument(
            "alpha must be a scalar or r,g,b".into(),
        ));
    }
    Ok(parts)
}

enum Veiling {
    Auto,
    Fixed([f64; 3]),
}

fn parse_veiling(s: &str) -> Result<Veiling> {
    if s == "auto" {
        return Ok(Veiling::Auto);
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad veiling '{s}'")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(
            "veiling must be 'auto' or r,g,b".into(),
        ));
    }
    Ok(Veiling::Fixed([parts[0], parts[1], parts[2]]))
}

fn resolve_veiling(v: &Veiling, img: &RasterImage, mask: &WaterMask) -> Result<[f64; 3]> {
    match v {
        Veiling::Auto => watercolumn::veiling_grey_world(img, mask),
        Veiling::Fixed(rgb) => Ok(*rgb),
    }
}

fn transmission_from_args(range: &RasterImage, alpha: &[f64]) -> Result<TransmissionMap> {
    match alpha {
        [a] => watercolumn::transmission_from_range(range, *a),
        [r, g, b] => watercolumn::transmission_from_range_rgb(range, [*r, *g, *b]),
        _ => unreachable!("parse_alpha enforces arity"),
    }
}

fn build_dataset(args: BuildDatasetArgs) -> Result<()> {
    let cfg = DatasetConfig {
        band_triplet: parse_triplet(&args.bands)?,
        tile: args.tile,
        nir_wavelength_nm: args.nir_wavelength,
        water_threshold: args.threshold,
    };
    let records = hypercube::build_dataset(&args.cubes, &args.out, &cfg)?;
    let manifest_path = args.out.join(hypercube::MANIFEST_NAME);
    let digest = Sha256::digest(fs::read(&manifest_path)?);
    println!(
        "{}",
        json!({
            "records": records.len(),
            "manifest": manifest_path,
            "manifest_sha256": format!("{digest:x}"),
        })
    );
    Ok(())
}

fn decompose(args: DecomposeArgs) -> Result<()> {
    let cube = hypercube::load_cube(&args.cube)?;
    let bands = parse_triplet(&args.bands)?;
    let mask = match &args.mask {
        Some(p) => Some(imagecore::read_mask(p)?),
        None => None,
    };
    let dec = photometry::decompose_stretched(&cube, bands, mask.as_ref(), (args.lo, args.hi))?;

    fs::create_dir_all(&args.out)?;
    imagecore::write_image(&dec.diffuse, args.out.join("diffuse.png"))?;
    imagecore::write_image(&dec.specular, args.out.join("specular.png"))?;
    // Rendered with a full-range stretch: E[k] hovers around 1 and would
    // otherwise saturate an 8-bit file.
    let k_render = imagecore::linear_stretch(&dec.k_expect, 0.0, 1.0)?.image;
    imagecore::write_image(&k_render, args.out.join("k_expect.png"))?;

    let full_water;
    let residual_mask = match &mask {
        Some(m) => m,
        None => {
            full_water = WaterMask::filled(cube.height(), cube.width(), 1);
            &full_water
        }
    };
    let residual = photometry::reconstruction_residual(
        &cube,
        &dec.diffuse,
        &dec.k_expect,
        residual_mask,
        bands,
    )?;
    println!(
        "{}",
        json!({
            "illuminant": dec.illuminant.values(),
            "residual": residual,
        })
    );
    Ok(())
}

fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let j = imagecore::read_image(&args.input)?;
    let range = imagecore::read_image(&args.range)?;
    let mask = imagecore::read_mask(&args.mask)?;
    let alpha = parse_alpha(&args.alpha)?;
    let t = transmission_from_args(&range, &alpha)?;
    let veiling = resolve_veiling(&parse_veiling(&args.veiling)?, &j, &mask)?;
    let n = watercolumn::synthesize_underwater(&j, &t, veiling, &mask)?;
    if let Some(parent) = args.out.parent() {
        fs::create_dir_all(parent)?;
    }
    imagecore::write_image(&n, &args.out)?;
    if let Some(tp) = &args.trans_out {
        imagecore::write_image(t.as_raster(), tp)?;
    }
    println!("{}", json!({ "out": args.out, "veiling": veiling, "alpha": alpha }));
    Ok(())
}

fn dewater(args: DewaterArgs) -> Result<()> {
    let n = imagecore::read_image(&args.input)?;
    let mask = imagecore::read_mask(&args.mask)?;
    let t = match (&args.trans, &args.range) {
        (Some(tp), None) => TransmissionMap::new(imagecore::read_image(tp)?),
        (None, Some(rp)) => {
            let alpha = parse_alpha(&args.alpha)?;
            transmission_from_args(&imagecore::read_image(rp)?, &alpha)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --trans or --range".into(),
            ))
        }
    };
    let veiling = resolve_veiling(&parse_veiling(&args.veiling)?, &n, &mask)?;
    let j = watercolumn::dewater(&n, &t, veiling, &mask)?;
    if let Some(parent) = args.out.parent() {
        fs::create_dir_all(parent)?;
    }
    imagecore::write_image(&j, &args.out)?;
    println!("{}", json!({ "out": args.out, "veiling": veiling }));
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    if let Some(dir) = &args.manifest {
        return evaluate_manifest(dir, &args.metrics);
    }
    let test_path = args
        .test
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--test is required".into()))?;
    let test = imagecore::read_image(test_path)?;

    if args.losses {
        let reference = args
            .reference
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--ref is required with --losses".into()))?;
        let reference = imagecore::read_image(reference)?;
        let mask = match &args.mask {
            Some(p) => imagecore::read_mask(p)?,
            None => WaterMask::filled(test.height(), test.width(), 1),
        };
        let report = pair_losses(&reference, &test, &mask)?;
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
        return Ok(());
    }

    let wanted: Vec<&str> = args.metrics.split(',').map(str::trim).collect();
    let mut report = MetricReport {
        psnr_db: f64::NAN,
        ssim: f64::NAN,
        uiqm: f64::NAN,
        uicm: f64::NAN,
        uism: f64::NAN,
        uiconm: f64::NAN,
        niqe: None,
        ccf: None,
    };
    for m in &wanted {
        match *m {
            "psnr" | "ssim" => {
                let reference = args
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("--ref is required for {m}")))?;
                let reference = imagecore::read_image(reference)?;
                if *m == "psnr" {
                    report.psnr_db = metrics::psnr(&reference, &test)?;
                } else {
                    report.ssim = metrics::ssim(&reference, &test)?;
                }
            }
            "uiqm" => {
                let score = metrics::uiqm(&test)?;
                report.uiqm = score.uiqm;
                report.uicm = score.uicm;
                report.uism = score.uism;
                report.uiconm = score.uiconm;
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown metric '{other}' (expected psnr, ssim, uiqm)"
                )))
            }
        }
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Loss view of an image pair: the terms computable from (reference,
/// prediction, mask). A 3-channel pair fills the radiance slots; a 1-channel
/// pair fills the transmission slot. Unavailable terms stay zero and the
/// total uses the default weights.
fn pair_losses(
    reference: &RasterImage,
    prediction: &RasterImage,
    mask: &WaterMask,
) -> Result<objectives::LossReport> {
    let mut terms = LossTerms::default();
    if reference.channels() == 1 {
        let t = objectives::loss_transmission(reference, prediction, mask)?;
        terms.l_t = objectives::loss_depth_scale_invariant(t, prediction, reference)?;
    } else {
        terms.l_gj = objectives::loss_dewatered(reference, prediction, mask)?;
        terms.l_r = objectives::loss_radiance_l2(reference, prediction, mask)?;
        terms.l_n = objectives::loss_resynthesis(reference, prediction, mask)?;
    }
    objectives::total_objective(terms, &LossWeights::default())
}

fn evaluate_manifest(dir: &Path, wanted: &str) -> Result<()> {
    let wanted: Vec<&str> = wanted.split(',').map(str::trim).collect();
    if wanted.iter().any(|m| *m != "uiqm") {
        return Err(Error::InvalidArgument(
            "manifest mode supports no-reference metrics only (uiqm)".into(),
        ));
    }
    let records = hypercube::read_manifest(dir)?;
    let lines: Vec<Result<String>> = records
        .par_iter()
        .map(|rec| {
            let img = imagecore::read_image(dir.join(&rec.rgb))?;
            let score = metrics::uiqm(&img)?;
            Ok(json!({
                "rgb": rec.rgb,
                "uiqm": score.uiqm,
                "uicm": score.uicm,
                "uism": score.uism,
                "uiconm": score.uiconm,
            })
            .to_string())
        })
        .collect();
    for line in lines {
        println!("{}", line?);
    }
    Ok(())
}

fn train_toy(args: TrainToyArgs) -> Result<()> {
    let cfg = TrainConfig {
        lr: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        batch: args.batch,
        steps: args.steps,
        seed: args.seed,
        weights: LossWeights {
            gamma: args.gamma,
            sigma: args.sigma,
            iota: args.iota,
            tau: args.tau,
            nu: args.nu,
        },
        image_size: args.size,
        dataset_size: args.dataset_size,
        ..TrainConfig::default()
    };
    fs::create_dir_all(&args.out)?;
    let mut trainer = Trainer::new(cfg)?;

    let csv_path = args.out.join("loss.csv");
    let mut csv = String::from("step,l_gd,l_gs,l_r,l_gj,l_t,l_n,l_adv,total\n");
    let mut first_total = None;
    let mut last_total = 0.0;
    for step in 1..=args.steps {
        let out = trainer.step()?;
        let r = out.report;
        csv.push_str(&format!(
            "{step},{},{},{},{},{},{},{},{}\n",
            r.l_gd, r.l_gs, r.l_r, r.l_gj, r.l_t, r.l_n, r.l_adv, r.total
        ));
        first_total.get_or_insert(r.total);
        last_total = r.total;
        if args.sample_every > 0 && step % args.sample_every == 0 {
            let grid = trainer.render_sample_grid();
            imagecore::write_image(&grid, args.out.join(format!("grid_{step:05}.png")))?;
            log::info!("step {step}: total {:.3}", r.total);
        }
    }
    fs::write(&csv_path, csv)?;

    let ckpt_dir = args.out.join("checkpoint");
    checkpoint::save_checkpoint(&ckpt_dir, &trainer.nets.named_params())?;
    let grid = trainer.render_sample_grid();
    imagecore::write_image(&grid, args.out.join("grid_final.png"))?;

    println!(
        "{}",
        json!({
            "steps": args.steps,
            "first_total": first_total.unwrap_or(0.0),
            "final_total": last_total,
            "csv": csv_path,
            "checkpoint": ckpt_dir,
        })
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let report = hypercube::verify_dataset(&args.data)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if !report.is_ok() {
        return Err(Error::InvalidArgument(format!(
            "{} problem(s) found",
            report.problems.len()
        )));
    }
    Ok(())
}
