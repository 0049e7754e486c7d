//! Tile a small cube corpus into paired RGB / mask / band files.
//!
//! Writes two demo cubes, runs the dataset builder twice to demonstrate the
//! determinism contract, then validates the output with the verify pass.
//!
//!     cargo run --example build_dataset -- [work_dir]

use seafloor::hypercube::{
    build_dataset, demo_cube, save_cube, verify_dataset, DatasetConfig, MANIFEST_NAME,
};
use sha2::{Digest, Sha256};

fn main() -> seafloor::Result<()> {
    let work = std::env::args().nth(1).unwrap_or_else(|| "target/dataset_demo".into());
    let cube_dir = format!("{work}/cubes");
    std::fs::create_dir_all(&cube_dir)?;
    save_cube(&demo_cube(1, 128, 128, 63), format!("{cube_dir}/scene_a.hcub"))?;
    save_cube(&demo_cube(2, 64, 128, 63), format!("{cube_dir}/scene_b.hcub"))?;

    let tile = 64;
    let cfg = DatasetConfig {
        tile,
        ..DatasetConfig::default()
    };
    // Counting formula: sum of floor(H/tile) * floor(W/tile) per cube.
    let expected: usize = [(128usize, 128usize), (64, 128)]
        .iter()
        .map(|&(h, w)| (h / tile) * (w / tile))
        .sum();

    let out_a = format!("{work}/run_a");
    let out_b = format!("{work}/run_b");
    let records = build_dataset(&cube_dir, &out_a, &cfg)?;
    build_dataset(&cube_dir, &out_b, &cfg)?;
    println!("tiles: {} (counting formula gives {expected})", records.len());
    assert_eq!(records.len(), expected);

    let hash = |dir: &str| -> seafloor::Result<String> {
        let bytes = std::fs::read(format!("{dir}/{MANIFEST_NAME}"))?;
        Ok(format!("{:x}", Sha256::digest(bytes)))
    };
    let (ha, hb) = (hash(&out_a)?, hash(&out_b)?);
    println!("manifest sha256 run A: {ha}");
    println!("manifest sha256 run B: {hb}");
    assert_eq!(ha, hb, "two runs must produce byte-identical manifests");

    let report = verify_dataset(&out_a)?;
    println!(
        "verify: {} records, {} files checked, {} problems",
        report.records,
        report.files_checked,
        report.problems.len()
    );
    assert!(report.is_ok());
    Ok(())
}
