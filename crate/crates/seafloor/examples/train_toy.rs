//! Short toy training run of the four-generator adversarial model.
//!
//! Uses a reduced setting (16x16 tiles, 40 steps) so the example finishes in
//! well under a minute; the full published recipe lives behind
//! `seafloor train-toy`.
//!
//!     cargo run --release --example train_toy -- [out_dir]

use seafloor::imagecore::write_image;
use seafloor::microgan::{checkpoint, TrainConfig, Trainer};

fn main() -> seafloor::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/train_demo".into());
    std::fs::create_dir_all(&out)?;

    let cfg = TrainConfig {
        image_size: 16,
        steps: 40,
        dataset_size: 8,
        batch: 4,
        base_width: 8,
        disc_dim: 16,
        ..TrainConfig::default()
    };
    println!(
        "training: {} steps, batch {}, {}x{} tiles, seed {}",
        cfg.steps, cfg.batch, cfg.image_size, cfg.image_size, cfg.seed
    );

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut first = None;
    let mut last = 0.0;
    trainer.run(cfg.steps, |step, out| {
        first.get_or_insert(out.report.total);
        last = out.report.total;
        if step % 10 == 0 || step == 1 {
            println!(
                "step {step:3}: total {:9.3}  (l_r {:6.3}, l_gj {:.4}, adv {:.4}, disc {:.4})",
                out.report.total, out.report.l_r, out.report.l_gj, out.report.l_adv, out.disc_loss
            );
        }
    })?;
    println!(
        "total objective: first {:.3} -> last {:.3} ({:.1}%)",
        first.unwrap(),
        last,
        100.0 * last / first.unwrap()
    );

    write_image(&trainer.render_sample_grid(), format!("{out}/grid.png"))?;
    checkpoint::save_checkpoint(format!("{out}/checkpoint"), &trainer.nets.named_params())?;
    println!("wrote sample grid and checkpoint under {out}");
    Ok(())
}
