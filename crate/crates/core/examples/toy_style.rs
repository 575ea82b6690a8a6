//! Trains the synthetic circle style end to end and prints a few
//! diagnostics.
//!
//! cargo run --release --example toy_style -- [out_dir] [steps_per_stage]

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::metrics::{iou, mismatch};
use shapematch::pipeline::{stylize, train_style};
use shapematch::{save_png, toy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy-out".into()));
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(toy::TOY_STEPS);

    let mut cfg = toy::train_config(out.join("sketch.smg1"), out.join("styles"));
    cfg.sketch.steps = steps;
    cfg.glyph.stage_steps = [steps; 3];
    cfg.texture.steps = steps;
    let dataset = toy::text_dataset(toy::TOY_DATASET, 1)?;
    let style = toy::circle_style(1.0)?;

    let start = Instant::now();
    let report = train_style(&style, &dataset, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("trained in {:.1?}, bundle at {}", start.elapsed(), report.bundle_dir.display());

    let text = dataset.get(0);
    let mask = text.binarize()?;
    save_png(text, out.join("text.png"))?;
    for (i, l) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
        let out_img = stylize(&report.bundle, text, l, 7)?;
        let sil = toy::silhouette(&out_img);
        println!("l={l:.2}  iou={:.3}  deviation={:.3}", iou(&sil, &mask)?, mismatch(&sil, &mask)?);
        save_png(&out_img, out.join(format!("render_{i}.png")))?;
        let structure = report.bundle.glyph.transfer_structure(text, l, 7)?;
        save_png(&structure, out.join(format!("structure_{i}.png")))?;
    }
    Ok(())
}
