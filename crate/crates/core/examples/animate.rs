//! Renders an `l` ramp as numbered frames plus an index file, once with a
//! fixed seed and once with a seed walk.
//!
//! cargo run --release --example animate -- [out_dir] [frames]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::pipeline::{animate, ramp_schedule, SeedMode};
use shapematch::{toy, train_style};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "animate-out".into()));
    let frames: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let cfg = toy::smoke_config(out.join("sketch.smg1"), out.join("styles"), 20);
    let report = train_style(&toy::circle_style(1.0)?, &toy::text_dataset(4, 1)?, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let text = toy::text_dataset(1, 9)?.get(0).clone();
    for (mode, dir) in [(SeedMode::Fixed, "fixed"), (SeedMode::Walk, "walk")] {
        let schedule = ramp_schedule(0.0, 1.0, frames, 100, mode)?;
        let files = animate(report.bundle.composition(), &text, &schedule, out.join(dir))?;
        println!("{dir}: {} frames in {}", files.len(), out.join(dir).display());
    }
    Ok(())
}
