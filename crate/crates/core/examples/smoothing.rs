//! The smoothness block: blurs the toy disc and a stroke image at several
//! scales and writes the results next to the fixed-sigmoid sketch.
//!
//! cargo run --release --example smoothing -- [out_dir]

use std::path::PathBuf;

use shapematch::sketch::{gaussian_kernel, naive_sketch, smooth};
use shapematch::{save_png, toy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "smoothing-out".into()));
    std::fs::create_dir_all(&out)?;
    let inputs = [
        ("disc", toy::circle_structure(toy::TOY_SIZE)?),
        ("strokes", toy::text_dataset(1, 3)?.get(0).clone()),
    ];
    for (name, x) in &inputs {
        save_png(x, out.join(format!("{name}.png")))?;
        for l in [0.0, 0.5, 1.0] {
            let k = gaussian_kernel(l)?;
            println!("{name} l={l}: sigma {} radius {}", k.sigma, k.radius);
            save_png(&smooth(x, l)?, out.join(format!("{name}_smooth_{l}.png")))?;
            save_png(&naive_sketch(x, l)?, out.join(format!("{name}_naive_{l}.png")))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
