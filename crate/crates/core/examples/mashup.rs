//! Structure from one style and texture from another. Trains two tiny
//! bundles, then renders every pairing.
//!
//! cargo run --release --example mashup -- [out_dir]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::{mashup, save_png, toy, train_style};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mashup-out".into()));
    let cfg = toy::smoke_config(out.join("sketch.smg1"), out.join("styles"), 20);
    let data = toy::text_dataset(4, 1)?;
    let mut bundles = Vec::new();
    for (i, name) in ["round", "legible"].iter().enumerate() {
        let mut style = toy::circle_style(i as f64)?;
        style.name = name.to_string();
        bundles.push(train_style(&style, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64))?.bundle);
    }
    let text = toy::text_dataset(1, 9)?.get(0).clone();
    for g in &bundles {
        for t in &bundles {
            let img = mashup(g, t, &text, 0.5, 1)?;
            let path = out.join(format!("{}+{}.png", g.name, t.name));
            save_png(&img, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
