//! Stylizes a text image with a trained bundle across the scale range.
//! Without a styles directory, a tiny bundle is trained first (seconds;
//! the output is noise, but every stage runs).
//!
//! cargo run --release --example render -- [styles_dir] [style] [text.png]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::{load_image, save_png, stylize, toy, train_style, GridTag, StyleLibrary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let styles = match args.next() {
        Some(d) => PathBuf::from(d),
        None => {
            let dir = PathBuf::from("render-out");
            let cfg = toy::smoke_config(dir.join("sketch.smg1"), dir.join("styles"), 20);
            train_style(&toy::circle_style(1.0)?, &toy::text_dataset(4, 1)?, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
            dir.join("styles")
        }
    };
    let name = args.next().unwrap_or_else(|| toy::TOY_NAME.into());
    let text = match args.next() {
        Some(p) => load_image(p, GridTag::Text, false)?,
        None => toy::text_dataset(1, 42)?.get(0).clone(),
    };
    let bundle = StyleLibrary::new(&styles).get(&name)?;
    for l in [0.0, 0.5, 1.0] {
        let (img, took) = bundle.composition().render_timed(&text, l, 0)?;
        assert_eq!(img, stylize(&bundle, &text, l, 0)?);
        let out = styles.join(format!("{name}_l{l}.png"));
        save_png(&img, &out)?;
        println!("l={l}: {} in {took:.1?}", out.display());
    }
    Ok(())
}
