//! Gram-matrix style distances between the toy style image, a shifted
//! copy and a flat image, under the random reduced-width feature pyramid.
//!
//! cargo run --release --example style_loss

use shapematch::texture::{style_loss, FeatureExtractor};
use shapematch::{toy, GridTag, ImageGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phi = FeatureExtractor::<f32>::random(0, 8)?;
    let y = toy::circle_style(0.0)?.style;
    let (h, w) = (y.height(), y.width());
    let shifted = ImageGrid::from_fn(GridTag::Style, h, w, |c, r, x| y.get(c, r, (x + 5) % w))?;
    let flat = ImageGrid::filled(GridTag::Style, h, w, 0.0)?;
    for (name, g) in [("itself", &y), ("shifted", &shifted), ("flat", &flat)] {
        println!("{name:>8}: {:.6}", style_loss(g, &y, &phi)?);
    }
    Ok(())
}
