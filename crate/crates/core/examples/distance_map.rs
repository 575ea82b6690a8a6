//! Legibility weights for a text image: zero on the contour, rising with
//! distance until the cap.
//!
//! cargo run --release --example distance_map -- [text.png] [out.png]

use shapematch::{distance_weight_map, load_image, save_png, toy, GridTag, ImageGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let text = match args.next() {
        Some(path) => load_image(path, GridTag::Text, false)?,
        None => toy::text_dataset(1, 5)?.get(0).clone(),
    };
    let out = args.next().unwrap_or_else(|| "distance_map.png".into());
    let m = distance_weight_map(&text, None)?;
    let zeros = m.weights.iter().filter(|&&w| w == 0.0).count();
    let saturated = m.weights.iter().filter(|&&w| w == 1.0).count();
    println!(
        "{}x{} cap {:.1}px: {zeros} contour pixels, {saturated} saturated",
        m.height, m.width, m.cap
    );
    let vis = ImageGrid::from_fn(GridTag::Structure, m.height, m.width, |_, y, x| {
        2.0 * m.weights[y * m.width + x] - 1.0
    })?;
    save_png(&vis, &out)?;
    println!("wrote {out}");
    Ok(())
}
