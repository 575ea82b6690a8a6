//! A tiny synthetic style used by examples and the acceptance suite: a
//! disc-shaped structure map filled with a sinusoidal colour texture on a
//! white background, plus procedural stroke text at the same size.

use std::path::Path;

use crate::backbone::{DiscriminatorConfig, GeneratorConfig};
use crate::error::Result;
use crate::imageio::{GridTag, ImageGrid, StyleAsset};
use crate::pipeline::{FeatureSource, TrainConfig};
use crate::text::{TextDataset, TextDatasetBuilder};

pub const TOY_SIZE: usize = 64;
pub const TOY_NAME: &str = "toy-circle";
pub const TOY_WIDTH: usize = 16;
pub const TOY_STEPS: usize = 2000;
/// Half-size glyph crops, so a single disc still yields varied edge
/// patches. Texture crops cover the whole image because the toy texture
/// depends on absolute position.
pub const TOY_CROP: usize = 32;
pub const TOY_STROKE_WEIGHT: f32 = 2.5;
/// Small enough for width-16 networks to fit every sample.
pub const TOY_DATASET: usize = 4;
/// Sketch minibatch; the glyph and texture stages draw one crop per step.
pub const TOY_SKETCH_BATCH: usize = 2;
/// Rendered pixels whose channel mean falls below this are foreground.
pub const SILHOUETTE_THRESHOLD: f32 = 0.5;

/// Anti-aliased disc of radius `0.35·size`, subject = +1.
pub fn circle_structure(size: usize) -> Result<ImageGrid> {
    let c = size as f32 / 2.0;
    let r = 0.35 * size as f32;
    ImageGrid::from_fn(GridTag::Structure, size, size, |_, y, x| {
        let d = ((x as f32 + 0.5 - c).powi(2) + (y as f32 + 0.5 - c).powi(2)).sqrt();
        (2.0 * (r - d + 0.5).clamp(0.0, 1.0)) - 1.0
    })
}

/// Dark sinusoidal stripes inside the structure, white outside.
pub fn sinusoidal_style(structure: &ImageGrid) -> Result<ImageGrid> {
    ImageGrid::from_fn(GridTag::Style, structure.height(), structure.width(), |c, y, x| {
        let (xf, yf) = (x as f32, y as f32);
        let wave = match c {
            0 => 0.1 + 0.3 * (0.45 * xf + 0.2 * yf).sin(),
            1 => -0.4 + 0.3 * (0.3 * yf).cos(),
            _ => -0.7 + 0.2 * (0.25 * (xf - yf)).sin(),
        };
        let inside = (structure.get(0, y, x) + 1.0) / 2.0;
        inside * wave + (1.0 - inside)
    })
}

pub fn circle_style(legibility_weight: f64) -> Result<StyleAsset> {
    let x = circle_structure(TOY_SIZE)?;
    let y = sinusoidal_style(&x)?;
    StyleAsset::new(TOY_NAME, y, x, legibility_weight)
}

/// Procedural stroke images at the toy size. Strokes are drawn bolder
/// than the default so their width relative to the smallest blur matches
/// text at full resolution.
pub fn text_dataset(count: usize, seed: u64) -> Result<TextDataset> {
    TextDatasetBuilder {
        stroke_weight: TOY_STROKE_WEIGHT,
        ..TextDatasetBuilder::procedural(TOY_SIZE)
    }
    .build(count, seed)
}

/// Width-16 networks, `TOY_STEPS` steps per stage, `TOY_CROP` crops and a
/// reduced-width random feature pyramid.
pub fn train_config(sketch_checkpoint: impl AsRef<Path>, styles_dir: impl AsRef<Path>) -> TrainConfig {
    let mut cfg = TrainConfig::new(sketch_checkpoint.as_ref(), styles_dir.as_ref());
    let gen = |i, o, controllable| GeneratorConfig {
        base_width: TOY_WIDTH,
        n_resblocks: 2,
        controllable,
        ..GeneratorConfig::new(i, o)
    };
    let disc = |i| DiscriminatorConfig {
        base_width: TOY_WIDTH,
        ..DiscriminatorConfig::new(i)
    };
    cfg.sketch.generator = gen(2, 1, false);
    cfg.sketch.discriminator = disc(3);
    cfg.sketch.steps = TOY_STEPS;
    cfg.sketch.batch_size = TOY_SKETCH_BATCH;
    cfg.glyph.generator = gen(1, 1, true);
    cfg.glyph.discriminator = disc(1);
    cfg.glyph.stage_steps = [TOY_STEPS; 3];
    cfg.glyph.crop_size = TOY_CROP;
    cfg.texture.generator = gen(1, 3, false);
    cfg.texture.discriminator = disc(4);
    cfg.texture.steps = TOY_STEPS;
    cfg.texture.crop_size = TOY_SIZE;
    cfg.features = FeatureSource::Random {
        seed: 0,
        width_divisor: 8,
    };
    cfg.sketch.log_every = 500;
    cfg.glyph.log_every = 500;
    cfg.texture.log_every = 500;
    cfg
}

/// Width-4 single-block networks with `steps` updates per stage. For
/// plumbing tests where output quality does not matter.
pub fn smoke_config(sketch_checkpoint: impl AsRef<Path>, styles_dir: impl AsRef<Path>, steps: usize) -> TrainConfig {
    let mut cfg = train_config(sketch_checkpoint, styles_dir);
    for g in [&mut cfg.sketch.generator, &mut cfg.glyph.generator, &mut cfg.texture.generator] {
        g.base_width = 4;
        g.n_resblocks = 1;
    }
    for d in [&mut cfg.sketch.discriminator, &mut cfg.glyph.discriminator, &mut cfg.texture.discriminator] {
        d.base_width = 4;
    }
    cfg.sketch.steps = steps;
    cfg.glyph.stage_steps = [steps; 3];
    cfg.texture.steps = steps;
    cfg.features = FeatureSource::Random {
        seed: 0,
        width_divisor: 16,
    };
    cfg
}

/// Foreground of a rendered toy image.
pub fn silhouette(output: &ImageGrid) -> Vec<bool> {
    let (h, w, c) = (output.height(), output.width(), output.channels());
    (0..h * w)
        .map(|i| {
            let mean: f32 = (0..c).map(|ch| output.values()[ch * h * w + i]).sum::<f32>() / c as f32;
            mean < SILHOUETTE_THRESHOLD
        })
        .collect()
}
