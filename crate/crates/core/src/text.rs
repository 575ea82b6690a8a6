//! Locally generated text images for training the sketch and glyph
//! networks: rasterized font glyphs when fonts are available, otherwise
//! procedural strokes.

use std::fs;
use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontVec, PxScale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{load_image, GridTag, ImageGrid};

pub const DEFAULT_GLYPHS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
pub const DEFAULT_TEXT_SIZE: usize = 256;

/// An immutable, ordered collection of single-channel text grids.
#[derive(Clone, Debug, PartialEq)]
pub struct TextDataset {
    samples: Vec<ImageGrid>,
    seed: u64,
}

impl TextDataset {
    pub fn new(samples: Vec<ImageGrid>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("text dataset is empty"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.channels() != 1 {
                return Err(Error::arg(format!("text sample {i} is not single-channel")));
            }
            if !has_both_classes(s) {
                return Err(Error::arg(format!(
                    "text sample {i} lacks foreground or background pixels"
                )));
            }
        }
        Ok(TextDataset { samples, seed })
    }

    /// Loads every PNG/JPEG in `dir` (sorted by name) as text.
    pub fn from_dir(dir: impl AsRef<Path>, invert: bool) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        paths.sort();
        let samples = paths
            .iter()
            .map(|p| load_image(p, GridTag::Text, invert))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, 0)
    }

    pub fn samples(&self) -> &[ImageGrid] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, i: usize) -> &ImageGrid {
        &self.samples[i]
    }
}

fn has_both_classes(g: &ImageGrid) -> bool {
    g.values().iter().any(|&v| v > 0.0) && g.values().iter().any(|&v| v < 0.0)
}

#[derive(Clone, Debug)]
pub struct TextDatasetBuilder {
    pub font_dirs: Vec<PathBuf>,
    pub glyphs: String,
    pub size: usize,
    /// Ignore fonts and draw strokes only.
    pub procedural: bool,
    /// Multiplier on procedural stroke width.
    pub stroke_weight: f32,
}

impl Default for TextDatasetBuilder {
    fn default() -> Self {
        TextDatasetBuilder {
            font_dirs: Vec::new(),
            glyphs: DEFAULT_GLYPHS.to_string(),
            size: DEFAULT_TEXT_SIZE,
            procedural: false,
            stroke_weight: 1.0,
        }
    }
}

impl TextDatasetBuilder {
    pub fn procedural(size: usize) -> Self {
        TextDatasetBuilder {
            size,
            procedural: true,
            ..Default::default()
        }
    }

    pub fn build(&self, count: usize, seed: u64) -> Result<TextDataset> {
        if count == 0 {
            return Err(Error::arg("text dataset count must be positive"));
        }
        if !(self.stroke_weight > 0.0) {
            return Err(Error::arg("stroke weight must be positive"));
        }
        if self.size < 8 {
            return Err(Error::arg("text images must be at least 8 pixels wide"));
        }
        let fonts = if self.procedural {
            Vec::new()
        } else {
            collect_fonts(&self.font_dirs)
        };
        let glyphs: Vec<char> = self.glyphs.chars().filter(|c| !c.is_whitespace()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(count);
        while samples.len() < count {
            let canvas = if !fonts.is_empty() && !glyphs.is_empty() {
                let font = &fonts[rng.gen_range(0..fonts.len())];
                let ch = glyphs[rng.gen_range(0..glyphs.len())];
                render_glyph(font, ch, self.size, &mut rng)
            } else {
                procedural_strokes(self.size, self.stroke_weight, &mut rng)
            };
            if let Some(values) = canvas {
                let grid = ImageGrid::new(GridTag::Text, self.size, self.size, values)?;
                if has_both_classes(&grid) {
                    samples.push(grid);
                }
            }
        }
        TextDataset::new(samples, seed)
    }
}

/// Builds `count` text images of 256×256 from fonts found under
/// `font_dirs`, falling back to procedural strokes when none load.
pub fn build_text_dataset(
    font_dirs: &[PathBuf],
    glyph_set: &str,
    count: usize,
    seed: u64,
) -> Result<TextDataset> {
    TextDatasetBuilder {
        font_dirs: font_dirs.to_vec(),
        glyphs: glyph_set.to_string(),
        ..Default::default()
    }
    .build(count, seed)
}

fn collect_fonts(dirs: &[PathBuf]) -> Vec<FontVec> {
    let mut files = Vec::new();
    let mut stack: Vec<PathBuf> = dirs.to_vec();
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ttf" | "otf"))
            {
                files.push(p);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .filter_map(|p| {
            let font = fs::read(&p).ok().and_then(|b| FontVec::try_from_vec(b).ok());
            if font.is_none() {
                log::warn!("skipping unreadable font {}", p.display());
            }
            font
        })
        .collect()
}

fn render_glyph<R: Rng>(font: &FontVec, ch: char, size: usize, rng: &mut R) -> Option<Vec<f32>> {
    let id = font.glyph_id(ch);
    if id.0 == 0 {
        return None;
    }
    let px = size as f32 * rng.gen_range(0.5..0.9);
    let glyph = id.with_scale_and_position(PxScale::from(px), point(0.0, 0.0));
    let outline = font.outline_glyph(glyph)?;
    let bounds = outline.px_bounds();
    let (gw, gh) = (bounds.width() as i64, bounds.height() as i64);
    let slack_x = (size as i64 - gw).max(0);
    let slack_y = (size as i64 - gh).max(0);
    let ox = rng.gen_range(0..=slack_x);
    let oy = rng.gen_range(0..=slack_y);
    let mut canvas = vec![-1.0f32; size * size];
    outline.draw(|x, y, coverage| {
        let (x, y) = (x as i64 + ox, y as i64 + oy);
        if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
            let v = &mut canvas[y as usize * size + x as usize];
            *v = v.max(2.0 * coverage.clamp(0.0, 1.0) - 1.0);
        }
    });
    Some(canvas)
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Thick polylines and elliptical rings loosely mimicking pen strokes.
fn procedural_strokes<R: Rng>(size: usize, weight: f32, rng: &mut R) -> Option<Vec<f32>> {
    let s = size as f32;
    let margin = 0.15 * s;
    let point = |rng: &mut R| (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let half_width = rng.gen_range(0.04..0.07) * s * weight;
    let mut polylines: Vec<Vec<(f32, f32)>> = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let n = rng.gen_range(2..=3);
        polylines.push((0..n).map(|_| point(rng)).collect());
    }
    let ring = if rng.gen_bool(0.4) {
        let c = point(rng);
        Some((c, rng.gen_range(0.1..0.25) * s, rng.gen_range(0.1..0.25) * s))
    } else {
        None
    };
    let mut canvas = vec![-1.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut d = f32::INFINITY;
            for line in &polylines {
                for seg in line.windows(2) {
                    d = d.min(segment_distance(p, seg[0], seg[1]));
                }
            }
            if let Some((c, rx, ry)) = ring {
                // Approximate distance to the ellipse outline.
                let (nx, ny) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
                let r = (nx * nx + ny * ny).sqrt();
                d = d.min((r - 1.0).abs() * rx.min(ry));
            }
            let coverage = (half_width - d + 0.5).clamp(0.0, 1.0);
            canvas[y * size + x] = 2.0 * coverage - 1.0;
        }
    }
    Some(canvas)
}
