//! Pixel grids, file I/O, crop sampling and noise injection.
//!
//! Every grid holds values in `[-1, 1]`. Single-channel grids (structure
//! maps and text) use the convention foreground = +1, background = −1.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training crop side length used when nothing else is configured.
pub const DEFAULT_CROP: usize = 256;
/// Standard deviation of the Gaussian noise added to generator inputs.
pub const DEFAULT_NOISE_STD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GridTag {
    Style,
    Structure,
    Text,
    Output,
}

impl GridTag {
    pub fn channels(self) -> usize {
        match self {
            GridTag::Style | GridTag::Output => 3,
            GridTag::Structure | GridTag::Text => 1,
        }
    }
}

/// A `height × width × channels` raster, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    tag: GridTag,
    values: Vec<f32>,
}

impl ImageGrid {
    /// Builds a grid from channel-planar values.
    pub fn new(tag: GridTag, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let need = height * width * tag.channels();
        if values.len() != need {
            return Err(Error::shape(format!(
                "{height}x{width} {tag:?} grid needs {need} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("grid value {v} outside [-1, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            tag,
            values,
        })
    }

    pub fn from_fn(
        tag: GridTag,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * tag.channels());
        for c in 0..tag.channels() {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self::new(tag, height, width, values)
    }

    pub fn filled(tag: GridTag, height: usize, width: usize, v: f32) -> Result<Self> {
        Self::new(tag, height, width, vec![v; height * width * tag.channels()])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.tag.channels()
    }

    pub fn tag(&self) -> GridTag {
        self.tag
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Reinterprets the grid under another tag with the same channel count.
    pub fn retag(mut self, tag: GridTag) -> Result<Self> {
        if tag.channels() != self.channels() {
            return Err(Error::shape(format!(
                "cannot retag a {}-channel grid as {tag:?}",
                self.channels()
            )));
        }
        self.tag = tag;
        Ok(self)
    }

    /// `[1, C, H, W]` tensor view of the grid.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![1, self.channels(), self.height, self.width],
            self.values.clone(),
        )
        .expect("grid sizes agree")
    }

    /// Converts sample `i` of an NCHW tensor, clamping rounding overshoot.
    pub fn from_tensor(tag: GridTag, t: &Tensor<f32>, i: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if i >= n || c != tag.channels() {
            return Err(Error::shape(format!(
                "cannot read sample {i} of {:?} as {tag:?}",
                t.shape()
            )));
        }
        let per = c * h * w;
        let values = t.data()[i * per..(i + 1) * per]
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Self::new(tag, h, w, values)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::arg(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width * self.channels());
        for c in 0..self.channels() {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                values.extend_from_slice(&self.values[row + left..row + left + width]);
            }
        }
        Self::new(self.tag, height, width, values)
    }

    /// Hard mask of a single-channel grid: `value > 0`.
    pub fn binarize(&self) -> Result<Vec<bool>> {
        if self.channels() != 1 {
            return Err(Error::arg("binarize needs a single-channel grid"));
        }
        Ok(self.values.iter().map(|&v| v > 0.0).collect())
    }

    /// Single-channel luminance (Rec. 601 weights) of a 3-channel grid.
    pub fn luminance(&self, tag: GridTag) -> Result<Self> {
        if tag.channels() != 1 {
            return Err(Error::arg("luminance target must be single-channel"));
        }
        match self.channels() {
            1 => self.clone().retag(tag),
            _ => {
                let n = self.height * self.width;
                let v = &self.values;
                let values = (0..n)
                    .map(|i| (0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i]).clamp(-1.0, 1.0))
                    .collect();
                Self::new(tag, self.height, self.width, values)
            }
        }
    }
}

fn to_unit(p: u8) -> f32 {
    2.0 * (p as f32 / 255.0) - 1.0
}

fn to_byte(v: f32) -> u8 {
    (255.0 * (v.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

fn from_dynamic(img: DynamicImage, tag: GridTag, invert: bool) -> Result<ImageGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::format(0, "image has a zero dimension"));
    }
    match tag.channels() {
        1 => {
            let sign = if invert { -1.0 } else { 1.0 };
            let values = img.to_luma8().pixels().map(|p| sign * to_unit(p.0[0])).collect();
            ImageGrid::new(tag, h, w, values)
        }
        _ => {
            if invert {
                return Err(Error::arg("invert applies to single-channel grids only"));
            }
            let rgb = img.to_rgb8();
            let mut values = vec![0.0; 3 * w * h];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    values[c * w * h + i] = to_unit(p.0[c]);
                }
            }
            ImageGrid::new(tag, h, w, values)
        }
    }
}

/// Loads an 8-bit PNG or JPEG, mapping byte `p` to `2·p/255 − 1`.
/// Structure and text grids are collapsed to luminance; `invert` negates
/// them (for dark-ink-on-light artwork).
pub fn load_image(path: impl AsRef<Path>, tag: GridTag, invert: bool) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_image(&bytes, tag, invert).map_err(|e| match e {
        Error::Image { message, .. } => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn decode_image(bytes: &[u8], tag: GridTag, invert: bool) -> Result<ImageGrid> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    from_dynamic(img, tag, invert)
}

/// Encodes a grid as an 8-bit PNG, writing `round(255·(v+1)/2)`.
pub fn encode_png(grid: &ImageGrid) -> Result<Vec<u8>> {
    let (w, h) = (grid.width as u32, grid.height as u32);
    let n = grid.height * grid.width;
    let img = match grid.channels() {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, grid.values.iter().map(|&v| to_byte(v)).collect())
                .expect("buffer sized"),
        ),
        _ => {
            let mut buf = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    buf.push(to_byte(grid.values[c * n + i]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, buf).expect("buffer sized"))
        }
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn save_png(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(grid)?)?;
    Ok(())
}

/// Crops the same uniformly drawn `size × size` window out of both grids.
pub fn random_crop_pair<R: Rng + ?Sized>(
    a: &ImageGrid,
    b: &ImageGrid,
    size: usize,
    rng: &mut R,
) -> Result<(ImageGrid, ImageGrid)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "crop pair dims differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if size == 0 || size > a.height.min(a.width) {
        return Err(Error::arg(format!(
            "crop size {size} does not fit a {}x{} image",
            a.height, a.width
        )));
    }
    let top = rng.gen_range(0..=a.height - size);
    let left = rng.gen_range(0..=a.width - size);
    Ok((a.crop(top, left, size, size)?, b.crop(top, left, size, size)?))
}

/// Adds zero-mean Gaussian noise and clamps back into `[-1, 1]`.
pub fn inject_noise<R: Rng + ?Sized>(x: &ImageGrid, std: f64, rng: &mut R) -> Result<ImageGrid> {
    let mut t = x.to_tensor();
    inject_noise_tensor(&mut t, std, rng)?;
    ImageGrid::new(x.tag, x.height, x.width, t.into_data())
}

pub fn inject_noise_tensor<R: Rng + ?Sized>(x: &mut Tensor<f32>, std: f64, rng: &mut R) -> Result<()> {
    if !(std >= 0.0) {
        return Err(Error::arg(format!("noise std {std} must be nonnegative")));
    }
    if std == 0.0 {
        return Ok(());
    }
    let dist = Normal::new(0.0f32, std as f32).expect("valid std");
    for v in x.data_mut() {
        *v = (*v + dist.sample(rng)).clamp(-1.0, 1.0);
    }
    Ok(())
}

/// The single training exemplar: a style image and the structure map
/// masking its subject.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleAsset {
    pub name: String,
    pub style: ImageGrid,
    pub structure: ImageGrid,
    /// Weight of the legibility term when training the glyph network.
    pub legibility_weight: f64,
}

impl StyleAsset {
    pub fn new(
        name: impl Into<String>,
        style: ImageGrid,
        structure: ImageGrid,
        legibility_weight: f64,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(['/', '\\', '\n', '=']) || name.starts_with('.') {
            return Err(Error::arg(format!("`{name}` is not a usable style name")));
        }
        if style.channels() != 3 || structure.channels() != 1 {
            return Err(Error::arg("style must be 3-channel and structure single-channel"));
        }
        if (style.height, style.width) != (structure.height, structure.width) {
            return Err(Error::shape(format!(
                "style {}x{} and structure {}x{} are not aligned",
                style.height, style.width, structure.height, structure.width
            )));
        }
        if !(legibility_weight >= 0.0) {
            return Err(Error::arg("legibility weight must be nonnegative"));
        }
        Ok(StyleAsset {
            name,
            style: style.retag(GridTag::Style)?,
            structure: structure.retag(GridTag::Structure)?,
            legibility_weight,
        })
    }

    pub fn load(
        name: impl Into<String>,
        style_path: impl AsRef<Path>,
        structure_path: impl AsRef<Path>,
        invert_structure: bool,
        legibility_weight: f64,
    ) -> Result<Self> {
        let style = load_image(style_path, GridTag::Style, false)?;
        let structure = load_image(structure_path, GridTag::Structure, invert_structure)?;
        Self::new(name, style, structure, legibility_weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_endpoints() {
        assert_eq!(to_unit(255), 1.0);
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-1.0), 0);
    }

    #[test]
    fn inverted_ink_round_trip() {
        // Black ink (0) on white (255): a 4×4 raster with a 2×2 ink square.
        let mut img = GrayImage::from_pixel(4, 4, image::Luma([255]));
        for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            img.put_pixel(x, y, image::Luma([0]));
        }
        let mut bytes = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(img).write_to(&mut bytes, ImageFormat::Png).unwrap();
        let g = decode_image(bytes.get_ref(), GridTag::Text, true).unwrap();
        let expected = ImageGrid::from_fn(GridTag::Text, 4, 4, |_, y, x| {
            if (1..=2).contains(&y) && (1..=2).contains(&x) {
                1.0
            } else {
                -1.0
            }
        })
        .unwrap();
        assert_eq!(g, expected);
    }

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(ImageGrid::new(GridTag::Text, 1, 1, vec![1.5]).is_err());
        assert!(ImageGrid::new(GridTag::Style, 1, 1, vec![0.0]).is_err());
        assert!(ImageGrid::filled(GridTag::Text, 2, 2, 0.0).unwrap().retag(GridTag::Output).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals = (0..3 * 5 * 7).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let g = ImageGrid::new(GridTag::Style, 5, 7, vals).unwrap();
        let back = decode_image(&encode_png(&g).unwrap(), GridTag::Style, false).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 2.0 / 255.0);
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let a = ImageGrid::from_fn(GridTag::Structure, 6, 6, |_, y, x| ((y * 6 + x) as f32 / 36.0) - 0.5).unwrap();
        let b = ImageGrid::filled(GridTag::Style, 6, 6, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ca, cb) = random_crop_pair(&a, &b, 6, &mut rng).unwrap();
        assert_eq!((ca, cb), (a.clone(), b));
        assert!(random_crop_pair(&a, &a, 7, &mut rng).is_err());
    }

    #[test]
    fn crop_of_identical_pair_is_colocated() {
        let a = ImageGrid::from_fn(GridTag::Structure, 20, 17, |_, y, x| ((y * 17 + x) as f32 / 340.0) - 0.5).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let (x1, x2) = random_crop_pair(&a, &a, 8, &mut r1).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(random_crop_pair(&a, &a, 8, &mut r2).unwrap().0, x1);
    }

    #[test]
    fn noise_contract() {
        let g = ImageGrid::filled(GridTag::Text, 8, 8, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(inject_noise(&g, 0.0, &mut rng).unwrap(), g);
        assert!(inject_noise(&g, -0.1, &mut rng).is_err());
        let a = inject_noise(&g, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = inject_noise(&g, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, g);
    }

    #[test]
    fn noise_sample_std() {
        // 10⁶ pixels of 0 with std 0.2: clamping at ±1 is a 5σ event.
        let g = ImageGrid::filled(GridTag::Text, 1000, 1000, 0.0).unwrap();
        let n = inject_noise(&g, 0.2, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let vals = n.values();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var.sqrt() - 0.2).abs() < 0.002, "std {}", var.sqrt());
    }
}
