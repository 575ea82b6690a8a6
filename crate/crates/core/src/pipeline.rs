//! End-to-end orchestration: per-style training, bundles on disk, the
//! style library, stylization, mash-ups and animation.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::backbone::load_checkpoint;
use crate::error::{check_scale, Error, Result};
use crate::glyph::{train_glyph, GlyphNet, GlyphTrainConfig};
use crate::imageio::{save_png, ImageGrid, StyleAsset};
use crate::sketch::{train_sketch, SketchModule, SketchTrainConfig};
use crate::text::TextDataset;
use crate::texture::{train_texture, FeatureExtractor, TextureNet, TextureTrainConfig};

pub const GLYPH_FILE: &str = "glyph.smg1";
pub const TEXTURE_FILE: &str = "texture.smg1";
pub const MANIFEST_FILE: &str = "manifest";
const LOCK_FILE: &str = ".lock";

/// Where the style-loss feature pyramid comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Random { seed: u64, width_divisor: usize },
    /// SMG1 file holding `conv{b}_{i}.weight` / `.bias` tensors.
    Pretrained(PathBuf),
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Random {
            seed: 0,
            width_divisor: 1,
        }
    }
}

impl FeatureSource {
    pub fn build(&self) -> Result<FeatureExtractor<f32>> {
        match self {
            FeatureSource::Random { seed, width_divisor } => FeatureExtractor::random(*seed, *width_divisor),
            FeatureSource::Pretrained(path) => FeatureExtractor::from_params(&load_checkpoint(path)?.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Shared sketch checkpoint; trained and written here when absent.
    pub sketch_checkpoint: PathBuf,
    /// Bundles are written to `styles_dir/<name>/`.
    pub styles_dir: PathBuf,
    pub sketch: SketchTrainConfig,
    pub glyph: GlyphTrainConfig,
    pub texture: TextureTrainConfig,
    pub features: FeatureSource,
}

impl TrainConfig {
    pub fn new(sketch_checkpoint: impl Into<PathBuf>, styles_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            sketch_checkpoint: sketch_checkpoint.into(),
            styles_dir: styles_dir.into(),
            sketch: SketchTrainConfig::default(),
            glyph: GlyphTrainConfig::default(),
            texture: TextureTrainConfig::default(),
            features: FeatureSource::default(),
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub type Manifest = BTreeMap<String, String>;

pub fn encode_manifest(m: &Manifest) -> String {
    m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut m = Manifest::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::state(format!("manifest line {} lacks `=`", i + 1)))?;
        m.insert(k.to_string(), v.to_string());
    }
    Ok(m)
}

/// Exclusive training lock on a bundle directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::state(format!(
                "{} is locked by another training run",
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Loads the shared sketch checkpoint, training and saving it first when
/// absent. The flag reports whether an existing checkpoint was reused.
pub fn ensure_sketch<R: Rng>(
    path: &Path,
    dataset: &TextDataset,
    cfg: &SketchTrainConfig,
    rng: &mut R,
) -> Result<(SketchModule, bool)> {
    if path.exists() {
        log::info!("reusing sketch checkpoint {}", path.display());
        return Ok((SketchModule::load(path)?, true));
    }
    let trained = train_sketch(dataset, cfg, rng)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    trained.module.save(path)?;
    Ok((trained.module, false))
}

/// The deployable unit: one style's glyph and texture networks plus the
/// manifest describing how they were trained.
#[derive(Clone, Debug)]
pub struct StyleModelBundle {
    pub name: String,
    pub glyph: GlyphNet,
    pub texture: TextureNet,
    pub manifest: Manifest,
}

impl StyleModelBundle {
    pub fn new(glyph: GlyphNet, texture: TextureNet, manifest: Manifest) -> Result<Self> {
        if glyph.style() != texture.style() {
            return Err(Error::state(format!(
                "glyph style `{}` differs from texture style `{}`",
                glyph.style(),
                texture.style()
            )));
        }
        Ok(StyleModelBundle {
            name: glyph.style().to_string(),
            glyph,
            texture,
            manifest,
        })
    }

    pub fn composition(&self) -> Composition<'_> {
        Composition {
            glyph: &self.glyph,
            texture: &self.texture,
        }
    }

    /// Writes `glyph.smg1`, `texture.smg1` and `manifest` under `dir`,
    /// recording checkpoint hashes in the manifest.
    pub fn save(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.glyph.save(dir.join(GLYPH_FILE))?;
        self.texture.save(dir.join(TEXTURE_FILE))?;
        self.manifest.insert("name".into(), self.name.clone());
        self.manifest.insert("glyph_sha256".into(), sha256_file(dir.join(GLYPH_FILE))?);
        self.manifest.insert("texture_sha256".into(), sha256_file(dir.join(TEXTURE_FILE))?);
        write_atomic(&dir.join(MANIFEST_FILE), encode_manifest(&self.manifest).as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        for (file, key) in [(GLYPH_FILE, "glyph_sha256"), (TEXTURE_FILE, "texture_sha256")] {
            let actual = sha256_file(dir.join(file))?;
            if manifest.get(key) != Some(&actual) {
                return Err(Error::state(format!("{} does not match its manifest hash", dir.join(file).display())));
            }
        }
        let bundle = Self::new(
            GlyphNet::load(dir.join(GLYPH_FILE))?,
            TextureNet::load(dir.join(TEXTURE_FILE))?,
            manifest,
        )?;
        if bundle.manifest.get("name") != Some(&bundle.name) {
            return Err(Error::state(format!("manifest name disagrees with checkpoints in {}", dir.display())));
        }
        Ok(bundle)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::state(format!("cannot read {}: {e}", path.display())))?;
    parse_manifest(&text)
}

pub struct TrainReport {
    pub bundle: StyleModelBundle,
    pub bundle_dir: PathBuf,
    pub sketch_reused: bool,
    pub glyph_history: Vec<crate::glyph::GlyphStep>,
    pub texture_history: Vec<crate::texture::TextureLosses>,
}

/// Sketch (if needed), glyph and texture training for one style, then
/// writes the bundle directory.
pub fn train_style<R: Rng>(
    style: &StyleAsset,
    dataset: &TextDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let bundle_dir = cfg.styles_dir.join(&style.name);
    let _lock = DirLock::acquire(&bundle_dir)?;
    let (sketch, sketch_reused) = stage("sketch", ensure_sketch(&cfg.sketch_checkpoint, dataset, &cfg.sketch, rng))?;

    let mut glyph_cfg = cfg.glyph.clone();
    glyph_cfg.weights.gly = style.legibility_weight;
    let (glyph, glyph_history) = stage("glyph", train_glyph(&sketch, style, dataset, &glyph_cfg, rng))?;

    let phi = stage("texture", cfg.features.build())?;
    let texture = stage(
        "texture",
        train_texture(style, &glyph, dataset, &phi, &cfg.texture, rng),
    )?;

    let mut manifest = Manifest::new();
    let put = |m: &mut Manifest, k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put(&mut manifest, "version", env!("CARGO_PKG_VERSION").to_string());
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
    put(&mut manifest, "trained_at", now.to_string());
    put(&mut manifest, "gly_weight", glyph_cfg.weights.gly.to_string());
    put(&mut manifest, "glyph_lambda_rec", glyph_cfg.weights.rec.to_string());
    put(&mut manifest, "glyph_lambda_adv", glyph_cfg.weights.adv.to_string());
    put(&mut manifest, "texture_lambda_rec", cfg.texture.weights.rec.to_string());
    put(&mut manifest, "texture_lambda_adv", cfg.texture.weights.adv.to_string());
    put(&mut manifest, "texture_lambda_style", cfg.texture.weights.style.to_string());
    put(&mut manifest, "K", glyph_cfg.k.to_string());
    put(&mut manifest, "glyph_crop", glyph_cfg.crop_size.to_string());
    put(&mut manifest, "texture_crop", cfg.texture.crop_size.to_string());
    put(&mut manifest, "glyph_steps", format!("{:?}", glyph_cfg.stage_steps));
    put(&mut manifest, "texture_steps", cfg.texture.steps.to_string());
    put(&mut manifest, "sketch_checkpoint", cfg.sketch_checkpoint.display().to_string());
    put(&mut manifest, "sketch_sha256", sha256_file(&cfg.sketch_checkpoint)?);

    let mut bundle = StyleModelBundle::new(glyph, texture.net, manifest)?;
    bundle.save(&bundle_dir)?;
    Ok(TrainReport {
        bundle,
        bundle_dir,
        sketch_reused,
        glyph_history,
        texture_history: texture.history,
    })
}

/// A glyph network followed by a texture network, possibly from
/// different styles.
#[derive(Clone, Copy, Debug)]
pub struct Composition<'a> {
    pub glyph: &'a GlyphNet,
    pub texture: &'a TextureNet,
}

impl Composition<'_> {
    /// `G_T(G_S(I, ℓ))`: one structure pass, one texture pass.
    pub fn render(&self, text: &ImageGrid, l: f64, seed: u64) -> Result<ImageGrid> {
        check_scale(l)?;
        let structure = self.glyph.transfer_structure(text, l, seed)?;
        if (structure.height(), structure.width()) != (text.height(), text.width()) {
            return Err(Error::shape("structure transfer changed the image size"));
        }
        self.texture.render_texture(&structure, seed)
    }

    pub fn render_timed(&self, text: &ImageGrid, l: f64, seed: u64) -> Result<(ImageGrid, Duration)> {
        let start = Instant::now();
        let out = self.render(text, l, seed)?;
        let elapsed = start.elapsed();
        log::debug!("rendered {}x{} in {elapsed:?}", text.height(), text.width());
        Ok((out, elapsed))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StyleRef {
    Single(String),
    Mashup { glyph: String, texture: String },
}

#[derive(Clone, Debug)]
pub struct RenderRequest {
    pub text: ImageGrid,
    pub l: f64,
    pub seed: u64,
    pub style: StyleRef,
}

pub fn stylize(bundle: &StyleModelBundle, text: &ImageGrid, l: f64, seed: u64) -> Result<ImageGrid> {
    bundle.composition().render(text, l, seed)
}

/// Structure from `glyph_bundle`, texture from `texture_bundle`.
pub fn mashup(
    glyph_bundle: &StyleModelBundle,
    texture_bundle: &StyleModelBundle,
    text: &ImageGrid,
    l: f64,
    seed: u64,
) -> Result<ImageGrid> {
    Composition {
        glyph: &glyph_bundle.glyph,
        texture: &texture_bundle.texture,
    }
    .render(text, l, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub l: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedMode {
    /// Every frame uses the base seed.
    Fixed,
    /// Frame `i` uses `seed + i`.
    Walk,
}

impl std::str::FromStr for SeedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SeedMode::Fixed),
            "walk" => Ok(SeedMode::Walk),
            _ => Err(Error::arg(format!("seed mode `{s}` is not fixed or walk"))),
        }
    }
}

/// `frames` evenly spaced scale values from `l_start` to `l_end`.
pub fn ramp_schedule(l_start: f64, l_end: f64, frames: usize, seed: u64, mode: SeedMode) -> Result<Vec<Frame>> {
    check_scale(l_start)?;
    check_scale(l_end)?;
    if frames == 0 {
        return Err(Error::arg("an animation needs at least one frame"));
    }
    Ok((0..frames)
        .map(|i| {
            let t = if frames == 1 { 0.0 } else { i as f64 / (frames - 1) as f64 };
            Frame {
                l: if frames > 1 && i == frames - 1 { l_end } else { l_start + t * (l_end - l_start) },
                seed: match mode {
                    SeedMode::Fixed => seed,
                    SeedMode::Walk => seed.wrapping_add(i as u64),
                },
            }
        })
        .collect())
}

pub const INDEX_FILE: &str = "index.csv";

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

/// Renders one frame per schedule entry.
pub fn animate_frames(comp: Composition<'_>, text: &ImageGrid, schedule: &[Frame]) -> Result<Vec<ImageGrid>> {
    if schedule.is_empty() {
        return Err(Error::arg("an animation needs at least one frame"));
    }
    schedule.iter().map(|f| comp.render(text, f.l, f.seed)).collect()
}

/// Renders and writes `frame_NNNN.png` files plus `index.csv`
/// (`frame,l,seed,file`) into `out_dir`.
pub fn animate(comp: Composition<'_>, text: &ImageGrid, schedule: &[Frame], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let frames = animate_frames(comp, text, schedule)?;
    fs::create_dir_all(out_dir)?;
    let mut index = String::from("frame,l,seed,file\n");
    let mut paths = Vec::with_capacity(frames.len());
    for (i, (grid, f)) in frames.iter().zip(schedule).enumerate() {
        let name = frame_file_name(i);
        let path = out_dir.join(&name);
        save_png(grid, &path)?;
        index.push_str(&format!("{i},{},{},{name}\n", f.l, f.seed));
        paths.push(path);
    }
    let mut file = File::create(out_dir.join(INDEX_FILE))?;
    file.write_all(index.as_bytes())?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogEntry {
    pub name: String,
    pub trained_at: Option<u64>,
    pub gly_weight: Option<f64>,
    pub glyph_sha256: Option<String>,
    pub texture_sha256: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    pub styles: Vec<CatalogEntry>,
    /// One message per skipped directory.
    pub warnings: Vec<String>,
}

enum Slot {
    Loading,
    Ready(Arc<StyleModelBundle>),
}

/// Bundles under a styles directory, loaded lazily and cached read-only.
pub struct StyleLibrary {
    root: PathBuf,
    slots: Mutex<HashMap<String, Slot>>,
}

impl StyleLibrary {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StyleLibrary {
            root: root.into(),
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Scans the directory. Subdirectories without a readable manifest
    /// are reported as warnings rather than failing the scan.
    pub fn catalog(&self) -> Result<Catalog> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut cat = Catalog::default();
        for dir in dirs {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with('.') {
                continue;
            }
            match read_manifest(&dir) {
                Ok(m) if m.get("name") == Some(&name) => cat.styles.push(CatalogEntry {
                    name,
                    trained_at: m.get("trained_at").and_then(|v| v.parse().ok()),
                    gly_weight: m.get("gly_weight").and_then(|v| v.parse().ok()),
                    glyph_sha256: m.get("glyph_sha256").cloned(),
                    texture_sha256: m.get("texture_sha256").cloned(),
                }),
                Ok(_) => cat.warnings.push(format!("{name}: manifest name does not match directory")),
                Err(e) => cat.warnings.push(format!("{name}: {e}")),
            }
        }
        Ok(cat)
    }

    /// Returns the cached bundle, loading it on first use. While another
    /// caller is loading the same style this returns [`Error::Loading`].
    pub fn get(&self, name: &str) -> Result<Arc<StyleModelBundle>> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::UnknownStyle(name.to_string()));
        }
        {
            let mut slots = self.slots.lock().expect("library lock");
            match slots.get(name) {
                Some(Slot::Ready(b)) => return Ok(b.clone()),
                Some(Slot::Loading) => return Err(Error::Loading(name.to_string())),
                None => {
                    slots.insert(name.to_string(), Slot::Loading);
                }
            }
        }
        let dir = self.root.join(name);
        let loaded = if dir.join(MANIFEST_FILE).exists() {
            StyleModelBundle::load(&dir)
        } else {
            Err(Error::UnknownStyle(name.to_string()))
        };
        let mut slots = self.slots.lock().expect("library lock");
        match loaded {
            Ok(b) => {
                let b = Arc::new(b);
                slots.insert(name.to_string(), Slot::Ready(b.clone()));
                Ok(b)
            }
            Err(e) => {
                slots.remove(name);
                Err(e)
            }
        }
    }

    pub fn render(&self, req: &RenderRequest) -> Result<ImageGrid> {
        check_scale(req.l)?;
        match &req.style {
            StyleRef::Single(name) => stylize(&*self.get(name)?, &req.text, req.l, req.seed),
            StyleRef::Mashup { glyph, texture } => {
                let (g, t) = (self.get(glyph)?, self.get(texture)?);
                mashup(&g, &t, &req.text, req.l, req.seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new();
        m.insert("name".into(), "maple".into());
        m.insert("K".into(), "3".into());
        assert_eq!(encode_manifest(&m), "K=3\nname=maple\n");
        assert_eq!(parse_manifest(&encode_manifest(&m)).unwrap(), m);
        assert!(parse_manifest("no equals sign").is_err());
    }

    #[test]
    fn ramp_endpoints_and_seeds() {
        let s = ramp_schedule(0.0, 1.0, 50, 7, SeedMode::Walk).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s[0], Frame { l: 0.0, seed: 7 });
        assert_eq!(s[49], Frame { l: 1.0, seed: 56 });
        assert!(s.windows(2).all(|w| w[0].l <= w[1].l));
        let f = ramp_schedule(0.3, 0.3, 4, 1, SeedMode::Fixed).unwrap();
        assert!(f.iter().all(|x| *x == Frame { l: 0.3, seed: 1 }));
        assert!(ramp_schedule(0.0, 1.2, 3, 0, SeedMode::Fixed).is_err());
        assert!(ramp_schedule(0.0, 1.0, 0, 0, SeedMode::Fixed).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::State(_))));
        drop(first);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn library_unknown_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let lib = StyleLibrary::new(dir.path());
        assert_eq!(lib.catalog().unwrap(), Catalog::default());
        assert!(matches!(lib.get("nope"), Err(Error::UnknownStyle(_))));
        assert!(matches!(lib.get("../etc"), Err(Error::UnknownStyle(_))));
        fs::create_dir(dir.path().join("broken")).unwrap();
        let cat = lib.catalog().unwrap();
        assert!(cat.styles.is_empty());
        assert_eq!(cat.warnings.len(), 1);
    }
}
