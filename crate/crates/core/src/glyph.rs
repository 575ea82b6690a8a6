//! Forward structure transfer: the legibility weight map, glyph losses,
//! the three-stage scale curriculum, and inference.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    discriminator_step, load_checkpoint, lsgan_discriminator_loss, lsgan_generator_loss, meta_get,
    save_checkpoint, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Metadata, Mode,
    Network, Trainee, LEARNING_RATE,
};
use crate::error::{check_scale, Error, Result};
use crate::graph::Tape;
use crate::imageio::{
    inject_noise_tensor, random_crop_pair, GridTag, ImageGrid, StyleAsset, DEFAULT_CROP,
    DEFAULT_NOISE_STD,
};
use crate::sketch::{check_finite, SketchModule};
use crate::tensor::Tensor;
use crate::text::TextDataset;

/// Saturation distance as a fraction of the shorter image side.
pub const DEFAULT_CAP_FRACTION: f64 = 0.15;
pub const DEFAULT_K: usize = 3;

/// Per-pixel legibility weights: zero on the text contour, growing with
/// Euclidean distance from it and saturating at one.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceWeightMap {
    pub height: usize,
    pub width: usize,
    pub cap: f64,
    pub weights: Vec<f32>,
}

impl DistanceWeightMap {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.weights.clone()).expect("sizes agree")
    }
}

/// Pixels with a 4-neighbour of the opposite binary class.
pub fn contour_mask(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = mask[y * w + x];
            let differs = |yy: usize, xx: usize| mask[yy * w + xx] != v;
            out[y * w + x] = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
        }
    }
    out
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
/// Infinite entries are skipped; if every entry is infinite the row stays
/// infinite.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                    if s <= z[v.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    *z.last_mut().unwrap() = s;
                    z.push(f64::INFINITY);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` seed.
pub fn squared_distance_transform(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Legibility map for a text grid. `cap` defaults to `0.15·min(H, W)`.
pub fn distance_weight_map(t: &ImageGrid, cap: Option<f64>) -> Result<DistanceWeightMap> {
    let (h, w) = (t.height(), t.width());
    let cap = cap.unwrap_or(DEFAULT_CAP_FRACTION * h.min(w) as f64);
    if !(cap > 0.0) {
        return Err(Error::arg(format!("distance cap {cap} must be positive")));
    }
    let mask = t.binarize()?;
    let contour = contour_mask(&mask, h, w);
    let weights = if contour.iter().any(|&c| c) {
        squared_distance_transform(&contour, h, w)
            .into_iter()
            .map(|d2| (d2.sqrt() / cap).min(1.0) as f32)
            .collect()
    } else {
        vec![1.0; h * w]
    };
    Ok(DistanceWeightMap {
        height: h,
        width: w,
        cap,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphWeights {
    pub rec: f64,
    pub adv: f64,
    pub gly: f64,
}

impl Default for GlyphWeights {
    fn default() -> Self {
        GlyphWeights {
            rec: 100.0,
            adv: 0.1,
            gly: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlyphLosses {
    pub rec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub gly: f64,
}

#[derive(Clone, Debug)]
pub struct GlyphTrainConfig {
    pub k: usize,
    pub weights: GlyphWeights,
    /// Steps for the fixed-scale, two-endpoint and grid stages.
    pub stage_steps: [usize; 3],
    pub lr: f64,
    pub noise_std: f64,
    pub crop_size: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub log_every: usize,
}

impl Default for GlyphTrainConfig {
    fn default() -> Self {
        let mut generator = GeneratorConfig::new(1, 1);
        generator.controllable = true;
        GlyphTrainConfig {
            k: DEFAULT_K,
            weights: GlyphWeights::default(),
            stage_steps: [10_000, 10_000, 10_000],
            lr: LEARNING_RATE,
            noise_std: DEFAULT_NOISE_STD,
            crop_size: DEFAULT_CROP,
            generator,
            discriminator: DiscriminatorConfig::new(1),
            log_every: 100,
        }
    }
}

impl GlyphTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::arg("K must be at least 1"));
        }
        let w = self.weights;
        if [w.rec, w.adv, w.gly].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::arg("loss weights must be nonnegative"));
        }
        if !self.generator.controllable || self.generator.in_channels != 1 || self.generator.out_channels != 1 {
            return Err(Error::arg("glyph network must be a controllable 1-in/1-out generator"));
        }
        if self.discriminator.in_channels != 1 {
            return Err(Error::arg("glyph discriminator scores single-channel structure crops"));
        }
        self.generator.validate()
    }
}

/// Scale values sampled uniformly in curriculum stage `stage` (1-based).
pub fn stage_scales(stage: usize, k: usize) -> Vec<f64> {
    match stage {
        1 => vec![1.0],
        2 => vec![0.0, 1.0],
        _ => (0..=k).map(|i| i as f64 / k as f64).collect(),
    }
}

/// Loss terms without parameter updates. `sketchy` is the (already
/// noise-injected) generator input, `structure` its target; the legibility
/// term uses `text` and `weights`.
#[allow(clippy::too_many_arguments)]
pub fn glyph_losses(
    g: &Generator<f32>,
    d: &Discriminator<f32>,
    structure: &Tensor<f32>,
    sketchy: &Tensor<f32>,
    text: &Tensor<f32>,
    scales: &[f64],
    weights: &Tensor<f32>,
) -> Result<GlyphLosses> {
    if weights.shape() != text.shape() {
        return Err(Error::shape(format!(
            "weight map {:?} does not match text {:?}",
            weights.shape(),
            text.shape()
        )));
    }
    if structure.shape() != sketchy.shape() {
        return Err(Error::shape("structure and sketchy crops differ in shape"));
    }
    let mut tape = Tape::new();
    let pg = g.params().bind(&mut tape, false);
    let pd = d.params().bind(&mut tape, false);
    let input = tape.constant(sketchy.clone());
    let fake = g.forward(&mut tape, input, Some(scales), &mut Mode::Eval, &pg)?;
    let rec = tape.mean_abs(fake, structure.clone(), None)?;
    let fs = d.forward(&mut tape, fake, &pd)?;
    let adv_g = lsgan_generator_loss(&mut tape, fs);
    let real = tape.constant(structure.clone());
    let rs = d.forward(&mut tape, real, &pd)?;
    let adv_d = lsgan_discriminator_loss(&mut tape, rs, fs)?;
    let tv = tape.constant(text.clone());
    let gt = g.forward(&mut tape, tv, Some(scales), &mut Mode::Eval, &pg)?;
    let gly = tape.mean_abs(gt, text.clone(), Some(weights.clone()))?;
    let v = |x| tape.value(x).item() as f64;
    Ok(GlyphLosses {
        rec: v(rec),
        adv_g: v(adv_g),
        adv_d: v(adv_d),
        gly: v(gly),
    })
}

/// Trained glyph network `G_S` for one style.
#[derive(Clone, Debug)]
pub struct GlyphNet {
    generator: Generator<f32>,
    style: String,
    k: usize,
    weights: GlyphWeights,
    noise_std: f64,
    trained_steps: Option<usize>,
}

/// Noise stream used by structure transfer; texture rendering uses 1.
pub(crate) const STRUCTURE_STREAM: u64 = 0;

pub(crate) fn seeded_noise(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl GlyphNet {
    pub fn new(style: impl Into<String>, generator: Generator<f32>, cfg: &GlyphTrainConfig) -> Self {
        GlyphNet {
            generator,
            style: style.into(),
            k: cfg.k,
            weights: cfg.weights,
            noise_std: cfg.noise_std,
            trained_steps: None,
        }
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn style(&self) -> &str {
        &self.style
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> GlyphWeights {
        self.weights
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn trained_steps(&self) -> Option<usize> {
        self.trained_steps
    }

    pub fn mark_trained(&mut self, steps: usize) {
        self.trained_steps = Some(steps);
    }

    /// `I_ℓ^X = G_S(I + noise, ℓ)` with noise drawn from `seed`.
    pub fn transfer_structure(&self, text: &ImageGrid, l: f64, seed: u64) -> Result<ImageGrid> {
        check_scale(l)?;
        if self.trained_steps.is_none() {
            return Err(Error::state(format!("glyph network for `{}` is untrained", self.style)));
        }
        if text.channels() != 1 {
            return Err(Error::arg("structure transfer expects a single-channel image"));
        }
        let mut x = text.to_tensor();
        inject_noise_tensor(&mut x, self.noise_std, &mut seeded_noise(seed, STRUCTURE_STREAM))?;
        let out = self.generator.infer(&x, Some(&[l]))?;
        ImageGrid::from_tensor(GridTag::Structure, &out, 0)
    }

    pub fn metadata(&self) -> Metadata {
        let mut meta = Metadata::new();
        meta.insert("net".into(), "glyph".into());
        meta.insert("style".into(), self.style.clone());
        meta.insert("K".into(), self.k.to_string());
        meta.insert("lambda_rec".into(), self.weights.rec.to_string());
        meta.insert("lambda_adv".into(), self.weights.adv.to_string());
        meta.insert("lambda_gly".into(), self.weights.gly.to_string());
        meta.insert("noise_std".into(), self.noise_std.to_string());
        if let Some(s) = self.trained_steps {
            meta.insert("steps".into(), s.to_string());
        }
        self.generator.config().write_meta("gen.", &mut meta);
        meta
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self.generator.params(), &self.metadata(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = load_checkpoint(path.as_ref())?;
        if meta.get("net").map(String::as_str) != Some("glyph") {
            return Err(Error::state(format!("{} is not a glyph checkpoint", path.as_ref().display())));
        }
        let config = GeneratorConfig::read_meta("gen.", &meta)?;
        Ok(GlyphNet {
            generator: Generator::from_params(config, store)?,
            style: meta_get(&meta, "style")?,
            k: meta_get(&meta, "K")?,
            weights: GlyphWeights {
                rec: meta_get(&meta, "lambda_rec")?,
                adv: meta_get(&meta, "lambda_adv")?,
                gly: meta_get(&meta, "lambda_gly")?,
            },
            noise_std: meta_get(&meta, "noise_std")?,
            trained_steps: meta.get("steps").and_then(|s| s.parse().ok()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStep {
    pub stage: usize,
    pub l: f64,
    pub losses: GlyphLosses,
}

/// Stateful glyph trainer. [`train_glyph`] drives all three stages; the
/// pieces are public so callers can inspect the network between stages.
pub struct GlyphTrainer<'a> {
    cfg: GlyphTrainConfig,
    sketch: &'a SketchModule,
    style: &'a StyleAsset,
    dataset: &'a TextDataset,
    g: Trainee<Generator<f32>>,
    d: Trainee<Discriminator<f32>>,
    sketches: HashMap<u64, ImageGrid>,
    steps_done: usize,
    pub history: Vec<GlyphStep>,
}

impl<'a> GlyphTrainer<'a> {
    pub fn new<R: RngCore>(
        sketch: &'a SketchModule,
        style: &'a StyleAsset,
        dataset: &'a TextDataset,
        cfg: GlyphTrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::arg("glyph training needs text samples"));
        }
        if sketch.trained_steps().is_none() {
            return Err(Error::state("glyph training needs a trained sketch module"));
        }
        let g = Trainee::new(Generator::new(cfg.generator.clone(), rng)?, cfg.lr);
        let d = Trainee::new(Discriminator::new(cfg.discriminator.clone(), rng)?, cfg.lr);
        Ok(GlyphTrainer {
            cfg,
            sketch,
            style,
            dataset,
            g,
            d,
            sketches: HashMap::new(),
            steps_done: 0,
            history: Vec::new(),
        })
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.g.net
    }

    /// Sketchy structure for `l`, computed once per scale value (the
    /// sketch module is deterministic in evaluation mode).
    fn sketchy(&mut self, l: f64) -> Result<&ImageGrid> {
        let key = l.to_bits();
        if !self.sketches.contains_key(&key) {
            let s = self.sketch.generate_sketchy_structure(&self.style.structure, l)?;
            self.sketches.insert(key, s);
        }
        Ok(&self.sketches[&key])
    }

    /// Runs `steps` updates of curriculum stage `stage` (1, 2 or 3).
    pub fn run_stage<R: Rng>(&mut self, stage: usize, steps: usize, rng: &mut R) -> Result<()> {
        let scales = stage_scales(stage, self.cfg.k);
        let label = format!("glyph stage {stage}");
        for step in 0..steps {
            let l = scales[rng.gen_range(0..scales.len())];
            let structure = self.style.structure.clone();
            let sketchy = self.sketchy(l)?.clone();
            let (x, xs) = random_crop_pair(&structure, &sketchy, self.cfg.crop_size, rng)?;
            let x = x.to_tensor();
            let mut input = xs.to_tensor();
            inject_noise_tensor(&mut input, self.cfg.noise_std, rng)?;

            let mut tape = Tape::new();
            let pg = self.g.net.params().bind(&mut tape, true);
            let iv = tape.constant(input);
            let fake = self.g.net.forward(&mut tape, iv, Some(&[l]), &mut Mode::Train(rng), &pg)?;
            let adv_d = discriminator_step(&mut self.d, x.clone(), tape.value(fake).clone())?;

            let pd = self.d.net.params().bind(&mut tape, false);
            let score = self.d.net.forward(&mut tape, fake, &pd)?;
            let adv_g = lsgan_generator_loss(&mut tape, score);
            let rec = tape.mean_abs(fake, x, None)?;
            let mut terms = vec![(adv_g, self.cfg.weights.adv), (rec, self.cfg.weights.rec)];
            let mut gly_value = 0.0;
            if self.cfg.weights.gly > 0.0 {
                let full = self.dataset.get(rng.gen_range(0..self.dataset.len()));
                let m = distance_weight_map(full, None)?;
                let m = ImageGrid::from_fn(GridTag::Structure, m.height, m.width, |_, y, x| {
                    m.weights[y * m.width + x]
                })?;
                let size = self.cfg.crop_size.min(full.height()).min(full.width());
                let (t, m) = random_crop_pair(full, &m, size, rng)?;
                let tv = tape.constant(t.to_tensor());
                let gt = self.g.net.forward(&mut tape, tv, Some(&[l]), &mut Mode::Train(rng), &pg)?;
                let gly = tape.mean_abs(gt, t.to_tensor(), Some(m.to_tensor()))?;
                gly_value = tape.value(gly).item() as f64;
                terms.push((gly, self.cfg.weights.gly));
            }
            let total = tape.weighted_sum(&terms)?;
            let losses = GlyphLosses {
                rec: tape.value(rec).item() as f64,
                adv_g: tape.value(adv_g).item() as f64,
                adv_d,
                gly: gly_value,
            };
            check_finite(
                &label,
                step,
                &[("rec", losses.rec), ("adv_g", losses.adv_g), ("adv_d", adv_d), ("gly", gly_value)],
            )?;
            tape.backward(total)?;
            self.g.apply(&tape, &pg)?;
            if self.cfg.log_every > 0 && step % self.cfg.log_every == 0 {
                log::info!(
                    "{label} step {step}: l {l:.3} rec {:.4} adv_g {:.4} adv_d {:.4} gly {:.4}",
                    losses.rec,
                    losses.adv_g,
                    losses.adv_d,
                    losses.gly
                );
            }
            self.history.push(GlyphStep { stage, l, losses });
            self.steps_done += 1;
        }
        Ok(())
    }

    /// Copies the trained max branches onto the min branches.
    pub fn copy_branches(&mut self) -> Result<()> {
        self.g.net.copy_branch_params()
    }

    pub fn finish(self) -> (GlyphNet, Discriminator<f32>, Vec<GlyphStep>) {
        let mut net = GlyphNet::new(self.style.name.clone(), self.g.net, &self.cfg);
        net.mark_trained(self.steps_done);
        (net, self.d.net, self.history)
    }
}

/// Full curriculum: stage 1 at `l = 1`, branch copy, stage 2 over
/// `{0, 1}`, stage 3 over `{i/K}`.
pub fn train_glyph<R: Rng>(
    sketch: &SketchModule,
    style: &StyleAsset,
    dataset: &TextDataset,
    cfg: &GlyphTrainConfig,
    rng: &mut R,
) -> Result<(GlyphNet, Vec<GlyphStep>)> {
    let mut trainer = GlyphTrainer::new(sketch, style, dataset, cfg.clone(), rng)?;
    trainer.run_stage(1, cfg.stage_steps[0], rng)?;
    trainer.copy_branches()?;
    trainer.run_stage(2, cfg.stage_steps[1], rng)?;
    trainer.run_stage(3, cfg.stage_steps[2], rng)?;
    let (net, _, history) = trainer.finish();
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(t: &ImageGrid, cap: f64) -> Vec<f32> {
        let (h, w) = (t.height(), t.width());
        let mask = t.binarize().unwrap();
        let contour = contour_mask(&mask, h, w);
        let pts: Vec<(i64, i64)> = (0..h * w)
            .filter(|&i| contour[i])
            .map(|i| ((i / w) as i64, (i % w) as i64))
            .collect();
        (0..h * w)
            .map(|i| {
                if pts.is_empty() {
                    return 1.0;
                }
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                let d2 = pts.iter().map(|&(py, px)| (py - y).pow(2) + (px - x).pow(2)).min().unwrap();
                ((d2 as f64).sqrt() / cap).min(1.0) as f32
            })
            .collect()
    }

    fn random_mask(h: usize, w: usize, density: f64, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w).map(|_| if rng.gen_bool(density) { 1.0 } else { -1.0 }).collect();
        ImageGrid::new(GridTag::Text, h, w, values).unwrap()
    }

    #[test]
    fn half_plane_example() {
        let t = ImageGrid::from_fn(GridTag::Text, 8, 8, |_, _, x| if x < 4 { 1.0 } else { -1.0 }).unwrap();
        let m = distance_weight_map(&t, Some(2.0)).unwrap();
        // Columns 3 and 4 are contour; column 0 is three columns from 3.
        assert_eq!(m.weights[3], 0.0);
        assert_eq!(m.weights[4], 0.0);
        assert_eq!(m.weights[0], 1.0);
        assert_eq!(m.weights[2], 0.5);
    }

    #[test]
    fn single_class_falls_back_to_ones() {
        let t = ImageGrid::filled(GridTag::Text, 8, 8, 1.0).unwrap();
        assert!(distance_weight_map(&t, None).unwrap().weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn matches_all_pairs_oracle() {
        for (i, (h, w)) in [(1, 1), (1, 7), (5, 3), (8, 8), (17, 32), (32, 32)].into_iter().enumerate() {
            for density in [0.02, 0.3, 0.7] {
                let t = random_mask(h, w, density, i as u64 * 31 + (density * 100.0) as u64);
                let m = distance_weight_map(&t, Some(3.5)).unwrap();
                assert_eq!(m.weights, brute_force(&t, 3.5), "{h}x{w} density {density}");
            }
        }
    }

    #[test]
    fn stage_grids() {
        assert_eq!(stage_scales(1, 3), vec![1.0]);
        assert_eq!(stage_scales(2, 3), vec![0.0, 1.0]);
        assert_eq!(stage_scales(3, 3), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn seeded_noise_streams_differ() {
        let a: u64 = seeded_noise(5, 0).gen();
        let b: u64 = seeded_noise(5, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, seeded_noise(5, 0).gen::<u64>());
    }
}
