//! Backward structure transfer: a fixed Gaussian smoothness block whose
//! width grows with the scale parameter, followed by a learned
//! transformation network that turns blurred shapes back into crisp,
//! text-like contours.

use std::path::Path;

use rand::{Rng, RngCore};

use crate::backbone::{
    discriminator_step, load_checkpoint, lsgan_generator_loss, save_checkpoint, scale_channel,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Metadata, Mode, Network,
    Trainee, LEARNING_RATE,
};
use crate::error::{check_scale, Error, Result};
use crate::graph::{reflect_index, Tape};
use crate::imageio::{GridTag, ImageGrid};
use crate::tensor::Tensor;
use crate::text::TextDataset;

pub const SIGMA_SLOPE: f64 = 16.0;
pub const SIGMA_INTERCEPT: f64 = 8.0;
/// Sharpness of the sigmoid in [`naive_sketch`].
pub const NAIVE_SHARPNESS: f64 = 10.0;

/// Gaussian standard deviation used at scale `l`: `16·l + 8`.
pub fn sigma(l: f64) -> f64 {
    SIGMA_SLOPE * l + SIGMA_INTERCEPT
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub radius: usize,
    /// `2·radius + 1` taps summing to one.
    pub taps: Vec<f64>,
}

/// Normalized 1-D Gaussian truncated at radius `ceil(2σ)`.
pub fn gaussian_kernel(l: f64) -> Result<GaussianKernel> {
    check_scale(l)?;
    let sigma = sigma(l);
    let radius = (2.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(GaussianKernel {
        sigma,
        radius,
        taps: raw.into_iter().map(|v| v / sum).collect(),
    })
}

/// Separable Gaussian blur of one plane with reflect padding: a
/// horizontal pass, then a vertical pass.
pub(crate) fn blur_plane(values: &[f32], h: usize, w: usize, k: &GaussianKernel) -> Vec<f32> {
    let r = k.radius as isize;
    let mut tmp = vec![0.0f64; h * w];
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|x| (-r..=r).map(|d| reflect_index(x as isize + d, w)).collect())
        .collect();
    for y in 0..h {
        let row = &values[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = cols[x]
                .iter()
                .zip(&k.taps)
                .map(|(&j, &t)| t * row[j] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|d| reflect_index(y as isize + d, h)).collect();
        for x in 0..w {
            let v: f64 = rows.iter().zip(&k.taps).map(|(&i, &t)| t * tmp[i * w + x]).sum();
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// The smoothness block applied to a single-channel grid.
pub fn smooth(x: &ImageGrid, l: f64) -> Result<ImageGrid> {
    if x.channels() != 1 {
        return Err(Error::arg("smoothing expects a single-channel grid"));
    }
    let k = gaussian_kernel(l)?;
    let values = blur_plane(x.values(), x.height(), x.width(), &k)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    ImageGrid::new(x.tag(), x.height(), x.width(), values)
}

/// Diagnostic sketch that replaces the learned transformation with a
/// fixed sigmoid: `2·sigmoid(10·smooth(x, l)) − 1`.
pub fn naive_sketch(x: &ImageGrid, l: f64) -> Result<ImageGrid> {
    let s = smooth(x, l)?;
    let values = s
        .values()
        .iter()
        .map(|&v| {
            let z = NAIVE_SHARPNESS * v as f64;
            (2.0 / (1.0 + (-z).exp()) - 1.0) as f32
        })
        .collect();
    ImageGrid::new(GridTag::Structure, x.height(), x.width(), values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SketchWeights {
    pub rec: f64,
    pub adv: f64,
}

impl Default for SketchWeights {
    fn default() -> Self {
        SketchWeights { rec: 100.0, adv: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SketchLosses {
    pub rec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

#[derive(Clone, Debug)]
pub struct SketchTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: SketchWeights,
    /// Transformation network; must take 2 channels (smoothed image and
    /// scale channel) and emit 1.
    pub generator: GeneratorConfig,
    /// Scores (candidate, scale channel, smoothed image) triples.
    pub discriminator: DiscriminatorConfig,
    pub log_every: usize,
}

impl Default for SketchTrainConfig {
    fn default() -> Self {
        SketchTrainConfig {
            steps: 20_000,
            batch_size: 1,
            lr: LEARNING_RATE,
            weights: SketchWeights::default(),
            generator: GeneratorConfig::new(2, 1),
            discriminator: DiscriminatorConfig::new(3),
            log_every: 100,
        }
    }
}

/// The trained backward-transfer network.
#[derive(Clone, Debug)]
pub struct SketchModule {
    transform: Generator<f32>,
    trained_steps: Option<usize>,
}

fn sketch_input(smoothed: &Tensor<f32>, scales: &[f64]) -> Result<Tensor<f32>> {
    let (_, _, h, w) = smoothed.dims4()?;
    Tensor::concat_channels(&[smoothed, &scale_channel(scales, h, w)])
}

fn smooth_batch(batch: &Tensor<f32>, scales: &[f64]) -> Result<Tensor<f32>> {
    let (n, c, h, w) = batch.dims4()?;
    if c != 1 {
        return Err(Error::arg("smoothing expects single-channel inputs"));
    }
    if scales.len() != n {
        return Err(Error::shape(format!("{} scales for a batch of {n}", scales.len())));
    }
    let mut data = Vec::with_capacity(batch.numel());
    for (i, &l) in scales.iter().enumerate() {
        let k = gaussian_kernel(l)?;
        data.extend(blur_plane(&batch.data()[i * h * w..(i + 1) * h * w], h, w, &k));
    }
    Tensor::new(vec![n, 1, h, w], data)
}

impl SketchModule {
    pub fn new(config: GeneratorConfig, rng: &mut impl RngCore) -> Result<Self> {
        if config.in_channels != 2 || config.out_channels != 1 || config.controllable {
            return Err(Error::arg(
                "sketch transform must be a plain 2-in/1-out generator",
            ));
        }
        Ok(SketchModule {
            transform: Generator::new(config, rng)?,
            trained_steps: None,
        })
    }

    pub fn transform(&self) -> &Generator<f32> {
        &self.transform
    }

    pub fn trained_steps(&self) -> Option<usize> {
        self.trained_steps
    }

    fn require_trained(&self) -> Result<()> {
        match self.trained_steps {
            Some(_) => Ok(()),
            None => Err(Error::state("sketch module has not been trained")),
        }
    }

    /// Sketchy structure `X̃_ℓ = transform(smooth(X, ℓ), ℓ)`.
    pub fn generate_sketchy_structure(&self, x: &ImageGrid, l: f64) -> Result<ImageGrid> {
        self.require_trained()?;
        if x.channels() != 1 {
            return Err(Error::arg("structure map must be single-channel"));
        }
        let out = self.sketch_batch(&x.to_tensor(), &[l])?;
        ImageGrid::from_tensor(GridTag::Structure, &out, 0)
    }

    /// Batched form used by the glyph trainer.
    pub fn sketch_batch(&self, batch: &Tensor<f32>, scales: &[f64]) -> Result<Tensor<f32>> {
        scales.iter().try_for_each(|&l| check_scale(l))?;
        let smoothed = smooth_batch(batch, scales)?;
        self.transform.infer(&sketch_input(&smoothed, scales)?, None)
    }

    pub fn metadata(&self) -> Metadata {
        let mut meta = Metadata::new();
        meta.insert("net".into(), "sketch".into());
        meta.insert("sigma_slope".into(), SIGMA_SLOPE.to_string());
        meta.insert("sigma_intercept".into(), SIGMA_INTERCEPT.to_string());
        if let Some(steps) = self.trained_steps {
            meta.insert("steps".into(), steps.to_string());
        }
        self.transform.config().write_meta("gen.", &mut meta);
        meta
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self.transform.params(), &self.metadata(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::state(format!(
                "sketch checkpoint {} is missing",
                path.display()
            )));
        }
        let (store, meta) = load_checkpoint(path)?;
        if meta.get("net").map(String::as_str) != Some("sketch") {
            return Err(Error::state(format!("{} is not a sketch checkpoint", path.display())));
        }
        let config = GeneratorConfig::read_meta("gen.", &meta)?;
        let trained_steps = meta.get("steps").and_then(|s| s.parse().ok());
        Ok(SketchModule {
            transform: Generator::from_params(config, store)?,
            trained_steps,
        })
    }
}

/// Loss terms for a text batch at the given scales, evaluated without
/// updating anything.
pub fn sketch_losses(
    generator: &Generator<f32>,
    discriminator: &Discriminator<f32>,
    text: &Tensor<f32>,
    scales: &[f64],
) -> Result<SketchLosses> {
    let (n, _, h, w) = text.dims4()?;
    if scales.len() != n {
        return Err(Error::shape(format!("{} scales for a batch of {n}", scales.len())));
    }
    let smoothed = smooth_batch(text, scales)?;
    let lch = scale_channel(scales, h, w);
    let mut tape = Tape::new();
    let pg = generator.params().bind(&mut tape, false);
    let pd = discriminator.params().bind(&mut tape, false);
    let input = tape.constant(sketch_input(&smoothed, scales)?);
    let fake = generator.forward(&mut tape, input, None, &mut Mode::Eval, &pg)?;
    let rec = tape.mean_abs(fake, text.clone(), None)?;

    let lv = tape.constant(lch.clone());
    let sv = tape.constant(smoothed.clone());
    let fake_in = tape.concat(&[fake, lv, sv])?;
    let fake_score = discriminator.forward(&mut tape, fake_in, &pd)?;
    let adv_g = lsgan_generator_loss(&mut tape, fake_score);
    let real_in = tape.constant(Tensor::concat_channels(&[text, &lch, &smoothed])?);
    let real_score = discriminator.forward(&mut tape, real_in, &pd)?;
    let adv_d = crate::backbone::lsgan_discriminator_loss(&mut tape, real_score, fake_score)?;
    Ok(SketchLosses {
        rec: tape.value(rec).item() as f64,
        adv_g: tape.value(adv_g).item() as f64,
        adv_d: tape.value(adv_d).item() as f64,
    })
}

pub struct SketchTraining {
    pub module: SketchModule,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<SketchLosses>,
}

pub(crate) fn check_finite(stage: &str, step: usize, values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Error::Divergence {
                stage: stage.to_string(),
                step,
                detail: format!("{name} loss became {v}"),
            });
        }
    }
    Ok(())
}

/// Trains the sketch module on text images alone; the result is style
/// independent and can be shared by every style.
pub fn train_sketch<R: Rng>(
    dataset: &TextDataset,
    cfg: &SketchTrainConfig,
    rng: &mut R,
) -> Result<SketchTraining> {
    if dataset.is_empty() {
        return Err(Error::arg("sketch training needs a nonempty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut g = Trainee::new(SketchModule::new(cfg.generator.clone(), rng)?.transform, cfg.lr);
    let mut d = Trainee::new(Discriminator::new(cfg.discriminator.clone(), rng)?, cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..dataset.len())).collect();
        let scales: Vec<f64> = picks.iter().map(|_| rng.gen_range(0.0..=1.0)).collect();
        let text = Tensor::stack(&picks.iter().map(|&i| dataset.get(i).to_tensor()).collect::<Vec<_>>())?;
        let (_, _, h, w) = text.dims4()?;
        let smoothed = smooth_batch(&text, &scales)?;
        let lch = scale_channel(&scales, h, w);

        let mut tape = Tape::new();
        let pg = g.net.params().bind(&mut tape, true);
        let input = tape.constant(sketch_input(&smoothed, &scales)?);
        let fake = g.net.forward(&mut tape, input, None, &mut Mode::Train(rng), &pg)?;

        let real_in = Tensor::concat_channels(&[&text, &lch, &smoothed])?;
        let fake_in = Tensor::concat_channels(&[tape.value(fake), &lch, &smoothed])?;
        let adv_d = discriminator_step(&mut d, real_in, fake_in)?;

        let pd = d.net.params().bind(&mut tape, false);
        let lv = tape.constant(lch);
        let sv = tape.constant(smoothed);
        let d_in = tape.concat(&[fake, lv, sv])?;
        let score = d.net.forward(&mut tape, d_in, &pd)?;
        let adv_g = lsgan_generator_loss(&mut tape, score);
        let rec = tape.mean_abs(fake, text, None)?;
        let total = tape.weighted_sum(&[(adv_g, cfg.weights.adv), (rec, cfg.weights.rec)])?;
        let losses = SketchLosses {
            rec: tape.value(rec).item() as f64,
            adv_g: tape.value(adv_g).item() as f64,
            adv_d,
        };
        check_finite("sketch", step, &[("rec", losses.rec), ("adv_g", losses.adv_g), ("adv_d", adv_d)])?;
        tape.backward(total)?;
        g.apply(&tape, &pg)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "sketch step {step}: rec {:.4} adv_g {:.4} adv_d {:.4}",
                losses.rec,
                losses.adv_g,
                losses.adv_d
            );
        }
        history.push(losses);
    }
    Ok(SketchTraining {
        module: SketchModule {
            transform: g.net,
            trained_steps: Some(cfg.steps),
        },
        discriminator: d.net,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_endpoints() {
        assert_eq!(gaussian_kernel(0.0).unwrap().sigma, 8.0);
        assert_eq!(gaussian_kernel(1.0).unwrap().sigma, 24.0);
        assert_eq!(gaussian_kernel(0.0).unwrap().radius, 16);
        assert_eq!(gaussian_kernel(1.0).unwrap().radius, 48);
        assert!(gaussian_kernel(1.01).is_err());
    }

    #[test]
    fn constant_grid_is_fixed_point() {
        let g = ImageGrid::filled(GridTag::Structure, 13, 9, 0.3).unwrap();
        assert_eq!(smooth(&g, 0.7).unwrap(), g);
    }

    #[test]
    fn smooth_rejects_color() {
        let g = ImageGrid::filled(GridTag::Style, 4, 4, 0.0).unwrap();
        assert!(smooth(&g, 0.5).is_err());
    }

    #[test]
    fn naive_sketch_values() {
        let zero = ImageGrid::filled(GridTag::Structure, 8, 8, 0.0).unwrap();
        assert!(naive_sketch(&zero, 0.5).unwrap().values().iter().all(|&v| v == 0.0));
        let one = ImageGrid::filled(GridTag::Structure, 8, 8, 1.0).unwrap();
        assert!(naive_sketch(&one, 0.5).unwrap().values().iter().all(|&v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn untrained_module_refuses_to_sketch() {
        let mut cfg = GeneratorConfig::new(2, 1);
        cfg.base_width = 4;
        cfg.n_resblocks = 1;
        let m = SketchModule::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = ImageGrid::filled(GridTag::Structure, 16, 16, -1.0).unwrap();
        assert!(matches!(m.generate_sketchy_structure(&x, 0.5), Err(Error::State(_))));
        assert!(matches!(SketchModule::load("/definitely/missing.smg1"), Err(Error::State(_))));
    }
}
