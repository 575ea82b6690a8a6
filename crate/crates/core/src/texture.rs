//! Texture transfer: the fixed feature pyramid and Gram-matrix style loss,
//! texture losses and training, and rendering `I_ℓ^X → I_ℓ^Y`.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{
    discriminator_step, load_checkpoint, lsgan_discriminator_loss, lsgan_generator_loss, meta_get,
    save_checkpoint, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Metadata, Mode,
    Network, ParamStore, Trainee, LEARNING_RATE,
};
use crate::error::{Error, Result};
use crate::glyph::{seeded_noise, stage_scales, GlyphNet, DEFAULT_K};
use crate::graph::{Tape, Var};
use crate::imageio::{
    inject_noise_tensor, random_crop_pair, GridTag, ImageGrid, StyleAsset, DEFAULT_CROP,
    DEFAULT_NOISE_STD,
};
use crate::sketch::check_finite;
use crate::tensor::{Scalar, Tensor};
use crate::text::TextDataset;

pub(crate) const TEXTURE_STREAM: u64 = 1;

/// Channel widths of the first four blocks of the 16-layer pyramid and
/// the number of 3×3 convolutions in each.
const VGG_BLOCKS: [(usize, usize); 4] = [(64, 2), (128, 2), (256, 3), (512, 3)];
pub const DEFAULT_TAPS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
pub enum FeatureLayer<T> {
    /// 3×3 convolution, zero padding 1, followed by a rectifier.
    Conv {
        name: String,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    MaxPool,
}

/// Fixed convolutional pyramid tapped at named rectifier outputs.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T = f32> {
    layers: Vec<FeatureLayer<T>>,
    /// 1×1 affine mapping `[-1, 1]` RGB to ImageNet-normalized input.
    normalize: Option<(Tensor<T>, Tensor<T>)>,
    taps: Vec<(String, f64)>,
}

fn relu_name(conv: &str) -> String {
    conv.replacen("conv", "relu", 1)
}

fn conv_names() -> Vec<(String, usize, usize)> {
    // (name, block index, output channels at full width)
    let mut out = Vec::new();
    for (b, &(c, n)) in VGG_BLOCKS.iter().enumerate() {
        for i in 0..n {
            out.push((format!("conv{}_{}", b + 1, i + 1), b, c));
        }
    }
    out
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Seeded He-initialized pyramid with every width divided by
    /// `width_divisor`. Only layers up to the deepest default tap are built.
    pub fn random(seed: u64, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::arg(format!("width divisor {width_divisor} must divide 64")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        let mut block = 0;
        for (name, b, c) in conv_names() {
            if b != block {
                layers.push(FeatureLayer::MaxPool);
                block = b;
            }
            let cout = c / width_divisor;
            let dist = Normal::new(0.0, (2.0 / (9.0 * cin as f64)).sqrt()).expect("valid std");
            let weight = Tensor::new(
                vec![cout, cin, 3, 3],
                (0..cout * cin * 9).map(|_| T::of(dist.sample(&mut rng))).collect(),
            )?;
            layers.push(FeatureLayer::Conv {
                name: name.clone(),
                weight,
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
            if name == "conv4_1" {
                break;
            }
        }
        Ok(FeatureExtractor {
            layers,
            normalize: None,
            taps: DEFAULT_TAPS.iter().map(|t| (t.to_string(), 1.0)).collect(),
        })
    }

    /// Pretrained weights named `conv{b}_{i}.weight` / `.bias`; inputs are
    /// mapped to ImageNet normalization first.
    pub fn from_params(store: &ParamStore<f32>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut block = 0;
        for (name, b, _) in conv_names() {
            if b != block {
                layers.push(FeatureLayer::MaxPool);
                block = b;
            }
            let get = |suffix: &str| {
                store
                    .get(&format!("{name}.{suffix}"))
                    .map(|t| t.cast::<T>())
                    .ok_or_else(|| Error::state(format!("feature weights lack {name}.{suffix}")))
            };
            layers.push(FeatureLayer::Conv {
                name: name.clone(),
                weight: get("weight")?,
                bias: get("bias")?,
            });
            if name == "conv4_1" {
                break;
            }
        }
        let mut w = vec![T::zero(); 9];
        let mut b = vec![T::zero(); 3];
        for c in 0..3 {
            w[c * 3 + c] = T::of(0.5 / IMAGENET_STD[c]);
            b[c] = T::of((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        Ok(FeatureExtractor {
            layers,
            normalize: Some((Tensor::new(vec![3, 3, 1, 1], w)?, Tensor::new(vec![3], b)?)),
            taps: DEFAULT_TAPS.iter().map(|t| (t.to_string(), 1.0)).collect(),
        })
    }

    /// Replaces the tap list; every name must be a rectifier output.
    pub fn with_taps(mut self, taps: &[(&str, f64)]) -> Result<Self> {
        for (t, w) in taps {
            let known = self.layers.iter().any(|l| matches!(l, FeatureLayer::Conv { name, .. } if relu_name(name) == *t));
            if !known || !(*w >= 0.0) {
                return Err(Error::arg(format!("unknown tap `{t}` or negative weight")));
            }
        }
        self.taps = taps.iter().map(|(t, w)| (t.to_string(), *w)).collect();
        Ok(self)
    }

    pub fn layers(&self) -> &[FeatureLayer<T>] {
        &self.layers
    }

    pub fn taps(&self) -> &[(String, f64)] {
        &self.taps
    }

    /// Activations at every tap, in tap order.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::arg("feature extractor expects 3-channel images"));
        }
        let mut h = x;
        if let Some((w, b)) = &self.normalize {
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = tape.conv2d(h, wv, Some(bv), 1, 0)?;
        }
        let mut found: Vec<Option<Var>> = vec![None; self.taps.len()];
        for layer in &self.layers {
            if found.iter().all(Option::is_some) {
                break;
            }
            match layer {
                FeatureLayer::MaxPool => h = tape.max_pool2(h)?,
                FeatureLayer::Conv { name, weight, bias } => {
                    let (wv, bv) = (tape.constant(weight.clone()), tape.constant(bias.clone()));
                    h = tape.conv2d(h, wv, Some(bv), 1, 1)?;
                    h = tape.relu(h);
                    let relu = relu_name(name);
                    for (slot, (tap, _)) in found.iter_mut().zip(&self.taps) {
                        if *tap == relu {
                            *slot = Some(h);
                        }
                    }
                }
            }
        }
        found
            .into_iter()
            .zip(&self.taps)
            .map(|(v, (t, _))| v.ok_or_else(|| Error::arg(format!("tap `{t}` not reached"))))
            .collect()
    }

    /// Gram matrices of `y` at every tap, each `[1, C, C]`.
    pub fn style_targets(&self, y: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.sample(0));
        let feats = self.features(&mut tape, yv)?;
        feats
            .into_iter()
            .map(|f| {
                let g = tape.gram(f)?;
                Ok(tape.value(g).clone())
            })
            .collect()
    }

    /// `Σ_l w_l · mean((Gram_l(gen) − target_l)²)` recorded on `tape`.
    pub fn style_loss_var(&self, tape: &mut Tape<T>, gen: Var, targets: &[Tensor<T>]) -> Result<Var> {
        if targets.len() != self.taps.len() {
            return Err(Error::shape("one style target per tap is required"));
        }
        let n = tape.value(gen).dims4()?.0;
        let feats = self.features(tape, gen)?;
        let mut terms = Vec::with_capacity(feats.len());
        for ((f, target), (_, w)) in feats.into_iter().zip(targets).zip(&self.taps) {
            let g = tape.gram(f)?;
            let repeated = Tensor::stack(&vec![target.clone(); n])?;
            terms.push((tape.mean_sq_diff(g, repeated)?, *w));
        }
        tape.weighted_sum(&terms)
    }
}

/// `F·Fᵀ / (C·H·W)` for a single `C×H×W` feature map.
pub fn gram_matrix<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match f.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected a C×H×W map, got {s:?}"))),
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, c, h, w], f.data().to_vec())?);
    let g = tape.gram(x)?;
    Tensor::new(vec![c, c], tape.value(g).data().to_vec())
}

/// Style distance between two 3-channel grids under `phi`.
pub fn style_loss(gen: &ImageGrid, y: &ImageGrid, phi: &FeatureExtractor<f32>) -> Result<f64> {
    if gen.channels() != 3 || y.channels() != 3 {
        return Err(Error::arg("style loss compares 3-channel images"));
    }
    let targets = phi.style_targets(&y.to_tensor())?;
    let mut tape = Tape::new();
    let g = tape.constant(gen.to_tensor());
    let l = phi.style_loss_var(&mut tape, g, &targets)?;
    Ok(tape.value(l).item() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureWeights {
    pub adv: f64,
    pub rec: f64,
    pub style: f64,
}

impl Default for TextureWeights {
    fn default() -> Self {
        TextureWeights {
            adv: 1.0,
            rec: 100.0,
            style: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TextureLosses {
    pub rec: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub style: f64,
}

#[derive(Clone, Debug)]
pub struct TextureTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub crop_size: usize,
    /// Scale grid `{i/K}` sampled for the style term.
    pub k: usize,
    pub weights: TextureWeights,
    pub generator: GeneratorConfig,
    /// Scores (structure crop, style crop) pairs.
    pub discriminator: DiscriminatorConfig,
    pub log_every: usize,
}

impl Default for TextureTrainConfig {
    fn default() -> Self {
        TextureTrainConfig {
            steps: 30_000,
            lr: LEARNING_RATE,
            noise_std: DEFAULT_NOISE_STD,
            crop_size: DEFAULT_CROP,
            k: DEFAULT_K,
            weights: TextureWeights::default(),
            generator: GeneratorConfig::new(1, 3),
            discriminator: DiscriminatorConfig::new(4),
            log_every: 100,
        }
    }
}

impl TextureTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.adv, w.rec, w.style].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::arg("loss weights must be nonnegative"));
        }
        if self.generator.controllable || self.generator.in_channels != 1 || self.generator.out_channels != 3 {
            return Err(Error::arg("texture network must be a plain 1-in/3-out generator"));
        }
        if self.discriminator.in_channels != 4 {
            return Err(Error::arg("texture discriminator scores 4-channel (x, y) pairs"));
        }
        if self.k < 1 {
            return Err(Error::arg("K must be at least 1"));
        }
        self.generator.validate()
    }
}

/// Loss terms without updates. `x`/`y` are co-located crops, `input` the
/// generator input (noisy `x`), and `structured` a structure-transferred
/// text batch fed to the style term.
#[allow(clippy::too_many_arguments)]
pub fn texture_losses(
    g: &Generator<f32>,
    d: &Discriminator<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    input: &Tensor<f32>,
    structured: &Tensor<f32>,
    targets: &[Tensor<f32>],
    phi: &FeatureExtractor<f32>,
) -> Result<TextureLosses> {
    let (n, _, h, w) = x.dims4()?;
    let (yn, _, yh, yw) = y.dims4()?;
    if (n, h, w) != (yn, yh, yw) || input.shape() != x.shape() {
        return Err(Error::shape("texture crops are not aligned"));
    }
    let mut tape = Tape::new();
    let pg = g.params().bind(&mut tape, false);
    let pd = d.params().bind(&mut tape, false);
    let iv = tape.constant(input.clone());
    let fake = g.forward(&mut tape, iv, None, &mut Mode::Eval, &pg)?;
    let rec = tape.mean_abs(fake, y.clone(), None)?;
    let xv = tape.constant(x.clone());
    let fake_pair = tape.concat(&[xv, fake])?;
    let fs = d.forward(&mut tape, fake_pair, &pd)?;
    let adv_g = lsgan_generator_loss(&mut tape, fs);
    let real_pair = tape.constant(Tensor::concat_channels(&[x, y])?);
    let rs = d.forward(&mut tape, real_pair, &pd)?;
    let adv_d = lsgan_discriminator_loss(&mut tape, rs, fs)?;
    let sv = tape.constant(structured.clone());
    let rendered = g.forward(&mut tape, sv, None, &mut Mode::Eval, &pg)?;
    let style = phi.style_loss_var(&mut tape, rendered, targets)?;
    let v = |t: &Tape<f32>, x: Var| t.value(x).item() as f64;
    Ok(TextureLosses {
        rec: v(&tape, rec),
        adv_g: v(&tape, adv_g),
        adv_d: v(&tape, adv_d),
        style: v(&tape, style),
    })
}

/// Trained texture network `G_T` for one style.
#[derive(Clone, Debug)]
pub struct TextureNet {
    generator: Generator<f32>,
    style: String,
    weights: TextureWeights,
    noise_std: f64,
    trained_steps: Option<usize>,
}

impl TextureNet {
    pub fn new(style: impl Into<String>, generator: Generator<f32>, cfg: &TextureTrainConfig) -> Self {
        TextureNet {
            generator,
            style: style.into(),
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

    pub fn weights(&self) -> TextureWeights {
        self.weights
    }

    pub fn trained_steps(&self) -> Option<usize> {
        self.trained_steps
    }

    pub fn mark_trained(&mut self, steps: usize) {
        self.trained_steps = Some(steps);
    }

    /// `I_ℓ^Y = G_T(I_ℓ^X + noise)` with noise drawn from `seed`.
    pub fn render_texture(&self, structure: &ImageGrid, seed: u64) -> Result<ImageGrid> {
        if self.trained_steps.is_none() {
            return Err(Error::state(format!("texture network for `{}` is untrained", self.style)));
        }
        if structure.channels() != 1 {
            return Err(Error::arg("texture rendering expects a single-channel structure"));
        }
        let mut x = structure.to_tensor();
        inject_noise_tensor(&mut x, self.noise_std, &mut seeded_noise(seed, TEXTURE_STREAM))?;
        let out = self.generator.infer(&x, None)?;
        ImageGrid::from_tensor(GridTag::Output, &out, 0)
    }

    pub fn metadata(&self) -> Metadata {
        let mut meta = Metadata::new();
        meta.insert("net".into(), "texture".into());
        meta.insert("style".into(), self.style.clone());
        meta.insert("lambda_adv".into(), self.weights.adv.to_string());
        meta.insert("lambda_rec".into(), self.weights.rec.to_string());
        meta.insert("lambda_style".into(), self.weights.style.to_string());
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
        if meta.get("net").map(String::as_str) != Some("texture") {
            return Err(Error::state(format!("{} is not a texture checkpoint", path.as_ref().display())));
        }
        let config = GeneratorConfig::read_meta("gen.", &meta)?;
        Ok(TextureNet {
            generator: Generator::from_params(config, store)?,
            style: meta_get(&meta, "style")?,
            weights: TextureWeights {
                adv: meta_get(&meta, "lambda_adv")?,
                rec: meta_get(&meta, "lambda_rec")?,
                style: meta_get(&meta, "lambda_style")?,
            },
            noise_std: meta_get(&meta, "noise_std")?,
            trained_steps: meta.get("steps").and_then(|s| s.parse().ok()),
        })
    }
}

pub struct TextureTraining {
    pub net: TextureNet,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<TextureLosses>,
}

/// Adversarial texture training on co-located `(X, Y)` crops, with the
/// style term evaluated on structure-transferred text.
pub fn train_texture<R: Rng + RngCore>(
    style: &StyleAsset,
    glyph: &GlyphNet,
    dataset: &TextDataset,
    phi: &FeatureExtractor<f32>,
    cfg: &TextureTrainConfig,
    rng: &mut R,
) -> Result<TextureTraining> {
    cfg.validate()?;
    if glyph.trained_steps().is_none() {
        return Err(Error::state("texture training needs a trained glyph network"));
    }
    if dataset.is_empty() {
        return Err(Error::arg("texture training needs text samples"));
    }
    let mut g = Trainee::new(Generator::new(cfg.generator.clone(), rng)?, cfg.lr);
    let mut d = Trainee::new(Discriminator::new(cfg.discriminator.clone(), rng)?, cfg.lr);
    let targets = if cfg.weights.style > 0.0 {
        phi.style_targets(&style.style.to_tensor())?
    } else {
        Vec::new()
    };
    let scales = stage_scales(3, cfg.k);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (xc, yc) = random_crop_pair(&style.structure, &style.style, cfg.crop_size, rng)?;
        let (x, y) = (xc.to_tensor(), yc.to_tensor());
        let mut input = x.clone();
        inject_noise_tensor(&mut input, cfg.noise_std, rng)?;

        let mut tape = Tape::new();
        let pg = g.net.params().bind(&mut tape, true);
        let iv = tape.constant(input);
        let fake = g.net.forward(&mut tape, iv, None, &mut Mode::Train(rng), &pg)?;
        let real_pair = Tensor::concat_channels(&[&x, &y])?;
        let fake_pair = Tensor::concat_channels(&[&x, tape.value(fake)])?;
        let adv_d = discriminator_step(&mut d, real_pair, fake_pair)?;

        let pd = d.net.params().bind(&mut tape, false);
        let xv = tape.constant(x);
        let pair = tape.concat(&[xv, fake])?;
        let score = d.net.forward(&mut tape, pair, &pd)?;
        let adv_g = lsgan_generator_loss(&mut tape, score);
        let rec = tape.mean_abs(fake, y, None)?;
        let mut terms = vec![(adv_g, cfg.weights.adv), (rec, cfg.weights.rec)];
        let mut style_value = 0.0;
        if cfg.weights.style > 0.0 {
            let t = dataset.get(rng.gen_range(0..dataset.len())).to_tensor();
            let l = scales[rng.gen_range(0..scales.len())];
            let mut structured = glyph.generator().infer(&t, Some(&[l]))?;
            inject_noise_tensor(&mut structured, cfg.noise_std, rng)?;
            let sv = tape.constant(structured);
            let rendered = g.net.forward(&mut tape, sv, None, &mut Mode::Train(rng), &pg)?;
            let s = phi.style_loss_var(&mut tape, rendered, &targets)?;
            style_value = tape.value(s).item() as f64;
            terms.push((s, cfg.weights.style));
        }
        let total = tape.weighted_sum(&terms)?;
        let losses = TextureLosses {
            rec: tape.value(rec).item() as f64,
            adv_g: tape.value(adv_g).item() as f64,
            adv_d,
            style: style_value,
        };
        check_finite(
            "texture",
            step,
            &[("rec", losses.rec), ("adv_g", losses.adv_g), ("adv_d", adv_d), ("style", style_value)],
        )?;
        tape.backward(total)?;
        g.apply(&tape, &pg)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "texture step {step}: rec {:.4} adv_g {:.4} adv_d {:.4} style {:.5}",
                losses.rec,
                losses.adv_g,
                losses.adv_d,
                losses.style
            );
        }
        history.push(losses);
    }
    let mut net = TextureNet::new(style.name.clone(), g.net, cfg);
    net.mark_trained(cfg.steps);
    Ok(TextureTraining {
        net,
        discriminator: d.net,
        history,
    })
}
