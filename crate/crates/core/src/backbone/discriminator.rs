use rand::RngCore;

use super::checkpoint::Metadata;
use super::params::{normal_tensor, ParamStore};
use super::{meta_get, Network};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Number of stride-2 convolutions.
    pub n_layers: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            n_layers: 3,
            base_width: 64,
        }
    }

    pub fn write_meta(&self, prefix: &str, meta: &mut Metadata) {
        meta.insert(format!("{prefix}in_channels"), self.in_channels.to_string());
        meta.insert(format!("{prefix}n_layers"), self.n_layers.to_string());
        meta.insert(format!("{prefix}base_width"), self.base_width.to_string());
    }

    pub fn read_meta(prefix: &str, meta: &Metadata) -> Result<Self> {
        Ok(DiscriminatorConfig {
            in_channels: meta_get(meta, &format!("{prefix}in_channels"))?,
            n_layers: meta_get(meta, &format!("{prefix}n_layers"))?,
            base_width: meta_get(meta, &format!("{prefix}base_width"))?,
        })
    }

    /// Side length of the score map for a square input of side `size`:
    /// each 4×4/stride-2/pad-1 layer halves, each stride-1 layer drops one.
    pub fn score_size(&self, size: usize) -> usize {
        let mut s = size;
        for _ in 0..self.n_layers {
            s = (s + 2 - 4) / 2 + 1;
        }
        s - 2
    }
}

/// PatchGAN-style critic producing a grid of raw scores.
#[derive(Clone, Debug)]
pub struct Discriminator<T = f32> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    /// (weight, bias, stride, normalized) per layer, indices into `params`.
    layers: Vec<(usize, Option<usize>, usize, bool)>,
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    fn build(config: DiscriminatorConfig, mut rng: Option<&mut dyn RngCore>) -> Result<Self> {
        if config.n_layers == 0 || config.in_channels == 0 || config.base_width == 0 {
            return Err(Error::arg("discriminator needs positive layer and channel counts"));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let w = config.base_width;
        let mut add = |i: usize, cin: usize, cout: usize, stride: usize, first_or_last: bool| -> Result<()> {
            let shape = [cout, cin, 4, 4];
            let t = match rng.as_deref_mut() {
                Some(r) => normal_tensor(&shape, 0.02, r),
                None => Tensor::zeros(&shape),
            };
            let wi = params.insert(format!("layer{i}.weight"), t)?;
            let bi = if first_or_last {
                Some(params.insert(format!("layer{i}.bias"), Tensor::zeros(&[cout]))?)
            } else {
                None
            };
            layers.push((wi, bi, stride, !first_or_last));
            Ok(())
        };
        add(0, config.in_channels, w, 2, true)?;
        let mut ch = w;
        for i in 1..config.n_layers {
            let next = w * (1 << i.min(3));
            add(i, ch, next, 2, false)?;
            ch = next;
        }
        let next = w * (1 << config.n_layers.min(3));
        add(config.n_layers, ch, next, 1, false)?;
        add(config.n_layers + 1, next, 1, 1, true)?;
        Ok(Discriminator {
            config,
            params,
            layers,
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::build(config, None)?;
        d.params.check_layout(&params)?;
        d.params = params;
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Records a forward pass with bound parameters; returns the
    /// `[N, 1, h, w]` score map.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, p: &[Var]) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if p.len() != self.params.len() {
            return Err(Error::state("parameters bound from a different network"));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b, stride, norm)) in self.layers.iter().enumerate() {
            h = tape.conv2d(h, p[w], b.map(|b| p[b]), stride, 1)?;
            if norm {
                h = tape.instance_norm(h)?;
            }
            if i != last {
                h = tape.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }

    pub fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.params.bind(&mut tape, false);
        let s = self.forward(&mut tape, xv, &p)?;
        Ok(tape.value(s).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(in_channels: usize, n_layers: usize, width: usize) -> Discriminator<f32> {
        let cfg = DiscriminatorConfig {
            in_channels,
            n_layers,
            base_width: width,
        };
        Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn score_map_size_arithmetic() {
        // 256 → 128 → 64 → 32 (stride 2) → 31 → 30 (stride 1, k4 p1)
        let cfg = DiscriminatorConfig::new(3);
        assert_eq!(cfg.score_size(256), 30);
        assert_eq!(cfg.score_size(64), 6);
        let d = disc(2, 3, 4);
        let x = Tensor::full(&[1, 2, 256, 256], 0.1f32);
        assert_eq!(d.score(&x).unwrap().shape(), &[1, 1, 30, 30]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let d = disc(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f32> = (0..64 * 64).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let one = Tensor::new(vec![1, 1, 64, 64], a).unwrap();
        let batch = Tensor::stack(&[one.clone(), one.clone(), one.clone()]).unwrap();
        let s = d.score(&batch).unwrap();
        assert_eq!(s.shape()[0], 3);
        let single = d.score(&one).unwrap();
        for i in 0..3 {
            assert_eq!(s.sample(i), single);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let d = disc(4, 2, 4);
        let x = Tensor::full(&[1, 3, 32, 32], 0.0f32);
        assert!(matches!(d.score(&x), Err(Error::Shape(_))));
    }
}
