//! Encoder / residual / decoder generator, optionally with Controllable
//! ResBlocks that blend a "max" and a "min" residual branch by the scale
//! parameter.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};

use super::checkpoint::Metadata;
use super::params::{normal_tensor, ParamStore};
use super::{meta_get, Mode, Network};
use crate::error::{check_scale, Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_resblocks: usize,
    pub controllable: bool,
    pub dropout_rate: f64,
}

impl GeneratorConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        GeneratorConfig {
            in_channels,
            out_channels,
            base_width: 64,
            n_resblocks: 6,
            controllable: false,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks < 1 {
            return Err(Error::arg("generator needs at least one residual block"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::arg("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn write_meta(&self, prefix: &str, meta: &mut Metadata) {
        let mut put = |k: &str, v: String| {
            meta.insert(format!("{prefix}{k}"), v);
        };
        put("in_channels", self.in_channels.to_string());
        put("out_channels", self.out_channels.to_string());
        put("base_width", self.base_width.to_string());
        put("n_resblocks", self.n_resblocks.to_string());
        put("controllable", self.controllable.to_string());
        put("dropout_rate", self.dropout_rate.to_string());
    }

    pub fn read_meta(prefix: &str, meta: &Metadata) -> Result<Self> {
        let cfg = GeneratorConfig {
            in_channels: meta_get(meta, &format!("{prefix}in_channels"))?,
            out_channels: meta_get(meta, &format!("{prefix}out_channels"))?,
            base_width: meta_get(meta, &format!("{prefix}base_width"))?,
            n_resblocks: meta_get(meta, &format!("{prefix}n_resblocks"))?,
            controllable: meta_get(meta, &format!("{prefix}controllable"))?,
            dropout_rate: meta_get(meta, &format!("{prefix}dropout_rate"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct BranchSlots {
    conv1: ConvSlot,
    conv2: ConvSlot,
}

#[derive(Clone, Copy, Debug)]
enum BlockSlots {
    Plain(BranchSlots),
    Controllable { max: BranchSlots, min: BranchSlots },
}

#[derive(Clone, Debug)]
struct Layout {
    enc: [ConvSlot; 3],
    blocks: Vec<BlockSlots>,
    dec: [ConvSlot; 2],
    out: ConvSlot,
}

/// Parameters of one residual function `F`: two 3×3 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualParams<T> {
    pub conv1: Tensor<T>,
    pub conv2: Tensor<T>,
}

/// The two residual branches of a Controllable ResBlock. Both branches
/// always share one shape, which is what makes branch copying possible.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllableResBlockState<T> {
    pub branch_max: ResidualParams<T>,
    pub branch_min: ResidualParams<T>,
}

fn residual_branch<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w1: Var,
    w2: Var,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = tape.reflect_pad(x, 1)?;
    let h = tape.conv2d(h, w1, None, 1, 0)?;
    let h = tape.instance_norm(h)?;
    let mut h = tape.relu(h);
    if let Mode::Train(rng) = mode {
        if dropout > 0.0 {
            let keep = T::of(1.0 / (1.0 - dropout));
            let mask = (0..tape.value(h).numel())
                .map(|_| if rng.gen::<f64>() < dropout { T::zero() } else { keep })
                .collect();
            h = tape.mask(h, mask)?;
        }
    }
    let h = tape.reflect_pad(h, 1)?;
    let h = tape.conv2d(h, w2, None, 1, 0)?;
    tape.instance_norm(h)
}

impl<T: Scalar> ResidualParams<T> {
    /// Plain ResBlock output `x + F(x)` in evaluation mode.
    pub fn residual_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1 = tape.constant(self.conv1.clone());
        let w2 = tape.constant(self.conv2.clone());
        let f = residual_branch(&mut tape, xv, w1, w2, 0.0, &mut Mode::Eval)?;
        let out = tape.add(xv, f)?;
        Ok(tape.value(out).clone())
    }
}

fn controllable_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    scales: &[f64],
    (max1, max2): (Var, Var),
    (min1, min2): (Var, Var),
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let f_max = residual_branch(tape, x, max1, max2, dropout, mode)?;
    let f_min = residual_branch(tape, x, min1, min2, dropout, mode)?;
    let mixed = tape.lerp(f_min, f_max, scales)?;
    tape.add(x, mixed)
}

impl<T: Scalar> ControllableResBlockState<T> {
    /// `x + ℓ·F_max(x) + (1 − ℓ)·F_min(x)` in evaluation mode, for a batch
    /// sharing one scale value.
    pub fn forward(&self, x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
        check_scale(scale)?;
        let n = x.dims4()?.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let max = (
            tape.constant(self.branch_max.conv1.clone()),
            tape.constant(self.branch_max.conv2.clone()),
        );
        let min = (
            tape.constant(self.branch_min.conv1.clone()),
            tape.constant(self.branch_min.conv2.clone()),
        );
        let out = controllable_block(&mut tape, xv, &vec![scale; n], max, min, 0.0, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    layout: Layout,
    passes: AtomicU64,
}

impl<T: Scalar> Clone for Generator<T> {
    fn clone(&self) -> Self {
        Generator {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            passes: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: Option<&'a mut dyn RngCore>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<ConvSlot> {
        let shape = [cout, cin, k, k];
        let w = match self.rng.as_deref_mut() {
            Some(rng) => normal_tensor(&shape, INIT_STD, rng),
            None => Tensor::zeros(&shape),
        };
        let weight = self.store.insert(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(self.store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(ConvSlot { weight, bias })
    }

    fn branch(&mut self, prefix: &str, ch: usize) -> Result<BranchSlots> {
        Ok(BranchSlots {
            conv1: self.conv(&format!("{prefix}.conv1"), ch, ch, 3, false)?,
            conv2: self.conv(&format!("{prefix}.conv2"), ch, ch, 3, false)?,
        })
    }
}

fn build_layout<T: Scalar>(
    cfg: &GeneratorConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(ParamStore<T>, Layout)> {
    cfg.validate()?;
    let w = cfg.base_width;
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    // Convolutions followed by instance normalization carry no bias: the
    // normalization would cancel it.
    let enc = [
        b.conv("enc0", cfg.in_channels, w, 7, false)?,
        b.conv("enc1", w, 2 * w, 3, false)?,
        b.conv("enc2", 2 * w, 4 * w, 3, false)?,
    ];
    let mut blocks = Vec::with_capacity(cfg.n_resblocks);
    for i in 0..cfg.n_resblocks {
        blocks.push(if cfg.controllable {
            BlockSlots::Controllable {
                max: b.branch(&format!("res{i}.max"), 4 * w)?,
                min: b.branch(&format!("res{i}.min"), 4 * w)?,
            }
        } else {
            BlockSlots::Plain(b.branch(&format!("res{i}"), 4 * w)?)
        });
    }
    let dec = [
        b.conv("dec0", 4 * w, 2 * w, 3, false)?,
        b.conv("dec1", 2 * w, w, 3, false)?,
    ];
    let out = b.conv("out", w, cfg.out_channels, 7, true)?;
    Ok((b.store, Layout { enc, blocks, dec, out }))
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: RngCore>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let (params, layout) = build_layout(&config, Some(rng))?;
        Ok(Generator {
            config,
            params,
            layout,
            passes: AtomicU64::new(0),
        })
    }

    /// Rebuilds a generator around stored parameters, which must match the
    /// layout implied by `config` exactly.
    pub fn from_params(config: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        let (zeros, layout) = build_layout::<T>(&config, None)?;
        zeros.check_layout(&params)?;
        Ok(Generator {
            config,
            params,
            layout,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            passes: AtomicU64::new(0),
        }
    }

    /// Number of forward passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    fn conv(
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        slot: ConvSlot,
        stride: usize,
        zero_pad: usize,
    ) -> Result<Var> {
        tape.conv2d(x, p[slot.weight], slot.bias.map(|b| p[b]), stride, zero_pad)
    }

    /// Records a forward pass on `tape` using parameters previously bound
    /// with [`ParamStore::bind`]. `scales` holds one value per batch sample
    /// and is required exactly when the generator is controllable.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        scales: Option<&[f64]>,
        mode: &mut Mode<'_>,
        p: &[Var],
    ) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "generator input {h}x{w} is not divisible by 4"
            )));
        }
        let scales = match (self.config.controllable, scales) {
            (true, Some(s)) => {
                if s.len() != n {
                    return Err(Error::shape(format!("{} scales for a batch of {n}", s.len())));
                }
                s.iter().try_for_each(|&l| check_scale(l))?;
                Some(s)
            }
            (true, None) => return Err(Error::arg("controllable generator needs a scale parameter")),
            (false, Some(_)) => {
                return Err(Error::arg("scale parameter given to a non-controllable generator"))
            }
            (false, None) => None,
        };
        if p.len() != self.params.len() {
            return Err(Error::state("parameters bound from a different network"));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);

        let l = &self.layout;
        let drop = self.config.dropout_rate;

        let mut h = tape.reflect_pad(x, 3)?;
        h = Self::conv(tape, p, h, l.enc[0], 1, 0)?;
        h = tape.instance_norm(h)?;
        h = tape.relu(h);
        for &slot in &l.enc[1..] {
            h = Self::conv(tape, p, h, slot, 2, 1)?;
            h = tape.instance_norm(h)?;
            h = tape.relu(h);
        }
        for block in &l.blocks {
            h = match *block {
                BlockSlots::Plain(b) => {
                    let f = residual_branch(tape, h, p[b.conv1.weight], p[b.conv2.weight], drop, mode)?;
                    tape.add(h, f)?
                }
                BlockSlots::Controllable { max, min } => controllable_block(
                    tape,
                    h,
                    scales.expect("checked above"),
                    (p[max.conv1.weight], p[max.conv2.weight]),
                    (p[min.conv1.weight], p[min.conv2.weight]),
                    drop,
                    mode,
                )?,
            };
        }
        for &slot in &l.dec {
            h = tape.upsample2(h)?;
            h = tape.reflect_pad(h, 1)?;
            h = Self::conv(tape, p, h, slot, 1, 0)?;
            h = tape.instance_norm(h)?;
            h = tape.relu(h);
        }
        h = tape.reflect_pad(h, 3)?;
        h = Self::conv(tape, p, h, l.out, 1, 0)?;
        Ok(tape.tanh(h))
    }

    /// Evaluation-mode forward pass on a detached input.
    pub fn infer(&self, x: &Tensor<T>, scales: Option<&[f64]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, xv, scales, &mut Mode::Eval, &p)?;
        Ok(tape.value(out).clone())
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    /// Parameters of controllable block `i`.
    pub fn block_state(&self, i: usize) -> Result<ControllableResBlockState<T>> {
        let get = |b: BranchSlots| ResidualParams {
            conv1: self.params.tensor_at(b.conv1.weight).clone(),
            conv2: self.params.tensor_at(b.conv2.weight).clone(),
        };
        match self.layout.blocks.get(i) {
            Some(&BlockSlots::Controllable { max, min }) => Ok(ControllableResBlockState {
                branch_max: get(max),
                branch_min: get(min),
            }),
            Some(_) => Err(Error::arg("block is not controllable")),
            None => Err(Error::arg(format!("no residual block {i}"))),
        }
    }

    /// Overwrites every min-branch parameter with its max-branch
    /// counterpart.
    pub fn copy_branch_params(&mut self) -> Result<()> {
        if !self.config.controllable {
            return Err(Error::arg("copy_branch_params needs a controllable generator"));
        }
        for block in &self.layout.blocks {
            if let BlockSlots::Controllable { max, min } = *block {
                for (src, dst) in [(max.conv1, min.conv1), (max.conv2, min.conv2)] {
                    let t = self.params.tensor_at(src.weight).clone();
                    self.params.set_at(dst.weight, t)?;
                }
            }
        }
        Ok(())
    }
}
