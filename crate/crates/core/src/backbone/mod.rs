//! Network topologies, parameter storage, optimization and checkpoints.

mod checkpoint;
mod discriminator;
mod generator;
mod optim;
mod params;

use std::str::FromStr;

use rand::RngCore;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Metadata, MAGIC,
};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{ControllableResBlockState, Generator, GeneratorConfig, ResidualParams};
pub use optim::{Adam, LEARNING_RATE};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Forward-pass mode. Dropout is active only in training, where it draws
/// its masks from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

pub trait Network<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

pub(crate) fn meta_get<V: FromStr>(meta: &Metadata, key: &str) -> Result<V> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::state(format!("checkpoint metadata lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::state(format!("checkpoint metadata `{key}={raw}` is malformed")))
}

/// Least-squares discriminator objective `½·(E(D(real)−1)² + E(D(fake))²)`.
pub fn lsgan_discriminator_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.mean_sq_const(real, 1.0);
    let f = tape.mean_sq_const(fake, 0.0);
    tape.weighted_sum(&[(r, 0.5), (f, 0.5)])
}

/// Least-squares generator objective `E(D(fake)−1)²`.
pub fn lsgan_generator_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Var {
    tape.mean_sq_const(fake, 1.0)
}

/// A constant image-sized channel holding `2ℓ − 1` per sample, used to
/// condition non-controllable networks on the scale parameter.
pub fn scale_channel<T: Scalar>(scales: &[f64], height: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(scales.len() * height * width);
    for &l in scales {
        data.extend(std::iter::repeat(T::of(2.0 * l - 1.0)).take(height * width));
    }
    Tensor::new(vec![scales.len(), 1, height, width], data).expect("sizes agree")
}

/// A network together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainee<N> {
    pub net: N,
    pub opt: Adam<f32>,
}

impl<N: Network<f32>> Trainee<N> {
    pub fn new(net: N, lr: f64) -> Self {
        let opt = Adam::new(lr, net.params());
        Trainee { net, opt }
    }

    /// Applies one optimizer step from gradients on `tape`.
    pub fn apply(&mut self, tape: &Tape<f32>, bound: &[Var]) -> Result<()> {
        let grads = self.net.params().gradients(tape, bound);
        self.opt.step(self.net.params_mut(), &grads)
    }
}

/// One least-squares discriminator update on detached real and fake
/// batches; returns the discriminator loss before the update.
pub(crate) fn discriminator_step(
    d: &mut Trainee<Discriminator<f32>>,
    real: Tensor<f32>,
    fake: Tensor<f32>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = d.net.params().bind(&mut tape, true);
    let r = tape.constant(real);
    let f = tape.constant(fake);
    let sr = d.net.forward(&mut tape, r, &p)?;
    let sf = d.net.forward(&mut tape, f, &p)?;
    let loss = lsgan_discriminator_loss(&mut tape, sr, sf)?;
    let value = tape.value(loss).item() as f64;
    tape.backward(loss)?;
    d.apply(&tape, &p)?;
    Ok(value)
}
