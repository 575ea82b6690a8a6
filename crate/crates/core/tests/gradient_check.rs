//! Central finite differences against reverse-mode gradients, in f64, for
//! every parameter of a small generator and discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapematch::backbone::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, Network, ParamStore};
use shapematch::graph::{Tape, Var};
use shapematch::Tensor;

const EPS: f64 = 1e-6;
const TOLERANCE: f64 = 1e-3;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares analytic gradients with finite differences of `loss` for every
/// scalar in `net`'s parameters and returns the worst relative error.
fn check<N: Network<f64>>(
    net: &mut N,
    loss: impl Fn(&N, &mut Tape<f64>, &[Var]) -> Var,
) -> (f64, usize) {
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, true);
    let l = loss(net, &mut tape, &bound);
    tape.backward(l).unwrap();
    let grads = net.params().gradients(&tape, &bound);

    let eval = |net: &N| {
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape, false);
        let l = loss(net, &mut tape, &bound);
        tape.value(l).item()
    };

    let names: Vec<String> = net.params().names().to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, name) in names.iter().enumerate() {
        let original = net.params().get(name).unwrap().clone();
        for i in 0..original.numel() {
            let mut plus = original.clone();
            plus.data_mut()[i] += EPS;
            net.params_mut().set(name, plus).unwrap();
            let lp = eval(net);
            let mut minus = original.clone();
            minus.data_mut()[i] -= EPS;
            net.params_mut().set(name, minus).unwrap();
            let lm = eval(net);
            net.params_mut().set(name, original.clone()).unwrap();

            let numeric = (lp - lm) / (2.0 * EPS);
            let analytic = grads[pi].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < TOLERANCE, "{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn controllable_generator_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = GeneratorConfig {
        base_width: 4,
        n_resblocks: 1,
        controllable: true,
        dropout_rate: 0.0,
        ..GeneratorConfig::new(1, 1)
    };
    let mut g = Generator::<f64>::new(cfg, &mut rng).unwrap();
    let x = random_tensor(&[1, 1, 8, 8], &mut rng);
    let target = random_tensor(&[1, 1, 8, 8], &mut rng);
    let (worst, n) = check(&mut g, |g: &Generator<f64>, tape, p| {
        let xv = tape.constant(x.clone());
        let out = g.forward(tape, xv, Some(&[0.3]), &mut Mode::Eval, p).unwrap();
        tape.mean_sq_diff(out, target.clone()).unwrap()
    });
    assert_eq!(n, g.params().num_values());
    println!("generator: {n} parameters, worst relative error {worst:e}");
}

#[test]
fn discriminator_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DiscriminatorConfig {
        n_layers: 2,
        base_width: 4,
        ..DiscriminatorConfig::new(2)
    };
    let d32 = Discriminator::<f32>::new(cfg, &mut rng).unwrap();
    let mut d = d32.cast::<f64>();
    let x = random_tensor(&[2, 2, 16, 16], &mut rng);
    let (worst, n) = check(&mut d, |d: &Discriminator<f64>, tape, p| {
        let xv = tape.constant(x.clone());
        let s = d.forward(tape, xv, p).unwrap();
        tape.mean_sq_const(s, 1.0)
    });
    assert_eq!(n, d.params().num_values());
    println!("discriminator: {n} parameters, worst relative error {worst:e}");
}

#[test]
fn param_store_casts_losslessly_to_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = Generator::<f32>::new(GeneratorConfig::new(2, 1), &mut rng).unwrap();
    let back: ParamStore<f32> = g.params().cast::<f64>().cast();
    assert_eq!(&back, g.params());
}
