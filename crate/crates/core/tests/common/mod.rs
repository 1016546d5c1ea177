#![allow(dead_code)]

use iclct::numeric::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error between two gradient vectors, measured in the ℓ2 norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_difference(
    inputs: &[Tensor],
    h: f64,
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut result = Vec::new();
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            g[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        result.push(g);
    }
    result
}

/// Reverse-mode gradients of the same scalar function.
pub fn autodiff(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect()
}

/// Worst relative error across inputs between autodiff and finite differences.
pub fn grad_check(inputs: &[Tensor], h: f64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let ad = autodiff(inputs, f);
    let fd = finite_difference(inputs, h, f);
    ad.iter().zip(&fd).map(|(a, b)| rel_err(a, b)).fold(0.0, f64::max)
}

/// Projects a tensor output onto a fixed random direction to obtain a scalar.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let w = random_tensor(&mut r, &shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

use iclct::data::{synth, Dataset, EncodedInstance, SplitSpec};
use iclct::icl::{ContextTargetBatch, IclConfig, Variant};
use iclct::model::{Model, ModelConfig};

/// Compact model configuration for property checks.
pub fn small_config(width: usize) -> ModelConfig {
    ModelConfig {
        width,
        heads: 2,
        encoder_layers: 1,
        ffn_mult: 2,
        decoder_hidden: width,
        ..ModelConfig::default()
    }
}

/// Small model with ICL layers whose residual gates are open.
pub fn icl_model(seed: u64, width: usize, layers: usize, variant: Variant) -> Model {
    let mut m = Model::new(small_config(width), [7, 3, 12, 23], seed).unwrap();
    m.attach_icl(
        IclConfig {
            layers,
            variant,
            identity_init: false,
            decorator_hidden: 4,
            ffn_mult: 2,
            ..IclConfig::default()
        },
        seed,
    )
    .unwrap();
    m
}

/// Random encoded rows compatible with the cardinalities of [`icl_model`].
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, first_id: u64) -> Vec<EncodedInstance> {
    let cards = [7, 3, 12, 23];
    (0..n)
        .map(|i| EncodedInstance {
            cat: std::array::from_fn(|k| rng.gen_range(0..cards[k])),
            cont: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
            y: f64::from(rng.gen_range(0u8..3)),
            v: rng.gen_range(0.05..1.0),
            id: first_id + i as u64,
        })
        .collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, nc: usize, nt: usize) -> ContextTargetBatch {
    let n = nc + nt;
    ContextTargetBatch::new(
        nc,
        nt,
        (0..n).map(|_| f64::from(rng.gen_range(0u8..4))).collect(),
        (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
        (0..n as u64).collect(),
    )
    .unwrap()
}

/// Encoded synthetic portfolio under the standard split.
pub fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    Dataset::build(&synth::generate(n, seed), &SplitSpec::standard(seed), None).unwrap()
}
