//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seldkit::{Scalar, Tape, Tensor, Var};

/// Central-difference step and pass threshold for the active precision.
#[cfg(not(feature = "f64"))]
pub const FD_STEP: f64 = 1e-2;
#[cfg(not(feature = "f64"))]
pub const GRAD_REL_TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: f64 = 1e-5;
#[cfg(feature = "f64")]
pub const GRAD_REL_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        (rng.gen_range(-1.0..1.0) * scale) as Scalar
    })
}

/// Values at least `gap` apart, shuffled; keeps max-pool and ReLU away from
/// their kinks under finite-difference perturbation.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.25) * gap)
        .collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_fn(shape.to_vec(), |i| vals[i] as Scalar)
}

/// Weighted-sum probe `L = sum(w * f(inputs))` so every output element
/// contributes a distinct weight.
fn probe(tape: &Tape, out: Var, weights: &[f64]) -> f64 {
    tape.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(&y, &w)| y as f64 * w)
        .sum()
}

/// Compares tape gradients of every input against central finite
/// differences. Returns the worst relative error
/// `||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)` over the inputs.
pub fn gradient_error<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let weights: Vec<f64> = (0..tape.value(out).len())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    tape.backward_with(out, weights.iter().map(|&w| w as Scalar).collect())
        .expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = build(&mut t, &vs);
        probe(&t, o, &weights)
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = (orig as f64 + FD_STEP) as Scalar;
            let up = eval(&work);
            work[k].data_mut()[i] = (orig as f64 - FD_STEP) as Scalar;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            // Divide by the step actually realised in the working precision.
            let h = ((orig as f64 + FD_STEP) as Scalar as f64)
                - ((orig as f64 - FD_STEP) as Scalar as f64);
            numeric[i] = (up - down) / h;
        }
        let diff: f64 = analytic[k]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

/// A small experiment that trains in seconds.
pub fn tiny_config(classes: usize) -> seldkit::train::ExperimentConfig {
    let mut cfg = seldkit::train::ExperimentConfig::default();
    cfg.dataset.scene.duration_s = 2.0;
    cfg.dataset.scene.num_target_classes = classes;
    cfg.dataset.scene.max_overlap = 2;
    cfg.dataset.scene.min_event_s = 0.5;
    cfg.dataset.scene.max_event_s = 1.5;
    cfg.dataset.scene.target_events_per_s = 1.0;
    cfg.dataset.train_clips = 8;
    cfg.dataset.validation_clips = 4;
    cfg.dataset.test_clips = 4;
    cfg.dataset.base_seed = 500;
    cfg.features.n_mels = 16;
    cfg.model.num_classes = classes;
    cfg.model.n_mels = 16;
    cfg.model.conv_channels = vec![8, 8, 8];
    cfg.model.freq_pool = vec![2, 2, 2];
    cfg.model.gru_hidden = 8;
    cfg.model.embedding_dim = 4;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 4;
    cfg.train.seeds = vec![0];
    cfg
}
