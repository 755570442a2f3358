//! Shared helpers: scalar-loop loss oracles, finite-difference checks and a
//! miniature architecture.
#![allow(dead_code)]

use idsynth::datasets::{generate_synthetic_dataset, LabeledDataset, SyntheticSpec};
use idsynth::networks::{ArchitectureConfig, DiscriminatorSpec, EncoderSpec, GeneratorSpec};
use idsynth::nn::{Grads, Layer, Mode, Stack};
use idsynth::Tensor;
use rand::Rng;

pub fn oracle_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut s = 0.0;
        for &v in row {
            s += (v - m).exp();
        }
        total += -(row[y] - m - s.ln());
    }
    total / logits.len() as f64
}

pub fn oracle_half_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let mut s = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y) * (x - y);
        }
        total += 0.5 * s;
    }
    total / a.len() as f64
}

pub fn oracle_kl(mu: &[Vec<f64>], log_var: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (m, e) in mu.iter().zip(log_var) {
        let mut s = 0.0;
        for j in 0..m.len() {
            // KL(N(m, σ²) ‖ N(0, 1)) = ½(σ² + m² − 1 − ln σ²)
            let var = e[j].exp();
            s += 0.5 * (var + m[j] * m[j] - 1.0 - var.ln());
        }
        total += s;
    }
    total / mu.len() as f64
}

pub fn oracle_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let clamp = |p: f64| p.max(1e-7).min(1.0 - 1e-7);
    let mut a = 0.0;
    for &p in real {
        a -= clamp(p).ln();
    }
    let mut b = 0.0;
    for &p in fake {
        b -= (1.0 - clamp(p)).ln();
    }
    a / real.len() as f64 + b / fake.len() as f64
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-8)` over a whole gradient array. The floor
/// covers arrays whose true gradient is zero (biases feeding batch norm).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-8)
}

pub const FD_STEP: f64 = 1e-6;

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Up to `k` distinct coordinates of `0..n`.
pub fn sample_coords<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Forward a chain of stacks in train mode and return `Σ w ⊙ y`.
pub fn chain_objective(stacks: &[Stack<f64>], x: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let mut h = x.clone();
    for s in stacks {
        h = s.forward(h, Mode::Train).0;
    }
    h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Analytic parameter gradients (per stack) and input gradient of `Σ w ⊙ y`.
pub fn chain_gradients(stacks: &[Stack<f64>], x: &Tensor<f64>, w: &Tensor<f64>) -> (Vec<Grads<f64>>, Tensor<f64>) {
    let mut h = x.clone();
    let mut tapes = vec![];
    for s in stacks {
        let (y, t) = s.forward(h, Mode::Train);
        tapes.push(t);
        h = y;
    }
    let mut d = w.clone();
    let mut grads: Vec<Grads<f64>> = stacks.iter().map(|s| s.zero_grads()).collect();
    for i in (0..stacks.len()).rev() {
        d = stacks[i].backward(&tapes[i], d, Some(&mut grads[i]), true).unwrap();
    }
    (grads, d)
}

/// Flat indices of convolution biases that feed a batch norm.
pub fn zero_gradient_params(stack: &Stack<f64>) -> Vec<usize> {
    let mut out = vec![];
    let mut idx = 0;
    for (i, layer) in stack.layers.iter().enumerate() {
        let n = layer.params().len();
        if matches!(layer, Layer::Conv(_)) {
            if matches!(stack.layers.get(i + 1), Some(Layer::Norm(_))) {
                out.push(idx + 1);
            }
        }
        idx += n;
    }
    out
}

/// Central difference at one coordinate, or `None` when the one-sided
/// differences disagree (the step straddles an activation kink).
fn smooth_difference(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let (up, mid, down) = (f(FD_STEP), f(0.0), f(-FD_STEP));
    let fwd = (up - mid) / FD_STEP;
    let bwd = (mid - down) / FD_STEP;
    if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()).max(1e-3) {
        return None;
    }
    Some((up - down) / (2.0 * FD_STEP))
}

pub struct ChainCheck {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

/// Compare analytic and central-difference gradients of `Σ w ⊙ y` for the
/// input and every parameter array (up to `k` random coordinates each).
/// Coordinates sitting on an activation kink are counted and skipped.
pub fn check_chain<R: Rng>(rng: &mut R, stacks: &mut [Stack<f64>], x: &Tensor<f64>, k: usize) -> ChainCheck {
    let mut h_shape = x.shape().to_vec();
    for s in stacks.iter() {
        h_shape = s.output_shape(&h_shape).unwrap();
    }
    let w = random_tensor(rng, &h_shape, 1.0);
    let (grads, dx) = chain_gradients(stacks, x, &w);
    let mut out = ChainCheck {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    let record = |ana: Vec<f64>, num: Vec<f64>, kinks: usize, out: &mut ChainCheck| {
        out.kinks += kinks;
        out.checked += ana.len() + kinks;
        if !ana.is_empty() {
            out.worst = out.worst.max(relative_error(&ana, &num));
        }
    };

    let (mut ana, mut num, mut kinks) = (vec![], vec![], 0);
    let mut xv = x.clone();
    for c in sample_coords(rng, x.len(), k) {
        let orig = xv.data()[c];
        let d = smooth_difference(|t| {
            xv.data_mut()[c] = orig + t;
            let v = chain_objective(stacks, &xv, &w);
            xv.data_mut()[c] = orig;
            v
        });
        match d {
            Some(d) => {
                ana.push(dx.data()[c]);
                num.push(d);
            }
            None => kinks += 1,
        }
    }
    record(ana, num, kinks, &mut out);

    for si in 0..stacks.len() {
        let zero = zero_gradient_params(&stacks[si]);
        let n_params = stacks[si].params_mut().len();
        for pi in 0..n_params {
            if zero.contains(&pi) {
                // Batch norm cancels any per-channel shift, so these are exactly zero.
                let g = grads[si][pi].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(g < 1e-10, "stack {si} param {pi} should have zero gradient, got {g}");
                continue;
            }
            let len = stacks[si].params_mut()[pi].len();
            let (mut ana, mut num, mut kinks) = (vec![], vec![], 0);
            for c in sample_coords(rng, len, k) {
                let orig = stacks[si].params_mut()[pi][c];
                let d = smooth_difference(|t| {
                    stacks[si].params_mut()[pi][c] = orig + t;
                    let v = chain_objective(stacks, x, &w);
                    stacks[si].params_mut()[pi][c] = orig;
                    v
                });
                match d {
                    Some(d) => {
                        ana.push(grads[si][pi][c]);
                        num.push(d);
                    }
                    None => kinks += 1,
                }
            }
            record(ana, num, kinks, &mut out);
        }
    }
    out
}

/// 3-stage, 8-channel networks on 16×16 images.
pub fn mini_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        image_size: 16,
        channels: 3,
        num_identities: 4,
        identity_dim: 8,
        attribute_dim: 8,
        classifier_hidden: 8,
        encoder: EncoderSpec {
            stages: vec![8, 8, 8],
            normalization: true,
        },
        generator: GeneratorSpec {
            input_width: 16,
            base_channels: 8,
            stages: vec![8, 8],
            normalization: true,
        },
        discriminator: DiscriminatorSpec {
            stages: vec![8, 8, 8],
            normalization: true,
        },
    }
}

pub fn mini_dataset(seed: u64) -> LabeledDataset {
    generate_synthetic_dataset(&SyntheticSpec {
        num_identities: 4,
        images_per_identity: 6,
        image_size: 16,
        max_translation: 2.0,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// A miniature model trained for `steps` on `data`.
pub fn trained_mini(data: &LabeledDataset, steps: u64) -> idsynth::networks::ModelState<f32> {
    let cfg = idsynth::trainer::TrainConfig {
        total_steps: steps,
        batch_size: 4,
        ..Default::default()
    };
    let mut t = idsynth::trainer::Trainer::<f32>::new(&mini_arch(), cfg).unwrap();
    t.run(data, None, |_, _| Ok(())).unwrap();
    t.state
}
