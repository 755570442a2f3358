//! Feature-space adversarial examples against the classifier and their
//! detection through reconstruction discrepancy.
//!
//! The attack solves `min ‖r‖²  s.t.  ‖f_C(x₁+r) − f_C(x₂)‖² < θ` with a penalty
//! relaxation `‖r‖² + c·max(0, d − margin·θ)`, raising `c` tenfold per epoch.
//! Detection compares uniform-LBP histograms of an input and its
//! reconstruction with a linear SVM.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::classifier_features;
use crate::networks::ModelState;
use crate::nn::Mode;
use crate::synthesis::reconstruct;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Squared feature-distance threshold.
    pub theta: f64,
    /// Fraction of θ the penalty aims for.
    pub margin: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub step_size: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            theta: 1.0,
            margin: 0.9,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            epochs: 5,
            iterations_per_epoch: 100,
            step_size: 0.01,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::validation(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::validation(format!("margin {} outside (0, 1]", self.margin)));
        }
        if !(self.initial_penalty > 0.0 && self.penalty_growth >= 1.0 && self.step_size > 0.0) {
            return Err(Error::validation("penalty and step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    /// Whether the hard constraint `d < θ` holds for `x_adv`.
    pub success: bool,
    /// Best feasible iterate, or the closest one on failure.
    pub x_adv: Tensor<T>,
    pub r: Tensor<T>,
    pub distance: f64,
    pub r_norm_sq: f64,
    pub iterations: usize,
    /// Penalty objective of every accepted iterate, with the epoch it belongs to.
    pub trace: Vec<(usize, f64)>,
}

struct Probe<T> {
    target: Tensor<T>,
}

impl<T: Scalar> Probe<T> {
    fn distance(&self, state: &ModelState<T>, x: &Tensor<T>) -> f64 {
        let (f, _) = state.classifier_features(x, Mode::Eval);
        f.data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum()
    }

    fn distance_and_grad(&self, state: &ModelState<T>, x: &Tensor<T>) -> (f64, Tensor<T>) {
        let (f, tapes) = state.classifier_features(x, Mode::Eval);
        let mut d = f.clone();
        d.add_scaled(&self.target, -T::one());
        let dist = d.sum_sq().as_f64();
        d.scale(T::from_f64c(2.0));
        (dist, state.classifier_features_input_grad(&tapes, d))
    }
}

fn clamp_image<T: Scalar>(x: &mut Tensor<T>) {
    let (lo, hi) = (-T::one(), T::one());
    for v in x.data_mut() {
        *v = v.max(lo).min(hi);
    }
}

/// Perturb a single image `x1` (shape `(1, c, h, w)`) until its classifier
/// features fall within `θ` of `x2`'s. Returns `r = 0` immediately when the
/// pair already satisfies the constraint.
pub fn craft_adversarial<T: Scalar>(
    state: &ModelState<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    state.check_images(x1)?;
    state.check_images(x2)?;
    if x1.rows() != 1 || x2.rows() != 1 {
        return Err(Error::validation("attack takes one source and one target image"));
    }
    let probe = Probe {
        target: state.classifier_features(x2, Mode::Eval).0,
    };
    let d0 = probe.distance(state, x1);
    let zero = Tensor::zeros(x1.shape());
    if d0 < cfg.theta {
        return Ok(AttackResult {
            success: true,
            x_adv: x1.clone(),
            r: zero,
            distance: d0,
            r_norm_sq: 0.0,
            iterations: 0,
            trace: vec![],
        });
    }

    let goal = cfg.margin * cfg.theta;
    let objective = |r2: f64, d: f64, c: f64| r2 + c * (d - goal).max(0.0);
    let mut x = x1.clone();
    let mut d = d0;
    let mut best_feasible: Option<(Tensor<T>, f64, f64)> = None;
    let mut closest = (x1.clone(), d0);
    let mut c = cfg.initial_penalty;
    let mut eta = cfg.step_size;
    let mut iterations = 0;
    let mut trace = vec![];

    for epoch in 0..cfg.epochs {
        let mut r = x.clone();
        r.add_scaled(x1, -T::one());
        let mut r2 = r.sum_sq().as_f64();
        let mut j = objective(r2, d, c);
        trace.push((epoch, j));
        for _ in 0..cfg.iterations_per_epoch {
            iterations += 1;
            let mut grad = r.clone();
            grad.scale(T::from_f64c(2.0));
            if d > goal {
                let (_, gd) = probe.distance_and_grad(state, &x);
                grad.add_scaled(&gd, T::from_f64c(c));
            }
            let mut accepted = false;
            for _ in 0..30 {
                let mut cand = x.clone();
                cand.add_scaled(&grad, T::from_f64c(-eta));
                clamp_image(&mut cand);
                let mut cr = cand.clone();
                cr.add_scaled(x1, -T::one());
                let cr2 = cr.sum_sq().as_f64();
                let cd = probe.distance(state, &cand);
                let cj = objective(cr2, cd, c);
                if cj < j {
                    (x, r, r2, d, j) = (cand, cr, cr2, cd, cj);
                    accepted = true;
                    eta *= 1.5;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push((epoch, j));
            if d < closest.1 {
                closest = (x.clone(), d);
            }
            if d < cfg.theta && best_feasible.as_ref().is_none_or(|b| r2 < b.2) {
                best_feasible = Some((x.clone(), d, r2));
            }
        }
        if best_feasible.is_some() {
            break;
        }
        c *= cfg.penalty_growth;
        eta = cfg.step_size;
    }

    let finish = |x_adv: Tensor<T>, distance: f64, success: bool, trace| {
        let mut r = x_adv.clone();
        r.add_scaled(x1, -T::one());
        AttackResult {
            success,
            r_norm_sq: r.sum_sq().as_f64(),
            r,
            x_adv,
            distance,
            iterations,
            trace,
        }
    };
    Ok(match best_feasible {
        Some((x, dist, _)) => finish(x, dist, true, trace),
        None => finish(closest.0, closest.1, false, trace),
    })
}

/// Median squared `f_C` distance over same-identity pairs.
pub fn calibrate_theta<T: Scalar>(
    state: &ModelState<T>,
    images: &[Vec<f32>],
    labels: &[usize],
    shape: [usize; 3],
) -> Result<f64> {
    let f = classifier_features(state, images, shape)?;
    let mut d = vec![];
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if labels[i] == labels[j] {
                d.push(f[i].iter().zip(&f[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
            }
        }
    }
    if d.is_empty() {
        return Err(Error::validation("no same-identity pairs to calibrate theta"));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    Ok(if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) })
}

pub const LBP_GRID: usize = 8;
pub const LBP_BINS: usize = 59;
pub const LBP_LEN: usize = LBP_GRID * LBP_GRID * LBP_BINS;

fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

/// Bin of every 8-bit pattern: uniform codes (≤ 2 circular transitions) in
/// ascending order take bins 0..58, all others share bin 58.
fn lbp_bin_table() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [58u8; 256];
        let mut next = 0;
        for code in 0..=255u8 {
            if transitions(code) <= 2 {
                t[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next, 58);
        t
    })
}

pub fn luminance(image: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let plane = size * size;
    (0..plane)
        .map(|i| {
            if channels >= 3 {
                0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i]
            } else {
                image[i]
            }
        })
        .collect()
}

/// 8-neighbour pattern of every pixel (radius 1, edges replicated); bit p is
/// set when neighbour p is at least the centre.
pub fn lbp_codes(lum: &[f32], size: usize) -> Vec<u8> {
    const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, size as isize - 1) as usize;
        let x = x.clamp(0, size as isize - 1) as usize;
        lum[y * size + x]
    };
    let mut out = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = lum[y * size + x];
            let mut code = 0u8;
            for (p, (dy, dx)) in OFFSETS.iter().enumerate() {
                if at(y as isize + dy, x as isize + dx) >= c {
                    code |= 1 << p;
                }
            }
            out[y * size + x] = code;
        }
    }
    out
}

/// Uniform LBP histograms over an 8×8 grid of cells, each L1-normalized.
pub fn lbp_features(image: &[f32], channels: usize, size: usize) -> Result<Vec<f64>> {
    if size < LBP_GRID {
        return Err(Error::validation(format!("image of side {size} is smaller than the {LBP_GRID}×{LBP_GRID} grid")));
    }
    if image.len() != channels * size * size {
        return Err(Error::Shape {
            expected: vec![channels, size, size],
            actual: vec![image.len()],
        });
    }
    let codes = lbp_codes(&luminance(image, channels, size), size);
    let table = lbp_bin_table();
    let mut out = vec![0.0; LBP_LEN];
    for y in 0..size {
        let cy = y * LBP_GRID / size;
        for x in 0..size {
            let cx = x * LBP_GRID / size;
            out[(cy * LBP_GRID + cx) * LBP_BINS + table[codes[y * size + x] as usize] as usize] += 1.0;
        }
    }
    for cell in out.chunks_mut(LBP_BINS) {
        let s: f64 = cell.iter().sum();
        cell.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Detector input: LBP of the image followed by LBP of its reconstruction.
pub fn pair_features(image: &[f32], reconstruction: &[f32], channels: usize, size: usize) -> Result<Vec<f64>> {
    let mut f = lbp_features(image, channels, size)?;
    f.extend(lbp_features(reconstruction, channels, size)?);
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub training_accuracy: f64,
    pub epochs: usize,
}

impl LinearSvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Soft-margin (hinge loss) linear SVM by dual coordinate descent, with the
/// bias as an extra constant feature. Labels are `±1`; coordinates are
/// visited in index order, so results are deterministic.
pub fn train_linear_svm(x: &[Vec<f64>], y: &[f64], cfg: &SvmConfig) -> Result<LinearSvm> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::validation("svm needs matching, nonempty features and labels"));
    }
    if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
        return Err(Error::validation("svm needs both classes"));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::validation("svm features differ in length"));
    }
    let mut w = vec![0.0; dim + 1];
    let mut alpha = vec![0.0; x.len()];
    let q: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let dot = |w: &[f64], r: &[f64]| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[dim];
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        epochs += 1;
        let mut max_pg: f64 = 0.0;
        for i in 0..x.len() {
            let g = y[i] * dot(&w, &x[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, cfg.c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += delta * xj;
                }
                w[dim] += delta;
            }
        }
        if max_pg < cfg.tolerance {
            break;
        }
    }
    let bias = w.pop().unwrap_or(0.0);
    let mut svm = LinearSvm {
        weights: w,
        bias,
        training_accuracy: 0.0,
        epochs,
    };
    let correct = x.iter().zip(y).filter(|(r, &l)| svm.score(r) * l > 0.0).count();
    svm.training_accuracy = correct as f64 / x.len() as f64;
    Ok(svm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Genuine,
    Adversarial,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Genuine => "genuine",
            Verdict::Adversarial => "adversarial",
        }
    }
}

/// Linear detector over `pair_features`; positive scores are adversarial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub svm: LinearSvm,
    pub channels: usize,
    pub image_size: usize,
    pub num_genuine: usize,
    pub num_adversarial: usize,
}

/// A detector input: an image and the model's reconstruction of it.
pub type ImagePair = (Vec<f32>, Vec<f32>);

pub fn train_detector(
    genuine: &[ImagePair],
    adversarial: &[ImagePair],
    channels: usize,
    size: usize,
    cfg: &SvmConfig,
) -> Result<DetectorModel> {
    if genuine.is_empty() || adversarial.is_empty() {
        return Err(Error::validation("detector training needs both genuine and adversarial pairs"));
    }
    let mut x = vec![];
    let mut y = vec![];
    for (set, label) in [(genuine, -1.0), (adversarial, 1.0)] {
        for (img, rec) in set {
            x.push(pair_features(img, rec, channels, size)?);
            y.push(label);
        }
    }
    Ok(DetectorModel {
        svm: train_linear_svm(&x, &y, cfg)?,
        channels,
        image_size: size,
        num_genuine: genuine.len(),
        num_adversarial: adversarial.len(),
    })
}

/// Reconstruct each image and pair it with its reconstruction.
pub fn with_reconstructions<T: Scalar>(state: &ModelState<T>, images: &[Vec<f32>]) -> Result<Vec<ImagePair>> {
    let c = state.config.channels;
    let s = state.config.image_size;
    let mut out = vec![];
    for chunk in images.chunks(100) {
        let data = chunk.iter().flatten().map(|&v| T::from_f64c(v as f64)).collect();
        let x = Tensor::from_vec(&[chunk.len(), c, s, s], data)?;
        let rec = reconstruct(state, &x)?;
        for (i, img) in chunk.iter().enumerate() {
            out.push((img.clone(), rec.row(i).iter().map(|v| v.as_f64() as f32).collect()));
        }
    }
    Ok(out)
}

/// Score and label of one image (channel-major, `[-1, 1]`).
pub fn detect<T: Scalar>(model: &DetectorModel, state: &ModelState<T>, image: &[f32]) -> Result<(f64, Verdict)> {
    if model.channels != state.config.channels || model.image_size != state.config.image_size {
        return Err(Error::validation("detector and model disagree on image shape"));
    }
    let pair = with_reconstructions(state, &[image.to_vec()])?.remove(0);
    let score = model.svm.score(&pair_features(&pair.0, &pair.1, model.channels, model.image_size)?);
    Ok((score, if score > 0.0 { Verdict::Adversarial } else { Verdict::Genuine }))
}
