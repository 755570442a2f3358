//! Loss terms of the disentangling framework and the attribute sampler.
//!
//! Every loss is averaged over batch rows and returns its analytic gradient
//! alongside the value, so the trainer can chain it into the networks'
//! backward passes. None of these apply the reconstruction weight λ; the
//! trainer applies it exactly once when it aggregates the generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are kept this far away from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rows_as<T: Scalar>(t: &Tensor<T>) -> T {
    T::from_usize(t.rows().max(1)).expect("row count")
}

/// Mean softmax cross-entropy of integer labels. Gradient is w.r.t. the logits.
pub fn classification_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossGrad<T>> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape {
            expected: vec![labels.len(), logits.row_len()],
            actual: logits.shape().to_vec(),
        });
    }
    let k = logits.shape()[1];
    let n = rows_as(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::validation(format!("label {label} outside [0, {k})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        let g = grad.row_mut(i);
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - lse).exp();
            *gj = (p - if j == label { T::one() } else { T::zero() }) / n;
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

/// `½‖x_attr − x_out‖²` per row, averaged. Gradient is w.r.t. `x_out`.
pub fn reconstruction_loss<T: Scalar>(x_out: &Tensor<T>, x_attr: &Tensor<T>) -> Result<LossGrad<T>> {
    half_sq_distance(x_out, x_attr)
}

/// `½‖f_a − f_b‖²` per row, averaged. Gradient is w.r.t. `f_a`; the gradient
/// w.r.t. `f_b` is its negation.
pub fn feature_matching_loss<T: Scalar>(f_a: &Tensor<T>, f_b: &Tensor<T>) -> Result<LossGrad<T>> {
    half_sq_distance(f_a, f_b)
}

fn half_sq_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<LossGrad<T>> {
    same_shape(a, b)?;
    let n = rows_as(a);
    let half = T::from_f64c(0.5);
    let mut grad = Tensor::zeros(a.shape());
    let mut total = T::zero();
    for ((g, &x), &y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        total += d * d;
        *g = d / n;
    }
    Ok(LossGrad {
        value: half * total / n,
        grad,
    })
}

#[derive(Clone, Debug)]
pub struct KlGrad<T> {
    pub value: T,
    pub grad_mu: Tensor<T>,
    pub grad_log_var: Tensor<T>,
}

/// KL divergence of `N(μ, exp(ε))` from the unit Gaussian:
/// `½(μᵀμ + Σ_j (exp(ε_j) − ε_j − 1))`, averaged over rows.
pub fn kl_loss<T: Scalar>(mu: &Tensor<T>, log_var: &Tensor<T>) -> Result<KlGrad<T>> {
    same_shape(mu, log_var)?;
    let n = rows_as(mu);
    let half = T::from_f64c(0.5);
    let mut grad_mu = Tensor::zeros(mu.shape());
    let mut grad_log_var = Tensor::zeros(mu.shape());
    let mut total = T::zero();
    for (i, (&m, &e)) in mu.data().iter().zip(log_var.data()).enumerate() {
        total += m * m + e.exp() - e - T::one();
        grad_mu.data_mut()[i] = m / n;
        grad_log_var.data_mut()[i] = half * (e.exp() - T::one()) / n;
    }
    Ok(KlGrad {
        value: half * total / n,
        grad_mu,
        grad_log_var,
    })
}

/// How the log-variance output scales the sampling noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `z = μ + r ⊙ exp(ε/2)`: ε is a log-variance, matching the KL term.
    #[default]
    HalfExp,
    /// `z = μ + r ⊙ exp(ε)`, the sampler as literally printed.
    LiteralExp,
}

impl NoiseScale {
    fn exponent<T: Scalar>(self) -> T {
        match self {
            NoiseScale::HalfExp => T::from_f64c(0.5),
            NoiseScale::LiteralExp => T::one(),
        }
    }

    /// Standard deviation implied by a log-variance entry.
    pub fn std<T: Scalar>(self, log_var: T) -> T {
        (self.exponent::<T>() * log_var).exp()
    }

    /// `∂z/∂ε` for one element given the drawn noise `r`.
    pub fn dz_dlog_var<T: Scalar>(self, log_var: T, r: T) -> T {
        let a = self.exponent::<T>();
        r * a * (a * log_var).exp()
    }
}

/// Sample attribute vectors `z = μ + r ⊙ σ(ε)` from given standard-normal draws `r`.
pub fn reparameterize<T: Scalar>(
    mu: &Tensor<T>,
    log_var: &Tensor<T>,
    r: &Tensor<T>,
    scale: NoiseScale,
) -> Result<Tensor<T>> {
    same_shape(mu, log_var)?;
    same_shape(mu, r)?;
    let mut z = mu.clone();
    for ((zi, &e), &ri) in z.data_mut().iter_mut().zip(log_var.data()).zip(r.data()) {
        *zi += ri * scale.std(e);
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct DiscriminatorGrad<T> {
    pub value: T,
    /// Gradient w.r.t. the probabilities assigned to real images.
    pub grad_real: Tensor<T>,
    /// Gradient w.r.t. the probabilities assigned to generated images.
    pub grad_fake: Tensor<T>,
}

/// `−E[log D(x_real)] − E[log(1 − D(x_fake))]` with probabilities clamped to
/// `[1e-7, 1 − 1e-7]`. The clamped region has zero gradient.
pub fn discriminator_loss<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<DiscriminatorGrad<T>> {
    let lo = T::from_f64c(PROB_CLAMP);
    let hi = T::one() - lo;
    let clamp = |p: T| p.max(lo).min(hi);
    let inside = |p: T| p > lo && p < hi;

    let nr = rows_as(d_real);
    let nf = rows_as(d_fake);
    let mut grad_real = Tensor::zeros(d_real.shape());
    let mut grad_fake = Tensor::zeros(d_fake.shape());
    let mut real = T::zero();
    for (g, &p) in grad_real.data_mut().iter_mut().zip(d_real.data()) {
        real -= clamp(p).ln();
        if inside(p) {
            *g = -T::one() / (p * nr);
        }
    }
    let mut fake = T::zero();
    for (g, &p) in grad_fake.data_mut().iter_mut().zip(d_fake.data()) {
        fake -= (T::one() - clamp(p)).ln();
        if inside(p) {
            *g = T::one() / ((T::one() - p) * nf);
        }
    }
    Ok(DiscriminatorGrad {
        value: real / nr + fake / nf,
        grad_real,
        grad_fake,
    })
}
