//! Inference-time recombination. Nothing here consults labels, so subjects
//! from identities never seen in training go through the same path.
//!
//! Frontalization is plain [`recombine`] with a frontal attribute image; there
//! is no separate mechanism.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{reparameterize, NoiseScale};
use crate::networks::{LatentCode, ModelState};
use crate::tensor::{Scalar, Tensor};

/// Latent code `[f_I(x_subject) ; z]`. `z = μ` when `rng` is `None`,
/// otherwise a reparameterized draw.
pub fn latent_code<T: Scalar>(
    state: &ModelState<T>,
    x_subject: &Tensor<T>,
    x_attribute: &Tensor<T>,
    rng: Option<&mut dyn RngCore>,
) -> Result<LatentCode<T>> {
    if x_subject.shape() != x_attribute.shape() {
        return Err(Error::Shape {
            expected: x_subject.shape().to_vec(),
            actual: x_attribute.shape().to_vec(),
        });
    }
    let (f_i, _) = state.forward_identity(x_subject)?;
    let dist = state.forward_attribute(x_attribute)?;
    let z = match rng {
        None => dist.mu,
        Some(rng) => {
            let r: Vec<T> = (0..dist.mu.len())
                .map(|_| T::from_f64c(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let r = Tensor::from_vec(dist.mu.shape(), r)?;
            reparameterize(&dist.mu, &dist.log_var, &r, NoiseScale::HalfExp)?
        }
    };
    LatentCode::new(&f_i.0, &z)
}

/// `G([f_I(x_subject) ; z(x_attribute)])`, row by row.
pub fn recombine<T: Scalar>(
    state: &ModelState<T>,
    x_subject: &Tensor<T>,
    x_attribute: &Tensor<T>,
    rng: Option<&mut dyn RngCore>,
) -> Result<Tensor<T>> {
    state.generate(&latent_code(state, x_subject, x_attribute, rng)?)
}

pub fn reconstruct<T: Scalar>(state: &ModelState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    recombine(state, x, x, None)
}

pub struct Morph<T> {
    pub alphas: Vec<f64>,
    pub codes: Vec<LatentCode<T>>,
    pub frames: Vec<Tensor<T>>,
}

/// Frames for `α` evenly spaced over `[0, 1]`, with `z = α·μ₁ + (1−α)·μ₂`
/// under a fixed identity vector.
pub fn morph_attributes<T: Scalar>(
    state: &ModelState<T>,
    x_subject: &Tensor<T>,
    x_attr_1: &Tensor<T>,
    x_attr_2: &Tensor<T>,
    steps: usize,
) -> Result<Morph<T>> {
    if steps < 2 {
        return Err(Error::validation(format!("morph needs at least 2 steps, got {steps}")));
    }
    let c1 = latent_code(state, x_subject, x_attr_1, None)?;
    let c2 = latent_code(state, x_subject, x_attr_2, None)?;
    let (f_i, z1, z2) = (c1.identity(), c1.attribute(), c2.attribute());
    let mut out = Morph {
        alphas: vec![],
        codes: vec![],
        frames: vec![],
    };
    for s in 0..steps {
        let alpha = s as f64 / (steps - 1) as f64;
        let (a, b) = (T::from_f64c(alpha), T::from_f64c(1.0 - alpha));
        let mut z = z1.clone();
        for (v, w) in z.data_mut().iter_mut().zip(z2.data()) {
            *v = a * *v + b * *w;
        }
        let code = LatentCode::new(&f_i, &z)?;
        out.frames.push(state.generate(&code)?);
        out.codes.push(code);
        out.alphas.push(alpha);
    }
    Ok(out)
}

/// Grid of recombinations, subjects as rows and attributes as columns, as
/// channel-major tiles ready for `image_io::save_mosaic`.
pub fn recombination_grid<T: Scalar>(
    state: &ModelState<T>,
    subjects: &Tensor<T>,
    attributes: &Tensor<T>,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let (ns, na) = (subjects.rows(), attributes.rows());
    let mut grid = vec![vec![]; ns];
    for j in 0..na {
        let xa = attributes.gather_rows(&vec![j; ns]);
        let out = recombine(state, subjects, &xa, None)?;
        for (i, row) in grid.iter_mut().enumerate() {
            row.push(out.row(i).iter().map(|v| v.as_f64() as f32).collect());
        }
    }
    Ok(grid)
}
