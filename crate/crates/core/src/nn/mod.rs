//! Minimal layer engine: sequential stacks with explicit backward passes.

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm, Cache, Conv2d, Layer, Linear, Mode};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Gradient buffers aligned with [`Stack::param_slices`].
pub type Grads<T> = Vec<Vec<T>>;

/// Per-layer caches recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// A named sequence of layers.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(name: impl Into<String>, layers: Vec<Layer<T>>) -> Self {
        Stack {
            name: name.into(),
            layers,
        }
    }

    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mut s = in_shape.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn forward(&self, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            let (y, c) = l.forward(h, mode);
            caches.push(c);
            h = y;
        }
        (h, Tape { caches })
    }

    /// Backpropagate `dy`. Parameter gradients are added into `grads` when
    /// given; the input gradient is returned when `need_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let offsets = self.param_offsets();
        let mut d = dy;
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let want_input = i > 0 || need_input_grad;
            let np = layer.params().len();
            let g = grads
                .as_deref_mut()
                .map(|g| &mut g[offsets[i]..offsets[i] + np]);
            match layer.backward(cache, d, g, want_input) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.params().len();
        }
        offsets
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.param_slices()
            .into_iter()
            .map(|(_, p)| vec![T::zero(); p.len()])
            .collect()
    }

    /// `(qualified name, values)` for every trainable parameter.
    pub fn param_slices(&self) -> Vec<(String, &[T])> {
        let mut out = vec![];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, p) in l.params() {
                out.push((format!("{}.{}.{}", self.name, i, n), p));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn buffer_slices(&self) -> Vec<(String, &[T])> {
        let mut out = vec![];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, b) in l.buffers() {
                out.push((format!("{}.{}.{}", self.name, i, n), b));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.buffers_mut().into_iter().map(|(_, b)| b))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|(_, p)| p.len()).sum()
    }

    /// Update normalization running statistics from a training-mode tape.
    pub fn absorb_stats(&mut self, tape: &Tape<T>) {
        for (l, c) in self.layers.iter_mut().zip(&tape.caches) {
            if let Layer::Norm(b) = l {
                let count = match c {
                    Cache::Norm { xhat, .. } => xhat.len() / b.channels,
                    _ => continue,
                };
                layers::absorb_norm_stats(b, c, count);
            }
        }
    }
}
