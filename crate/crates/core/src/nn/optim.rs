//! First-order optimizers operating on flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Anything exposing its trainable tensors as a stable, ordered list of slices.
pub trait Parameters<T> {
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;
    /// Same structure with every parameter zeroed; used as a gradient buffer.
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn scale(&mut self, factor: T)
    where
        T: Scalar,
    {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn add_assign_from(&mut self, other: &Self)
    where
        T: Scalar,
        Self: Sized,
    {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: T) {
        let grads = grads.param_slices();
        let mut params = params.param_slices_mut();
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: T, beta2: T) -> Self {
        Adam {
            beta1,
            beta2,
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: T) {
        let grads = grads.param_slices();
        let mut params = params.param_slices_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
