//! Minimal reverse-mode layer stack for the hourglass networks.
//!
//! Layers keep their parameters and gradient accumulators side by side;
//! `forward` returns an explicit cache that the matching `backward` consumes.

mod adam;
mod conv;
mod hourglass;
mod norm;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::Conv2d;
pub use hourglass::{Hourglass, HourglassCache, HourglassSpec, LevelSpec, Resample};
pub use hourglass::Block;
pub use norm::{BatchNorm, BnCache, BnStats, StatsAccumulator};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// Whether batch-norm layers use batch statistics or stored population ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization for a layer with `fan_in` inputs.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n = Normal::new(0.0, std).expect("std > 0");
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), |_| T::lit(n.sample(rng))))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over named parameters, in a stable order.
pub trait ParamVisitor<T> {
    fn visit(&mut self, name: &str, param: &mut Param<T>);
}

impl<T, F: FnMut(&str, &mut Param<T>)> ParamVisitor<T> for F {
    fn visit(&mut self, name: &str, param: &mut Param<T>) {
        self(name, param)
    }
}

#[inline]
pub(crate) fn lrelu_slope<T: Real>() -> T {
    T::lit(crate::geometry::LEAKY_SLOPE)
}
