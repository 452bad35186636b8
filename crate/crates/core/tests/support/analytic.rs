//! Closed-form loss and kernel values.

use lmdis::geometry::{render_gaussian_maps, Frame, RenderMode, Width};
use lmdis::losses::{reconstruction_loss, separation_loss};
use ndarray::{Array3, Array4};
use std::f64::consts::{E, TAU};

pub const TOLERANCE: f64 = 1e-6;

pub struct Value {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

impl Value {
    pub fn ok(&self) -> bool {
        (self.got - self.want).abs() <= TOLERANCE
    }
}

/// Two landmarks `√2·σ_sep` apart: both ordered pairs contribute `e⁻¹`.
pub fn separation_at_sqrt2_sigma() -> Value {
    let s = 0.06;
    let lm = Array3::from_shape_vec((1, 2, 2), vec![0.3, 0.4, 0.3 + s, 0.4 + s]).unwrap();
    Value { name: "separation loss at sqrt(2) sigma_sep", got: separation_loss(lm.view(), s).0, want: 2.0 / E }
}

/// A unit-width decoder Gaussian centred on a pixel.
pub fn decoder_peak() -> Value {
    let lm = Array3::from_shape_vec((1, 1, 2), vec![4.0, 5.0]).unwrap();
    let maps = render_gaussian_maps(lm.view(), Width::Std(1.0f64), (9, 7), RenderMode::Decoder, Frame::Pixel).unwrap();
    Value { name: "decoder gaussian peak at sigma 1", got: maps.data[[0, 0, 4, 3]], want: 1.0 / TAU }
}

/// Reconstruction NLL with zero residual and `σ = 0.05`.
pub fn reconstruction_constant() -> Value {
    let img = Array4::<f64>::from_elem((2, 3, 5, 5), 0.37);
    let got = reconstruction_loss(img.view(), img.view(), 0.05).unwrap().0;
    Value { name: "reconstruction loss at zero residual", got, want: (TAU * 0.0025).ln() }
}

pub fn all() -> Vec<Value> {
    vec![separation_at_sqrt2_sigma(), decoder_peak(), reconstruction_constant()]
}
