//! Request and response bodies. Images travel as base64 PNG; landmarks as
//! display coordinates in `[0, 1]²` with the origin at the top-left corner.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeRequest {
    /// Base64 PNG (any format the image decoder accepts).
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub session_id: String,
    pub landmarks: Vec<[f64; 2]>,
    /// `[height, width]` of the detection maps.
    pub map_size: [usize; 2],
    pub out_of_bounds: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub session_id: String,
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    /// Base64 PNG.
    pub image: String,
    /// Landmarks that fell outside the map.
    pub out_of_bounds: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorSource {
    #[default]
    A,
    B,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MorphRequest {
    pub session_a: String,
    pub session_b: String,
    pub t: f64,
    #[serde(default)]
    pub descriptor_source: DescriptorSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarksResponse {
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub landmarks: usize,
    pub descriptor_dim: usize,
    pub feature_dim: usize,
    pub use_descriptors: bool,
    pub image_size: [usize; 2],
    pub image_channels: usize,
    pub map_size: [usize; 2],
    pub decoder_sigmas: Vec<f64>,
    pub checkpoint_hash: String,
    pub bn_finalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Map pixel `x` (1-based) on an axis of `n` pixels to display units.
pub fn to_display(x_px: f64, n: usize) -> f64 {
    (x_px - 0.5) / n as f64
}

pub fn from_display(d: f64, n: usize) -> f64 {
    d * n as f64 + 0.5
}
