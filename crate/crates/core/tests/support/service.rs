//! Encode/decode/morph over a real socket against the in-process decoder.

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lmdis::model::{stack_images, unstack_images, Model};
use lmdis::nn::Mode;
use lmdis::raster::Image;
use lmdis_serve::api::{DecodeRequest, EncodeRequest, EncodeResponse, ImageResponse, MorphRequest};
use lmdis_serve::{router, AppState, LoadedModel, ServeConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct RoundTrip {
    pub images: usize,
    pub decode_matches: usize,
    pub morph_matches: usize,
}

impl RoundTrip {
    pub fn ok(&self) -> bool {
        self.images > 0 && self.decode_matches == self.images && self.morph_matches == self.images
    }
}

fn reference_decode(m: &Model<f32>, img: &Image) -> Vec<u8> {
    let x = stack_images::<f32>(std::slice::from_ref(img)).unwrap();
    let (enc, _) = m.encode(x.view(), Mode::Eval).unwrap();
    let (dec, _) = m.decode(enc.landmarks.view(), enc.descriptors.as_ref().map(|d| d.view()), Mode::Eval).unwrap();
    unstack_images(dec.color.view()).remove(0).encode_png().unwrap()
}

fn post<Q: Serialize, R: DeserializeOwned>(base: &str, path: &str, body: &Q) -> R {
    ureq::post(&format!("{base}{path}")).send_json(body).unwrap().into_json().unwrap()
}

/// Starts the service on an ephemeral port with `model` and checks every
/// image: `/decode` of the unedited landmarks must equal the in-process
/// decode byte for byte, and `/morph` at `t = 0` must equal that decode.
pub fn round_trip(model: Model<f32>, images: &[Image]) -> RoundTrip {
    let reference: Vec<Vec<u8>> = images.iter().map(|im| reference_decode(&model, im)).collect();
    let state = Arc::new(AppState::new(ServeConfig::default()));
    state.set_model(LoadedModel::new(model, "acceptance"));
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(async move { axum::serve(listener, router(state)).await.unwrap() });

    let mut out = RoundTrip { images: images.len(), decode_matches: 0, morph_matches: 0 };
    let other: EncodeResponse = post(&base, "/encode", &EncodeRequest { image: B64.encode(images[0].encode_png().unwrap()) });
    for (img, want) in images.iter().zip(&reference) {
        let enc: EncodeResponse = post(&base, "/encode", &EncodeRequest { image: B64.encode(img.encode_png().unwrap()) });
        let dec: ImageResponse =
            post(&base, "/decode", &DecodeRequest { session_id: enc.session_id.clone(), landmarks: enc.landmarks.clone() });
        let dec_bytes = B64.decode(&dec.image).unwrap();
        if &dec_bytes == want {
            out.decode_matches += 1;
        }
        let morph: ImageResponse = post(
            &base,
            "/morph",
            &MorphRequest {
                session_a: enc.session_id,
                session_b: other.session_id.clone(),
                t: 0.0,
                descriptor_source: Default::default(),
            },
        );
        if B64.decode(&morph.image).unwrap() == dec_bytes {
            out.morph_matches += 1;
        }
    }
    rt.shutdown_background();
    out
}

/// Random images on the 8-bit grid, so the PNG transport is lossless.
pub fn random_images(n: usize, channels: usize, side: usize, seed: u64) -> Vec<Image> {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(Array3::from_shape_simple_fn((channels, side, side), || r.gen_range(0..=255u8) as f32 / 255.0)).unwrap())
        .collect()
}
