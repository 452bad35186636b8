//! Starts the service in-process and walks through encode, edit, decode and
//! morph over HTTP.
//!
//!     cargo run --release -p lmdis-serve --example http_client -- [model.safetensors]

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lmdis::data::{Dataset, DatasetSpec};
use lmdis_serve::api::{DecodeRequest, EncodeRequest, EncodeResponse, ImageResponse, MorphRequest};
use lmdis_serve::{router, AppState, ServeConfig};
use serde_json::Value;

fn main() -> anyhow::Result<()> {
    let ckpt = std::env::args().nth(1).unwrap_or_else(|| "runs/mnist_desk/model.safetensors".into());
    let state = Arc::new(AppState::new(ServeConfig::default()));
    state.load_checkpoint(&ckpt)?;
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    rt.spawn(async move { axum::serve(listener, router(state)).await });

    let info: Value = ureq::get(&format!("{base}/model")).call()?.into_json()?;
    println!("model: {info}");

    let ds = Dataset::open(DatasetSpec::mnist(Some(3)))?;
    let encode = |i: usize| -> anyhow::Result<EncodeResponse> {
        let png = ds.get(i)?.encode_png()?;
        Ok(ureq::post(&format!("{base}/encode")).send_json(EncodeRequest { image: B64.encode(png) })?.into_json()?)
    };
    let a = encode(0)?;
    let b = encode(1)?;
    println!("session {} landmarks {:?}", a.session_id, a.landmarks);

    let mut edited = a.landmarks.clone();
    edited[0][0] = (edited[0][0] + 0.1).min(1.0);
    let dec: ImageResponse = ureq::post(&format!("{base}/decode"))
        .send_json(DecodeRequest { session_id: a.session_id.clone(), landmarks: edited })?
        .into_json()?;
    std::fs::write("edited.png", B64.decode(dec.image)?)?;

    for (i, t) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let m: ImageResponse = ureq::post(&format!("{base}/morph"))
            .send_json(MorphRequest {
                session_a: a.session_id.clone(),
                session_b: b.session_id.clone(),
                t,
                descriptor_source: Default::default(),
            })?
            .into_json()?;
        std::fs::write(format!("morph{i}.png"), B64.decode(m.image)?)?;
    }
    println!("wrote edited.png and morph0..2.png");
    Ok(())
}
