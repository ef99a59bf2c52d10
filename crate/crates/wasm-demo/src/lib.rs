//! WebAssembly exports for `www/index.html`. Every image is returned as
//! row-major RGBA bytes ready for `ImageData`.

pub mod render;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub fn masked_slice(side: usize, patch: usize, ratio: f64, seed: u32, class: u32, z: usize) -> Result<Vec<u8>, JsError> {
    let v = render::demo_volume(side, seed as u64, class).map_err(js)?;
    render::masked_slice(&v, patch, ratio, seed as u64, z).map_err(js)
}

#[wasm_bindgen]
pub fn edge_slice(side: usize, seed: u32, class: u32, z: usize) -> Result<Vec<u8>, JsError> {
    let v = render::demo_volume(side, seed as u64, class).map_err(js)?;
    render::edge_slice(&v, z).map_err(js)
}

/// Interleaved learning rate and λ₁ per epoch.
#[wasm_bindgen]
pub fn schedule_curves(total: usize, warmup: usize, base_lr: f64, lambda1_init: f64) -> Result<Vec<f64>, JsError> {
    render::schedule_curves(total, warmup, base_lr, lambda1_init).map_err(js)
}
