//! Browser bindings. Each export takes plain strings and returns a JSON
//! document for the page to render; the logic lives in [`demo`] so it can be
//! tested natively.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(result: Result<serde_json::Value, String>) -> Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// Tokens, intent, slots, BIO tags, skeleton and tree violations of one
/// seqlogical string.
#[wasm_bindgen]
pub fn explore_seqlogical(text: &str) -> Result<String, JsError> {
    js(demo::explore(text))
}

/// Trains the aligner on `corpus` (one `source ||| target` pair per line) and
/// returns both directional alignments plus the symmetrized links of pair
/// `index`.
#[wasm_bindgen]
pub fn align_pair(corpus: &str, index: usize, diagonal_tension: f64, em_iterations: usize) -> Result<String, JsError> {
    js(demo::align(corpus, index, diagonal_tension, em_iterations))
}

/// Nearest pool neighbors of a code-switched seed and the filtered
/// candidates generated from them.
#[wasm_bindgen]
pub fn match_preview(seed: &str, k: usize, beam: usize) -> Result<String, JsError> {
    js(demo::preview(seed, demo::default_pool(), k, beam))
}

/// Example pool size, for the page header.
#[wasm_bindgen]
pub fn pool_size() -> usize {
    demo::default_pool().len()
}
