//! Browser bindings for lorafuse. Every entry point takes a JSON request and
//! returns a JSON response; the logic lives in [`ops`] so it can be tested
//! natively.

pub mod ops;

use wasm_bindgen::prelude::*;

fn to_js(result: Result<String, String>) -> Result<String, JsError> {
    result.map_err(|e| JsError::new(&e))
}

/// Conflict scores and resolved updates for a set of 2-D update vectors.
#[wasm_bindgen]
pub fn explore_conflict(request: &str) -> Result<String, JsError> {
    to_js(ops::explore_conflict(request))
}

/// Hidden-unit importance and the retained set for a pruning ratio.
#[wasm_bindgen]
pub fn explore_pruning(request: &str) -> Result<String, JsError> {
    to_js(ops::explore_pruning(request))
}

/// Full pipeline run; the request is a config document.
#[wasm_bindgen]
pub fn run_pipeline(config: &str) -> Result<String, JsError> {
    to_js(ops::run_pipeline(config))
}
