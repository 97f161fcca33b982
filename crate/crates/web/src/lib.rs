//! wasm-bindgen surface for `www/index.html`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tia_core::autodiff::Tensor;
use tia_core::losses::{self, MeasureKind, Task};
use tia_core::toy2d::{run_toy2d, Toy2dConfig};

fn matrix(values: &[f64], cols: usize) -> Result<Tensor, String> {
    if cols == 0 || !values.len().is_multiple_of(cols) {
        return Err(format!("{} values do not fill rows of {cols}", values.len()));
    }
    Tensor::new(vec![values.len() / cols, cols], values.to_vec()).map_err(|e| e.to_string())
}

/// Classification inconsistency of a row-major `N x cols` matrix whose
/// rows are the classifiers' probability vectors.
pub fn cls_value(probs: &[f64], cols: usize) -> Result<f64, String> {
    losses::cls_inconsistency(&matrix(probs, cols)?).map_err(|e| e.to_string())
}

/// Dispersion of `M` boxes (row-major `M x 4`) under `sd`, `mad` or `variance`.
pub fn loc_value(boxes: &[f64], measure: &str) -> Result<f64, String> {
    let kind = match measure {
        "sd" => MeasureKind::Sd,
        "mad" => MeasureKind::Mad,
        "variance" => MeasureKind::Variance,
        other => return Err(format!("unknown dispersion measure `{other}`")),
    };
    let m = matrix(boxes, 4)?;
    let heads: Vec<Tensor> = (0..m.shape()[0])
        .map(|i| Tensor::new(vec![1, 4], m.row(i).to_vec()).expect("1x4"))
        .collect();
    if heads.len() < 2 {
        return Err("need at least 2 boxes".into());
    }
    losses::measure_value(kind, Task::Localization, &heads).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct ToyView {
    pub resolution: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Row-major grid, `y` outer.
    pub primary: Vec<f64>,
    /// Spread (max - min) of the auxiliary class-1 probabilities per grid point.
    pub spread: Vec<f64>,
    pub samples: Vec<ToySample>,
}

#[derive(Debug, Serialize)]
pub struct ToySample {
    pub target: bool,
    pub x: [f64; 2],
    pub label: usize,
}

pub fn toy_view(seed: u64, iterations: usize, aux_classifiers: usize, resolution: usize) -> Result<ToyView, String> {
    let cfg = Toy2dConfig {
        seed,
        iterations,
        aux_classifiers,
        resolution,
        ..Toy2dConfig::default()
    };
    let r = run_toy2d(&cfg).map_err(|e| e.to_string())?;
    let grid: Vec<_> = r.points.iter().filter(|p| p.kind == "grid").collect();
    let first = grid.first().ok_or("empty grid")?.x;
    let last = grid.last().ok_or("empty grid")?.x;
    let spread = grid
        .iter()
        .map(|p| {
            let hi = p.aux.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = p.aux.iter().cloned().fold(f64::INFINITY, f64::min);
            if p.aux.is_empty() {
                0.0
            } else {
                hi - lo
            }
        })
        .collect();
    Ok(ToyView {
        resolution,
        lo: first,
        hi: last,
        primary: grid.iter().map(|p| p.primary).collect(),
        spread,
        samples: r
            .points
            .iter()
            .filter(|p| p.kind != "grid")
            .map(|p| ToySample {
                target: p.kind == "target",
                x: p.x,
                label: p.label.unwrap_or(0),
            })
            .collect(),
    })
}

#[wasm_bindgen]
pub fn cls_inconsistency(probs: &[f64], cols: usize) -> Result<f64, JsError> {
    cls_value(probs, cols).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn loc_dispersion(boxes: &[f64], measure: &str) -> Result<f64, JsError> {
    loc_value(boxes, measure).map_err(|e| JsError::new(&e))
}

/// Trains the toy model and returns a JSON [`ToyView`].
#[wasm_bindgen]
pub fn toy2d(seed: u32, iterations: u32, aux_classifiers: u32, resolution: u32) -> Result<String, JsError> {
    let view = toy_view(seed as u64, iterations as usize, aux_classifiers as usize, resolution as usize)
        .map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}
