//! Browser demo: generate a synthetic pair, degrade the visible image and
//! score candidate fusions against the clean sources.
//!
//! The logic lives in [`DemoState`], which is plain Rust and tested natively;
//! [`Demo`] is the thin JavaScript-facing wrapper.

use dreamif_core::dataio::{synth_pairs, ImagePair};
use dreamif_core::degradation::{self, DegradationKind, DegradationSpec};
use dreamif_core::imaging::{elementwise_max, Image};
use dreamif_core::metrics::evaluate_pair;
use wasm_bindgen::prelude::*;

/// Largest side accepted from the page; metrics cost grows with area.
pub const MAX_SIZE: usize = 256;

/// Interleaved 8-bit RGBA, the layout of `ImageData`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let rgb = img.to_rgb();
    let n = rgb.height() * rgb.width();
    let mut out = Vec::with_capacity(4 * n);
    for p in 0..n {
        for c in 0..3 {
            out.push((rgb.plane(c)[p] * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

#[derive(Debug, Clone)]
pub struct DemoState {
    pair: ImagePair,
    degraded: Image,
}

impl DemoState {
    pub fn new(size: usize, seed: u64) -> Result<Self, String> {
        if size > MAX_SIZE {
            return Err(format!("size {size} exceeds {MAX_SIZE}"));
        }
        let pair = synth_pairs(1, size, seed).map_err(|e| e.to_string())?.remove(0).pair;
        Ok(DemoState {
            degraded: pair.vis.clone(),
            pair,
        })
    }

    pub fn pair(&self) -> &ImagePair {
        &self.pair
    }

    pub fn degraded(&self) -> &Image {
        &self.degraded
    }

    /// Replaces the degraded copy of the visible image.
    pub fn degrade(&mut self, kind: &str, sigma: f64, lam: f64, eps: f64, seed: u64) -> Result<&Image, String> {
        let kind: DegradationKind = kind.parse().map_err(|e: dreamif_core::Error| e.to_string())?;
        let spec = DegradationSpec {
            kind,
            sigma,
            lam,
            eps,
            seed,
        };
        self.degraded = degradation::apply(&self.pair.vis, &spec).map_err(|e| e.to_string())?;
        Ok(&self.degraded)
    }

    /// A candidate fused image: `degraded` (the degraded visible input as-is),
    /// `max` (pixelwise maximum of the clean sources) or `mean`.
    pub fn candidate(&self, which: &str) -> Result<Image, String> {
        let (v, i) = (&self.pair.vis, &self.pair.ir);
        match which {
            "degraded" => Ok(self.degraded.clone()),
            "max" => elementwise_max(v, i).map_err(|e| e.to_string()),
            "mean" => {
                let data = v.data().iter().zip(i.data()).map(|(a, b)| 0.5 * (a + b)).collect();
                Image::new(3, v.height(), v.width(), data).map_err(|e| e.to_string())
            }
            other => Err(format!("unknown candidate {other:?}; expected degraded, max or mean")),
        }
    }

    /// Metric report of a candidate against the clean pair, as JSON.
    pub fn metrics_json(&self, which: &str) -> Result<String, String> {
        let f = self.candidate(which)?;
        let report = evaluate_pair(&f, &self.pair.vis, &self.pair.ir).map_err(|e| e.to_string())?;
        serde_json::to_string(&report).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u32) -> Result<Demo, JsError> {
        let state = DemoState::new(size as usize, seed as u64).map_err(|e| JsError::new(&e))?;
        Ok(Demo { state })
    }

    pub fn size(&self) -> u32 {
        self.state.pair.width() as u32
    }

    pub fn visible_rgba(&self) -> Vec<u8> {
        to_rgba(&self.state.pair.vis)
    }

    pub fn infrared_rgba(&self) -> Vec<u8> {
        to_rgba(&self.state.pair.ir)
    }

    pub fn degrade(&mut self, kind: &str, sigma: f64, lam: f64, eps: f64, seed: u32) -> Result<Vec<u8>, JsError> {
        let img = self
            .state
            .degrade(kind, sigma, lam, eps, seed as u64)
            .map_err(|e| JsError::new(&e))?;
        Ok(to_rgba(img))
    }

    pub fn candidate_rgba(&self, which: &str) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.state.candidate(which).map_err(|e| JsError::new(&e))?))
    }

    pub fn metrics(&self, which: &str) -> Result<String, JsError> {
        self.state.metrics_json(which).map_err(|e| JsError::new(&e))
    }
}
