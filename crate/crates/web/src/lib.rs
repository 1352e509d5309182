//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as row-major RGBA bytes ready for
//! `ImageData`. Every binding has a plain-Rust counterpart returning
//! [`dauhst::Result`] so the logic is testable off the browser.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use dauhst::autodiff::{Tape, Tensor};
use dauhst::cassi::{shift_cube, unshift_cube, HsiCube, Mask, Measurement, SensingOperator};
use dauhst::dauf::{adjoint_baseline, unfold_with_params, StageParams};
use dauhst::hst::{shuffle_transpose, window_partition};
use dauhst::metrics::psnr;
use dauhst::train::synth_dataset;
use dauhst::{Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grey levels scaled so `max` maps to white; negative values clamp to
/// black.
fn grey_rgba(values: &[f64], max: f64) -> Vec<u8> {
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    values
        .iter()
        .flat_map(|&v| {
            let g = (v * scale).clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn band_rgba(cube: &HsiCube, band: usize) -> Result<Vec<u8>> {
    if band >= cube.bands() {
        return Err(Error::InvalidArgument(format!(
            "band {band} out of range for {} bands",
            cube.bands()
        )));
    }
    Ok(grey_rgba(&cube.band(band), 1.0))
}

/// 3×3 mean per band with edge replication.
fn box_blur(x: &HsiCube) -> HsiCube {
    let (h, w, _) = x.dims();
    HsiCube::from_fn(h, w, x.bands(), |i, j, b| {
        let mut acc = 0.0;
        for di in [-1i64, 0, 1] {
            for dj in [-1i64, 0, 1] {
                let r = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                let c = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                acc += x.get(r, c, b);
            }
        }
        acc / 9.0
    })
}

/// A synthetic scene, its coded aperture and snapshot, plus the latest
/// reconstruction.
#[wasm_bindgen]
pub struct Demo {
    scene: HsiCube,
    op: SensingOperator,
    y: Measurement,
    recon: HsiCube,
}

impl Demo {
    pub fn build(size: usize, bands: usize, shift: usize, density: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::InvalidArgument("mask density must lie in [0, 1]".into()));
        }
        let scene = synth_dataset(1, size, size, bands, seed)?.remove(0);
        let mask = Mask::random_binary(size, size, density, seed ^ 0x6d61_736b);
        let op = SensingOperator::new(mask, bands, shift)?;
        let y = op.measure(&scene)?;
        let recon = adjoint_baseline(&y, &op)?;
        Ok(Self { scene, op, y, recon })
    }

    /// Alternates the closed-form projection with penalty `alpha` and a
    /// blend `z = (1 − s)·x + s·blur(x)` for `iterations` rounds, starting
    /// from the adjoint baseline. Returns the PSNR of the result.
    pub fn run_projection(&mut self, alpha: f64, smoothing: f64, iterations: usize) -> Result<f64> {
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument("smoothing must lie in [0, 1]".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("α must be positive, got {alpha}")));
        }
        let z0 = shift_cube(&adjoint_baseline(&self.y, &self.op)?, self.op.shift());
        if iterations == 0 {
            self.recon = unshift_cube(&z0, self.op.shift(), self.op.width())?;
            return psnr(&self.recon, &self.scene, 1.0);
        }
        let params = StageParams::new(vec![alpha; iterations], vec![1.0; iterations])?;
        let states = unfold_with_params(&self.y, &self.op, z0, &params, |x, _| {
            let blurred = box_blur(x);
            let mut z = x.clone();
            for (v, b) in z.data_mut().iter_mut().zip(blurred.data()) {
                *v = (1.0 - smoothing) * *v + smoothing * b;
            }
            Ok(z)
        })?;
        let last = &states[states.len() - 1].z;
        self.recon = unshift_cube(last, self.op.shift(), self.op.width())?;
        psnr(&self.recon, &self.scene, 1.0)
    }

    pub fn baseline(&self) -> Result<f64> {
        psnr(&adjoint_baseline(&self.y, &self.op)?, &self.scene, 1.0)
    }

    pub fn reconstruction(&self) -> &HsiCube {
        &self.recon
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, bands: usize, shift: usize, density: f64, seed: u32) -> Result<Demo, JsError> {
        Self::build(size, bands, shift, density, seed.into()).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.scene.height()
    }

    pub fn bands(&self) -> usize {
        self.scene.bands()
    }

    pub fn measurement_width(&self) -> usize {
        self.y.width()
    }

    pub fn scene_band(&self, band: usize) -> Result<Vec<u8>, JsError> {
        band_rgba(&self.scene, band).map_err(js)
    }

    pub fn reconstruction_band(&self, band: usize) -> Result<Vec<u8>, JsError> {
        band_rgba(&self.recon, band).map_err(js)
    }

    pub fn mask_image(&self) -> Vec<u8> {
        grey_rgba(self.op.mask().data(), 1.0)
    }

    pub fn measurement_image(&self) -> Vec<u8> {
        grey_rgba(self.y.data(), self.y.max())
    }

    pub fn reconstruct(&mut self, alpha: f64, smoothing: f64, iterations: usize) -> Result<f64, JsError> {
        self.run_projection(alpha, smoothing, iterations).map_err(js)
    }

    pub fn baseline_psnr(&self) -> Result<f64, JsError> {
        self.baseline().map_err(js)
    }
}

/// Flat pixel indices sharing an attention group with `(row, col)` on a
/// `size × size` map with `window × window` windows: the local window and
/// the shuffled group holding one pixel from every window.
pub fn group_members(size: usize, window: usize, row: usize, col: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if row >= size || col >= size {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) is outside {size}x{size}"
        )));
    }
    let ids: Vec<f64> = (0..size * size).map(|i| i as f64).collect();
    let tape = Tape::new();
    let parts = window_partition(tape.constant(Tensor::new(vec![size, size, 1], ids)?), window)?;
    let shuffled = shuffle_transpose(parts)?;
    let (parts, shuffled) = (parts.value(), shuffled.value());
    let per_window = window * window;
    let target = (row * size + col) as f64;
    let at = parts
        .data()
        .iter()
        .position(|&v| v == target)
        .ok_or_else(|| Error::Internal("pixel missing from its partition".into()))?;
    let (g, l) = (at / per_window, at % per_window);
    let groups = parts.len() / per_window;
    let local = parts.data()[g * per_window..(g + 1) * per_window]
        .iter()
        .map(|&v| v as usize)
        .collect();
    let nonlocal = shuffled.data()[l * groups..(l + 1) * groups]
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok((local, nonlocal))
}

/// RGBA map of [`group_members`]: local window red, shuffled group blue,
/// the chosen pixel (a member of both) white.
#[wasm_bindgen]
pub fn attention_groups(size: usize, window: usize, row: usize, col: usize) -> Result<Vec<u8>, JsError> {
    let (local, nonlocal) = group_members(size, window, row, col).map_err(js)?;
    let mut rgba: Vec<u8> = (0..size * size).flat_map(|_| [40, 40, 40, 255]).collect();
    for i in local {
        rgba[4 * i] = 230;
    }
    for i in nonlocal {
        rgba[4 * i + 2] = 230;
    }
    let me = 4 * (row * size + col);
    rgba[me..me + 3].fill(255);
    Ok(rgba)
}
