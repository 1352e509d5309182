//! Toy-scale training: synthetic scenes, dihedral augmentation, Adam with
//! cosine annealing, and an RMSE objective through the full unfolding.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::cassi::{add_shot_noise, HsiCube, Mask, Measurement, SensingOperator};
use crate::dauf::adjoint_baseline;
use crate::error::{shape_err, Error, Result};
use crate::fileio::write_atomic;
use crate::metrics::{psnr, rmse_loss, ssim};
use crate::model::{Model, ModelConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// --------------------------------------------------------------- optimizer

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for (name, g) in grads {
        if params.get(name)?.shape() != g.shape() {
            return Err(shape_err(
                "adam_step",
                format!("gradient of `{name}` has shape {:?}", g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gv;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gv * gv;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `lr_min + (lr_max − lr_min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!(
            "schedule step {step} outside 0..={total}"
        )));
    }
    let c = (PI * step as f64 / total as f64).cos();
    Ok(lr_min + (lr_max - lr_min) * (1.0 + c) / 2.0)
}

// ------------------------------------------------------------ augmentation

/// An element of the dihedral group of the square: a horizontal mirror
/// (applied first, if set) followed by quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        mirror: false,
    };

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).map(Self::from_index)
    }

    pub fn from_index(i: u8) -> Self {
        Self {
            quarter_turns: i % 4,
            mirror: i >= 4,
        }
    }

    pub fn index(self) -> u8 {
        self.quarter_turns + if self.mirror { 4 } else { 0 }
    }

    pub fn inverse(self) -> Self {
        if self.mirror {
            self
        } else {
            Self {
                quarter_turns: (4 - self.quarter_turns) % 4,
                mirror: false,
            }
        }
    }

    pub fn apply(self, cube: &HsiCube) -> Result<HsiCube> {
        let (h, w, n) = cube.dims();
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::InvalidArgument(format!(
                "quarter-turn rotation needs a square cube, got {h}x{w}"
            )));
        }
        let mut out = if self.mirror {
            HsiCube::from_fn(h, w, n, |i, j, b| cube.get(i, w - 1 - j, b))
        } else {
            cube.clone()
        };
        for _ in 0..self.quarter_turns {
            let (hh, ww, _) = out.dims();
            let src = out;
            // counter-clockwise: new (i, j) reads old (j, ww − 1 − i)
            out = HsiCube::from_fn(ww, hh, n, |i, j, b| src.get(j, ww - 1 - i, b));
        }
        Ok(out)
    }
}

/// Applies a uniformly drawn dihedral element to every band.
pub fn augment(cube: &HsiCube, seed: u64) -> Result<(HsiCube, Dihedral)> {
    let g = Dihedral::from_index(ChaCha8Rng::seed_from_u64(seed).random_range(0..8));
    Ok((g.apply(cube)?, g))
}

// ---------------------------------------------------------- synthetic data

/// Smooth random scenes: Gaussian bumps in space, each with a smooth
/// Gaussian-shaped spectrum over a flat floor, normalized to `[0, 1]`.
pub fn synth_dataset(n_scenes: usize, h: usize, w: usize, bands: usize, seed: u64) -> Result<Vec<HsiCube>> {
    if h == 0 || w == 0 || bands == 0 {
        return Err(Error::InvalidArgument("scene dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = h.max(w) as f64;
    (0..n_scenes)
        .map(|_| {
            let bumps = rng.random_range(4..=9);
            let mut data = vec![0.0; h * w * bands];
            for _ in 0..bumps {
                let (ch, cw) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
                let sigma = size * rng.random_range(0.06..0.25);
                let amp = rng.random_range(0.3..1.0);
                let centre = rng.random::<f64>() * bands as f64;
                let width = bands as f64 * rng.random_range(0.35..1.2);
                let floor = rng.random_range(0.0..0.4);
                let spectrum: Vec<f64> = (0..bands)
                    .map(|b| {
                        let d = (b as f64 - centre) / width;
                        floor + (1.0 - floor) * (-0.5 * d * d).exp()
                    })
                    .collect();
                for i in 0..h {
                    for j in 0..w {
                        let r2 = (i as f64 - ch).powi(2) + (j as f64 - cw).powi(2);
                        let s = amp * (-0.5 * r2 / (sigma * sigma)).exp();
                        let px = &mut data[(i * w + j) * bands..][..bands];
                        for (v, sp) in px.iter_mut().zip(&spectrum) {
                            *v += s * sp;
                        }
                    }
                }
            }
            let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for v in &mut data {
                *v = (*v - lo) / span;
            }
            HsiCube::new(h, w, bands, data)
        })
        .collect()
}

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to `f32` after initialization and after
    /// every optimizer step; activations stay `f64`.
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square training patch side; the model is bound to this size.
    pub patch_size: usize,
    /// Side of the synthetic scenes patches are cropped from.
    pub scene_size: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    pub shift: usize,
    pub stages: usize,
    pub channels: usize,
    pub window: usize,
    pub bands: usize,
    pub mask_density: f64,
    pub noise_bits: Option<u32>,
    pub precision: Precision,
    /// One denoiser for every stage instead of one per stage.
    pub share_denoiser_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            lr_min: 1e-6,
            epochs: 30,
            batch_size: 1,
            patch_size: 48,
            scene_size: 48,
            train_scenes: 8,
            val_scenes: 4,
            seed: 0,
            shift: 1,
            stages: 2,
            channels: 8,
            window: 4,
            bands: 8,
            mask_density: 0.5,
            noise_bits: None,
            precision: Precision::Single,
            share_denoiser_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("patch size", self.patch_size),
            ("training scenes", self.train_scenes),
        ];
        if let Some((what, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{what} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min <= lr, got {} and {}",
                self.lr_min, self.lr
            )));
        }
        if self.scene_size < self.patch_size {
            return Err(Error::InvalidArgument(format!(
                "scene size {} is smaller than the patch size {}",
                self.scene_size, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_density) {
            return Err(Error::InvalidArgument("mask density must lie in [0, 1]".into()));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(
            self.stages,
            self.channels,
            self.window,
            self.bands,
            self.patch_size,
            self.patch_size,
            self.shift,
        )?;
        cfg.share_denoiser_weights = self.share_denoiser_weights;
        Ok(cfg)
    }

    /// The fixed coded aperture used for training and evaluation.
    pub fn mask(&self) -> Mask {
        Mask::random_binary(
            self.patch_size,
            self.patch_size,
            self.mask_density,
            self.seed ^ 0x6d61_736b,
        )
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let s = self.scene_size;
        let all = synth_dataset(
            self.train_scenes + self.val_scenes,
            s,
            s,
            self.bands,
            self.seed.wrapping_add(1),
        )?;
        let (train, val) = all.split_at(self.train_scenes);
        Ok(Dataset {
            train: train.to_vec(),
            val: val
                .iter()
                .map(|c| crop(c, 0, 0, self.patch_size))
                .collect::<Result<_>>()?,
        })
    }
}

pub struct Dataset {
    pub train: Vec<HsiCube>,
    /// Held-out scenes already cropped to the patch size.
    pub val: Vec<HsiCube>,
}

fn crop(cube: &HsiCube, top: usize, left: usize, size: usize) -> Result<HsiCube> {
    let (h, w, _) = cube.dims();
    if top + size > h || left + size > w {
        return Err(shape_err(
            "crop",
            format!("{size}x{size} at ({top}, {left}) exceeds {h}x{w}"),
        ));
    }
    Ok(HsiCube::from_fn(size, size, cube.bands(), |i, j, b| {
        cube.get(top + i, left + j, b)
    }))
}

// ------------------------------------------------------------------- loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training RMSE over the epoch's batches.
    pub loss: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_baseline_psnr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub mask: Mask,
    pub log: Vec<EpochLog>,
}

/// Mean PSNR, SSIM and adjoint-baseline PSNR over `scenes`.
pub fn evaluate(model: &Model, op: &SensingOperator, scenes: &[HsiCube]) -> Result<(f64, f64, f64)> {
    if scenes.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let (mut p, mut s, mut b) = (0.0, 0.0, 0.0);
    for scene in scenes {
        let y = op.measure(scene)?;
        let (x, _) = model.reconstruct(&y, op)?;
        p += psnr(&x, scene, 1.0)?;
        s += ssim(&x, scene)?;
        b += psnr(&adjoint_baseline(&y, op)?, scene, 1.0)?;
    }
    let n = scenes.len() as f64;
    Ok((p / n, s / n, b / n))
}

/// Loss and parameter gradients for one scene.
pub fn sample_loss(
    model: &Model,
    op: &SensingOperator,
    y: &Measurement,
    truth: &HsiCube,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let trace = model.forward_on_tape(&p, y, op)?;
    let loss = rmse_loss(trace.output, tape.constant(truth.to_tensor()))?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {value}")));
    }
    Ok((value, tape.backward(loss)?.into_named()))
}

/// Trains a fresh model. When `out` is given, the checkpoint (`model.dta`,
/// `model.json`), `mask.hsc` and `metrics.jsonl` are rewritten after every
/// epoch.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let start = Instant::now();
    let mut model = Model::init(cfg.model_config()?, cfg.seed)?;
    if cfg.precision == Precision::Single {
        model.params.quantize_f32();
    }
    let mask = cfg.mask();
    let op = SensingOperator::new(mask.clone(), cfg.bands, cfg.shift)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        mask.write(&dir.join("mask.hsc"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut state = OptimizerState::new();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut jsonl = String::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)?;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let scene = &data.train[idx];
                let span = cfg.scene_size - cfg.patch_size;
                let (top, left) = (rng.random_range(0..=span), rng.random_range(0..=span));
                let patch = crop(scene, top, left, cfg.patch_size)?;
                let (patch, _) = augment(&patch, rng.random())?;
                let mut y = op.measure(&patch)?;
                if let Some(bits) = cfg.noise_bits {
                    y = add_shot_noise(&y, bits, rng.random())?;
                }
                let (l, g) = sample_loss(&model, &op, &y, &patch).map_err(|e| diagnose(e, epoch, step))?;
                batch_loss += l;
                for (name, t) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut model.params, &grads, &mut state, lr)?;
            if cfg.precision == Precision::Single {
                model.params.quantize_f32();
            }
            loss_sum += batch_loss * inv;
            step += 1;
        }
        let (val_psnr, val_ssim, val_baseline_psnr) = evaluate(&model, &op, &data.val)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr: epoch_lr,
            val_psnr,
            val_ssim,
            val_baseline_psnr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out {
            model.save(&dir.join("model.dta"))?;
            jsonl.push_str(&serde_json::to_string(&entry)?);
            jsonl.push('\n');
            write_atomic(&dir.join("metrics.jsonl"), jsonl.as_bytes())?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, mask, log })
}

fn diagnose(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {epoch}, step {step}")),
        other => other,
    }
}
