//! Degradation-aware unfolding.
//!
//! Each of the `K` stages alternates an exact data-fidelity projection with
//! a learned denoiser:
//!
//! ```text
//! (α, β) = E(y, Φ)
//! x_{k+1} = z_k + Φᵀ[(y − Φz_k) ⊘ (α_{k+1} + ψ)]
//! z_{k+1} = D(x_{k+1}, β_{k+1})
//! ```
//!
//! The projection is elementwise because `ΦΦᵀ = diag(ψ)`; [`oracle`] holds
//! the dense references it is checked against.

pub mod oracle;

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{concat, CustomOp, ParamStore, Params, Primitive, Tape, Tensor, Var};
use crate::cassi::{unshift_cube, HsiCube, Measurement, SensingOperator};
use crate::error::{shape_err, Error, Result};
use crate::nn;

pub use oracle::closed_form_oracle;

/// Per-stage projection penalties `α` and denoiser noise inputs `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl StageParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::InvalidArgument(format!(
                "need matching non-empty α/β lists, got {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        if let Some(v) = alpha.iter().chain(&beta).find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "stage parameters must be positive and finite, found {v}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn stages(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldConfig {
    pub stages: usize,
    pub share_denoiser_weights: bool,
}

impl UnfoldConfig {
    pub fn new(stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::InvalidArgument("stage count must be >= 1".into()));
        }
        Ok(Self {
            stages,
            share_denoiser_weights: false,
        })
    }

    /// Parameter prefix of the denoiser used at `stage`.
    pub fn denoiser_prefix(&self, stage: usize) -> String {
        let k = if self.share_denoiser_weights { 0 } else { stage };
        format!("stage{k}")
    }
}

/// Current iterate of the unfolding loop.
#[derive(Clone, Debug)]
pub struct UnfoldState {
    pub z: HsiCube,
    pub x: HsiCube,
    pub stage: usize,
}

// ----------------------------------------------------------------- estimator

pub const ESTIMATOR_PREFIX: &str = "estimator";
pub const ESTIMATOR_WIDTH: usize = 64;
pub const Z0_PREFIX: &str = "init/z0_conv";

/// Initial values `α⁽⁰⁾`, `β⁽⁰⁾` the estimator emits before training.
const INITIAL_ALPHA: f64 = 0.5;
const INITIAL_BETA: f64 = 1.0;

fn softplus_inverse(v: f64) -> f64 {
    v + (-(-v).exp()).ln_1p()
}

/// Registers the estimator weights: pointwise conv, strided 3×3 conv and
/// three fully connected layers ending in `2K` outputs.
pub fn init_estimator<R: Rng + ?Sized>(
    store: &mut ParamStore,
    bands: usize,
    stages: usize,
    rng: &mut R,
) -> Result<()> {
    let p = ESTIMATOR_PREFIX;
    let w = ESTIMATOR_WIDTH;
    nn::init_conv(store, &format!("{p}/conv_in"), 1, bands + 1, w, true, 1.0, rng)?;
    nn::init_conv(store, &format!("{p}/conv_down"), 3, w, w, true, 1.0, rng)?;
    nn::init_linear(store, &format!("{p}/fc1"), w, w, 1.0, rng)?;
    nn::init_linear(store, &format!("{p}/fc2"), w, w, 1.0, rng)?;
    nn::init_linear(store, &format!("{p}/fc3"), w, 2 * stages, 0.01, rng)?;
    let bias: Vec<f64> = (0..2 * stages)
        .map(|i| softplus_inverse(if i < stages { INITIAL_ALPHA } else { INITIAL_BETA }))
        .collect();
    store.set(&format!("{p}/fc3/bias"), Tensor::new(vec![2 * stages], bias)?)?;
    Ok(())
}

/// Number of stages an estimator in `store` was built for.
pub fn estimator_stages(store: &ParamStore) -> Result<usize> {
    let b = store.get(&format!("{ESTIMATOR_PREFIX}/fc3/bias"))?;
    Ok(b.len() / 2)
}

/// Estimator input: the max-normalized measurement as one channel followed
/// by the shifted mask stack.
fn estimator_input(y: &Measurement, op: &SensingOperator) -> Result<Tensor> {
    check_measurement(y, op)?;
    let peak = y.max();
    let norm = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let n = op.bands();
    let mut data = Vec::with_capacity(y.data().len() * (n + 1));
    for (&v, m) in y.data().iter().zip(op.mask_stack().data().chunks(n)) {
        data.push(v * norm);
        data.extend_from_slice(m);
    }
    Tensor::new(vec![y.height(), y.width(), n + 1], data)
}

fn check_measurement(y: &Measurement, op: &SensingOperator) -> Result<()> {
    if (y.height(), y.width()) != (op.height(), op.shifted_width()) {
        return Err(shape_err(
            "measurement",
            format!(
                "{}x{} does not match the {}x{} detector plane",
                y.height(),
                y.width(),
                op.height(),
                op.shifted_width()
            ),
        ));
    }
    Ok(())
}

/// Runs the estimator on a tape; returns `(α₁..α_K, β₁..β_K)` as scalar vars.
pub fn estimate_params_on_tape<'t>(
    p: &Params<'_, 't>,
    y: &Measurement,
    op: &SensingOperator,
    stages: usize,
) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    let have = estimator_stages(p.store())?;
    if have != stages {
        return Err(shape_err(
            "estimate_params",
            format!("estimator emits {have} stages, {stages} requested"),
        ));
    }
    let pre = ESTIMATOR_PREFIX;
    let tape = p.tape();
    let x = tape.constant(estimator_input(y, op)?);
    let x = nn::conv(p, &format!("{pre}/conv_in"), x, 1, 0)?.gelu()?;
    let x = nn::conv(p, &format!("{pre}/conv_down"), x, 2, 1)?.gelu()?;
    let x = x.global_avg_pool()?;
    let x = nn::linear(p, &format!("{pre}/fc1"), x)?.gelu()?;
    let x = nn::linear(p, &format!("{pre}/fc2"), x)?.gelu()?;
    let raw = nn::linear(p, &format!("{pre}/fc3"), x)?;
    let out = raw.softplus()?;
    let parts = tape.split(out, 0, &vec![1; 2 * stages])?;
    let (a, b) = parts.split_at(stages);
    Ok((a.to_vec(), b.to_vec()))
}

pub fn estimate_params(
    y: &Measurement,
    op: &SensingOperator,
    store: &ParamStore,
    stages: usize,
) -> Result<StageParams> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (a, b) = estimate_params_on_tape(&p, y, op, stages)?;
    let scalar = |v: &Var<'_>| v.value().data()[0];
    StageParams::new(a.iter().map(scalar).collect(), b.iter().map(scalar).collect())
}

// ------------------------------------------------------------------ z0

/// Registers the bias-free pointwise conv mapping `[y, …, y, Φ-stack]`
/// (`2N` channels) to the `N`-band initial estimate. The `y → band b`
/// weights start at `2/N` plus noise.
pub fn init_z0<R: Rng + ?Sized>(store: &mut ParamStore, bands: usize, rng: &mut R) -> Result<()> {
    let mut w = Tensor::randn(&[1, 1, 2 * bands, bands], 0.01, rng);
    for b in 0..bands {
        w.data_mut()[b * bands + b] += 2.0 / bands as f64;
    }
    store.insert(format!("{Z0_PREFIX}/weight"), w)
}

fn z0_input(y: &Measurement, op: &SensingOperator) -> Result<Tensor> {
    check_measurement(y, op)?;
    let n = op.bands();
    let mut data = Vec::with_capacity(y.data().len() * 2 * n);
    for (&v, m) in y.data().iter().zip(op.mask_stack().data().chunks(n)) {
        data.extend(std::iter::repeat_n(v, n));
        data.extend_from_slice(m);
    }
    Tensor::new(vec![y.height(), y.width(), 2 * n], data)
}

pub fn init_z0_on_tape<'t>(p: &Params<'_, 't>, y: &Measurement, op: &SensingOperator) -> Result<Var<'t>> {
    let x = p.tape().constant(z0_input(y, op)?);
    nn::conv(p, Z0_PREFIX, x, 1, 0)
}

/// `z₀`: the measurement replicated per band, concatenated with the mask
/// stack and mixed by a pointwise convolution.
pub fn initial_estimate(y: &Measurement, op: &SensingOperator, store: &ParamStore) -> Result<HsiCube> {
    let tape = Tape::new();
    let z = init_z0_on_tape(&store.bind(&tape), y, op)?;
    let v = z.value();
    HsiCube::from_tensor(&v)
}

// ------------------------------------------------------------- projection

/// `x = z + Φᵀ[(y − Φz) ⊘ (α + ψ)]`, the exact minimizer of
/// `‖y − Φx‖² + α‖x − z‖²`.
pub fn linear_projection(y: &Measurement, z: &HsiCube, alpha: f64, op: &SensingOperator) -> Result<HsiCube> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "projection penalty must be positive, got {alpha}"
        )));
    }
    check_measurement(y, op)?;
    let phi_z = op.forward(z)?;
    let n = op.bands();
    let mut x = z.clone();
    let stack = op.mask_stack().data();
    for (i, px) in x.data_mut().chunks_mut(n).enumerate() {
        let q = (y.data()[i] - phi_z.data()[i]) / (alpha + op.psi()[i]);
        for (v, m) in px.iter_mut().zip(&stack[i * n..(i + 1) * n]) {
            *v += m * q;
        }
    }
    Ok(x)
}

/// [`linear_projection`] as a tape operation over inputs `[z, α]`.
#[derive(Debug)]
pub struct ProjectionOp {
    y: Vec<f64>,
    stack: Vec<f64>,
    psi: Vec<f64>,
    bands: usize,
    dims: [usize; 3],
}

impl ProjectionOp {
    pub fn new(y: &Measurement, op: &SensingOperator) -> Result<Self> {
        check_measurement(y, op)?;
        Ok(Self {
            y: y.data().to_vec(),
            stack: op.mask_stack().data().to_vec(),
            psi: op.psi().to_vec(),
            bands: op.bands(),
            dims: [op.height(), op.shifted_width(), op.bands()],
        })
    }

    fn residual_terms(&self, z: &Tensor, alpha: f64) -> Vec<(f64, f64)> {
        // (r_i, α + ψ_i)
        let n = self.bands;
        z.data()
            .chunks(n)
            .zip(self.stack.chunks(n))
            .enumerate()
            .map(|(i, (zs, ms))| {
                let phi_z: f64 = zs.iter().zip(ms).map(|(a, b)| a * b).sum();
                (self.y[i] - phi_z, alpha + self.psi[i])
            })
            .collect()
    }
}

impl CustomOp for ProjectionOp {
    fn name(&self) -> &'static str {
        "linear-projection"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [z, alpha] = inputs else {
            return Err(shape_err("linear-projection", "expects inputs [z, α]"));
        };
        if z.shape() != self.dims || alpha.len() != 1 {
            return Err(shape_err(
                "linear-projection",
                format!(
                    "z {:?} / α {:?} vs operator {:?}",
                    z.shape(),
                    alpha.shape(),
                    self.dims
                ),
            ));
        }
        let a = alpha.data()[0];
        if !(a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "projection penalty must be positive, got {a}"
            )));
        }
        let n = self.bands;
        let mut out = (*z).clone();
        for (i, (r, denom)) in self.residual_terms(z, a).into_iter().enumerate() {
            let q = r / denom;
            for (v, m) in out.data_mut()[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&self.stack[i * n..(i + 1) * n])
            {
                *v += m * q;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (z, a) = (inputs[0], inputs[1].data()[0]);
        let n = self.bands;
        let mut gz = grad.clone();
        let mut ga = 0.0;
        for (i, (r, denom)) in self.residual_terms(z, a).into_iter().enumerate() {
            let inv = 1.0 / denom;
            let ms = &self.stack[i * n..(i + 1) * n];
            let u: f64 = grad.data()[i * n..(i + 1) * n]
                .iter()
                .zip(ms)
                .map(|(g, m)| g * m)
                .sum();
            for (g, m) in gz.data_mut()[i * n..(i + 1) * n].iter_mut().zip(ms) {
                *g -= m * u * inv;
            }
            ga -= u * r * inv * inv;
        }
        vec![Some(gz), Some(Tensor::scalar(ga))]
    }
}

pub fn linear_projection_on_tape<'t>(
    z: Var<'t>,
    alpha: Var<'t>,
    y: &Measurement,
    op: &SensingOperator,
) -> Result<Var<'t>> {
    let proj = ProjectionOp::new(y, op)?;
    z.tape().apply(Primitive::Custom(Rc::new(proj)), &[z, alpha])
}

/// Crops each band of a shifted cube on the tape back to `width` columns.
pub fn unshift_on_tape<'t>(z: Var<'t>, shift: usize, width: usize) -> Result<Var<'t>> {
    let shape = z.shape();
    let bands = shape[2];
    let parts = (0..bands)
        .map(|b| z.narrow(2, b, 1)?.narrow(1, shift * b, width))
        .collect::<Result<Vec<_>>>()?;
    concat(&parts, 2)
}

// ---------------------------------------------------------------- unfolding

/// A denoiser on the tape: `(params, stage, x, β) → z`.
pub type TapeDenoiser<'d> =
    dyn for<'a, 't> Fn(&Params<'a, 't>, usize, Var<'t>, Var<'t>) -> Result<Var<'t>> + 'd;

/// Everything an unfolding pass produced on the tape.
pub struct UnfoldTrace<'t> {
    /// Final estimate cropped back to `(H, W, N)`.
    pub output: Var<'t>,
    pub alpha: Vec<Var<'t>>,
    pub beta: Vec<Var<'t>>,
}

impl UnfoldTrace<'_> {
    pub fn stage_params(&self) -> Result<StageParams> {
        let scalar = |v: &Var<'_>| v.value().data()[0];
        StageParams::new(
            self.alpha.iter().map(scalar).collect(),
            self.beta.iter().map(scalar).collect(),
        )
    }
}

/// Estimator, `z₀`, then `K` projection/denoise stages, all on one tape.
pub fn run_unfolding_on_tape<'t>(
    p: &Params<'_, 't>,
    y: &Measurement,
    op: &SensingOperator,
    cfg: &UnfoldConfig,
    denoiser: &TapeDenoiser<'_>,
) -> Result<UnfoldTrace<'t>> {
    let (alpha, beta) = estimate_params_on_tape(p, y, op, cfg.stages)?;
    let mut z = init_z0_on_tape(p, y, op)?;
    for k in 0..cfg.stages {
        let x = linear_projection_on_tape(z, alpha[k], y, op)?;
        z = denoiser(p, k, x, beta[k])?;
    }
    let output = unshift_on_tape(z, op.shift(), op.width())?;
    Ok(UnfoldTrace { output, alpha, beta })
}

/// Reconstructs `(H, W, N)` from `y` and reports the estimated stage
/// parameters.
pub fn run_unfolding(
    y: &Measurement,
    op: &SensingOperator,
    store: &ParamStore,
    cfg: &UnfoldConfig,
    denoiser: &TapeDenoiser<'_>,
) -> Result<(HsiCube, StageParams)> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let trace = run_unfolding_on_tape(&p, y, op, cfg, denoiser)?;
    let out = HsiCube::from_tensor(&trace.output.value())?;
    Ok((out, trace.stage_params()?))
}

/// Iterates projection and denoising from a given `z₀` with fixed stage
/// parameters. Returns the state after every stage.
pub fn unfold_with_params(
    y: &Measurement,
    op: &SensingOperator,
    z0: HsiCube,
    params: &StageParams,
    mut denoiser: impl FnMut(&HsiCube, f64) -> Result<HsiCube>,
) -> Result<Vec<UnfoldState>> {
    let mut z = z0;
    let mut states = Vec::with_capacity(params.stages());
    for k in 0..params.stages() {
        let x = linear_projection(y, &z, params.alpha()[k], op)?;
        z = denoiser(&x, params.beta()[k])?;
        states.push(UnfoldState {
            z: z.clone(),
            x,
            stage: k + 1,
        });
    }
    Ok(states)
}

/// `Φᵀ(y ⊘ ψ)` cropped to `(H, W, N)`: the minimum-norm solution of
/// `Φx = y`, i.e. the adjoint image normalized by the number of bands
/// integrated at each detector pixel. Pixels with `ψ = 0` stay zero.
pub fn adjoint_baseline(y: &Measurement, op: &SensingOperator) -> Result<HsiCube> {
    check_measurement(y, op)?;
    let scaled: Vec<f64> = y
        .data()
        .iter()
        .zip(op.psi())
        .map(|(&v, &p)| if p > 0.0 { v / p } else { 0.0 })
        .collect();
    let back = op.adjoint(&Measurement::new(y.height(), y.width(), scaled)?)?;
    unshift_cube(&back, op.shift(), op.width())
}
