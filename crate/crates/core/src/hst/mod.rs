//! Half-Shuffle Transformer: a three-level U-shaped denoiser built from
//! half-shuffle attention blocks (HSAB).
//!
//! Level `l` runs at `1/2^l` resolution with `C·2^l` channels and `h·2^l`
//! heads, so the head dimension `C/(2h)` is the same everywhere.

pub mod attention;
pub mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, ParamStore, Params, Tape, Tensor, Var};
use crate::cassi::HsiCube;
use crate::error::{shape_err, Error, Result};
use crate::nn;

pub use attention::{
    attention_branch, half_split, hs_msa, local_branch, nonlocal_branch, qkv_project, shuffle_transpose,
    unshuffle, window_partition, window_reverse, HsMsaWeights,
};

pub const LEVELS: usize = 3;
pub const FFN_EXPANSION: usize = 4;
const POS_INIT_STD: f64 = 0.02;
const OUTPUT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HstConfig {
    /// Spectral bands in and out.
    pub bands: usize,
    /// Level-0 channel count `C`.
    pub channels: usize,
    /// Window side `M`.
    pub window: usize,
    /// Level-0 head count.
    pub heads: usize,
    /// Unpadded input height.
    pub height: usize,
    /// Unpadded input width (the sheared width `Ŵ`).
    pub width: usize,
}

impl HstConfig {
    pub fn new(
        bands: usize,
        channels: usize,
        window: usize,
        heads: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let cfg = Self {
            bands,
            channels,
            window,
            heads,
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if [
            self.bands,
            self.channels,
            self.window,
            self.heads,
            self.height,
            self.width,
        ]
        .contains(&0)
        {
            return bad(format!("HST dimensions must be positive: {self:?}"));
        }
        if !self.channels.is_multiple_of(2) {
            return bad(format!("channel count must be even, got {}", self.channels));
        }
        if !(self.channels / 2).is_multiple_of(self.heads) {
            return bad(format!(
                "C/2 = {} is not divisible by {} heads",
                self.channels / 2,
                self.heads
            ));
        }
        let (ph, pw) = self.padded_dims();
        if ph - self.height >= self.height || pw - self.width >= self.width {
            return Err(shape_err(
                "hst",
                format!(
                    "{}x{} cannot be reflect-padded to {ph}x{pw} (multiple of 4·M = {})",
                    self.height,
                    self.width,
                    4 * self.window
                ),
            ));
        }
        Ok(())
    }

    /// Least multiples of `4·M` covering the input.
    pub fn padded_dims(&self) -> (usize, usize) {
        let q = 4 * self.window;
        (self.height.div_ceil(q) * q, self.width.div_ceil(q) * q)
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    pub fn level_heads(&self, level: usize) -> usize {
        self.heads << level
    }

    pub fn head_dim(&self) -> usize {
        self.channels / (2 * self.heads)
    }

    /// Number of windows (the non-local attention length) at `level`.
    pub fn level_groups(&self, level: usize) -> usize {
        let (ph, pw) = self.padded_dims();
        let m = self.window << level;
        (ph / m) * (pw / m)
    }
}

fn block_names(level: usize) -> &'static [&'static str] {
    match level {
        0 | 1 => &["enc", "dec"],
        _ => &["bottleneck"],
    }
}

fn init_hsab<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &HstConfig,
    level: usize,
    rng: &mut R,
) -> Result<()> {
    let c = cfg.level_channels(level);
    let h = cfg.level_heads(level);
    let l = cfg.window * cfg.window;
    let g = cfg.level_groups(level);
    let half = c / 2;
    nn::init_layer_norm(store, &format!("{prefix}_norm1"), c)?;
    nn::init_layer_norm(store, &format!("{prefix}_norm2"), c)?;
    let msa = format!("{prefix}_msa");
    let proj_std = (1.0 / c as f64).sqrt();
    for name in ["wq", "wk", "wv"] {
        store.insert(format!("{msa}/{name}"), Tensor::randn(&[c, c], proj_std, rng))?;
    }
    store.insert(
        format!("{msa}/pos_local"),
        Tensor::randn(&[h, l, l], POS_INIT_STD, rng),
    )?;
    store.insert(
        format!("{msa}/pos_nonlocal"),
        Tensor::randn(&[h, g, g], POS_INIT_STD, rng),
    )?;
    let out_std = (1.0 / half as f64).sqrt();
    for name in ["w_local", "w_nonlocal"] {
        store.insert(format!("{msa}/{name}"), Tensor::randn(&[half, c], out_std, rng))?;
    }
    nn::init_conv(
        store,
        &format!("{prefix}_ffn/expand"),
        1,
        c,
        FFN_EXPANSION * c,
        true,
        1.0,
        rng,
    )?;
    nn::init_conv(
        store,
        &format!("{prefix}_ffn/project"),
        1,
        FFN_EXPANSION * c,
        c,
        true,
        1.0,
        rng,
    )?;
    Ok(())
}

/// Registers every HST weight under `prefix` (e.g. `stage0`).
pub fn init_hst<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &HstConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let n = cfg.bands;
    nn::init_conv(
        store,
        &format!("{prefix}/level0/input_conv"),
        3,
        n + 1,
        c,
        true,
        1.0,
        rng,
    )?;
    for level in 0..LEVELS {
        for block in block_names(level) {
            init_hsab(store, &format!("{prefix}/level{level}/{block}"), cfg, level, rng)?;
        }
    }
    for level in 0..LEVELS - 1 {
        let cl = cfg.level_channels(level);
        let lp = format!("{prefix}/level{level}");
        nn::init_conv(store, &format!("{lp}/down"), 4, cl, 2 * cl, false, 1.0, rng)?;
        nn::init_conv(store, &format!("{lp}/up"), 2, 2 * cl, cl, true, 1.0, rng)?;
        nn::init_conv(store, &format!("{lp}/fuse"), 1, 2 * cl, cl, false, 1.0, rng)?;
    }
    nn::init_conv(
        store,
        &format!("{prefix}/level0/output_conv"),
        3,
        c,
        n,
        true,
        OUTPUT_GAIN,
        rng,
    )?;
    Ok(())
}

/// `X' = X + HS-MSA(LN(X))`, `X'' = X' + FFN(LN(X'))`.
pub fn hsab_forward<'t>(
    p: &Params<'_, 't>,
    prefix: &str,
    x: Var<'t>,
    heads: usize,
    window: usize,
) -> Result<Var<'t>> {
    let w = HsMsaWeights::load(p, &format!("{prefix}_msa"))?;
    let normed = nn::layer_norm(p, &format!("{prefix}_norm1"), x)?;
    let x1 = x.add(hs_msa(normed, &w, heads, window)?)?;
    let normed = nn::layer_norm(p, &format!("{prefix}_norm2"), x1)?;
    let hidden = nn::conv(p, &format!("{prefix}_ffn/expand"), normed, 1, 0)?.gelu()?;
    x1.add(nn::conv(p, &format!("{prefix}_ffn/project"), hidden, 1, 0)?)
}

/// Denoises a sheared cube `x` of shape `(H, Ŵ, N)` at noise level `β`
/// (a one-element variable); returns `x + R`.
pub fn hst_denoise_on_tape<'t>(
    p: &Params<'_, 't>,
    prefix: &str,
    x: Var<'t>,
    beta: Var<'t>,
    cfg: &HstConfig,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape != [cfg.height, cfg.width, cfg.bands] {
        return Err(shape_err(
            "hst_denoise",
            format!(
                "input {shape:?} does not match the configured {}x{}x{}",
                cfg.height, cfg.width, cfg.bands
            ),
        ));
    }
    if beta.value().len() != 1 {
        return Err(shape_err("hst_denoise", "β must be a single value"));
    }
    let tape = x.tape();
    let (ph, pw) = cfg.padded_dims();
    let (h, w) = (cfg.height, cfg.width);
    let xp = x.reflect_pad((0, ph - h, 0, pw - w))?;
    let plane = tape
        .constant(Tensor::ones(&[ph * pw, 1]))
        .matmul(beta.reshape(&[1, 1])?)?
        .reshape(&[ph, pw, 1])?;
    let m = cfg.window;
    let lvl = |l: usize| format!("{prefix}/level{l}");

    let x0 = nn::conv(
        p,
        &format!("{}/input_conv", lvl(0)),
        concat(&[xp, plane], 2)?,
        1,
        1,
    )?;
    let e0 = hsab_forward(p, &format!("{}/enc", lvl(0)), x0, cfg.level_heads(0), m)?;
    let d0 = nn::conv(p, &format!("{}/down", lvl(0)), e0, 2, 1)?;
    let e1 = hsab_forward(p, &format!("{}/enc", lvl(1)), d0, cfg.level_heads(1), m)?;
    let d1 = nn::conv(p, &format!("{}/down", lvl(1)), e1, 2, 1)?;
    let b = hsab_forward(p, &format!("{}/bottleneck", lvl(2)), d1, cfg.level_heads(2), m)?;

    let u1 = nn::conv_transpose(p, &format!("{}/up", lvl(1)), b, 2, 0)?;
    let f1 = nn::conv(p, &format!("{}/fuse", lvl(1)), concat(&[u1, e1], 2)?, 1, 0)?;
    let g1 = hsab_forward(p, &format!("{}/dec", lvl(1)), f1, cfg.level_heads(1), m)?;
    let u0 = nn::conv_transpose(p, &format!("{}/up", lvl(0)), g1, 2, 0)?;
    let f0 = nn::conv(p, &format!("{}/fuse", lvl(0)), concat(&[u0, e0], 2)?, 1, 0)?;
    let g0 = hsab_forward(p, &format!("{}/dec", lvl(0)), f0, cfg.level_heads(0), m)?;

    let r = nn::conv(p, &format!("{}/output_conv", lvl(0)), g0, 1, 1)?
        .narrow(0, 0, h)?
        .narrow(1, 0, w)?;
    x.add(r)
}

/// Plain-value wrapper around [`hst_denoise_on_tape`].
pub fn hst_denoise(
    x: &HsiCube,
    beta: f64,
    store: &ParamStore,
    prefix: &str,
    cfg: &HstConfig,
) -> Result<HsiCube> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise level β must be positive, got {beta}"
        )));
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.constant(x.to_tensor());
    let bv = tape.constant(Tensor::scalar(beta));
    let out = hst_denoise_on_tape(&p, prefix, xv, bv, cfg)?;
    HsiCube::from_tensor(&out.value())
}
