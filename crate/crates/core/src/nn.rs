//! Small layer helpers over [`Params`]: each layer reads `{prefix}/weight`
//! and, when present, `{prefix}/bias`.

use rand::Rng;

use crate::autodiff::{ParamStore, Params, Tensor, Var};
use crate::error::Result;

/// Registers a `(k, k, c_in, c_out)` kernel with He-normal init, plus an
/// optional zero bias.
#[allow(clippy::too_many_arguments)]
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
    bias: bool,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    let std = gain * (2.0 / (k * k * c_in) as f64).sqrt();
    store.insert(
        format!("{prefix}/weight"),
        Tensor::randn(&[k, k, c_in, c_out], std, rng),
    )?;
    if bias {
        store.insert(format!("{prefix}/bias"), Tensor::zeros(&[c_out]))?;
    }
    Ok(())
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    let std = gain * (1.0 / fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}/weight"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
    )?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}/gamma"), Tensor::ones(&[c]))?;
    store.insert(format!("{prefix}/beta"), Tensor::zeros(&[c]))?;
    Ok(())
}

fn optional_bias<'t>(p: &Params<'_, 't>, prefix: &str) -> Result<Option<Var<'t>>> {
    let name = format!("{prefix}/bias");
    if p.store().contains(&name) {
        Ok(Some(p.var(&name)?))
    } else {
        Ok(None)
    }
}

pub fn conv<'t>(p: &Params<'_, 't>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    let w = p.var(&format!("{prefix}/weight"))?;
    x.conv2d(w, optional_bias(p, prefix)?, stride, pad)
}

pub fn conv_transpose<'t>(
    p: &Params<'_, 't>,
    prefix: &str,
    x: Var<'t>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let w = p.var(&format!("{prefix}/weight"))?;
    x.conv_transpose2d(w, optional_bias(p, prefix)?, stride, pad)
}

pub fn linear<'t>(p: &Params<'_, 't>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.var(&format!("{prefix}/weight"))?;
    let b = p.var(&format!("{prefix}/bias"))?;
    x.fully_connected(w, b)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn layer_norm<'t>(p: &Params<'_, 't>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = p.var(&format!("{prefix}/gamma"))?;
    let b = p.var(&format!("{prefix}/beta"))?;
    x.layer_norm(g, b, LAYER_NORM_EPS)
}
