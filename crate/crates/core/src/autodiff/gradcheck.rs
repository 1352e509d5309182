use super::params::{ParamStore, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{concat, PrimitiveKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        v.item().ok_or_else(|| Error::NonScalarLoss(v.shape().to_vec()))
    };

    let mut worst = 0.0_f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check`] for named parameters: every entry of every tensor in
/// `store` is perturbed in turn and compared with the gradient collected
/// by name. Parameters the loss never reads must have zero gradient.
pub fn grad_check_params<F>(f: F, store: &ParamStore, step: f64) -> Result<f64>
where
    F: for<'a, 't> Fn(&Params<'a, 't>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(&store.bind(&tape))?;
    let grads = tape.backward(out)?.into_named();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&s.bind(&tape))?.value();
        v.item().ok_or_else(|| Error::NonScalarLoss(v.shape().to_vec()))
    };

    let mut worst = 0.0_f64;
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in &names {
        let len = store.get(name)?.len();
        for j in 0..len {
            let orig = store.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads.get(name).map_or(0.0, |g| g.data()[j]);
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn weighted_sum<'t>(v: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    v.mul(v.tape().constant(weights.clone()))?.sum()
}

/// Runs [`grad_check`] on one catalog primitive with random inputs drawn
/// from `seed`, reducing the output with a random weighted sum.
pub fn check_primitive(kind: PrimitiveKind, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let (inputs, out_shape): (Vec<Tensor>, Vec<usize>) = match kind {
        PrimitiveKind::Add | PrimitiveKind::Multiply => (vec![randn(&[2, 3]), randn(&[2, 3])], vec![2, 3]),
        PrimitiveKind::Scale | PrimitiveKind::Gelu | PrimitiveKind::Softplus => (vec![randn(&[7])], vec![7]),
        PrimitiveKind::MatMul => (vec![randn(&[2, 3, 4]), randn(&[2, 4, 2])], vec![2, 3, 2]),
        PrimitiveKind::Conv2d => {
            let stride = 1 + (seed % 2) as usize;
            let out = (5 + 2 - 3) / stride + 1;
            let outw = (4 + 2 - 3) / stride + 1;
            (
                vec![randn(&[5, 4, 3]), randn(&[3, 3, 3, 2]), randn(&[2])],
                vec![out, outw, 2],
            )
        }
        PrimitiveKind::ConvTranspose2d => (
            vec![randn(&[3, 2, 2]), randn(&[2, 2, 2, 3]), randn(&[3])],
            vec![6, 4, 3],
        ),
        PrimitiveKind::FullyConnected => (vec![randn(&[3, 4]), randn(&[4, 2]), randn(&[2])], vec![3, 2]),
        PrimitiveKind::LayerNorm => (vec![randn(&[3, 5]), randn(&[5]), randn(&[5])], vec![3, 5]),
        PrimitiveKind::Softmax | PrimitiveKind::Permute => (vec![randn(&[2, 3, 4])], vec![]),
        PrimitiveKind::GlobalAvgPool => (vec![randn(&[3, 4, 2])], vec![2]),
        PrimitiveKind::Reshape => (vec![randn(&[2, 6])], vec![3, 4]),
        PrimitiveKind::Concat => (vec![randn(&[2, 3]), randn(&[2, 1])], vec![2, 4]),
        PrimitiveKind::Split => (vec![randn(&[4, 3])], vec![4, 3]),
        PrimitiveKind::Sum => (vec![randn(&[3, 2])], vec![1]),
        PrimitiveKind::Sqrt => (vec![Tensor::uniform(&[6], 0.5, 2.0, &mut rng)], vec![6]),
        PrimitiveKind::ReflectPad => (vec![randn(&[4, 5, 2])], vec![7, 9, 2]),
    };
    let axis = (seed % 3) as usize;
    let perm = [2, 0, 1];
    let out_shape = match kind {
        PrimitiveKind::Softmax => vec![2, 3, 4],
        PrimitiveKind::Permute => vec![4, 2, 3],
        _ => out_shape,
    };
    let weights = Tensor::randn(&out_shape, 1.0, &mut rng);
    let scale = rng.random_range(-2.0..2.0);
    let conv_stride = 1 + (seed % 2) as usize;
    grad_check(
        |tape, v| {
            let out = match kind {
                PrimitiveKind::Add => v[0].add(v[1])?,
                PrimitiveKind::Multiply => v[0].mul(v[1])?,
                PrimitiveKind::Scale => v[0].scale(scale)?,
                PrimitiveKind::MatMul => v[0].matmul(v[1])?,
                PrimitiveKind::Conv2d => v[0].conv2d(v[1], Some(v[2]), conv_stride, 1)?,
                PrimitiveKind::ConvTranspose2d => v[0].conv_transpose2d(v[1], Some(v[2]), 2, 0)?,
                PrimitiveKind::FullyConnected => v[0].fully_connected(v[1], v[2])?,
                PrimitiveKind::LayerNorm => v[0].layer_norm(v[1], v[2], 1e-6)?,
                PrimitiveKind::Softmax => v[0].softmax(axis)?,
                PrimitiveKind::Gelu => v[0].gelu()?,
                PrimitiveKind::GlobalAvgPool => v[0].global_avg_pool()?,
                PrimitiveKind::Reshape => v[0].reshape(&[3, 4])?,
                PrimitiveKind::Permute => v[0].permute(&perm)?,
                PrimitiveKind::Concat => concat(&[v[0], v[1]], 1)?,
                PrimitiveKind::Split => {
                    let parts = tape.split(v[0], 0, &[1, 3])?;
                    concat(&[parts[1].scale(-0.5)?, parts[0]], 0)?
                }
                PrimitiveKind::Sum => v[0].sum()?,
                PrimitiveKind::Sqrt => v[0].sqrt()?,
                PrimitiveKind::Softplus => v[0].softplus()?,
                PrimitiveKind::ReflectPad => v[0].reflect_pad((1, 2, 3, 1))?,
            };
            weighted_sum(out, &weights)
        },
        &inputs,
        step,
    )
}
