//! Scalar-loop global attention used to check the windowed branches in
//! their degenerate configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{local_branch, nonlocal_branch, HsMsaWeights};
use crate::autodiff::{Tape, Tensor};
use crate::error::{shape_err, Result};

/// Multi-head softmax attention over all `T` tokens.
///
/// `q`, `k`, `v` are `(T, c)` with heads occupying consecutive `c/h`
/// channel blocks; `pos` is `(h, T, T)`. Returns `(T, c)`.
pub fn global_attention(q: &Tensor, k: &Tensor, v: &Tensor, pos: &Tensor, heads: usize) -> Result<Tensor> {
    let [t, c] = q.shape()[..] else {
        return Err(shape_err("global_attention", "q must be (T, c)"));
    };
    if k.shape() != [t, c] || v.shape() != [t, c] || pos.shape() != [heads, t, t] || c % heads != 0 {
        return Err(shape_err("global_attention", "inconsistent shapes"));
    }
    let d = c / heads;
    let (qd, kd, vd, pd) = (q.data(), k.data(), v.data(), pos.data());
    let mut out = vec![0.0; t * c];
    let mut logits = vec![0.0; t];
    for h in 0..heads {
        for i in 0..t {
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qd[i * c + h * d + e] * kd[j * c + h * d + e];
                }
                *logit = dot / (d as f64).sqrt() + pd[(h * t + i) * t + j];
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for (j, logit) in logits.iter().enumerate() {
                let a = (logit - top).exp() / denom;
                for e in 0..d {
                    out[i * c + h * d + e] += a * vd[j * c + h * d + e];
                }
            }
        }
    }
    Tensor::new(vec![t, c], out)
}

/// `(T, c) · (c, C)` by explicit loops.
pub fn project(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t, c) = (a.shape()[0], a.shape()[1]);
    let co = w.shape()[1];
    if w.shape()[0] != c {
        return Err(shape_err("project", "inner dimensions differ"));
    }
    let mut out = vec![0.0; t * co];
    for i in 0..t {
        for j in 0..co {
            out[i * co + j] = (0..c).map(|e| a.data()[i * c + e] * w.data()[e * co + j]).sum();
        }
    }
    Tensor::new(vec![t, co], out)
}

/// Which branch a degenerate-equivalence instance exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Local branch with one window covering the whole map.
    FullWindow,
    /// Non-local branch with `M = 1`.
    UnitWindow,
}

/// Runs one random tiny instance of a degenerate configuration and
/// returns the max-abs difference from [`global_attention`] followed by
/// [`project`].
pub fn degenerate_equivalence_error(kind: Degenerate, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(1..=4usize);
    let (h, w) = match kind {
        Degenerate::FullWindow => (side, side),
        Degenerate::UnitWindow => (rng.random_range(1..=4usize), side),
    };
    let heads = rng.random_range(1..=2usize);
    let c = heads * rng.random_range(1..=3usize);
    let c_out = 2 * c;
    let t = h * w;
    let m = match kind {
        Degenerate::FullWindow => side,
        Degenerate::UnitWindow => 1,
    };
    let rand = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    let (q, k, v) = (
        rand(&[t, c], &mut rng),
        rand(&[t, c], &mut rng),
        rand(&[t, c], &mut rng),
    );
    let pos = rand(&[heads, t, t], &mut rng);
    let proj = rand(&[c, c_out], &mut rng);

    let tape = Tape::new();
    let as_map = |x: &Tensor| tape.constant(x.clone().reshaped(&[h, w, c]).expect("same size"));
    let (local_pos, nonlocal_pos) = match kind {
        Degenerate::FullWindow => (pos.clone(), Tensor::zeros(&[heads, 1, 1])),
        Degenerate::UnitWindow => (Tensor::zeros(&[heads, 1, 1]), pos.clone()),
    };
    let unused = tape.constant(Tensor::zeros(&[c_out, c_out]));
    let weights = HsMsaWeights {
        wq: unused,
        wk: unused,
        wv: unused,
        pos_local: tape.constant(local_pos),
        pos_nonlocal: tape.constant(nonlocal_pos),
        w_local: tape.constant(proj.clone()),
        w_nonlocal: tape.constant(proj.clone()),
    };
    let branch = match kind {
        Degenerate::FullWindow => local_branch,
        Degenerate::UnitWindow => nonlocal_branch,
    };
    let got = branch(as_map(&q), as_map(&k), as_map(&v), &weights, heads, m)?.value();
    let want = project(&global_attention(&q, &k, &v, &pos, heads)?, &proj)?;
    Ok(got
        .data()
        .iter()
        .zip(want.data())
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs())))
}
