//! Half-shuffle multi-head self-attention.
//!
//! Channels are split in half. The local half attends inside `M×M` windows;
//! the non-local half is partitioned the same way and then transposed so
//! each attention group holds the token at one fixed in-window position from
//! every window.

use crate::autodiff::{Params, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Channel-wise linear maps `Q = X·W^Q`, `K = X·W^K`, `V = X·W^V` (no bias).
pub fn qkv_project<'t>(
    x: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let shape = x.shape();
    let [h, w, c] = shape[..] else {
        return Err(shape_err(
            "qkv_project",
            format!("expected (H, W, C), got {shape:?}"),
        ));
    };
    let flat = x.reshape(&[h * w, c])?;
    let proj = |wm: Var<'t>| -> Result<Var<'t>> {
        let out = flat.matmul(wm)?;
        let oc = out.shape()[1];
        out.reshape(&[h, w, oc])
    };
    Ok((proj(wq)?, proj(wk)?, proj(wv)?))
}

/// First `C/2` channels and the remaining `C/2` channels.
pub fn half_split<'t>(t: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = t.shape();
    let c = *shape.last().unwrap();
    if !c.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "half split needs an even channel count, got {c}"
        )));
    }
    let axis = shape.len() - 1;
    let parts = t.tape().split(t, axis, &[c / 2, c / 2])?;
    Ok((parts[0], parts[1]))
}

/// `(H, W, C)` → `(HW/M², M², C)`; windows and the tokens inside them are
/// both in row-major order.
pub fn window_partition<'t>(t: Var<'t>, m: usize) -> Result<Var<'t>> {
    let shape = t.shape();
    let [h, w, c] = shape[..] else {
        return Err(shape_err(
            "window_partition",
            format!("expected (H, W, C), got {shape:?}"),
        ));
    };
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(shape_err(
            "window_partition",
            format!("{h}x{w} is not divisible into {m}x{m} windows"),
        ));
    }
    t.reshape(&[h / m, m, w / m, m, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[(h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t>(t: Var<'t>, h: usize, w: usize, m: usize) -> Result<Var<'t>> {
    let shape = t.shape();
    let [n, l, c] = shape[..] else {
        return Err(shape_err(
            "window_reverse",
            format!("expected (N, M², C), got {shape:?}"),
        ));
    };
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) || n != (h / m) * (w / m) || l != m * m {
        return Err(shape_err(
            "window_reverse",
            format!("{shape:?} does not tile a {h}x{w} map with {m}x{m} windows"),
        ));
    }
    t.reshape(&[h / m, w / m, m, m, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h, w, c])
}

/// Swaps the window axis with the in-window token axis.
pub fn shuffle_transpose<'t>(t: Var<'t>) -> Result<Var<'t>> {
    if t.shape().len() != 3 {
        return Err(shape_err(
            "shuffle",
            format!("expected rank 3, got {:?}", t.shape()),
        ));
    }
    t.permute(&[1, 0, 2])
}

/// Inverse of [`shuffle_transpose`] (the same transposition).
pub fn unshuffle<'t>(t: Var<'t>) -> Result<Var<'t>> {
    shuffle_transpose(t)
}

/// `(G, L, h·d)` → `(h, G, L, d)`.
fn split_heads<'t>(t: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = t.shape();
    let (g, l, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(
            "split_heads",
            format!("{c} channels cannot form {heads} heads"),
        ));
    }
    t.reshape(&[g, l, heads, c / heads])?.permute(&[2, 0, 1, 3])
}

/// `(h, G, L, d)` → `(G, L, h·d)`.
fn merge_heads<'t>(t: Var<'t>) -> Result<Var<'t>> {
    let s = t.shape();
    let (h, g, l, d) = (s[0], s[1], s[2], s[3]);
    t.permute(&[1, 2, 0, 3])?.reshape(&[g, l, h * d])
}

/// `softmax(Q·Kᵀ/√d + P)·V` for every head and group.
///
/// `q`, `k`, `v` are `(heads, groups, L, d)`; `pos` is `(heads, L, L)` and is
/// shared by all groups of a head.
pub fn attention_branch<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
    let s = q.shape();
    let [heads, groups, l, d] = s[..] else {
        return Err(shape_err(
            "attention",
            format!("expected (h, G, L, d), got {s:?}"),
        ));
    };
    if k.shape() != s || v.shape()[..3] != s[..3] {
        return Err(shape_err(
            "attention",
            format!("q {s:?}, k {:?}, v {:?} disagree", k.shape(), v.shape()),
        ));
    }
    if pos.shape() != [heads, l, l] {
        return Err(shape_err(
            "attention",
            format!(
                "position table {:?} does not match {heads} heads over {l} tokens",
                pos.shape()
            ),
        ));
    }
    let tape = q.tape();
    let scores = q
        .matmul(k.permute(&[0, 1, 3, 2])?)?
        .scale(1.0 / (d as f64).sqrt())?;
    let ones = tape.constant(Tensor::ones(&[heads, groups, 1]));
    let bias = ones
        .matmul(pos.reshape(&[heads, 1, l * l])?)?
        .reshape(&[heads, groups, l, l])?;
    scores.add(bias)?.softmax(3)?.matmul(v)
}

/// Weights of one HS-MSA layer, looked up under `prefix`.
pub struct HsMsaWeights<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    /// `(h, M², M²)`
    pub pos_local: Var<'t>,
    /// `(h, G, G)` with `G = HW/M²`
    pub pos_nonlocal: Var<'t>,
    /// Per-head `d_h × C` projections stacked to `(C/2, C)`.
    pub w_local: Var<'t>,
    pub w_nonlocal: Var<'t>,
}

impl<'t> HsMsaWeights<'t> {
    pub fn load(p: &Params<'_, 't>, prefix: &str) -> Result<Self> {
        let v = |n: &str| p.var(&format!("{prefix}/{n}"));
        Ok(Self {
            wq: v("wq")?,
            wk: v("wk")?,
            wv: v("wv")?,
            pos_local: v("pos_local")?,
            pos_nonlocal: v("pos_nonlocal")?,
            w_local: v("w_local")?,
            w_nonlocal: v("w_nonlocal")?,
        })
    }
}

/// Projects merged head outputs `(G, L, C/2)` to `C` channels.
fn output_projection<'t>(a: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    let c_out = w.shape()[1];
    a.reshape(&[s[0] * s[1], s[2]])?
        .matmul(w)?
        .reshape(&[s[0], s[1], c_out])
}

/// Local branch on half-channel maps `(H, W, C/2)`; returns `(H, W, C)`
/// after the output projection.
pub fn local_branch<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    w: &HsMsaWeights<'t>,
    heads: usize,
    m: usize,
) -> Result<Var<'t>> {
    let s = q.shape();
    let (h, wd) = (s[0], s[1]);
    let prep = |t: Var<'t>| split_heads(window_partition(t, m)?, heads);
    let a = attention_branch(prep(q)?, prep(k)?, prep(v)?, w.pos_local)?;
    let out = output_projection(merge_heads(a)?, w.w_local)?;
    window_reverse(out, h, wd, m)
}

/// Non-local branch: windows are partitioned, shuffled so attention runs
/// across windows, then unshuffled.
pub fn nonlocal_branch<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    w: &HsMsaWeights<'t>,
    heads: usize,
    m: usize,
) -> Result<Var<'t>> {
    let s = q.shape();
    let (h, wd) = (s[0], s[1]);
    let groups = (h / m.max(1)) * (wd / m.max(1));
    let table = w.pos_nonlocal.shape();
    if table[1..] != [groups, groups] {
        return Err(shape_err(
            "hs_msa",
            format!(
                "non-local position table {table:?} is bound to a different spatial size; \
                 this {h}x{wd} map with {m}x{m} windows needs {groups}x{groups}"
            ),
        ));
    }
    let prep = |t: Var<'t>| split_heads(shuffle_transpose(window_partition(t, m)?)?, heads);
    let a = attention_branch(prep(q)?, prep(k)?, prep(v)?, w.pos_nonlocal)?;
    let a = unshuffle(merge_heads(a)?)?;
    let out = output_projection(a, w.w_nonlocal)?;
    window_reverse(out, h, wd, m)
}

/// `X_out = Σᵢ A_lⁱ W_lⁱ + Σᵢ A_nlⁱ W_nlⁱ`.
pub fn hs_msa<'t>(x: Var<'t>, w: &HsMsaWeights<'t>, heads: usize, m: usize) -> Result<Var<'t>> {
    let (q, k, v) = qkv_project(x, w.wq, w.wk, w.wv)?;
    let (ql, qn) = half_split(q)?;
    let (kl, kn) = half_split(k)?;
    let (vl, vn) = half_split(v)?;
    let local = local_branch(ql, kl, vl, w, heads, m)?;
    let nonlocal = nonlocal_branch(qn, kn, vn, w, heads, m)?;
    local.add(nonlocal)
}
