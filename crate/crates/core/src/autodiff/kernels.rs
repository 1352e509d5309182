//! Forward and backward kernels for the primitive catalog.
//!
//! Image-like tensors are laid out `(height, width, channels)` and
//! convolution kernels `(kh, kw, c_in, c_out)`.

use super::tensor::{strides, Tensor};
use crate::error::{shape_err, Error, Result};

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

// ---------------------------------------------------------------- matmul

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(grow, brow);
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(shape_err(
            "matmul",
            format!("operands must share rank >= 2, got {sa:?} and {sb:?}"),
        ));
    }
    let r = sa.len();
    if sa[..r - 2] != sb[..r - 2] {
        return Err(shape_err(
            "matmul",
            format!("batch dimensions differ: {sa:?} vs {sb:?}"),
        ));
    }
    if sa[r - 1] != sb[r - 2] {
        return Err(shape_err(
            "matmul",
            format!(
                "inner dimensions differ: {} (from {sa:?}) vs {} (from {sb:?})",
                sa[r - 1],
                sb[r - 2]
            ),
        ));
    }
    let mut out_shape = sa[..r - 2].to_vec();
    out_shape.extend([sa[r - 2], sb[r - 1]]);
    Ok(MatmulDims {
        batch: sa[..r - 2].iter().product(),
        m: sa[r - 2],
        k: sa[r - 1],
        n: sb[r - 1],
        out_shape,
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        gemm_nn(
            &a.data()[bi * d.m * d.k..][..d.m * d.k],
            &b.data()[bi * d.k * d.n..][..d.k * d.n],
            &mut out[bi * d.m * d.n..][..d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    Tensor::new(d.out_shape, out)
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = matmul_dims(a, b).expect("validated in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..d.batch {
        let gs = &g.data()[bi * d.m * d.n..][..d.m * d.n];
        let asl = &a.data()[bi * d.m * d.k..][..d.m * d.k];
        let bsl = &b.data()[bi * d.k * d.n..][..d.k * d.n];
        gemm_nt(gs, bsl, &mut ga[bi * d.m * d.k..][..d.m * d.k], d.m, d.k, d.n);
        gemm_tn(asl, gs, &mut gb[bi * d.k * d.n..][..d.k * d.n], d.m, d.k, d.n);
    }
    (
        Tensor::new(a.shape().to_vec(), ga).unwrap(),
        Tensor::new(b.shape().to_vec(), gb).unwrap(),
    )
}

// ---------------------------------------------------------- fully connected

fn fc_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (rows, fin) = match x.shape() {
        [f] => (1, *f),
        [r, f] => (*r, *f),
        s => {
            return Err(shape_err(
                "fully-connected",
                format!("input must be rank 1 or 2, got {s:?}"),
            ))
        }
    };
    let fout = match w.shape() {
        [i, o] if *i == fin => *o,
        s => {
            return Err(shape_err(
                "fully-connected",
                format!("weight {s:?} incompatible with {fin} input features"),
            ))
        }
    };
    if b.shape() != [fout] {
        return Err(shape_err(
            "fully-connected",
            format!("bias {:?} does not match {fout} outputs", b.shape()),
        ));
    }
    let out_shape = if x.rank() == 1 {
        vec![fout]
    } else {
        vec![rows, fout]
    };
    Ok((rows, fin, fout, out_shape))
}

pub(crate) fn fully_connected(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, fin, fout, shape) = fc_dims(x, w, b)?;
    let mut out = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm_nn(x.data(), w.data(), &mut out, rows, fin, fout);
    Tensor::new(shape, out)
}

pub(crate) fn fully_connected_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, fin, fout, _) = fc_dims(x, w, b).expect("validated in forward");
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; fout];
    gemm_nt(g.data(), w.data(), &mut gx, rows, fin, fout);
    gemm_tn(x.data(), g.data(), &mut gw, rows, fin, fout);
    for r in 0..rows {
        axpy(1.0, &g.data()[r * fout..(r + 1) * fout], &mut gb);
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(w.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![fout], gb).unwrap(),
    )
}

// ------------------------------------------------------------ convolution

struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(
    op: &'static str,
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    transposed: bool,
) -> Result<ConvGeom> {
    let [h, w, ci] = *x.shape() else {
        return Err(shape_err(
            op,
            format!("input must be (H, W, C), got {:?}", x.shape()),
        ));
    };
    let [kh, kw, kci, co] = *k.shape() else {
        return Err(shape_err(
            op,
            format!("kernel must be (kh, kw, Cin, Cout), got {:?}", k.shape()),
        ));
    };
    if kci != ci {
        return Err(shape_err(
            op,
            format!("kernel expects {kci} input channels, input has {ci}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(shape_err(
                op,
                format!("bias {:?} does not match {co} output channels", b.shape()),
            ));
        }
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    let (oh, ow) = if transposed {
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * pad);
        match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(shape_err(op, "padding larger than output extent")),
        }
    } else {
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                op,
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
    };
    Ok(ConvGeom {
        h,
        w,
        ci,
        kh,
        kw,
        co,
        oh,
        ow,
    })
}

/// Visits every (input pixel, kernel tap, output pixel) triple of a strided
/// convolution. For the transposed form the roles of input and output swap.
#[inline]
fn for_each_tap(
    g: &ConvGeom,
    stride: usize,
    pad: usize,
    transposed: bool,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (src_h, src_w, dst_h, dst_w) = if transposed {
        (g.h, g.w, g.oh, g.ow)
    } else {
        (g.oh, g.ow, g.h, g.w)
    };
    // `src` is the pixel that drives the stride arithmetic; `dst` is reached
    // at `src * stride + tap - pad`.
    for sh in 0..src_h {
        for a in 0..g.kh {
            let th = (sh * stride + a) as isize - pad as isize;
            if th < 0 || th as usize >= dst_h {
                continue;
            }
            for sw in 0..src_w {
                for b in 0..g.kw {
                    let tw = (sw * stride + b) as isize - pad as isize;
                    if tw < 0 || tw as usize >= dst_w {
                        continue;
                    }
                    let src = sh * src_w + sw;
                    let dst = th as usize * dst_w + tw as usize;
                    f(src, a * g.kw + b, dst);
                }
            }
        }
    }
}

pub(crate) fn conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom("conv2d", x, k, bias, stride, pad, false)?;
    let mut out = vec![0.0; g.oh * g.ow * g.co];
    if let Some(b) = bias {
        for px in out.chunks_mut(g.co) {
            px.copy_from_slice(b.data());
        }
    }
    let (xd, kd) = (x.data(), k.data());
    for_each_tap(&g, stride, pad, false, |opix, tap, ipix| {
        let xrow = &xd[ipix * g.ci..][..g.ci];
        let orow = &mut out[opix * g.co..][..g.co];
        for (c, &v) in xrow.iter().enumerate() {
            if v != 0.0 {
                axpy(v, &kd[(tap * g.ci + c) * g.co..][..g.co], orow);
            }
        }
    });
    Tensor::new(vec![g.oh, g.ow, g.co], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    grad: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let g = conv_geom("conv2d", x, k, bias, stride, pad, false).expect("validated in forward");
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for_each_tap(&g, stride, pad, false, |opix, tap, ipix| {
        let grow = &gd[opix * g.co..][..g.co];
        for c in 0..g.ci {
            let krow = &kd[(tap * g.ci + c) * g.co..][..g.co];
            gx[ipix * g.ci + c] += dot(krow, grow);
            axpy(
                xd[ipix * g.ci + c],
                grow,
                &mut gk[(tap * g.ci + c) * g.co..][..g.co],
            );
        }
    });
    let gb = bias.map(|_| channel_sum(gd, g.co));
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
        gb,
    )
}

pub(crate) fn conv_transpose2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom("transposed-conv2d", x, k, bias, stride, pad, true)?;
    let mut out = vec![0.0; g.oh * g.ow * g.co];
    if let Some(b) = bias {
        for px in out.chunks_mut(g.co) {
            px.copy_from_slice(b.data());
        }
    }
    let (xd, kd) = (x.data(), k.data());
    for_each_tap(&g, stride, pad, true, |ipix, tap, opix| {
        let xrow = &xd[ipix * g.ci..][..g.ci];
        let orow = &mut out[opix * g.co..][..g.co];
        for (c, &v) in xrow.iter().enumerate() {
            if v != 0.0 {
                axpy(v, &kd[(tap * g.ci + c) * g.co..][..g.co], orow);
            }
        }
    });
    Tensor::new(vec![g.oh, g.ow, g.co], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    grad: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let g = conv_geom("transposed-conv2d", x, k, bias, stride, pad, true).expect("validated in forward");
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for_each_tap(&g, stride, pad, true, |ipix, tap, opix| {
        let grow = &gd[opix * g.co..][..g.co];
        for c in 0..g.ci {
            let krow = &kd[(tap * g.ci + c) * g.co..][..g.co];
            gx[ipix * g.ci + c] += dot(krow, grow);
            axpy(
                xd[ipix * g.ci + c],
                grow,
                &mut gk[(tap * g.ci + c) * g.co..][..g.co],
            );
        }
    });
    let gb = bias.map(|_| channel_sum(gd, g.co));
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
        gb,
    )
}

fn channel_sum(data: &[f64], c: usize) -> Tensor {
    let mut s = vec![0.0; c];
    for px in data.chunks(c) {
        axpy(1.0, px, &mut s);
    }
    Tensor::new(vec![c], s).unwrap()
}

// ---------------------------------------------------------- normalization

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "layer-norm",
            format!(
                "scale {:?} / bias {:?} must both be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let (mean, rstd) = moments(xr, eps);
        for i in 0..c {
            or[i] = (xr[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = *x.shape().last().unwrap();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for ((xr, gr), gxr) in x
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(gx.chunks_mut(c))
    {
        let (mean, rstd) = moments(xr, eps);
        for i in 0..c {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gamma.data()[i];
            gg[i] += gr[i] * xhat[i];
            gb[i] += gr[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for i in 0..c {
            gxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(vec![c], gg).unwrap(),
        Tensor::new(vec![c], gb).unwrap(),
    )
}

// ----------------------------------------------------------------- softmax

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let mx = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..n {
                let e = (xd[idx(i)] - mx).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..n {
                out[idx(i)] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, grad: &Tensor) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let s: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
            for i in 0..n {
                gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx).unwrap()
}

// ----------------------------------------------------------- elementwise

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2))
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- pooling

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(shape_err(
            "global-average-pool",
            format!("need rank >= 2, got {:?}", x.shape()),
        ));
    }
    let c = *x.shape().last().unwrap();
    let n = x.len() / c;
    let mut s = channel_sum(x.data(), c);
    for v in s.data_mut() {
        *v /= n as f64;
    }
    Ok(s)
}

pub(crate) fn global_avg_pool_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let n = (x.len() / c) as f64;
    let mut gx = Vec::with_capacity(x.len());
    for _ in 0..x.len() / c {
        gx.extend(grad.data().iter().map(|g| g / n));
    }
    Tensor::new(x.shape().to_vec(), gx).unwrap()
}

// ------------------------------------------------------------ structural

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r
        || perm
            .iter()
            .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
    {
        return Err(shape_err(
            "axis-permute",
            format!("{perm:?} is not a permutation of {r} axes"),
        ));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let last = r - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    'outer: loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner_n).map(|j| xd[base + j * inner_s]));
        let mut ax = last;
        loop {
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no operands"))?;
    if axis >= first.rank() {
        return Err(shape_err(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err(
                "concat",
                format!(
                    "operand {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
        total += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(shape_err(
            "split",
            format!(
                "cannot take [{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub(crate) fn narrow_backward(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    grad: &Tensor,
) -> Tensor {
    let (outer, n, inner) = axis_split(input_shape, axis);
    let mut gx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(input_shape.to_vec(), gx).unwrap()
}

/// Padding amounts `(top, bottom, left, right)` on the two spatial axes.
pub type Padding = (usize, usize, usize, usize);

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn reflect_geom(x: &Tensor, pad: Padding) -> Result<(usize, usize, usize)> {
    let [h, w, c] = *x.shape() else {
        return Err(shape_err(
            "reflect-pad",
            format!("input must be (H, W, C), got {:?}", x.shape()),
        ));
    };
    let (t, b, l, r) = pad;
    if t.max(b) >= h || l.max(r) >= w {
        return Err(shape_err(
            "reflect-pad",
            format!("padding {pad:?} must be smaller than the {h}x{w} input"),
        ));
    }
    Ok((h, w, c))
}

pub(crate) fn reflect_pad(x: &Tensor, pad: Padding) -> Result<Tensor> {
    let (h, w, c) = reflect_geom(x, pad)?;
    let (t, b, l, r) = pad;
    let (ph, pw) = (h + t + b, w + l + r);
    let mut out = Vec::with_capacity(ph * pw * c);
    for i in 0..ph {
        let si = reflect(i as isize - t as isize, h);
        for j in 0..pw {
            let sj = reflect(j as isize - l as isize, w);
            out.extend_from_slice(&x.data()[(si * w + sj) * c..][..c]);
        }
    }
    Tensor::new(vec![ph, pw, c], out)
}

pub(crate) fn reflect_pad_backward(x: &Tensor, pad: Padding, grad: &Tensor) -> Tensor {
    let (h, w, c) = reflect_geom(x, pad).expect("validated in forward");
    let (t, b, l, r) = pad;
    let (ph, pw) = (h + t + b, w + l + r);
    let mut gx = vec![0.0; x.len()];
    for i in 0..ph {
        let si = reflect(i as isize - t as isize, h);
        for j in 0..pw {
            let sj = reflect(j as isize - l as isize, w);
            axpy(
                1.0,
                &grad.data()[(i * pw + j) * c..][..c],
                &mut gx[(si * w + sj) * c..][..c],
            );
        }
    }
    Tensor::new(x.shape().to_vec(), gx).unwrap()
}
