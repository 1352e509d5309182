//! Reconstruction quality: band-averaged PSNR and SSIM.

use crate::autodiff::Var;
use crate::cassi::HsiCube;
use crate::error::{shape_err, Result};

/// Value reported for bands reconstructed exactly.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(
            op,
            format!("prediction {:?} vs truth {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)` per band, capped at [`PSNR_CAP_DB`], averaged over
/// bands.
pub fn psnr(pred: &HsiCube, truth: &HsiCube, peak: f64) -> Result<f64> {
    check_dims("psnr", pred, truth)?;
    let (h, w, n) = truth.dims();
    let mut sq = vec![0.0; n];
    for (p, t) in pred.data().chunks(n).zip(truth.data().chunks(n)) {
        for b in 0..n {
            sq[b] += (p[b] - t[b]).powi(2);
        }
    }
    let total: f64 = sq
        .iter()
        .map(|s| {
            let mse = s / (h * w) as f64;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
            }
        })
        .sum();
    Ok(total / n as f64)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    taps
}

/// Gaussian-weighted mean of `img` (H×W) around every pixel. Windows are
/// clipped at the border and their weights renormalized; the clipped
/// 2-D window is a product of clipped 1-D windows, so the filter stays
/// separable.
fn local_mean(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let (mut acc, mut norm) = (0.0, 0.0);
                for j in lo..=hi {
                    let t = taps[j + r - i];
                    acc += t * src[line * step + j * stride];
                    norm += t;
                }
                out[line * step + i * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(img, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Mean structural similarity per band with an 11×11 Gaussian window
/// (σ = 1.5) and dynamic range 1, averaged over bands.
pub fn ssim(pred: &HsiCube, truth: &HsiCube) -> Result<f64> {
    check_dims("ssim", pred, truth)?;
    let (h, w, n) = truth.dims();
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for b in 0..n {
        let x = pred.band(b);
        let y = truth.band(b);
        let prod =
            |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(&y).map(|(&a, &c)| f(a, c)).collect() };
        let mx = local_mean(&x, h, w, &taps);
        let my = local_mean(&y, h, w, &taps);
        let mxx = local_mean(&prod(&|a, _| a * a), h, w, &taps);
        let myy = local_mean(&prod(&|_, c| c * c), h, w, &taps);
        let mxy = local_mean(&prod(&|a, c| a * c), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..h * w {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cov = mxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (h * w) as f64;
    }
    Ok(total / n as f64)
}

/// `sqrt(mean((pred − truth)²))` on the tape.
pub fn rmse_loss<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != truth.shape() {
        return Err(shape_err(
            "rmse_loss",
            format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let n = pred.value().len() as f64;
    let d = pred.sub(truth)?;
    d.mul(d)?.sum()?.scale(1.0 / n)?.sqrt()
}

/// Plain-value [`rmse_loss`].
pub fn rmse(pred: &HsiCube, truth: &HsiCube) -> Result<f64> {
    check_dims("rmse", pred, truth)?;
    let n = truth.data().len() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((s / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(h: usize, w: usize, n: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::from_fn(h, w, n, |_, _, _| rng.random::<f64>())
    }

    fn psnr_oracle(p: &HsiCube, t: &HsiCube) -> f64 {
        let (h, w, n) = t.dims();
        let mut sum = 0.0;
        for b in 0..n {
            let mut mse = 0.0;
            for i in 0..h {
                for j in 0..w {
                    mse += (p.get(i, j, b) - t.get(i, j, b)).powi(2);
                }
            }
            mse /= (h * w) as f64;
            sum += 10.0 * (1.0 / mse).log10();
        }
        sum / n as f64
    }

    /// Direct 2-D windowed statistics at every pixel.
    fn ssim_oracle(p: &HsiCube, t: &HsiCube) -> f64 {
        let (h, w, n) = t.dims();
        let r = 5i64;
        let mut total = 0.0;
        for b in 0..n {
            let mut acc = 0.0;
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (a, c) = (i + di, j + dj);
                            if a < 0 || c < 0 || a >= h as i64 || c >= w as i64 {
                                continue;
                            }
                            let wt = (-((di * di + dj * dj) as f64) / 4.5).exp();
                            let x = p.get(a as usize, c as usize, b);
                            let y = t.get(a as usize, c as usize, b);
                            sw += wt;
                            sx += wt * x;
                            sy += wt * y;
                            sxx += wt * x * x;
                            syy += wt * y * y;
                            sxy += wt * x * y;
                        }
                    }
                    let (mx, my) = (sx / sw, sy / sw);
                    let vx = sxx / sw - mx * mx;
                    let vy = syy / sw - my * my;
                    let cv = sxy / sw - mx * my;
                    let (c1, c2) = (1e-4, 9e-4);
                    acc +=
                        (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
            total += acc / (h * w) as f64;
        }
        total / n as f64
    }

    #[test]
    fn identical_inputs_hit_the_caps() {
        let a = random_cube(6, 7, 3, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_mse() {
        let t = HsiCube::zeros(4, 4, 2);
        let p = HsiCube::from_fn(4, 4, 2, |_, _, _| 0.1);
        assert!((psnr(&p, &t, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_scalar_oracles() {
        for seed in 0..4 {
            let (p, t) = (random_cube(13, 17, 2, seed), random_cube(13, 17, 2, seed + 100));
            assert!((psnr(&p, &t, 1.0).unwrap() - psnr_oracle(&p, &t)).abs() <= 1e-9);
            assert!((ssim(&p, &t).unwrap() - ssim_oracle(&p, &t)).abs() <= 1e-9);
        }
        assert!(psnr(&random_cube(2, 2, 1, 0), &random_cube(2, 3, 1, 0), 1.0).is_err());
        assert!(ssim(&random_cube(2, 2, 1, 0), &random_cube(2, 2, 2, 0)).is_err());
    }

    #[test]
    fn rmse_examples() {
        let t = random_cube(3, 4, 2, 5);
        let shifted = HsiCube::from_fn(3, 4, 2, |h, w, b| t.get(h, w, b) - 0.25);
        assert!((rmse(&shifted, &t).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);

        let p = random_cube(3, 4, 2, 6);
        let mut mean = 0.0;
        for (a, b) in p.data().iter().zip(t.data()) {
            mean += (a - b) * (a - b);
        }
        mean /= 24.0;
        let tape = Tape::new();
        let loss = rmse_loss(tape.constant(p.to_tensor()), tape.constant(t.to_tensor())).unwrap();
        assert!((loss.value().data()[0] - mean.sqrt()).abs() <= 1e-12);
    }
}
