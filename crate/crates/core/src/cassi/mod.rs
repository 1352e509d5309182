//! The CASSI degradation operator: per-band dispersion shift, coded-aperture
//! modulation and spectral integration onto a single 2D detector.
//!
//! Cubes are stored `(h, w, band)` row-major. A *shifted* cube has width
//! `W + d·(bands − 1)`; band `λ` of the scene occupies columns
//! `[d·λ, d·λ + W)` and everything else is zero.

mod io;
mod sparse;

pub use io::{decode_hsc, encode_hsc, read_hsc, write_hsc, HSC_MAGIC};
pub use sparse::SparseMatrix;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Default limit on dense entries (`rows × cols`) for explicit-matrix checks.
pub const DEFAULT_VERIFY_CAP: usize = 1_000_000;

/// Rank-3 spectral cube indexed `(h, w, band)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(shape_err(
                "cube",
                format!(
                    "{height}x{width}x{bands} needs {} values, got {}",
                    height * width * bands,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self::new(height, width, bands, vec![0.0; height * width * bands]).expect("positive dims")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * bands);
        for h in 0..height {
            for w in 0..width {
                for b in 0..bands {
                    data.push(f(h, w, b));
                }
            }
        }
        Self::new(height, width, bands, data).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, b: usize) -> usize {
        (h * self.width + w) * self.bands + b
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, b: usize) -> f64 {
        self.data[self.index(h, w, b)]
    }

    /// One band as a row-major `height × width` plane.
    pub fn band(&self, b: usize) -> Vec<f64> {
        self.data.iter().skip(b).step_by(self.bands).copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.bands], self.data.clone()).expect("positive dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, b] => Self::new(h, w, b, t.data().to_vec()),
            ref s => Err(shape_err("cube", format!("expected a rank-3 tensor, got {s:?}"))),
        }
    }
}

/// Coded-aperture transmission pattern, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err(
                "mask",
                format!("{height}x{width} mask with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "mask entries must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![1.0; height * width]).expect("valid")
    }

    /// Binary mask with each pixel open with probability `density`.
    pub fn random_binary(height: usize, width: usize, density: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..height * width)
            .map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 })
            .collect();
        Self::new(height, width, data).expect("valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }
}

/// The 2D detector image on the shifted plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err(
                "measurement",
                format!("{height}x{width} measurement with {} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width]).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Width of the dispersed plane for `bands` bands shifted by `shift` pixels.
pub fn shifted_width(width: usize, bands: usize, shift: usize) -> usize {
    width + shift * (bands - 1)
}

/// Disperses a `(H, W, N)` cube onto the `(H, W + d(N−1), N)` shifted grid.
pub fn shift_cube(cube: &HsiCube, shift: usize) -> HsiCube {
    let (h, w, n) = cube.dims();
    let sw = shifted_width(w, n, shift);
    let mut out = HsiCube::zeros(h, sw, n);
    for r in 0..h {
        for c in 0..w {
            for b in 0..n {
                let i = out.index(r, c + shift * b, b);
                out.data[i] = cube.get(r, c, b);
            }
        }
    }
    out
}

/// Crops each band of a shifted cube back to its `width` support.
pub fn unshift_cube(shifted: &HsiCube, shift: usize, width: usize) -> Result<HsiCube> {
    let (h, sw, n) = shifted.dims();
    if width == 0 || shifted_width(width, n, shift) != sw {
        return Err(shape_err(
            "unshift",
            format!("shifted width {sw} is not {width} + {shift}·({n} − 1)"),
        ));
    }
    Ok(HsiCube::from_fn(h, width, n, |r, c, b| {
        shifted.get(r, c + shift * b, b)
    }))
}

/// The sensing matrix Φ in structured form, with `diag(ΦΦᵀ)` cached.
#[derive(Clone, Debug)]
pub struct SensingOperator {
    mask: Mask,
    shift: usize,
    bands: usize,
    shifted_width: usize,
    /// Shifted mask stack `(H, Ŵ, N)`: entry is the mask value seen by band
    /// `λ` at detector column `w`, zero outside the band's support.
    stack: HsiCube,
    psi: Vec<f64>,
}

impl SensingOperator {
    pub fn new(mask: Mask, bands: usize, shift: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::InvalidArgument("band count must be positive".into()));
        }
        let (h, w) = (mask.height(), mask.width());
        let sw = shifted_width(w, bands, shift);
        let mut stack = HsiCube::zeros(h, sw, bands);
        for r in 0..h {
            for c in 0..w {
                for b in 0..bands {
                    let i = stack.index(r, c + shift * b, b);
                    stack.data[i] = mask.get(r, c);
                }
            }
        }
        let mut op = Self {
            mask,
            shift,
            bands,
            shifted_width: sw,
            stack,
            psi: Vec::new(),
        };
        op.psi = op.compute_psi();
        Ok(op)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn shifted_width(&self) -> usize {
        self.shifted_width
    }

    /// Measurement length `n = H · Ŵ`.
    pub fn measurement_len(&self) -> usize {
        self.height() * self.shifted_width
    }

    pub fn mask_stack(&self) -> &HsiCube {
        &self.stack
    }

    /// Cached `diag(ΦΦᵀ)` as an `H × Ŵ` plane.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// `ψ(h, w) = Σ_λ M_λ(h, w)²` evaluated from the mask stack.
    pub fn compute_psi(&self) -> Vec<f64> {
        self.stack
            .data()
            .chunks(self.bands)
            .map(|px| px.iter().map(|m| m * m).sum())
            .collect()
    }

    fn check_shifted(&self, op: &'static str, x: &HsiCube) -> Result<()> {
        let want = (self.height(), self.shifted_width, self.bands);
        if x.dims() != want {
            return Err(shape_err(
                op,
                format!("expected shifted cube {want:?}, got {:?}", x.dims()),
            ));
        }
        Ok(())
    }

    fn check_measurement(&self, op: &'static str, y: &Measurement) -> Result<()> {
        if (y.height(), y.width()) != (self.height(), self.shifted_width) {
            return Err(shape_err(
                op,
                format!(
                    "expected {}x{} measurement, got {}x{}",
                    self.height(),
                    self.shifted_width,
                    y.height(),
                    y.width()
                ),
            ));
        }
        Ok(())
    }

    /// `y = Φx` for a shifted cube `x`.
    pub fn forward(&self, x: &HsiCube) -> Result<Measurement> {
        self.check_shifted("forward_phi", x)?;
        let data = x
            .data()
            .chunks(self.bands)
            .zip(self.stack.data().chunks(self.bands))
            .map(|(xs, ms)| xs.iter().zip(ms).map(|(a, b)| a * b).sum())
            .collect();
        Measurement::new(self.height(), self.shifted_width, data)
    }

    /// `Φᵀy`, a shifted cube.
    pub fn adjoint(&self, y: &Measurement) -> Result<HsiCube> {
        self.check_measurement("adjoint_phi", y)?;
        let mut out = self.stack.clone();
        for (px, &v) in out.data.chunks_mut(self.bands).zip(y.data()) {
            for m in px {
                *m *= v;
            }
        }
        Ok(out)
    }

    /// Simulates the detector image of an unshifted scene.
    pub fn measure(&self, scene: &HsiCube) -> Result<Measurement> {
        if scene.dims() != (self.height(), self.width(), self.bands) {
            return Err(shape_err(
                "measure",
                format!(
                    "scene {:?} does not match operator {:?}",
                    scene.dims(),
                    (self.height(), self.width(), self.bands)
                ),
            ));
        }
        self.forward(&shift_cube(scene, self.shift))
    }

    /// Φ as an explicit `n × n·N` sparse matrix. Rows index `(h, w)` on the
    /// shifted plane, columns index `(h, w, λ)` of the shifted cube.
    pub fn build_explicit(&self, cap: usize) -> Result<SparseMatrix> {
        let rows = self.measurement_len();
        let cols = rows * self.bands;
        if rows.saturating_mul(cols) > cap {
            return Err(Error::CapExceeded { rows, cols, cap });
        }
        let triplets = self
            .stack
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(col, &m)| (col / self.bands, col, m))
            .collect();
        Ok(SparseMatrix::from_triplets(rows, cols, triplets))
    }

    /// Dense Φ for small verification instances.
    pub fn dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        Ok(self.build_explicit(cap)?.to_dense())
    }
}

/// Adds detector shot noise at `bits` of dynamic range.
///
/// The measurement is scaled so its maximum maps to `2^bits − 1` counts,
/// each pixel is replaced by a Poisson draw with that mean, and the result
/// is scaled back.
pub fn add_shot_noise(y: &Measurement, bits: u32, seed: u64) -> Result<Measurement> {
    if bits == 0 || bits > 52 {
        return Err(Error::InvalidArgument(format!(
            "noise bit depth must be in 1..=52, got {bits}"
        )));
    }
    if let Some(v) = y.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "shot noise needs non-negative measurements, found {v}"
        )));
    }
    let peak = y.max();
    if peak <= 0.0 {
        return Ok(y.clone());
    }
    let scale = ((1u64 << bits) - 1) as f64 / peak;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = y
        .data()
        .iter()
        .map(|&v| {
            let mean = v * scale;
            if mean <= 0.0 {
                return Ok(0.0);
            }
            let d = Poisson::new(mean).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(d.sample(&mut rng) / scale)
        })
        .collect::<Result<Vec<_>>>()?;
    Measurement::new(y.height(), y.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SensingOperator, HsiCube) {
        // H=1, W=2, N=2, d=1; band0 = [2, 4], band1 = [6, 8]
        let op = SensingOperator::new(Mask::new(1, 2, vec![1.0, 0.5]).unwrap(), 2, 1).unwrap();
        let cube = HsiCube::new(1, 2, 2, vec![2.0, 6.0, 4.0, 8.0]).unwrap();
        (op, cube)
    }

    #[test]
    fn shift_places_bands_at_offsets() {
        let (_, cube) = tiny();
        let s = shift_cube(&cube, 1);
        assert_eq!(s.dims(), (1, 3, 2));
        assert_eq!(s.band(0), vec![2.0, 4.0, 0.0]);
        assert_eq!(s.band(1), vec![0.0, 6.0, 8.0]);
        assert_eq!(unshift_cube(&s, 1, 2).unwrap(), cube);
    }

    #[test]
    fn zero_shift_and_single_band_are_identity() {
        let cube = HsiCube::from_fn(3, 4, 2, |h, w, b| (h * 7 + w * 3 + b) as f64);
        assert_eq!(shift_cube(&cube, 0), cube);
        let mono = HsiCube::from_fn(3, 4, 1, |h, w, _| (h + w) as f64);
        assert_eq!(shift_cube(&mono, 5), mono);
    }

    #[test]
    fn forward_on_tiny_instance() {
        let (op, cube) = tiny();
        let y = op.measure(&cube).unwrap();
        assert_eq!(y.data(), &[2.0, 8.0, 4.0]);
    }

    #[test]
    fn psi_on_tiny_instance() {
        let (op, _) = tiny();
        assert_eq!(op.psi(), &[1.0, 1.25, 0.25]);
        assert_eq!(op.measurement_len(), 3);
    }

    #[test]
    fn identity_case() {
        let op = SensingOperator::new(Mask::ones(2, 3), 1, 0).unwrap();
        assert!(op.psi().iter().all(|&p| p == 1.0));
        let x = HsiCube::from_fn(2, 3, 1, |h, w, _| (h * 3 + w) as f64);
        assert_eq!(op.forward(&x).unwrap().data(), x.data());
        let phi = op.dense(DEFAULT_VERIFY_CAP).unwrap();
        assert_eq!(phi, DMatrix::identity(6, 6));
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let op = SensingOperator::new(Mask::random_binary(3, 3, 0.5, 1), 3, 2).unwrap();
        let zc = HsiCube::zeros(3, op.shifted_width(), 3);
        assert!(op.forward(&zc).unwrap().data().iter().all(|&v| v == 0.0));
        let zm = Measurement::zeros(3, op.shifted_width());
        assert!(op.adjoint(&zm).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_scales_quadratically_with_mask() {
        let m = Mask::new(2, 2, vec![0.2, 0.8, 1.0, 0.4]).unwrap();
        let half = Mask::new(2, 2, m.data().iter().map(|v| v * 0.5).collect()).unwrap();
        let a = SensingOperator::new(m, 3, 1).unwrap();
        let b = SensingOperator::new(half, 3, 1).unwrap();
        for (pa, pb) in a.psi().iter().zip(b.psi()) {
            assert!((pb - 0.25 * pa).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let (op, cube) = tiny();
        assert!(matches!(op.forward(&cube), Err(Error::ShapeMismatch { .. })));
        assert!(op.adjoint(&Measurement::zeros(1, 2)).is_err());
        assert!(Mask::new(1, 2, vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn explicit_cap_is_enforced() {
        let op = SensingOperator::new(Mask::ones(4, 4), 3, 1).unwrap();
        assert!(matches!(op.build_explicit(10), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn shot_noise_edge_cases() {
        let zero = Measurement::zeros(2, 3);
        assert_eq!(add_shot_noise(&zero, 11, 5).unwrap(), zero);
        let y = Measurement::new(1, 3, vec![0.1, 0.5, 1.0]).unwrap();
        assert_eq!(
            add_shot_noise(&y, 11, 9).unwrap(),
            add_shot_noise(&y, 11, 9).unwrap()
        );
        let neg = Measurement::new(1, 2, vec![0.1, -0.5]).unwrap();
        assert!(add_shot_noise(&neg, 11, 0).is_err());
    }
}
