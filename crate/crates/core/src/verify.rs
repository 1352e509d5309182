//! The oracle suite: every structural identity the fast paths rely on,
//! checked on seeded random instances against dense or scalar references.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_primitive, grad_check_params, ParamStore, PrimitiveKind, Tape, Tensor};
use crate::cassi::{HsiCube, Mask, Measurement, SensingOperator, DEFAULT_VERIFY_CAP};
use crate::dauf::linear_projection;
use crate::dauf::oracle::{
    closed_form_oracle, dense_inner_terms, diagonal_inner_terms, direct_inverse, gram_off_diagonal_max,
    max_abs_entry_diff, woodbury_inverse,
};
use crate::error::Result;
use crate::hst::oracle::{degenerate_equivalence_error, Degenerate};
use crate::hst::{
    hst_denoise_on_tape, init_hst, shuffle_transpose, unshuffle, window_partition, window_reverse, HstConfig,
};

/// Environment variable overriding [`DEFAULT_VERIFY_CAP`].
pub const CAP_ENV: &str = "DAUHST_VERIFY_CAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    Diagonality,
    InversionIdentity,
    DiagonalClosedForms,
    ProjectionOracle,
    AdjointConsistency,
    AttentionEquivalence,
    Bijections,
    PrimitiveGradients,
    DenoiserGradients,
}

impl Property {
    pub const ALL: [Property; 9] = [
        Self::Diagonality,
        Self::InversionIdentity,
        Self::DiagonalClosedForms,
        Self::ProjectionOracle,
        Self::AdjointConsistency,
        Self::AttentionEquivalence,
        Self::Bijections,
        Self::PrimitiveGradients,
        Self::DenoiserGradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Diagonality => "gram-diagonality",
            Self::InversionIdentity => "matrix-inversion-identity",
            Self::DiagonalClosedForms => "diagonal-closed-forms",
            Self::ProjectionOracle => "projection-vs-oracle",
            Self::AdjointConsistency => "adjoint-consistency",
            Self::AttentionEquivalence => "attention-degenerate-equivalence",
            Self::Bijections => "partition-shuffle-bijections",
            Self::PrimitiveGradients => "primitive-gradients",
            Self::DenoiserGradients => "denoiser-gradients",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Self::Diagonality | Self::Bijections => 0.0,
            Self::InversionIdentity | Self::DiagonalClosedForms | Self::AttentionEquivalence => 1e-10,
            Self::ProjectionOracle => 1e-8,
            Self::AdjointConsistency => 1e-12,
            Self::PrimitiveGradients | Self::DenoiserGradients => 1e-4,
        }
    }

    /// Default number of random instances.
    pub fn default_instances(self) -> usize {
        match self {
            Self::Diagonality | Self::ProjectionOracle | Self::AdjointConsistency => 100,
            Self::InversionIdentity | Self::DiagonalClosedForms | Self::Bijections => 50,
            Self::AttentionEquivalence => 20,
            Self::PrimitiveGradients => 10,
            Self::DenoiserGradients => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Overrides every property's instance count when set.
    pub instances: Option<usize>,
    /// Largest explicit matrix (rows × cols) the dense oracles may build.
    pub cap: usize,
    /// Flips the sign of the projection update so the oracle comparison
    /// must fail.
    pub fault_inject: bool,
    pub properties: Vec<Property>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: None,
            cap: DEFAULT_VERIFY_CAP,
            fault_inject: false,
            properties: Property::ALL.to_vec(),
        }
    }
}

impl VerifyOptions {
    /// Defaults with the cap taken from [`CAP_ENV`] when it parses.
    pub fn from_env() -> Self {
        let cap = std::env::var(CAP_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(DEFAULT_VERIFY_CAP);
        Self {
            cap,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Seed of the first failing instance.
    pub failing_seed: Option<u64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, p: Property) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == p.name())
    }
}

/// Random instance with `H, W ≤ 8`, `N ≤ 4`, `d ∈ {0, 1, 2}` and a mask
/// drawn uniformly from `[0, 1]`.
pub fn random_operator(seed: u64) -> Result<SensingOperator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let n = rng.random_range(1..=4);
    let d = rng.random_range(0..=2);
    let data = (0..h * w).map(|_| rng.random::<f64>()).collect();
    SensingOperator::new(Mask::new(h, w, data)?, n, d)
}

fn random_penalty(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.random_range(-3.0..=3.0))
}

/// The inversion identity and the diagonal closed forms share one instance
/// set; every other property draws its own.
fn instance_seed(base: u64, p: Property, i: usize) -> u64 {
    let family = match p {
        Property::DiagonalClosedForms => Property::InversionIdentity,
        other => other,
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((family as u64) << 32)
        .wrapping_add(i as u64)
}

fn check_one(p: Property, seed: u64, opts: &VerifyOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    match p {
        Property::Diagonality => {
            let phi = random_operator(seed)?.dense(opts.cap)?;
            Ok(gram_off_diagonal_max(&phi))
        }
        Property::InversionIdentity => {
            let phi = random_operator(seed)?.dense(opts.cap)?;
            let mu = random_penalty(&mut rng);
            Ok(max_abs_entry_diff(
                &direct_inverse(&phi, mu)?,
                &woodbury_inverse(&phi, mu)?,
            ))
        }
        Property::DiagonalClosedForms => {
            let op = random_operator(seed)?;
            let phi = op.dense(opts.cap)?;
            let mu = random_penalty(&mut rng);
            let (a, b) = dense_inner_terms(&phi, mu)?;
            let (da, db) = diagonal_inner_terms(op.psi(), mu);
            Ok(max_abs_entry_diff(&a, &da).max(max_abs_entry_diff(&b, &db)))
        }
        Property::ProjectionOracle => {
            let op = random_operator(seed)?;
            let (h, sw, n) = (op.height(), op.shifted_width(), op.bands());
            let y = Measurement::new(h, sw, (0..h * sw).map(|_| rng.random()).collect())?;
            let z = HsiCube::from_fn(h, sw, n, |_, _, _| rng.random::<f64>() - 0.5);
            let mu = random_penalty(&mut rng);
            let mut fast = linear_projection(&y, &z, mu, &op)?;
            if opts.fault_inject {
                // z − Φᵀ[…] instead of z + Φᵀ[…]
                for (x, zv) in fast.data_mut().iter_mut().zip(z.data()) {
                    *x = 2.0 * zv - *x;
                }
            }
            let slow = closed_form_oracle(&y, &z, mu, &op, opts.cap)?;
            let num: f64 = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let den: f64 = slow.data().iter().map(|v| v * v).sum();
            Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
        }
        Property::AdjointConsistency => {
            let op = random_operator(seed)?;
            let (h, sw, n) = (op.height(), op.shifted_width(), op.bands());
            let x = HsiCube::from_fn(h, sw, n, |_, _, _| rng.random::<f64>() - 0.5);
            let y = Measurement::new(h, sw, (0..h * sw).map(|_| rng.random::<f64>() - 0.5).collect())?;
            let lhs: f64 = op
                .forward(&x)?
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = x
                .data()
                .iter()
                .zip(op.adjoint(&y)?.data())
                .map(|(a, b)| a * b)
                .sum();
            Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0))
        }
        Property::AttentionEquivalence => Ok(degenerate_equivalence_error(Degenerate::FullWindow, seed)?
            .max(degenerate_equivalence_error(Degenerate::UnitWindow, seed)?)),
        Property::Bijections => bijection_error(&mut rng),
        Property::PrimitiveGradients => PrimitiveKind::ALL
            .into_iter()
            .map(|k| check_primitive(k, seed, 1e-5))
            .try_fold(0.0_f64, |m, e| Ok(m.max(e?))),
        Property::DenoiserGradients => denoiser_grad_error(seed),
    }
}

/// Partition/reverse and shuffle/unshuffle on a random shape; returns 0
/// for a bit-identical round trip and 1 otherwise.
fn bijection_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.random_range(1..=4);
    let (h, w) = (m * rng.random_range(1..=4), m * rng.random_range(1..=4));
    let c = rng.random_range(1..=5);
    let t = Tensor::randn(&[h, w, c], 1.0, rng);
    let tape = Tape::new();
    let parts = window_partition(tape.constant(t.clone()), m)?;
    let shuffled = shuffle_transpose(parts)?;
    let same_parts = *unshuffle(shuffled)?.value() == *parts.value();
    let same_map = *window_reverse(parts, h, w, m)?.value() == t;
    Ok(if same_parts && same_map { 0.0 } else { 1.0 })
}

/// Gradient check of the full denoiser on the tiny configuration
/// (`H = Ŵ = 8`, `C = 4`, `M = 2`, one head) over all weights.
fn denoiser_grad_error(seed: u64) -> Result<f64> {
    let cfg = HstConfig::new(2, 4, 2, 1, 8, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_hst(&mut store, "stage0", &cfg, &mut rng)?;
    let x = Tensor::randn(&[8, 8, 2], 1.0, &mut rng);
    let weights = Tensor::randn(&[8, 8, 2], 1.0, &mut rng);
    let beta = rng.random_range(0.1..2.0);
    grad_check_params(
        |p| {
            let tape = p.tape();
            let out = hst_denoise_on_tape(
                p,
                "stage0",
                tape.constant(x.clone()),
                tape.constant(Tensor::scalar(beta)),
                &cfg,
            )?;
            out.mul(tape.constant(weights.clone()))?.sum()
        },
        &store,
        1e-5,
    )
}

pub fn run_property(p: Property, opts: &VerifyOptions) -> Result<PropertyResult> {
    let start = Instant::now();
    let n = opts.instances.unwrap_or_else(|| p.default_instances());
    let tol = p.tolerance();
    let mut worst = 0.0_f64;
    let mut failing = None;
    for i in 0..n {
        let seed = instance_seed(opts.seed, p, i);
        let err = check_one(p, seed, opts)?;
        let bad = !(err <= tol);
        if bad && failing.is_none() {
            failing = Some(seed);
        }
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    Ok(PropertyResult {
        name: p.name(),
        instances: n,
        worst_error: worst,
        tolerance: tol,
        passed: failing.is_none(),
        failing_seed: failing,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let results = opts
        .properties
        .iter()
        .map(|&p| run_property(p, opts))
        .collect::<Result<_>>()?;
    Ok(VerifyReport { results })
}
