//! The full reconstruction network (estimator, `z₀` mixer and one HST per
//! stage) and its on-disk checkpoint: a `DTA1` archive plus a JSON sidecar.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_archive, write_archive, ParamStore, Params, Var};
use crate::cassi::{shifted_width, HsiCube, Measurement, SensingOperator};
use crate::dauf::{
    estimator_stages, init_estimator, init_z0, run_unfolding, run_unfolding_on_tape, StageParams,
    UnfoldConfig, UnfoldTrace,
};
use crate::error::{Error, Result};
use crate::fileio::write_atomic;
use crate::hst::{hst_denoise_on_tape, init_hst, HstConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Architecture and the spatial size the weights are bound to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub format_version: u32,
    pub stages: usize,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub bands: usize,
    pub height: usize,
    /// Unsheared scene width.
    pub width: usize,
    pub shift: usize,
    pub share_denoiser_weights: bool,
    /// Channel counts of the three HST levels (informational).
    pub level_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn new(
        stages: usize,
        channels: usize,
        window: usize,
        bands: usize,
        height: usize,
        width: usize,
        shift: usize,
    ) -> Result<Self> {
        let cfg = Self {
            format_version: FORMAT_VERSION,
            stages,
            channels,
            window,
            heads: 1,
            bands,
            height,
            width,
            shift,
            share_denoiser_weights: false,
            level_channels: (0..crate::hst::LEVELS).map(|l| channels << l).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        self.unfold()?;
        self.hst()?;
        Ok(())
    }

    pub fn shifted_width(&self) -> usize {
        shifted_width(self.width, self.bands, self.shift)
    }

    pub fn unfold(&self) -> Result<UnfoldConfig> {
        let mut u = UnfoldConfig::new(self.stages)?;
        u.share_denoiser_weights = self.share_denoiser_weights;
        Ok(u)
    }

    pub fn hst(&self) -> Result<HstConfig> {
        HstConfig::new(
            self.bands,
            self.channels,
            self.window,
            self.heads,
            self.height,
            self.shifted_width(),
        )
    }

    /// Rejects operators whose geometry differs from the one the weights
    /// were trained for.
    pub fn check_operator(&self, op: &SensingOperator) -> Result<()> {
        let want = (self.height, self.width, self.bands, self.shift);
        let got = (op.height(), op.width(), op.bands(), op.shift());
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is bound to spatial size {}x{} with {} bands and shift {}, \
                 but the inputs are {}x{} with {} bands and shift {}",
                want.0, want.1, want.2, want.3, got.0, got.1, got.2, got.3
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Paths of the archive and sidecar for a checkpoint path. The archive
/// keeps the given path; the sidecar replaces its extension with `json`.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.to_path_buf(), path.with_extension("json"))
}

/// The per-stage HST denoiser as a [`TapeDenoiser`].
fn hst_stages(
    unfold: UnfoldConfig,
    hst: HstConfig,
) -> impl for<'a, 't> Fn(&Params<'a, 't>, usize, Var<'t>, Var<'t>) -> Result<Var<'t>> {
    move |p, k, x, b| hst_denoise_on_tape(p, &unfold.denoiser_prefix(k), x, b, &hst)
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let hst = config.hst()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_estimator(&mut params, config.bands, config.stages, &mut rng)?;
        init_z0(&mut params, config.bands, &mut rng)?;
        let unfold = config.unfold()?;
        let denoisers = if config.share_denoiser_weights {
            1
        } else {
            config.stages
        };
        for k in 0..denoisers {
            init_hst(&mut params, &unfold.denoiser_prefix(k), &hst, &mut rng)?;
        }
        Ok(Self { config, params })
    }

    /// Unfolding trace for one measurement on the tape `p` is bound to.
    pub fn forward_on_tape<'t>(
        &self,
        p: &Params<'_, 't>,
        y: &Measurement,
        op: &SensingOperator,
    ) -> Result<UnfoldTrace<'t>> {
        self.config.check_operator(op)?;
        let unfold = self.config.unfold()?;
        let hst = self.config.hst()?;
        run_unfolding_on_tape(p, y, op, &unfold, &hst_stages(unfold, hst))
    }

    pub fn reconstruct(&self, y: &Measurement, op: &SensingOperator) -> Result<(HsiCube, StageParams)> {
        self.config.check_operator(op)?;
        let unfold = self.config.unfold()?;
        let hst = self.config.hst()?;
        run_unfolding(y, op, &self.params, &unfold, &hst_stages(unfold, hst))
    }

    /// Writes `path` (DTA1) and its JSON sidecar, each atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (archive, sidecar) = checkpoint_paths(path);
        let json = serde_json::to_vec_pretty(&self.config)?;
        write_archive(&archive, &self.params)?;
        write_atomic(&sidecar, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (archive, sidecar) = checkpoint_paths(path);
        let bytes = std::fs::read(&sidecar)?;
        let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: sidecar.clone(),
            reason: e.to_string(),
        })?;
        config.validate().map_err(|e| Error::Format {
            path: sidecar.clone(),
            reason: e.to_string(),
        })?;
        let params = read_archive(&archive)?;
        let expected = Model::init(config.clone(), 0)?.params;
        let same_layout = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same_layout || estimator_stages(&params)? != config.stages {
            return Err(Error::Format {
                path: archive,
                reason: "tensor names or shapes do not match the sidecar configuration".into(),
            });
        }
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cassi::Mask;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 4, 2, 3, 8, 6, 1).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let mut model = Model::init(small(), 3).unwrap();
        model.params.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dta");
        model.save(&path).unwrap();
        assert!(dir.path().join("model.json").exists());
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);

        let mut other = small();
        other.stages = 3;
        std::fs::write(dir.path().join("model.json"), serde_json::to_vec(&other).unwrap()).unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn reconstruct_checks_geometry() {
        let cfg = small();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let mask = Mask::random_binary(8, 6, 0.5, 2);
        let op = SensingOperator::new(mask, 3, 1).unwrap();
        let y = op
            .measure(&HsiCube::from_fn(8, 6, 3, |h, w, b| (h + w + b) as f64 / 20.0))
            .unwrap();
        let (x, params) = model.reconstruct(&y, &op).unwrap();
        assert_eq!(x.dims(), (8, 6, 3));
        assert_eq!(params.stages(), 2);

        let mask = Mask::random_binary(8, 8, 0.5, 2);
        let op = SensingOperator::new(mask, 3, 1).unwrap();
        let y = Measurement::zeros(8, op.shifted_width());
        let err = model.reconstruct(&y, &op).unwrap_err();
        assert!(err.to_string().contains("spatial size"), "{err}");
    }

    #[test]
    fn shared_weights_use_one_denoiser() {
        let mut cfg = small();
        cfg.share_denoiser_weights = true;
        let m = Model::init(cfg, 0).unwrap();
        assert!(m.params.names().all(|n| !n.starts_with("stage1/")));
    }
}
