//! End-to-end reconstruction and training entry points shared by the
//! command line and the C interface.

use std::str::FromStr;

use serde::Deserialize;

use crate::baselines::{argmax_depth, argmax_index, log_matched_filter, LmParams};
use crate::domain::{depth_per_bin, DepthImage, DetectorConfig, PhotonCube, PulseModel};
use crate::error::{invalid, Error, Result};
use crate::io::{reconstruct_patches, PatchSpec};
use crate::loss::{bin_to_depth, DataTerm, LossConfig};
use crate::nn::{
    synthetic_dataset, AdamConfig, DatasetSpec, EpochStats, LrSchedule, PrsNet, PrsNetConfig,
    TrainConfig, Trainer,
};
use crate::shrinkage::{classic_denoise, DEFAULT_CLASSIC_SCALE};
use crate::windowing::{default_window, WindowConfig};

/// Depth estimator applied to a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Argmax,
    LmFilter,
    Shrinkage,
    PrsNet,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "lmfilter" => Ok(Self::LmFilter),
            "shrinkage" => Ok(Self::Shrinkage),
            "prsnet" => Ok(Self::PrsNet),
            other => Err(invalid(
                "method",
                format!("unknown {other:?} (argmax|lmfilter|shrinkage|prsnet)"),
            )),
        }
    }
}

/// Settings for [`reconstruct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    pub method: Method,
    /// Pulse FWHM in seconds; sets the matched-filter template and the
    /// shrinkage window.
    pub fwhm: f64,
    /// Uniform threshold scale of the classic denoiser.
    pub s0: f64,
    /// Window override for the classic denoiser.
    pub window: Option<WindowConfig>,
    pub patch: Option<PatchSpec>,
}

impl ReconstructOptions {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            fwhm: 240e-12,
            s0: DEFAULT_CLASSIC_SCALE,
            window: None,
            patch: None,
        }
    }
}

/// Classic denoiser followed by a per-pixel argmax.
pub fn classic_depth(cube: &PhotonCube, w: WindowConfig, s0: f64) -> Result<DepthImage> {
    let den = classic_denoise(cube, w, s0)?;
    let dz = depth_per_bin(cube.bin_width());
    let z = den
        .data
        .chunks(cube.bins().max(1))
        .map(|h| bin_to_depth(argmax_index(h), dz))
        .collect();
    DepthImage::new(cube.rows(), cube.cols(), z)
}

fn reconstruct_whole(
    cube: &PhotonCube,
    opts: &ReconstructOptions,
    model: Option<&mut PrsNet>,
) -> Result<DepthImage> {
    match opts.method {
        Method::Argmax => Ok(argmax_depth(cube)),
        Method::LmFilter => {
            let pulse = PulseModel::new(opts.fwhm)?;
            log_matched_filter(cube, &pulse, &LmParams::estimate(cube, &pulse))
        }
        Method::Shrinkage => {
            let w = match opts.window {
                Some(w) => w,
                None => default_window(
                    &DetectorConfig::new(cube.bins(), cube.bin_width())?,
                    &PulseModel::new(opts.fwhm)?,
                ),
            };
            classic_depth(cube, w, opts.s0)
        }
        Method::PrsNet => {
            let net =
                model.ok_or_else(|| invalid("model", "the prsnet method needs a trained model"))?;
            Ok(net.predict(cube)?.depth)
        }
    }
}

/// Runs the chosen estimator on the whole cube or patch by patch.
pub fn reconstruct(
    cube: &PhotonCube,
    opts: &ReconstructOptions,
    mut model: Option<&mut PrsNet>,
) -> Result<DepthImage> {
    match opts.patch {
        None => reconstruct_whole(cube, opts, model),
        Some(spec) => reconstruct_patches(cube, spec, |p| {
            reconstruct_whole(p, opts, model.as_deref_mut())
        }),
    }
}

/// Training recipe read from TOML. Every field is optional.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub samples: usize,
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub bin_ps: f64,
    pub fwhm_ps: f64,
    /// `[signal, background]` photon budgets.
    pub sbr: Vec<[f64; 2]>,
    /// Odd window length; defaults to the pulse FWHM in bins.
    pub window: Option<usize>,
    pub encoder_stages: usize,
    pub base_channels: usize,
    pub prs_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_factor: f64,
    pub lr_every_epochs: usize,
    /// `"ce"` or `"kl"`.
    pub loss: String,
    pub lambda_tv: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = DatasetSpec::default();
        let n = PrsNetConfig::default();
        let s = LrSchedule::default();
        Self {
            samples: d.samples,
            rows: d.rows,
            cols: d.cols,
            bins: d.bins,
            bin_ps: d.bin_ps,
            fwhm_ps: d.fwhm_ps,
            sbr: d.sbr.iter().map(|&(a, b)| [a, b]).collect(),
            window: None,
            encoder_stages: n.encoder_stages,
            base_channels: n.base_channels,
            prs_blocks: n.num_prs_blocks,
            epochs: TrainConfig::default().epochs,
            batch_size: TrainConfig::default().batch_size,
            learning_rate: s.initial,
            lr_factor: s.factor,
            lr_every_epochs: s.every_epochs,
            loss: "ce".into(),
            lambda_tv: LossConfig::DEFAULT_LAMBDA_TV,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("training config: {e}")))
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            samples: self.samples,
            rows: self.rows,
            cols: self.cols,
            bins: self.bins,
            bin_ps: self.bin_ps,
            fwhm_ps: self.fwhm_ps,
            sbr: self.sbr.iter().map(|&[a, b]| (a, b)).collect(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let window = match self.window {
            Some(k) => WindowConfig::new(k)?,
            None => default_window(
                &DetectorConfig::from_picoseconds(self.bins, self.bin_ps)?,
                &PulseModel::from_picoseconds(self.fwhm_ps)?,
            ),
        };
        let data_term = match self.loss.as_str() {
            "ce" => DataTerm::CrossEntropy,
            "kl" => DataTerm::Kl,
            other => return Err(invalid("loss", format!("unknown {other:?} (ce|kl)"))),
        };
        if !(self.learning_rate > 0.0 && self.lr_factor > 0.0 && self.lr_every_epochs > 0) {
            return Err(invalid(
                "schedule",
                "learning rate, factor and period must be positive",
            ));
        }
        let net = PrsNetConfig {
            bins: self.bins,
            window,
            encoder_stages: self.encoder_stages,
            base_channels: self.base_channels,
            num_prs_blocks: self.prs_blocks,
        };
        net.validate()?;
        Ok(TrainConfig {
            net,
            schedule: LrSchedule {
                initial: self.learning_rate,
                factor: self.lr_factor,
                every_epochs: self.lr_every_epochs,
            },
            adam: AdamConfig::default(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            data_term,
            loss: LossConfig::new(self.lambda_tv)?,
            seed: self.seed,
        })
    }

    /// Simulates the dataset and trains a fresh network on it.
    pub fn run(&self, on_epoch: impl FnMut(&EpochStats)) -> Result<(PrsNet, Vec<EpochStats>)> {
        let config = self.train_config()?;
        let data = synthetic_dataset(&self.dataset())?;
        let mut trainer = Trainer::new(config)?;
        let history = trainer.fit(&data, on_epoch)?;
        Ok((trainer.net, history))
    }
}
