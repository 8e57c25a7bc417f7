//! Subcommand implementations. Each command resolves its precision and
//! dispatches to a generic body.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mambamim_core::gradcheck::{check_model, GradcheckOptions, GradcheckReport};
use mambamim_core::masking::ScanOrder;
use mambamim_core::model::{HybridModel, MaskFill};
use mambamim_core::synth::{gen_volume, SyntheticVolumeSpec};
use mambamim_core::train::{train, StepRecord};
use mambamim_core::{Real, Tensor};

use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::metrics::MetricsWriter;
use crate::volume;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmim";
pub const CONFIG_FILE: &str = "config.txt";

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub records: Vec<StepRecord>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl PretrainSummary {
    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Trains from scratch, streaming metrics and writing a final checkpoint.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    match cfg.precision.unwrap_or(Precision::F32) {
        Precision::F32 => pretrain_as::<f32>(cfg),
        Precision::F64 => pretrain_as::<f64>(cfg),
    }
}

fn pretrain_as<T: Real>(cfg: &RunConfig) -> Result<PretrainSummary> {
    let train_cfg = cfg.train()?;
    let mut model = HybridModel::<T>::new(cfg.model()?, cfg.seed)?;
    prepare_out(cfg)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    let mut w = MetricsWriter::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    let records = train(&mut model, &train_cfg, |r| {
        w.record(r).with_context(|| format!("writing {}", metrics.display()))
    })?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(model.params(), &ckpt)?;
    Ok(PretrainSummary { records, metrics, checkpoint: ckpt })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructOutput {
    pub input: PathBuf,
    pub masked_input: PathBuf,
    pub reconstruction: PathBuf,
    pub masked_loss: f64,
}

/// Writes input, masked input and reconstruction of one synthetic volume.
pub fn reconstruct(cfg: &RunConfig, ckpt: &Path) -> Result<ReconstructOutput> {
    match cfg.precision.unwrap_or(Precision::F32) {
        Precision::F32 => reconstruct_as::<f32>(cfg, ckpt),
        Precision::F64 => reconstruct_as::<f64>(cfg, ckpt),
    }
}

fn reconstruct_as<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<ReconstructOutput> {
    let train_cfg = cfg.train()?;
    let mut model = HybridModel::<T>::new(cfg.model()?, cfg.seed)?;
    checkpoint::load(model.params_mut(), ckpt)?;
    let input: Tensor<T> = gen_volume(&SyntheticVolumeSpec::new(cfg.volume_shape, cfg.data_seed()));
    let pyramid = model.sample_pyramid(train_cfg.mask_ratio, cfg.mask_seed())?;
    let mut masked = input.clone();
    for (v, &keep) in masked.data_mut().iter_mut().zip(pyramid.finest().as_slice()) {
        if !keep {
            *v = T::zero();
        }
    }
    let recon = model.reconstruct(&input, &pyramid)?;
    let masked_loss = if pyramid.finest().masked_count() > 0 {
        mambamim_core::model::masked_mse(&input, &recon, &pyramid)?.as_f64()
    } else {
        f64::NAN
    };
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let out = ReconstructOutput {
        input: cfg.out_dir.join("input.mvol"),
        masked_input: cfg.out_dir.join("masked_input.mvol"),
        reconstruction: cfg.out_dir.join("reconstruction.mvol"),
        masked_loss,
    };
    volume::save(&input, &out.input)?;
    volume::save(&masked, &out.masked_input)?;
    volume::save(&recon, &out.reconstruction)?;
    Ok(out)
}

/// Finite-difference check of every parameter tensor at 64-bit precision.
pub fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    if cfg.precision == Some(Precision::F32) {
        bail!("gradcheck runs at 64-bit precision; set precision = 64 or leave it unset");
    }
    let train_cfg = cfg.train()?;
    let mut model = HybridModel::<f64>::new(cfg.model()?, cfg.seed)?;
    let input: Tensor<f64> = gen_volume(&SyntheticVolumeSpec::new(cfg.volume_shape, cfg.data_seed()));
    let pyramid = model.sample_pyramid(train_cfg.mask_ratio, cfg.mask_seed())?;
    let opts = GradcheckOptions { seed: cfg.seed, corrupt: corrupt.map(String::from), ..GradcheckOptions::default() };
    Ok(check_model(&mut model, &input, &pyramid, &opts)?)
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut s = String::from("group\tchecked\tmax_rel_err\tstatus\n");
    for g in &report.groups {
        let status = if g.passed(report.tolerance) { "ok" } else { "FAIL" };
        writeln!(s, "{}\t{}\t{:e}\t{}", g.name, g.checked, g.max_rel_err, status).expect("string write");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    MaskRatio,
    ScanOrder,
    Fill,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MaskRatio => "mask_ratio",
            AblationAxis::ScanOrder => "scan_order",
            AblationAxis::Fill => "fill",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AblationAxis::MaskRatio, AblationAxis::ScanOrder, AblationAxis::Fill].into_iter().find(|a| a.name() == s)
    }

    /// `(setting label, config)` for every point on the axis.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let dir = base.out_dir.join(self.name());
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.out_dir = dir.join(&label);
            (label, c)
        };
        match self {
            AblationAxis::MaskRatio => [0.25, 0.5, 0.75, 0.8, 0.9]
                .into_iter()
                .map(|r| with(r.to_string(), &|c| c.mask_ratio = r))
                .collect(),
            AblationAxis::ScanOrder => ScanOrder::ALL
                .into_iter()
                .map(|o| with(o.name().into(), &|c| c.scan_order = o))
                .collect(),
            AblationAxis::Fill => [MaskFill::Toki, MaskFill::Learnable]
                .into_iter()
                .map(|f| with(f.name().into(), &|c| c.mask_fill = f))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub first_loss: f64,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "axis\tsetting\tfirst_loss\tfinal_loss";

/// Pretrains once per setting of `axis` with every other key shared, and
/// writes `ablate_<axis>.tsv` into the base output directory.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<(Vec<AblationRow>, PathBuf)> {
    let mut rows = Vec::new();
    for (setting, c) in axis.settings(cfg) {
        let s = pretrain(&c).with_context(|| format!("ablation {} = {setting}", axis.name()))?;
        rows.push(AblationRow {
            setting,
            first_loss: s.first_loss().unwrap_or(f64::NAN),
            final_loss: s.final_loss().unwrap_or(f64::NAN),
        });
    }
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        writeln!(text, "{}\t{}\t{:e}\t{:e}", axis.name(), r.setting, r.first_loss, r.final_loss).expect("string write");
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join(format!("ablate_{}.tsv", axis.name()));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((rows, path))
}
