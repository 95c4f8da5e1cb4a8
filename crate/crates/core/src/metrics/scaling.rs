use std::str::FromStr;

use fdd_diffcore::Real;
use serde::{Deserialize, Serialize};

use super::counters::{count_flops, count_params};
use super::eval::evaluate_model;
use crate::channels::{ChannelDataset, TaskConfig};
use crate::endtoend::ArchConfig;
use crate::error::{Error, Result};
use crate::training::{train_stl, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAxis {
    /// Grid values are expert counts at fixed `top_k`.
    Experts,
    /// Grid values are model widths of a dense (single-expert) trunk, with
    /// the feed-forward width scaled in proportion.
    Width,
}

impl FromStr for ScalingAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(ScalingAxis::Experts),
            "width" => Ok(ScalingAxis::Width),
            other => Err(Error::Config(format!("unknown scaling axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub axis: ScalingAxis,
    pub value: usize,
    pub params: u64,
    /// Forward FLOPs per sample, millions.
    pub flops_m: f64,
    pub spectral_efficiency: f64,
}

pub fn variant_arch(base: &ArchConfig, axis: ScalingAxis, value: usize) -> Result<ArchConfig> {
    let arch = match axis {
        ScalingAxis::Experts => ArchConfig {
            experts: value,
            top_k: base.top_k.min(value),
            ..base.clone()
        },
        ScalingAxis::Width => ArchConfig {
            d_model: value,
            d_ff: (base.d_ff * value).div_ceil(base.d_model),
            experts: 1,
            top_k: 1,
            ..base.clone()
        },
    };
    arch.validate()?;
    Ok(arch)
}

/// Trains and scores one single-task model per grid value.
pub fn scaling_study<T: Real>(
    base: &ArchConfig,
    config: &TaskConfig,
    dataset: &ChannelDataset,
    plan: &TrainPlan,
    axis: ScalingAxis,
    grid: &[usize],
    eval_seed: u64,
) -> Result<Vec<ScalingRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("scaling grid"));
    }
    let sigma2 = config.resolve()?.sigma2();
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let arch = variant_arch(base, axis, value)?;
        let (bundle, _) = train_stl::<T>(arch, config, dataset.train(), plan)?;
        let eval = evaluate_model(&bundle, &config.task_id, dataset.test(), sigma2, eval_seed)?;
        rows.push(ScalingRow {
            axis,
            value,
            params: count_params(&bundle).total as u64,
            flops_m: count_flops(&bundle, &config.task_id, 1)?.millions(),
            spectral_efficiency: eval.spectral_efficiency(),
        });
    }
    Ok(rows)
}

pub fn scaling_to_csv(rows: &[ScalingRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Header(e.to_string()))
}
