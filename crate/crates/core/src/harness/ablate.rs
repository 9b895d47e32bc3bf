use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Workspace;
use super::evaluate::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::fuse::Modalities;
use crate::model::DfrModel;
use crate::nn::ParamStore;
use crate::reconstruct::Paths;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Modalities,
    Paths,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modalities" => Ok(Self::Modalities),
            "paths" => Ok(Self::Paths),
            other => Err(Error::config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

const fn m(visual: bool, text: bool, audio: bool) -> Modalities {
    Modalities { visual, text, audio }
}

/// Modality combinations, full model first, then pairs, then singles.
pub const MODALITY_RUNS: [(&str, Modalities); 7] = [
    ("Full", m(true, true, true)),
    ("Visual + Text", m(true, true, false)),
    ("Visual + Audio", m(true, false, true)),
    ("Text + Audio", m(false, true, true)),
    ("Visual only", m(true, false, false)),
    ("Text only", m(false, true, false)),
    ("Audio only", m(false, false, true)),
];

pub const PATH_RUNS: [(&str, Paths); 3] = [
    ("Full Model", Paths::FULL),
    (
        "Semantic only",
        Paths {
            semantic: true,
            geometric: false,
        },
    ),
    (
        "Geometric only",
        Paths {
            semantic: false,
            geometric: true,
        },
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn get(&self, label: &str) -> Option<&EvalReport> {
        self.runs.iter().find(|r| r.label == label).map(|r| &r.report)
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let width = self.runs.iter().map(|r| r.label.len()).max().unwrap_or(0).max(13);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "configuration", "mIoU", "FB-IoU");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>7.4}",
                r.label, r.report.miou, r.report.fb_iou
            );
        }
        out
    }
}

/// Variants of `config` along `axis`.
pub fn ablation_configs(config: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Modalities => MODALITY_RUNS
            .iter()
            .map(|(label, mods)| {
                let mut c = config.clone();
                c.modalities = *mods;
                (label.to_string(), c)
            })
            .collect(),
        AblationAxis::Paths => PATH_RUNS
            .iter()
            .map(|(label, paths)| {
                let mut c = config.clone();
                c.paths = *paths;
                (label.to_string(), c)
            })
            .collect(),
    }
}

/// Evaluate one trained model under every variant of `axis`.
pub fn ablate(
    config: &RunConfig,
    ws: &Workspace,
    model: &DfrModel,
    store: &ParamStore,
    axis: AblationAxis,
) -> Result<AblationReport> {
    let runs = ablation_configs(config, axis)
        .into_iter()
        .map(|(label, c)| {
            log::info!("ablation run `{label}`");
            Ok(AblationRun {
                label,
                report: evaluate(&c, ws, model, store)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { axis, runs })
}

/// Both axes side by side.
pub fn combined_table(modalities: &AblationReport, paths: &AblationReport) -> String {
    format!("modality combinations\n{}\nreconstruction paths\n{}", modalities.table(), paths.table())
}
