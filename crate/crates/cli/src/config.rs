use std::path::PathBuf;

use fishdet_core::evaluation::{default_sweep, DEFAULT_EVAL_IOU};
use fishdet_core::postprocess::{DEFAULT_CONF_THRESHOLD, DEFAULT_ENSEMBLE_IOU, DEFAULT_NMS_IOU};

use crate::error::{CliError, CliResult};

pub const DEFAULT_CHALLENGING_MAP: f64 = 0.5;

/// Knobs shared by the pipeline stages. Each command fills in the fields it
/// uses and validates before touching any data.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub ensemble_iou: f64,
    pub eval_iou: f64,
    pub challenging_map: f64,
    pub seed: u64,
    pub sweep: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            ensemble_iou: DEFAULT_ENSEMBLE_IOU,
            eval_iou: DEFAULT_EVAL_IOU,
            challenging_map: DEFAULT_CHALLENGING_MAP,
            seed: 0,
            sweep: default_sweep(),
        }
    }
}

impl PipelineConfig {
    pub fn with_inputs<P: Into<PathBuf>>(inputs: impl IntoIterator<Item = P>) -> Self {
        Self {
            inputs: inputs.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let thresholds = [
            ("confidence threshold", self.conf_threshold),
            ("NMS IoU", self.nms_iou),
            ("ensemble IoU", self.ensemble_iou),
            ("evaluation IoU", self.eval_iou),
            ("challenging mAP threshold", self.challenging_map),
        ];
        for (name, v) in thresholds {
            check_unit(name, v)?;
        }
        if self.sweep.is_empty() {
            return Err(CliError::Invalid("confidence sweep is empty".into()));
        }
        for &v in &self.sweep {
            check_unit("sweep value", v)?;
        }
        for p in &self.inputs {
            if !p.is_file() {
                return Err(CliError::at(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file").into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn check_unit(name: &str, v: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{name} must be in [0, 1], got {v}")))
    }
}
