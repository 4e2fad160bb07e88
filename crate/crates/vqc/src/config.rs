//! Run configuration: one JSON file describing layout, model, training
//! and evaluation, with cross-field validation and derived defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{PilotConfig, SystemLayout};
use crate::model::{default_feature_scale, ModelConfig};
use crate::training::TrainConfig;

/// Model section as written in the config file. Array dimensions come
/// from the layout; scaling knobs are derived when omitted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub t: usize,
    pub v: usize,
    pub b: usize,
    pub hidden: usize,
    pub dnn_width: usize,
    pub dnn_depth: usize,
    pub pos_head_widths: Vec<usize>,
    #[serde(default)]
    pub feature_scale: Option<f64>,
    #[serde(default)]
    pub pos_scale: Option<[f64; 3]>,
    #[serde(default)]
    pub pos_bias_init: Option<[f64; 3]>,
}

/// Optional overrides of the pilot/noise convention.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PilotSection {
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub pilot_symbol: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSection {
    pub n_eval: usize,
    pub seed: u64,
    #[serde(default)]
    pub sweep_t: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_eval: 2000,
            seed: 97,
            sweep_t: Vec::new(),
        }
    }
}

/// The whole run configuration as stored on disk and inside
/// checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub layout: SystemLayout,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub pilot: PilotSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "runs/default".to_string()
}

/// Validated, fully derived view of a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub layout: SystemLayout,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pilot: PilotConfig,
    pub eval: EvalSection,
    pub output_dir: String,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validate everything and fill in derived defaults.
    pub fn resolve(&self) -> Result<Resolved, Error> {
        self.layout
            .validate()
            .map_err(|e| Error::Config(format!("layout: {e}")))?;

        let mut pilot = PilotConfig::from_snr_db(self.train.snr_db);
        if let Some(s2) = self.pilot.sigma2 {
            pilot.sigma2 = s2;
        }
        if let Some(sym) = self.pilot.pilot_symbol {
            pilot.pilot_symbol = sym;
        }
        pilot
            .validate()
            .map_err(|e| Error::Config(format!("pilot: {e}")))?;

        let area = &self.layout.service_area;
        let model = ModelConfig {
            t: self.model.t,
            k: self.layout.num_ris(),
            n: self.layout.n,
            m: self.layout.m,
            v: self.model.v,
            b: self.model.b,
            hidden: self.model.hidden,
            dnn_width: self.model.dnn_width,
            dnn_depth: self.model.dnn_depth,
            pos_head_widths: self.model.pos_head_widths.clone(),
            feature_scale: self
                .model
                .feature_scale
                .unwrap_or_else(|| default_feature_scale(&self.layout, &pilot)),
            pos_scale: self.model.pos_scale.unwrap_or([
                area.half_extents[0].max(1.0),
                area.half_extents[1].max(1.0),
                area.center[2].abs().max(1.0),
            ]),
            pos_bias_init: self.model.pos_bias_init.unwrap_or(area.center),
        };
        model.validate()?;
        self.train.validate()?;

        if self.eval.n_eval == 0 {
            return Err(Error::Config("eval.n_eval must be at least 1".into()));
        }

        Ok(Resolved {
            layout: self.layout.clone(),
            model,
            train: self.train.clone(),
            pilot,
            eval: self.eval.clone(),
            output_dir: self.output_dir.clone(),
        })
    }
}
