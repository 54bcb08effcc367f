//! Run configuration: one JSON document with `data`, `model`, `train`,
//! `ablation` sections and an `output_dir`. Unknown keys are rejected;
//! every key has a default, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::read_json;

/// Which incident-fusion implementation runs at the anchor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Masked cross-attention fusion (the main design).
    Icsf,
    /// Mean-pool + MLP baseline.
    Mlp,
    /// Iterative message-passing baseline.
    Imp,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Icsf => "icsf",
            FusionMode::Mlp => "mlp",
            FusionMode::Imp => "imp",
        }
    }
}

fn default_true() -> bool {
    true
}

/// Model dimensions and architecture switches (`model` section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// History window length in 5-minute steps.
    pub t_h: usize,
    /// Forecast horizon in 5-minute steps.
    pub t_p: usize,
    /// Hidden width per node.
    pub d_h: usize,
    /// Attention key width.
    pub d_k: usize,
    /// Attention value width.
    pub d_v: usize,
    /// Sensor encoding width.
    pub d_s: usize,
    /// Incident encoding width.
    pub d_e: usize,
    /// Node/timestamp embedding width.
    pub d_emb: usize,
    /// Temporal self-attention width; defaults to `d_h`.
    pub d_attn: Option<usize>,
    /// Backbone output width per node per step.
    pub d_out: usize,
    /// Width of each sensor categorical embedding.
    pub d_sensor_cat: usize,
    /// Incident type embedding width.
    pub d_incident_type: usize,
    /// Incident description embedding width.
    pub d_incident_desc: usize,
    /// Number of decoupling blocks L.
    pub layers: usize,
    /// Diffusion order P per adjacency.
    pub diffusion_order: usize,
    /// Temporal decay scale σ_t of the impact dissipation.
    pub sigma_t: f64,
    /// Message-passing rounds for the `imp` fusion baseline.
    pub imp_rounds: usize,
    pub fusion: FusionMode,
    /// Ablation switches; all on for the full model.
    #[serde(default = "default_true")]
    pub icsf: bool,
    #[serde(default = "default_true")]
    pub tiid: bool,
    /// Feed sensor encodings into fusion scoring (w/o S when false).
    #[serde(default = "default_true")]
    pub use_s: bool,
    /// Feed relation-tensor channels into fusion scoring (w/o D when false).
    #[serde(default = "default_true")]
    pub use_d: bool,
    /// Use incident type/description embeddings (w/o I when false).
    #[serde(default = "default_true")]
    pub use_i: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            t_h: 12,
            t_p: 12,
            d_h: 64,
            d_k: 64,
            d_v: 64,
            d_s: 32,
            d_e: 48,
            d_emb: 12,
            d_attn: None,
            d_out: 64,
            d_sensor_cat: 8,
            d_incident_type: 8,
            d_incident_desc: 32,
            layers: 5,
            diffusion_order: 2,
            sigma_t: 1.0,
            imp_rounds: 2,
            fusion: FusionMode::Icsf,
            icsf: true,
            tiid: true,
            use_s: true,
            use_d: true,
            use_i: true,
        }
    }
}

impl ModelSection {
    /// Width of the dynamic-state embedding: last hidden state plus the two
    /// timestamp embeddings.
    pub fn d_dyn(&self) -> usize {
        self.d_h + 2 * self.d_emb
    }

    pub fn d_attn(&self) -> usize {
        self.d_attn.unwrap_or(self.d_h)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("t_h", self.t_h),
            ("t_p", self.t_p),
            ("d_h", self.d_h),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_s", self.d_s),
            ("d_e", self.d_e),
            ("d_emb", self.d_emb),
            ("d_out", self.d_out),
            ("d_sensor_cat", self.d_sensor_cat),
            ("d_incident_type", self.d_incident_type),
            ("d_incident_desc", self.d_incident_desc),
            ("layers", self.layers),
            ("diffusion_order", self.diffusion_order),
            ("imp_rounds", self.imp_rounds),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(CoreError::config(format!("model.{name} must be positive")));
            }
        }
        if self.sigma_t <= 0.0 {
            return Err(CoreError::config(format!(
                "model.sigma_t must be positive, got {}",
                self.sigma_t
            )));
        }
        Ok(())
    }
}

/// Optimization settings (`train` section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    /// 48 suits small regions; 24 is the documented default for large ones.
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Worker threads for batch gradients; 1 = sequential.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.002,
            batch_size: 48,
            patience: 20,
            max_epochs: 100,
            clip_norm: 5.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CoreError::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CoreError::config(
                "train.batch_size and train.max_epochs must be positive".to_string(),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(CoreError::config(format!(
                "train.clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Synthetic corridor generator settings (`data.synth`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Sensors on a linear freeway at `abs_pm = i · 1.0` miles.
    pub nodes: usize,
    pub days: usize,
    /// Peak of the daily sinusoid, vehicles per window.
    pub base_amplitude: f64,
    /// Noise standard deviation as a fraction of the amplitude.
    pub noise_frac: f64,
    pub incidents_per_day: f64,
    /// Peak fractional flow reduction δ at the incident location.
    pub impact_peak: f64,
    /// Gaussian spatial spread of the impact, km.
    pub spatial_spread_km: f64,
    /// Linear recovery length in windows (≤ 48).
    pub recovery_steps: usize,
    pub seed: u64,
    /// Per-category impact multipliers, indexed like the taxonomy
    /// (Hazard, Accident, Breakdown, Weather, Other, Police). Non-uniform
    /// by default so the incident type genuinely informs impact size;
    /// set all six to 1.0 to recover the plain formula.
    pub type_weights: [f64; 6],
    /// Per-description multipliers within a category (slot order).
    pub desc_weights: [f64; 5],
    /// Impact multiplier for sensors with Commercial roadway use.
    pub susceptibility_commercial: f64,
    /// Impact multiplier for sensors with Residential roadway use.
    pub susceptibility_residential: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            nodes: 20,
            days: 10,
            base_amplitude: 100.0,
            noise_frac: 0.02,
            incidents_per_day: 4.0,
            impact_peak: 0.5,
            spatial_spread_km: 2.0,
            recovery_steps: 12,
            seed: 0,
            type_weights: [0.8, 1.3, 1.0, 1.1, 0.6, 0.9],
            desc_weights: [0.8, 0.9, 1.0, 1.1, 1.2],
            susceptibility_commercial: 1.0,
            susceptibility_residential: 0.7,
        }
    }
}

impl SynthSection {
    /// Weights of 1.0 everywhere: impacts depend only on distance/recency.
    pub fn with_uniform_weights(mut self) -> Self {
        self.type_weights = [1.0; 6];
        self.desc_weights = [1.0; 5];
        self.susceptibility_commercial = 1.0;
        self.susceptibility_residential = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.days == 0 {
            return Err(CoreError::config("synth.nodes and synth.days must be positive".to_string()));
        }
        if self.base_amplitude <= 0.0
            || self.noise_frac < 0.0
            || self.incidents_per_day < 0.0
            || self.impact_peak <= 0.0
            || self.spatial_spread_km <= 0.0
        {
            return Err(CoreError::config("synth rates and scales must be positive".to_string()));
        }
        if self.recovery_steps == 0 || self.recovery_steps > 48 {
            return Err(CoreError::config(format!(
                "synth.recovery_steps must lie in [1, 48], got {}",
                self.recovery_steps
            )));
        }
        let all_weights = self
            .type_weights
            .iter()
            .chain(self.desc_weights.iter())
            .chain([&self.susceptibility_commercial, &self.susceptibility_residential]);
        for w in all_weights {
            if *w <= 0.0 {
                return Err(CoreError::config("synth impact weights must be positive".to_string()));
            }
        }
        Ok(())
    }
}

/// Dataset construction settings (`data` section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of raw inputs (`sensors.csv`, `incidents.csv`,
    /// `traffic.bin`); defaults to `<output_dir>/raw`.
    pub raw_dir: Option<PathBuf>,
    /// Directory of processed artifacts; defaults to `<output_dir>/build`.
    pub processed_dir: Option<PathBuf>,
    /// Gaussian bandwidth of the sensor adjacency, km; estimated from the
    /// data when absent.
    pub adjacency_bandwidth_km: Option<f64>,
    pub adjacency_threshold: f64,
    /// Relation-tensor Euclidean bandwidth, km; estimated when absent.
    pub sigma_euc_km: Option<f64>,
    /// Relation-tensor road bandwidth, km; estimated when absent.
    pub sigma_road_km: Option<f64>,
    /// Connectivity threshold on the road-proximity channel.
    pub kappa: f64,
    pub split: (f64, f64, f64),
    /// Node shown in the horizon plot; nearest-to-incident when absent.
    pub plot_node: Option<usize>,
    /// Forecast step (1-based) shown in the horizon plot.
    pub plot_horizon: usize,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            raw_dir: None,
            processed_dir: None,
            adjacency_bandwidth_km: None,
            adjacency_threshold: 0.1,
            sigma_euc_km: None,
            sigma_road_km: None,
            kappa: 0.05,
            split: (0.70, 0.15, 0.15),
            plot_node: None,
            plot_horizon: 3,
            synth: SynthSection::default(),
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.adjacency_threshold) {
            return Err(CoreError::config(format!(
                "data.adjacency_threshold must lie in [0,1), got {}",
                self.adjacency_threshold
            )));
        }
        if self.kappa <= 0.0 || self.kappa > 1.0 {
            return Err(CoreError::config(format!(
                "data.kappa must lie in (0,1], got {}",
                self.kappa
            )));
        }
        for (name, v) in [
            ("adjacency_bandwidth_km", self.adjacency_bandwidth_km),
            ("sigma_euc_km", self.sigma_euc_km),
            ("sigma_road_km", self.sigma_road_km),
        ] {
            if let Some(v) = v {
                if v <= 0.0 {
                    return Err(CoreError::config(format!("data.{name} must be positive, got {v}")));
                }
            }
        }
        if self.plot_horizon == 0 {
            return Err(CoreError::config("data.plot_horizon is 1-based".to_string()));
        }
        self.synth.validate()
    }
}

/// Ablation matrix settings (`ablation` section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Variant names to run, in order.
    pub variants: Vec<String>,
}

pub const ALL_VARIANTS: [&str; 6] = ["full", "no_icsf", "no_tiid", "no_s", "no_d", "no_i"];

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            variants: ALL_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AblationSection {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(CoreError::config("ablation.variants must not be empty".to_string()));
        }
        for v in &self.variants {
            if !ALL_VARIANTS.contains(&v.as_str()) {
                return Err(CoreError::config(format!(
                    "unknown ablation variant {v:?}; expected one of {ALL_VARIANTS:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
            output_dir: PathBuf::from("igstf-out"),
        }
    }
}

impl RunConfig {
    /// Loads and validates a config file; `IGSTF_OUTPUT_DIR` in the
    /// environment overrides `output_dir`.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = read_json(path)?;
        if let Ok(dir) = std::env::var("IGSTF_OUTPUT_DIR") {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ablation.validate()
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.data
            .raw_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("raw"))
    }

    pub fn processed_dir(&self) -> PathBuf {
        self.data
            .processed_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("build"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.output_dir.join("ablation")
    }
}

/// Data-construction parameters after bandwidth estimation, persisted in
/// `build_report.json` and the model artifact so that later stages rebuild
/// the exact same tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedDataParams {
    pub adjacency_bandwidth_km: f64,
    pub adjacency_threshold: f64,
    pub sigma_euc_km: f64,
    pub sigma_road_km: f64,
    pub kappa: f64,
    pub split: (f64, f64, f64),
}
