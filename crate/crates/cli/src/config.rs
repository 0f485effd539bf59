use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splitq_core::calibrate::GradMode;
use splitq_core::quantizer::Granularity;
use splitq_core::{
    CalibConfig, LayerConfig, MocdConfig, QuantSpec, SynthConfig, TransformKind, WeightConfig,
};

use crate::error::CliError;

/// Everything a run can be configured with. Loaded from `--config` (unknown
/// keys rejected), then overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub activations: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub layer: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub wbits: u8,
    pub abits: u8,
    /// Replace every quantizer with the identity.
    pub identity_quant: bool,
    pub mocd: bool,
    pub cws: bool,
    pub mac: bool,
    pub ratio_vision: f64,
    pub ratio_text: f64,
    pub clusters: usize,
    pub rank_cws: f64,
    pub rank_mac: f64,
    pub calib: CalibSettings,
    pub synth: SynthSettings,
    pub stability: StabilitySettings,
    pub ablation: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mocd = MocdConfig::default();
        let layer = LayerConfig::default();
        Self {
            activations: None,
            weights: None,
            layer: None,
            out: PathBuf::from("out"),
            seed: 0,
            wbits: 4,
            abits: 4,
            identity_quant: false,
            mocd: true,
            cws: true,
            mac: true,
            ratio_vision: mocd.ratio_vision,
            ratio_text: mocd.ratio_text,
            clusters: mocd.clusters_k,
            rank_cws: layer.rank_cws,
            rank_mac: layer.rank_mac,
            calib: CalibSettings::default(),
            synth: SynthSettings::default(),
            stability: StabilitySettings::default(),
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub learn_p_main: bool,
    pub learn_p_text: bool,
    pub learn_p_vision: bool,
    pub learn_gates: bool,
    pub grad_mode: GradMode,
}

impl Default for CalibSettings {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            steps: c.steps,
            learning_rate: c.learning_rate,
            learn_p_main: c.learn_p_main,
            learn_p_text: c.learn_p_text,
            learn_p_vision: c.learn_p_vision,
            learn_gates: c.learn_gates,
            grad_mode: c.grad_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub tokens_text: usize,
    pub tokens_vision: usize,
    pub dim: usize,
    pub d_out: usize,
    pub vision_outlier_channels: Vec<usize>,
    pub text_outlier_channels: Vec<usize>,
    pub vision_outlier_scale: f64,
    pub text_instability: f64,
    pub text_channel_spread: f64,
    pub base_sigma: f64,
    pub spike_rank: usize,
    pub spike_strength: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SynthConfig::default();
        let w = WeightConfig::default();
        Self {
            tokens_text: s.tokens_text,
            tokens_vision: s.tokens_vision,
            dim: s.dim,
            d_out: w.d_out,
            vision_outlier_channels: s.vision_outlier_channels,
            text_outlier_channels: s.text_outlier_channels,
            vision_outlier_scale: s.vision_outlier_scale,
            text_instability: s.text_instability,
            text_channel_spread: s.text_channel_spread,
            base_sigma: s.base_sigma,
            spike_rank: w.spike_rank,
            spike_strength: w.spike_strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySettings {
    pub subset_sizes: Vec<usize>,
    /// Defaults to every token in the batch.
    pub reference_size: Option<usize>,
    pub trials: usize,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self {
            subset_sizes: vec![32, 64],
            reference_size: None,
            trials: 20,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn activations_path(&self) -> PathBuf {
        self.activations
            .clone()
            .unwrap_or_else(|| self.out.join("activations.spqt"))
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights
            .clone()
            .unwrap_or_else(|| self.out.join("weights.spqt"))
    }

    pub fn layer_path(&self) -> PathBuf {
        self.layer.clone().unwrap_or_else(|| self.out.join("layer"))
    }

    pub fn synth(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            tokens_text: s.tokens_text,
            tokens_vision: s.tokens_vision,
            dim: s.dim,
            vision_outlier_channels: s.vision_outlier_channels.clone(),
            text_outlier_channels: s.text_outlier_channels.clone(),
            vision_outlier_scale: s.vision_outlier_scale,
            text_instability: s.text_instability,
            text_channel_spread: s.text_channel_spread,
            base_sigma: s.base_sigma,
            seed: self.seed,
        }
    }

    pub fn weight(&self) -> WeightConfig {
        WeightConfig {
            d_in: self.synth.dim,
            d_out: self.synth.d_out,
            spike_rank: self.synth.spike_rank,
            spike_strength: self.synth.spike_strength,
            seed: self.seed,
        }
    }

    /// Selection settings; with `mocd` off both ratios are zero.
    pub fn mocd(&self) -> MocdConfig {
        let (rv, rt) = if self.mocd {
            (self.ratio_vision, self.ratio_text)
        } else {
            (0.0, 0.0)
        };
        MocdConfig {
            ratio_vision: rv,
            ratio_text: rt,
            clusters_k: self.clusters,
            seed: self.seed,
            ..MocdConfig::default()
        }
    }

    pub fn layer(&self) -> Result<LayerConfig, CliError> {
        let (act_spec, weight_spec) = if self.identity_quant {
            (
                QuantSpec::identity(Granularity::PerToken),
                QuantSpec::identity(Granularity::PerChannel),
            )
        } else {
            (
                QuantSpec::activation(self.abits)?,
                QuantSpec::weight(self.wbits)?,
            )
        };
        Ok(LayerConfig {
            act_spec,
            weight_spec,
            cws: self.cws,
            mac: self.mac,
            rank_cws: self.rank_cws,
            rank_mac: self.rank_mac,
            transform_kind: TransformKind::Diagonal,
            smooth_init: true,
        })
    }

    pub fn calib(&self) -> CalibConfig {
        let c = &self.calib;
        CalibConfig {
            steps: c.steps,
            learning_rate: c.learning_rate,
            seed: self.seed,
            learn_p_main: c.learn_p_main,
            learn_p_text: c.learn_p_text,
            learn_p_vision: c.learn_p_vision,
            learn_gates: c.learn_gates,
            grad_mode: c.grad_mode,
        }
    }
}
