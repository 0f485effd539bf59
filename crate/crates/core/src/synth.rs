//! Seeded generator of modality-heterogeneous activation batches with
//! planted outlier channels, plus a matching synthetic weight.
//!
//! Vision tokens are i.i.d. `N(0, sigma^2)` with the planted vision channels
//! multiplied by `vision_outlier_scale`. Text tokens have a persistent
//! per-channel magnitude profile, so an ordinary channel keeps roughly the
//! same within-token rank from token to token. A planted text channel
//! breaks that: with probability `text_instability` a token redraws its
//! magnitude log-uniformly across the bulk of the row's range, which
//! scatters its rank sequence and raises its within-cluster variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::tensor::{ActivationBatch, Matrix, ModalityTag};

/// Multiplicative per-token jitter (log-normal sigma) on the text profile.
const TEXT_JITTER: f64 = 0.2;
/// Log-normal sigma of the per-token scale shared by a whole text row.
const TEXT_TOKEN_SCALE: f64 = 0.5;
/// Magnitude range of an unstable planted text entry, relative to sigma.
const UNSTABLE_RANGE: (f64, f64) = (0.03, 6.0);

// Independent RNG streams so the base draws never depend on which channels
// are planted.
const STREAM_PROFILE: u64 = 1;
const STREAM_TEXT: u64 = 2;
const STREAM_VISION: u64 = 3;
const STREAM_PLANTED: u64 = 4;
const STREAM_WEIGHT: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub tokens_text: usize,
    pub tokens_vision: usize,
    pub dim: usize,
    pub vision_outlier_channels: Vec<usize>,
    pub text_outlier_channels: Vec<usize>,
    pub vision_outlier_scale: f64,
    pub text_instability: f64,
    /// Log-normal sigma of the persistent text channel magnitudes.
    pub text_channel_spread: f64,
    pub base_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens_text: 64,
            tokens_vision: 64,
            dim: 64,
            vision_outlier_channels: vec![3],
            text_outlier_channels: vec![9],
            vision_outlier_scale: 100.0,
            text_instability: 0.8,
            text_channel_spread: 1.0,
            base_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(SplitqError::config("dim must be positive"));
        }
        if self.tokens_text + self.tokens_vision == 0 {
            return Err(SplitqError::config("at least one token is required"));
        }
        for (name, set) in [
            ("vision_outlier_channels", &self.vision_outlier_channels),
            ("text_outlier_channels", &self.text_outlier_channels),
        ] {
            if let Some(c) = set.iter().find(|&&c| c >= self.dim) {
                return Err(SplitqError::config(format!(
                    "{name}: channel {c} outside 0..{}",
                    self.dim
                )));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(SplitqError::config(format!("{name}: duplicate channel")));
            }
        }
        if let Some(c) = self
            .vision_outlier_channels
            .iter()
            .find(|c| self.text_outlier_channels.contains(c))
        {
            return Err(SplitqError::config(format!(
                "vision_outlier_channels and text_outlier_channels overlap at {c}"
            )));
        }
        if !(self.vision_outlier_scale.is_finite() && self.vision_outlier_scale >= 1.0) {
            return Err(SplitqError::config("vision_outlier_scale must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.text_instability) {
            return Err(SplitqError::config("text_instability must lie in [0, 1]"));
        }
        if !(self.text_channel_spread.is_finite() && self.text_channel_spread >= 0.0) {
            return Err(SplitqError::config("text_channel_spread must be >= 0"));
        }
        if !(self.base_sigma.is_finite() && self.base_sigma > 0.0) {
            return Err(SplitqError::config("base_sigma must be positive"));
        }
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn sign(r: &mut ChaCha8Rng) -> f64 {
    if r.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Text rows first, then vision rows.
pub fn generate(cfg: &SynthConfig) -> Result<ActivationBatch> {
    cfg.validate()?;
    let (tt, tv, d) = (cfg.tokens_text, cfg.tokens_vision, cfg.dim);
    let sigma = cfg.base_sigma;
    let spread = cfg.text_channel_spread;

    // Normalised so the mean squared profile is one.
    let mut profile_rng = rng(cfg.seed, STREAM_PROFILE);
    let profile: Vec<f64> = (0..d)
        .map(|_| (spread * normal(&mut profile_rng) - spread * spread).exp())
        .collect();

    let mut data = Vec::with_capacity((tt + tv) * d);
    let mut text_rng = rng(cfg.seed, STREAM_TEXT);
    let mut planted_rng = rng(cfg.seed, STREAM_PLANTED);
    let (lo, hi) = (UNSTABLE_RANGE.0.ln(), UNSTABLE_RANGE.1.ln());
    for _ in 0..tt {
        let token_scale =
            (TEXT_TOKEN_SCALE * normal(&mut text_rng) - TEXT_TOKEN_SCALE * TEXT_TOKEN_SCALE).exp();
        let start = data.len();
        for &a in &profile {
            let jitter = (TEXT_JITTER * normal(&mut text_rng)).exp();
            data.push(sigma * token_scale * a * jitter * sign(&mut text_rng));
        }
        // Always draw the same amount so every channel sees the same stream.
        for c in 0..d {
            let flip = planted_rng.random::<f64>() < cfg.text_instability;
            let mag = planted_rng.random_range(lo..hi).exp();
            let s = sign(&mut planted_rng);
            if flip && cfg.text_outlier_channels.contains(&c) {
                data[start + c] = sigma * token_scale * mag * s;
            }
        }
    }
    let mut vision_rng = rng(cfg.seed, STREAM_VISION);
    for _ in 0..tv {
        for c in 0..d {
            let mut v = sigma * normal(&mut vision_rng);
            if cfg.vision_outlier_channels.contains(&c) {
                v *= cfg.vision_outlier_scale;
            }
            data.push(v);
        }
    }
    let mut tags = vec![ModalityTag::Text; tt];
    tags.extend(std::iter::repeat_n(ModalityTag::Vision, tv));
    ActivationBatch::new(Matrix::new(tt + tv, d, data)?, tags)
}

/// Synthetic weight: Gaussian noise with variance `1 / d_in` plus a few
/// dominant rank-one components, the spectrum shape typical of trained
/// projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub spike_rank: usize,
    /// Singular value of the leading component; later ones decay as `1/k`.
    pub spike_strength: f64,
    pub seed: u64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_out: 64,
            spike_rank: 4,
            spike_strength: 8.0,
            seed: 0,
        }
    }
}

pub fn generate_weight(cfg: &WeightConfig) -> Result<Matrix> {
    if cfg.d_in == 0 || cfg.d_out == 0 {
        return Err(SplitqError::config("weight dimensions must be positive"));
    }
    if !(cfg.spike_strength.is_finite() && cfg.spike_strength >= 0.0) {
        return Err(SplitqError::config("spike_strength must be >= 0"));
    }
    let mut r = rng(cfg.seed, STREAM_WEIGHT);
    let noise = 1.0 / (cfg.d_in as f64).sqrt();
    let mut w = Matrix::from_fn(cfg.d_in, cfg.d_out, |_, _| noise * normal(&mut r));
    let unit = |n: usize, r: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n).map(|_| normal(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    for k in 0..cfg.spike_rank {
        let u = unit(cfg.d_in, &mut r);
        let v = unit(cfg.d_out, &mut r);
        let s = cfg.spike_strength / (k + 1) as f64;
        for (i, ui) in u.iter().enumerate() {
            for (o, vj) in w.row_mut(i).iter_mut().zip(&v) {
                *o += s * ui * vj;
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
        let w = WeightConfig::default();
        assert_eq!(generate_weight(&w).unwrap(), generate_weight(&w).unwrap());
    }

    #[test]
    fn degenerate_config_plants_nothing() {
        let planted = SynthConfig {
            vision_outlier_scale: 1.0,
            text_instability: 0.0,
            ..SynthConfig::default()
        };
        let plain = SynthConfig {
            vision_outlier_channels: vec![],
            text_outlier_channels: vec![],
            ..planted.clone()
        };
        assert_eq!(generate(&planted).unwrap(), generate(&plain).unwrap());
    }

    #[test]
    fn layout_and_tags() {
        let cfg = SynthConfig {
            tokens_text: 3,
            tokens_vision: 2,
            dim: 5,
            vision_outlier_channels: vec![1],
            text_outlier_channels: vec![4],
            ..SynthConfig::default()
        };
        let b = generate(&cfg).unwrap();
        assert_eq!(b.data().shape(), (5, 5));
        assert_eq!(b.rows_with(ModalityTag::Vision), vec![3, 4]);
    }

    #[test]
    fn invalid_configs() {
        let overlap = SynthConfig {
            vision_outlier_channels: vec![2],
            text_outlier_channels: vec![2],
            ..SynthConfig::default()
        };
        let err = overlap.validate().unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
        let out_of_range = SynthConfig {
            vision_outlier_channels: vec![64],
            ..SynthConfig::default()
        };
        let err = out_of_range.validate().unwrap_err().to_string();
        assert!(err.contains("vision_outlier_channels"), "{err}");
        let bad_p = SynthConfig {
            text_instability: 1.5,
            ..SynthConfig::default()
        };
        assert!(bad_p.validate().is_err());
    }

    #[test]
    fn weight_has_dominant_components() {
        let w = generate_weight(&WeightConfig::default()).unwrap();
        let f = crate::lowrank::truncated_svd(&w, 5).unwrap();
        assert!(f.sigma[0] > 6.0, "{:?}", f.sigma);
        assert!(f.sigma[0] > 2.0 * f.sigma[4], "{:?}", f.sigma);
    }
}
