//! Declarative run configuration (TOML). Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::prosody::{CwtConfig, PauseThresholds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub acoustic: AcousticConfig,
    pub train: TrainConfig,
    pub stylepred: StylePredConfig,
    pub prosody: ProsodyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            data: DataConfig::default(),
            acoustic: AcousticConfig::default(),
            train: TrainConfig::default(),
            stylepred: StylePredConfig::default(),
            prosody: ProsodyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub utterances: usize,
    pub speakers: usize,
    pub mel_bins: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            utterances: 200,
            speakers: 2,
            mel_bins: 16,
        }
    }
}

/// Acoustic model sizes. Style and speaker widths follow the published
/// table; recurrent and convolutional widths are shrunk for a single CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticConfig {
    pub symbol_embedding: usize,
    pub encoder_conv_channels: usize,
    pub encoder_conv_layers: usize,
    pub encoder_conv_kernel: usize,
    /// Per direction.
    pub encoder_rnn: usize,
    pub speaker_embedding: usize,
    pub style_embedding: usize,
    pub style_tokens: usize,
    pub style_token_dim: usize,
    pub style_heads: usize,
    pub style_head_dim: usize,
    pub global_conv_channels: Vec<usize>,
    pub global_rnn: usize,
    pub local_conv_channels: Vec<usize>,
    /// Per direction.
    pub local_rnn: usize,
    pub prenet: Vec<usize>,
    pub prenet_dropout: f64,
    pub attention_rnn: usize,
    pub decoder_rnn: usize,
    pub attention_hidden: usize,
    pub positional_dim: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    /// Per direction.
    pub duration_rnn: usize,
    pub range_channels: usize,
    /// Initial attention increment, in encoder positions per frame.
    pub init_delta: f64,
    pub init_sigma: f64,
    /// Stop the decoder's positional input from steering the attention.
    pub detach_position: bool,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            symbol_embedding: 64,
            encoder_conv_channels: 64,
            encoder_conv_layers: 3,
            encoder_conv_kernel: 5,
            encoder_rnn: 64,
            speaker_embedding: 256,
            style_embedding: 256,
            style_tokens: 10,
            style_token_dim: 32,
            style_heads: 4,
            style_head_dim: 16,
            global_conv_channels: vec![16, 32, 32],
            global_rnn: 128,
            local_conv_channels: vec![32, 32],
            local_rnn: 32,
            prenet: vec![64, 64],
            prenet_dropout: 0.5,
            attention_rnn: 128,
            decoder_rnn: 128,
            attention_hidden: 128,
            positional_dim: 32,
            postnet_channels: 64,
            postnet_layers: 3,
            postnet_kernel: 5,
            duration_rnn: 64,
            range_channels: 32,
            init_delta: 0.15,
            init_sigma: 0.8,
            detach_position: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step at which the alignment losses switch on and the decay starts.
    pub knee: usize,
    pub decay_rate: f64,
    /// Steps per decay factor; 0 means ten times the knee.
    pub decay_steps: usize,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2700,
            batch_size: 8,
            learning_rate: 1e-3,
            knee: 1350,
            decay_rate: 0.5,
            decay_steps: 0,
            grad_clip: 1.0,
            checkpoint_every: 500,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn decay_steps(&self) -> usize {
        if self.decay_steps == 0 {
            10 * self.knee.max(1)
        } else {
            self.decay_steps
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylePredConfig {
    pub word_embedding: usize,
    /// Per direction.
    pub context_rnn: usize,
    /// Per direction.
    pub global_rnn: usize,
    pub learning_rate: f64,
    pub external_learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub emd_weight: f64,
    pub gse_weight: f64,
    pub lse_weight: f64,
    pub symbolic_weight: f64,
    pub log_every: usize,
}

impl Default for StylePredConfig {
    fn default() -> Self {
        Self {
            word_embedding: 64,
            context_rnn: 64,
            global_rnn: 64,
            learning_rate: 1e-3,
            external_learning_rate: 2e-5,
            steps: 1500,
            batch_size: 16,
            emd_weight: 1.0,
            gse_weight: 1.0,
            lse_weight: 1.0,
            symbolic_weight: 1.0,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProsodyConfig {
    pub pause_thresholds: PauseThresholds,
    pub cwt: CwtConfig,
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        Self {
            pause_thresholds: PauseThresholds::default(),
            cwt: CwtConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hash of the canonical serialization, embedded in every artifact.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.acoustic;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.utterances == 0 || self.data.speakers == 0 || self.data.mel_bins == 0 {
            return bad("data sizes must be positive");
        }
        if a.style_tokens == 0 || a.style_heads == 0 || a.style_head_dim == 0 {
            return bad("style token attention sizes must be positive");
        }
        if a.encoder_conv_kernel % 2 == 0 || a.postnet_kernel % 2 == 0 {
            return bad("convolution kernels must be odd");
        }
        if a.positional_dim % 2 != 0 || a.positional_dim == 0 {
            return bad("positional dimension must be even and positive");
        }
        if a.prenet.is_empty() || a.global_conv_channels.is_empty() || a.postnet_layers < 2 {
            return bad("prenet, global conv stack and postnet need at least one layer (postnet two)");
        }
        if !(0.0..1.0).contains(&a.prenet_dropout) {
            return bad("prenet dropout must lie in [0, 1)");
        }
        if !(a.init_delta > 0.0 && a.init_delta < 1.0) || a.init_sigma <= 0.0 {
            return bad("initial attention increment must lie in (0, 1) and width be positive");
        }
        let t = &self.train;
        if t.batch_size == 0 || t.learning_rate <= 0.0 || t.grad_clip <= 0.0 {
            return bad("batch size, learning rate and clip norm must be positive");
        }
        if !(t.decay_rate > 0.0 && t.decay_rate <= 1.0) {
            return bad("decay rate must lie in (0, 1]");
        }
        let s = &self.stylepred;
        if s.batch_size == 0 || s.learning_rate <= 0.0 {
            return bad("style predictor batch size and learning rate must be positive");
        }
        let th = self.prosody.pause_thresholds.0;
        if th.windows(2).any(|w| w[0] >= w[1]) || th[0] <= 0.0 {
            return bad("pause thresholds must be positive and increasing");
        }
        if self.prosody.cwt.n_scales == 0 {
            return bad("at least one wavelet scale is required");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nstep = 3").is_err());
        let c = RunConfig::from_toml("[train]\nsteps = 3").unwrap();
        assert_eq!(c.train.steps, 3);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn table_dimensions_are_the_defaults() {
        let a = AcousticConfig::default();
        assert_eq!((a.speaker_embedding, a.style_embedding), (256, 256));
        assert_eq!((a.style_tokens, a.style_token_dim), (10, 32));
        assert_eq!((a.positional_dim, a.attention_hidden), (32, 128));
    }
}
