use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::clustering::{DEFAULT_PRIMARY_WEIGHT, DEFAULT_SECONDARY_WEIGHT};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::FrameConfig;
use crate::losses::LossConfig;
use crate::masking::{TargetMaskRule, DEFAULT_P_START, DEFAULT_SPAN};
use crate::quantizer::BankSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub p_start: f64,
    pub span: usize,
    pub target_rule: TargetMaskRule,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_start: DEFAULT_P_START,
            span: DEFAULT_SPAN,
            target_rule: TargetMaskRule::Any,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_utterances: usize,
    pub steps: u64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Validate after every this many steps (and after the last one); 0 disables.
    pub validate_every: u64,
    /// Write an intermediate checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Fraction of utterances held out for validation.
    pub val_fraction: f64,
    pub loss: LossConfig,
    pub primary_weight: f64,
    pub secondary_weight: f64,
    /// Softmax temperature of the similarity distributions used by the KL term.
    pub kl_temperature: f64,
    /// Adds per-step wall-clock time to metrics records (makes logs non-reproducible).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_utterances: 8,
            steps: 300,
            lr_peak: 1e-3,
            warmup_steps: 1000,
            adam: AdamConfig::default(),
            grad_clip_norm: 5.0,
            seed: 0,
            validate_every: 50,
            checkpoint_every: 0,
            val_fraction: 0.1,
            loss: LossConfig::default(),
            primary_weight: DEFAULT_PRIMARY_WEIGHT,
            secondary_weight: DEFAULT_SECONDARY_WEIGHT,
            kl_temperature: 1.0,
            record_wall_time: false,
        }
    }
}

/// Everything a pre-training run depends on, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub bank: BankSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub frames: FrameConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// One codebook of 8192 x 16, cross-entropy only.
    Baseline,
    /// Six codebooks of 8192 x 16, CE + 0.1 KL, cluster-specific weighting.
    Proposed,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Preset::Baseline),
            "proposed" => Ok(Preset::Proposed),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected baseline or proposed)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut bank = BankSpec::baseline(seed);
        let mut train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        match preset {
            Preset::Baseline => train.loss = LossConfig::ce_only(),
            Preset::Proposed => {
                bank.n_codebooks = 6;
                train.loss = LossConfig {
                    w_ce: 1.0,
                    w_kl: 0.1,
                    cluster_weighting: true,
                    ..LossConfig::default()
                };
            }
        }
        let encoder = EncoderConfig {
            n_heads_out: bank.n_codebooks,
            vocab: bank.codebook_size,
            input_dim: bank.input_dim,
            seed,
            ..EncoderConfig::default()
        };
        Self {
            encoder,
            bank,
            train,
            masking: MaskingConfig::default(),
            frames: FrameConfig::default(),
        }
    }

    /// Sets the codebook count everywhere it appears.
    pub fn set_codebooks(&mut self, n: usize) {
        self.bank.n_codebooks = n;
        self.encoder.n_heads_out = n;
    }

    /// Sets the codebook size everywhere it appears.
    pub fn set_vocab(&mut self, v: usize) {
        self.bank.codebook_size = v;
        self.encoder.vocab = v;
    }

    /// Sets the run seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.bank.seed = seed;
        self.encoder.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.bank.validate()?;
        self.frames.validate()?;
        self.train.loss.validate()?;
        self.train.adam.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if t.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(t.lr_peak > 0.0) {
            return bad(format!("lr_peak must be positive, got {}", t.lr_peak));
        }
        if t.batch_utterances == 0 {
            return bad("batch_utterances must be at least 1".into());
        }
        if !(t.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", t.val_fraction));
        }
        if !(t.kl_temperature > 0.0) {
            return bad("kl_temperature must be positive".into());
        }
        if self.encoder.n_heads_out != self.bank.n_codebooks {
            return bad(format!(
                "encoder has {} output heads but the bank has {} codebooks",
                self.encoder.n_heads_out, self.bank.n_codebooks
            ));
        }
        if self.encoder.vocab != self.bank.codebook_size {
            return bad(format!(
                "encoder vocab {} differs from codebook size {}",
                self.encoder.vocab, self.bank.codebook_size
            ));
        }
        if self.encoder.subsample_factor != self.bank.stack_factor {
            return bad(format!(
                "encoder subsampling {} differs from quantizer stacking {}",
                self.encoder.subsample_factor, self.bank.stack_factor
            ));
        }
        if self.encoder.input_dim != self.bank.input_dim || self.frames.n_mels != self.bank.input_dim {
            return bad(format!(
                "feature dims disagree: encoder {}, bank {}, n_mels {}",
                self.encoder.input_dim, self.bank.input_dim, self.frames.n_mels
            ));
        }
        if !(0.0..=1.0).contains(&self.masking.p_start) || self.masking.span == 0 {
            return bad("masking needs p_start in [0, 1] and span >= 1".into());
        }
        if t.loss.cluster_weighting {
            crate::clustering::codebook_weights(0, self.bank.n_codebooks, t.primary_weight, t.secondary_weight)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
