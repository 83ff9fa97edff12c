use serde::{Deserialize, Serialize};

use super::Seq2SeqError;
use crate::autodiff::AdamConfig;
use crate::corpus::DEFAULT_MAX_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub d_hid: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest source or target, EOS included.
    pub max_len: usize,
    /// Share the token embedding with the output projection (needs `d_tok == d_hid`).
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_tok: 128,
            d_hid: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_ff: 256,
            max_len: DEFAULT_MAX_LEN,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Seq2SeqError> {
        let bad = |msg: String| Err(Seq2SeqError::InvalidConfig(msg));
        if self.d_tok == 0 || self.d_hid == 0 || self.d_ff == 0 || self.heads == 0 {
            return bad("model dimensions and head count must be positive".into());
        }
        if !self.d_hid.is_multiple_of(self.heads) {
            return bad(format!("model.d_hid = {} is not divisible by model.heads = {}", self.d_hid, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("model needs at least one encoder and one decoder layer".into());
        }
        if self.max_len < 2 {
            return bad(format!("model.max_len must be at least 2, got {}", self.max_len));
        }
        if self.tie_embeddings && self.d_tok != self.d_hid {
            return bad("model.tie_embeddings requires d_tok == d_hid".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Upper bound on `batch_size * padded_length` per batch.
    pub token_budget: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Metrics are averaged and emitted every this many steps.
    pub log_every: usize,
    /// Dev-set evaluation interval; `0` disables evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, token_budget: 1024, adam: AdamConfig::default(), seed: 0, log_every: 100, eval_every: 0 }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU core: fewer steps and a 10x learning rate.
    pub fn desk() -> Self {
        Self { steps: 3000, adam: AdamConfig { lr: 3e-4, ..AdamConfig::default() }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), Seq2SeqError> {
        if self.token_budget == 0 || self.log_every == 0 {
            return Err(Seq2SeqError::InvalidConfig("train.token_budget and train.log_every must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Seq2SeqError::InvalidConfig(format!("train.adam.lr must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}
