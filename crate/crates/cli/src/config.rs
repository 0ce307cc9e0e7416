//! Training configuration from a flat JSON file.
//!
//! Precedence is defaults < file < explicit command-line flags; the file
//! uses flat keys matching the flag names so configs stay grep-able.

use std::path::Path;

use serde::Deserialize;

use sdmc_core::{Error, Result, TrainConfig};

/// Every trainable knob, all optional. Unknown keys are rejected so typos
/// fail loudly instead of silently training the wrong model.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub mode: Option<String>,
    pub num_steps: Option<usize>,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
    pub input_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub n_freqs: Option<usize>,
    pub time_embed: Option<bool>,
    pub n_time_freqs: Option<usize>,
    pub chain_len: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_fidelity: Option<f64>,
    pub chain_grad: Option<String>,
    pub chain_init: Option<String>,
    pub weighted_eps_loss: Option<bool>,
    pub combined_step: Option<bool>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub eval_n: Option<usize>,
}

impl PartialConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    /// Overlay every present field onto `config`.
    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(v) = &self.mode {
            config.mode = v.parse()?;
        }
        if let Some(v) = self.num_steps {
            config.schedule.num_steps = v;
        }
        if let Some(v) = self.gamma_min {
            config.schedule.gamma_min = v;
        }
        if let Some(v) = self.gamma_max {
            config.schedule.gamma_max = v;
        }
        if let Some(v) = self.input_dim {
            config.net.input_dim = v;
        }
        if let Some(v) = self.hidden_dim {
            config.net.hidden_dim = v;
        }
        if let Some(v) = self.n_freqs {
            config.net.n_freqs = v;
        }
        if let Some(v) = self.time_embed {
            config.net.time_embed = v;
        }
        if let Some(v) = self.n_time_freqs {
            config.net.n_time_freqs = v;
        }
        if let Some(v) = self.chain_len {
            config.chain_len = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.lambda_fidelity {
            config.lambda_fidelity = v;
        }
        if let Some(v) = &self.chain_grad {
            config.chain_grad = v.parse()?;
        }
        if let Some(v) = &self.chain_init {
            config.chain_init = v.parse()?;
        }
        if let Some(v) = self.weighted_eps_loss {
            config.weighted_eps_loss = v;
        }
        if let Some(v) = self.combined_step {
            config.combined_step = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = self.eval_n {
            config.eval_n = v;
        }
        Ok(())
    }
}
