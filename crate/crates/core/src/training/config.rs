//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::model::ModelConfig;
use crate::numerics::AdamConfig;

use super::TrainError;

/// Encoder loss used in the regularization phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvLoss {
    /// `β · mean(log d − log(1 − d))`.
    DensityRatio,
    /// `β · mean(log d)`.
    SingleTerm,
}

impl AdvLoss {
    fn as_str(self) -> &'static str {
        match self {
            AdvLoss::DensityRatio => "density_ratio",
            AdvLoss::SingleTerm => "single_term",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub tf_prob: f64,
    pub ss_k: usize,
    pub beta_max: f64,
    pub beta_start_step: u64,
    pub beta_ramp_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub split_train: f64,
    pub split_valid: f64,
    pub split_test: f64,
    pub checkpoint_every: u64,
    pub valid_every: u64,
    pub grad_clip: f64,
    pub adv_loss: AdvLoss,
}

impl TrainConfig {
    /// Defaults for a model of `bars` measures.
    pub fn for_bars(bars: usize) -> Self {
        let long = bars >= 16;
        TrainConfig {
            model: ModelConfig::full(bars),
            lr: 1e-4,
            batch_size: if long { 2 } else { 20 },
            tf_prob: 0.5,
            ss_k: 1,
            beta_max: 0.1,
            beta_start_step: if long { 25_000 } else { 50_000 },
            beta_ramp_steps: 10_000,
            total_steps: 100_000,
            seed: 0,
            split_train: 0.7,
            split_valid: 0.1,
            split_test: 0.2,
            checkpoint_every: 5_000,
            valid_every: 1_000,
            grad_clip: 1.0,
            adv_loss: AdvLoss::DensityRatio,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.tf_prob) {
            return bad(format!("tf_prob {} outside [0, 1]", self.tf_prob));
        }
        if self.beta_max < 0.0 || !self.beta_max.is_finite() {
            return bad(format!(
                "beta_max {} must be a finite non-negative number",
                self.beta_max
            ));
        }
        let fractions = [self.split_train, self.split_valid, self.split_test];
        if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions {fractions:?} must be non-negative and sum to 1"
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if self.ss_k != 1 {
            return bad(format!(
                "ss_k {} unsupported; only one sampling pass is implemented",
                self.ss_k
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `bars` (if present)
    /// selects the defaults and is applied before the other keys.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let bars = match pairs.iter().find(|(_, k, _)| k == "bars") {
            Some((n, _, v)) => num::<usize>(*n, "bars", v)?,
            None => 1,
        };
        let mut c = TrainConfig::for_bars(bars);
        for (n, k, v) in &pairs {
            c.set(*n, k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), TrainError> {
        let m = &mut self.model;
        match key {
            "bars" => m.n_measures = num(line, key, v)?,
            "model" => {
                let bars = m.n_measures;
                *m = match v {
                    "full" => ModelConfig::full(bars),
                    "tiny" => ModelConfig::tiny(bars),
                    _ => {
                        return Err(TrainError::Config(format!(
                            "line {line}: model must be full or tiny"
                        )))
                    }
                }
            }
            "d_model" => m.d_model = num(line, key, v)?,
            "n_layers" => m.n_layers = num(line, key, v)?,
            "n_heads" => m.n_heads = num(line, key, v)?,
            "d_ff" => m.d_ff = num(line, key, v)?,
            "n_z" => m.n_z = num(line, key, v)?,
            "seq_len" => m.seq_len = num(line, key, v)?,
            "l_mem" => m.l_mem = num(line, key, v)?,
            "disc_hidden" => m.disc_hidden = num(line, key, v)?,
            "lr" => self.lr = num(line, key, v)?,
            "batch_size" => self.batch_size = num(line, key, v)?,
            "tf_prob" => self.tf_prob = num(line, key, v)?,
            "ss_k" => self.ss_k = num(line, key, v)?,
            "beta_max" => self.beta_max = num(line, key, v)?,
            "beta_start_step" => self.beta_start_step = num(line, key, v)?,
            "beta_ramp_steps" => self.beta_ramp_steps = num(line, key, v)?,
            "total_steps" => self.total_steps = num(line, key, v)?,
            "seed" => self.seed = num(line, key, v)?,
            "split_train" => self.split_train = num(line, key, v)?,
            "split_valid" => self.split_valid = num(line, key, v)?,
            "split_test" => self.split_test = num(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(line, key, v)?,
            "valid_every" => self.valid_every = num(line, key, v)?,
            "grad_clip" => self.grad_clip = num(line, key, v)?,
            "adv_loss" => {
                self.adv_loss = match v {
                    "density_ratio" => AdvLoss::DensityRatio,
                    "single_term" => AdvLoss::SingleTerm,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "line {line}: adv_loss must be density_ratio or single_term"
                        )))
                    }
                }
            }
            _ => {
                return Err(TrainError::Config(format!(
                    "line {line}: unknown key {key}"
                )))
            }
        }
        Ok(())
    }

    /// Serializes every key; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("bars", m.n_measures.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("n_z", m.n_z.to_string());
        kv("seq_len", m.seq_len.to_string());
        kv("l_mem", m.l_mem.to_string());
        kv("disc_hidden", m.disc_hidden.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("tf_prob", self.tf_prob.to_string());
        kv("ss_k", self.ss_k.to_string());
        kv("beta_max", self.beta_max.to_string());
        kv("beta_start_step", self.beta_start_step.to_string());
        kv("beta_ramp_steps", self.beta_ramp_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("split_train", self.split_train.to_string());
        kv("split_valid", self.split_valid.to_string());
        kv("split_test", self.split_test.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("valid_every", self.valid_every.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("adv_loss", self.adv_loss.as_str().to_string());
        s
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, TrainError> {
    v.parse()
        .map_err(|_| TrainError::Config(format!("line {line}: bad value {v:?} for {key}")))
}
