//! Training state, checkpointing and the outer loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;

use crate::eval::accuracy_next;
use crate::midi_token::TokenizedSong;
use crate::model::Model;
use crate::numerics::{clip_grad_norm, AdamState, Checkpoint, ParamStore, Tensor};

use super::{
    beta_schedule, code_moments, density_ratio_kl, discriminator_grads, encoder_adversarial_grads,
    reconstruction_grads, split_dataset, step_rng, TrainConfig, TrainError, MIN_SPLIT_SONGS,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "step,recon_loss,disc_loss,enc_adv_loss,beta,valid_next_acc,wall_ms";

const STEP_ENTRY: &str = "train.step";
const CKPT_PREFIX: &str = "ckpt-";
const CKPT_SUFFIX: &str = ".bin";

/// One completed step. `step` counts completed steps, so the first is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub recon_loss: f64,
    pub disc_loss: Option<f64>,
    pub enc_adv_loss: Option<f64>,
    pub beta: f64,
    pub valid_next_acc: Option<f64>,
    pub wall_ms: u64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.recon_loss,
            opt(self.disc_loss),
            opt(self.enc_adv_loss),
            self.beta,
            opt(self.valid_next_acc),
            self.wall_ms
        )
    }
}

/// Model, optimizer states and data for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    pub model: Model,
    /// Encoder and decoder optimizer.
    pub ae_opt: AdamState,
    pub disc_opt: AdamState,
    step: u64,
    train: Vec<TokenizedSong>,
    valid: Vec<TokenizedSong>,
}

fn non_finite(step: u64) -> TrainError {
    TrainError::NonFiniteLoss {
        step,
        last_checkpoint: None,
    }
}

impl Trainer {
    /// Fresh model seeded from the config. Corpora of at least ten songs are
    /// split; smaller ones serve as both training and validation set.
    pub fn new(config: TrainConfig, corpus: Vec<TokenizedSong>) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let ae_opt = AdamState::new(config.adam(), &model.ae);
        let disc_opt = AdamState::new(config.adam(), &model.disc);
        let (train, valid) = Self::partition(&config, &model, corpus)?;
        Ok(Trainer {
            config,
            model,
            ae_opt,
            disc_opt,
            step: 0,
            train,
            valid,
        })
    }

    fn partition(
        config: &TrainConfig,
        model: &Model,
        corpus: Vec<TokenizedSong>,
    ) -> Result<(Vec<TokenizedSong>, Vec<TokenizedSong>), TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::Corpus("no songs".into()));
        }
        model
            .net
            .check_songs(&corpus)
            .map_err(|e| TrainError::Corpus(e.to_string()))?;
        if corpus.len() < MIN_SPLIT_SONGS {
            return Ok((corpus.clone(), corpus));
        }
        let split = split_dataset(corpus.len(), config, config.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
        let train = pick(&split.train);
        let valid = pick(&split.valid);
        Ok((train, valid))
    }

    /// Restores a run saved by [`checkpoint`](Self::checkpoint).
    pub fn from_checkpoint(
        config: TrainConfig,
        corpus: Vec<TokenizedSong>,
        ckpt: &Checkpoint,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::from_checkpoint(ckpt)?;
        if *model.config() != config.model {
            return Err(TrainError::Config(format!(
                "checkpoint model {:?} differs from configured {:?}",
                model.config(),
                config.model
            )));
        }
        let ae_opt = read_adam(ckpt, "opt.ae", &config, &model.ae)?;
        let disc_opt = read_adam(ckpt, "opt.disc", &config, &model.disc)?;
        let step = ckpt.u64_values(STEP_ENTRY)?.first().copied().unwrap_or(0);
        let (train, valid) = Self::partition(&config, &model, corpus)?;
        Ok(Trainer {
            config,
            model,
            ae_opt,
            disc_opt,
            step,
            train,
            valid,
        })
    }

    /// Model, optimizer moments and counters, and the step count.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint();
        write_adam(&mut c, "opt.ae", &self.ae_opt, &self.model.ae);
        write_adam(&mut c, "opt.disc", &self.disc_opt, &self.model.disc);
        c.push_u64(STEP_ENTRY, &[self.step]);
        c
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn train_set(&self) -> &[TokenizedSong] {
        &self.train
    }

    pub fn valid_set(&self) -> &[TokenizedSong] {
        &self.valid
    }

    fn batch(&self, rng: &mut impl rand::Rng) -> Vec<TokenizedSong> {
        let n = self.train.len();
        if n <= self.config.batch_size {
            return self.train.clone();
        }
        sample(rng, n, self.config.batch_size)
            .into_iter()
            .map(|i| self.train[i].clone())
            .collect()
    }

    fn clip(&self, grads: &mut [Option<Tensor<f32>>], phase: &str) -> Result<(), TrainError> {
        let norm = clip_grad_norm(grads, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(non_finite(self.step));
        }
        if norm > self.config.grad_clip {
            log::debug!(
                "step {}: {phase} gradient norm {norm:.4} clipped to {}",
                self.step,
                self.config.grad_clip
            );
        }
        Ok(())
    }

    /// Runs one step: reconstruction, then the regularization phase when
    /// `β > 0`. Validation accuracy is left unset.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let start = Instant::now();
        let step = self.step;
        let (recon_loss, reg) = self.step_inner().map_err(|e| {
            if e.is_non_finite() {
                non_finite(step)
            } else {
                e
            }
        })?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            recon_loss,
            disc_loss: reg.map(|r| r.0),
            enc_adv_loss: reg.map(|r| r.1),
            beta: beta_schedule(&self.config, step),
            valid_next_acc: None,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    #[allow(clippy::type_complexity)]
    fn step_inner(&mut self) -> Result<(f64, Option<(f64, f64)>), TrainError> {
        let step = self.step;
        let mut rng = step_rng(self.config.seed, step);
        let batch = self.batch(&mut rng);

        let mut rec = reconstruction_grads(
            &self.model.net,
            &self.model.ae,
            &batch,
            self.config.tf_prob,
            &mut rng,
        )?;
        if !rec.loss.is_finite() {
            return Err(non_finite(step));
        }
        self.clip(&mut rec.grads, "reconstruction")?;
        self.ae_opt
            .step(&mut self.model.ae, &rec.grads)
            .map_err(crate::model::ModelError::from)?;

        let beta = beta_schedule(&self.config, step);
        if beta <= 0.0 {
            return Ok((rec.loss, None));
        }
        let reg = self.regularization_phase(&batch, beta, &mut rng)?;
        Ok((rec.loss, Some(reg)))
    }

    /// Step A updates the discriminator on posterior codes of `batch` against
    /// as many prior draws; step B updates the autoencoder against the updated
    /// discriminator. Returns both losses.
    pub fn regularization_phase(
        &mut self,
        batch: &[TokenizedSong],
        beta: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<(f64, f64), TrainError> {
        let m = &self.model;
        let z_post = m.net.encode_values(&m.ae, batch)?;
        let z_prior = crate::eval::sample_prior(batch.len(), m.config().n_z, rng.random())
            .ok_or_else(|| TrainError::Corpus("empty batch".into()))?;
        let mut a = discriminator_grads(&m.disc_net, &m.disc, &z_post, &z_prior)?;
        if !a.loss.is_finite() {
            return Err(non_finite(self.step));
        }
        self.clip(&mut a.grads, "discriminator")?;
        self.disc_opt
            .step(&mut self.model.disc, &a.grads)
            .map_err(crate::model::ModelError::from)?;

        let m = &self.model;
        let mut b = encoder_adversarial_grads(
            &m.net,
            &m.ae,
            &m.disc_net,
            &m.disc,
            batch,
            beta,
            self.config.adv_loss,
        )?;
        if !b.loss.is_finite() {
            return Err(non_finite(self.step));
        }
        self.clip(&mut b.grads, "encoder adversarial")?;
        self.ae_opt
            .step(&mut self.model.ae, &b.grads)
            .map_err(crate::model::ModelError::from)?;
        Ok((a.loss, b.loss))
    }

    /// Teacher-forced next-token accuracy on the validation set.
    pub fn valid_next_accuracy(&self) -> Result<Option<f64>, TrainError> {
        Ok(accuracy_next(&self.model.net, &self.model.ae, &self.valid)?.overall())
    }

    /// Density-ratio divergence estimate and code moments on `songs`.
    pub fn regularization_stats(
        &self,
        songs: &[TokenizedSong],
    ) -> Result<(f64, f64, f64), TrainError> {
        let z = self.model.net.encode_values(&self.model.ae, songs)?;
        let tape = crate::numerics::Tape::new();
        let p = self.model.disc.bind(&tape);
        let x = self.model.disc_net.logits(&p, tape.leaf(z.clone()))?;
        let kl = density_ratio_kl(x.value().data());
        let (mean, var) = code_moments(&z);
        Ok((kl, mean, var))
    }
}

fn write_adam(c: &mut Checkpoint, prefix: &str, opt: &AdamState, params: &ParamStore<f32>) {
    c.push_u64(format!("{prefix}.t"), &opt.t);
    for (id, name, _) in params.iter() {
        c.push_f32_raw(format!("{prefix}.m.{name}"), &opt.m[id.0]);
        c.push_f32_raw(format!("{prefix}.v.{name}"), &opt.v[id.0]);
    }
}

fn read_adam(
    c: &Checkpoint,
    prefix: &str,
    config: &TrainConfig,
    params: &ParamStore<f32>,
) -> Result<AdamState, TrainError> {
    let mut opt = AdamState::new(config.adam(), params);
    let t = c.u64_values(&format!("{prefix}.t"))?;
    if t.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{prefix}: {} step counters for {} parameters",
            t.len(),
            params.len()
        )));
    }
    opt.t = t;
    for (id, name, tensor) in params.iter() {
        for (slot, kind) in [(&mut opt.m[id.0], "m"), (&mut opt.v[id.0], "v")] {
            let key = format!("{prefix}.{kind}.{name}");
            let values = c.f32_values(&key)?;
            if values.len() != tensor.numel() {
                return Err(TrainError::Config(format!(
                    "{key}: {} values for {} parameters",
                    values.len(),
                    tensor.numel()
                )));
            }
            *slot = values;
        }
    }
    Ok(opt)
}

/// `dir/ckpt-{step:08}.bin`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("{CKPT_PREFIX}{step:08}{CKPT_SUFFIX}"))
}

/// Checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>, TrainError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix(CKPT_PREFIX)
            .and_then(|r| r.strip_suffix(CKPT_SUFFIX))
            .and_then(|d| d.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best)
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub final_checkpoint: PathBuf,
    pub resumed_from: Option<u64>,
    pub metrics: Vec<StepMetrics>,
}

/// Keeps the header and the rows with `step <= keep`.
fn truncate_metrics(path: &Path, keep: u64) -> Result<(), TrainError> {
    if !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        return Ok(());
    }
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || step.is_some_and(|s| s <= keep) {
            kept.push(line);
        }
    }
    let mut f = File::create(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Trains until `total_steps`, resuming from the newest checkpoint in
/// `out_dir` if there is one.
///
/// Appends one metrics row per step to `out_dir/metrics.csv`; rows past the
/// resumed step are discarded first. Checkpoints are written every
/// `checkpoint_every` steps and at the end.
pub fn train_loop(
    config: &TrainConfig,
    corpus: Vec<TokenizedSong>,
    out_dir: &Path,
) -> Result<LoopOutcome, TrainError> {
    fs::create_dir_all(out_dir)?;
    let (mut trainer, resumed_from, mut last_ckpt) = match latest_checkpoint(out_dir)? {
        Some((step, path)) => {
            let t = Trainer::from_checkpoint(config.clone(), corpus, &Checkpoint::load(&path)?)?;
            log::info!("resuming from {} at step {step}", path.display());
            (t, Some(step), Some(path))
        }
        None => (Trainer::new(config.clone(), corpus)?, None, None),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, trainer.steps_done())?;
    let mut csv = OpenOptions::new().append(true).open(&metrics_path)?;

    let total = config.total_steps;
    let mut metrics = Vec::new();
    if trainer.steps_done() >= total && last_ckpt.is_none() {
        let path = checkpoint_path(out_dir, trainer.steps_done());
        trainer.checkpoint().save(&path)?;
        last_ckpt = Some(path);
    }
    while trainer.steps_done() < total {
        let started = Instant::now();
        let mut m = trainer.step().map_err(|e| match e {
            TrainError::NonFiniteLoss { step, .. } => TrainError::NonFiniteLoss {
                step,
                last_checkpoint: last_ckpt.clone(),
            },
            e => e,
        })?;
        let s = m.step;
        if (config.valid_every > 0 && s % config.valid_every == 0) || s == total {
            m.valid_next_acc = trainer.valid_next_accuracy()?;
        }
        m.wall_ms = started.elapsed().as_millis() as u64;
        writeln!(csv, "{}", m.csv_row())?;
        if (config.checkpoint_every > 0 && s % config.checkpoint_every == 0) || s == total {
            csv.flush()?;
            let path = checkpoint_path(out_dir, s);
            trainer.checkpoint().save(&path)?;
            last_ckpt = Some(path);
        }
        match m.valid_next_acc {
            Some(acc) => log::info!(
                "step {s}: recon {:.4} beta {:.4} valid_next_acc {acc:.4}",
                m.recon_loss,
                m.beta
            ),
            None => log::debug!("step {s}: recon {:.4} beta {:.4}", m.recon_loss, m.beta),
        }
        metrics.push(m);
    }
    csv.flush()?;
    let final_checkpoint = last_ckpt.expect("a checkpoint exists once the loop ends");
    Ok(LoopOutcome {
        final_checkpoint,
        resumed_from,
        metrics,
    })
}
