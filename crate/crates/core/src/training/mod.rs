//! Two-phase adversarial autoencoder optimization.
//!
//! Each step runs the reconstruction phase (scheduled-sampling cross-entropy
//! through encoder and decoder) and, once `β > 0`, the regularization phase:
//! a discriminator update separating posterior codes from prior draws,
//! followed by an encoder update on `β` times the density-ratio estimate of
//! the divergence from the prior.

pub mod config;
mod trainer;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::midi_token::{TokenizedSong, N_TRACKS, PAD};
use crate::model::{argmax, shifted_targets, track_inputs, AutoEncoder, Discriminator, ModelError};
use crate::numerics::{CheckpointError, Gradients, NumericsError, ParamStore, Tape, Tensor, Var};

pub use config::{AdvLoss, TrainConfig};
pub use trainer::{
    checkpoint_path, latest_checkpoint, train_loop, LoopOutcome, StepMetrics, Trainer,
    METRICS_FILE, METRICS_HEADER,
};

/// Minimum corpus size for a three-way split.
pub const MIN_SPLIT_SONGS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus has {0} songs; a split needs at least {MIN_SPLIT_SONGS}")]
    TooFewSongs(usize),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::Model(ModelError::Numerics(NumericsError::NonFiniteValue { .. }))
        )
    }
}

/// Index sets of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it by the configured fractions.
/// Train and validation sizes are rounded; test takes the rest.
pub fn split_dataset(n: usize, config: &TrainConfig, seed: u64) -> Result<Split, TrainError> {
    if n < MIN_SPLIT_SONGS {
        return Err(TrainError::TooFewSongs(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_train = ((n as f64) * config.split_train).round() as usize;
    let n_valid = (((n as f64) * config.split_valid).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        valid,
        test,
    })
}

/// Zero before `beta_start_step`, a linear ramp to `beta_max` over
/// `beta_ramp_steps`, then constant.
pub fn beta_schedule(config: &TrainConfig, step: u64) -> f64 {
    if step < config.beta_start_step {
        return 0.0;
    }
    let into = step - config.beta_start_step;
    if into >= config.beta_ramp_steps {
        config.beta_max
    } else {
        config.beta_max * into as f64 / config.beta_ramp_steps as f64
    }
}

/// Generator for step `step`: one independent stream per step, so a resumed
/// run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Loss and per-parameter gradients of one phase. `None` marks a parameter
/// the loss does not depend on.
#[derive(Clone, Debug)]
pub struct PhaseGrads {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<f32>>>,
}

fn scalar(v: Var<'_, f32>) -> f64 {
    v.value().data()[0] as f64
}

fn collect_grads<'t>(g: &Gradients<f32>, bound: &[Var<'t, f32>]) -> Vec<Option<Tensor<f32>>> {
    bound.iter().map(|&v| g.get(v)).collect()
}

/// Decoder inputs for the second pass. Position 0 keeps the start token;
/// every later position keeps the gold token with probability `tf_prob`,
/// else takes the first-pass prediction for that position.
pub fn mix_inputs(
    gold: &[u16],
    pass1_logits: &Tensor<f32>,
    seq_len: usize,
    tf_prob: f64,
    rng: &mut impl Rng,
) -> Vec<u16> {
    let mut out = gold.to_vec();
    for (s, seq) in out.chunks_mut(seq_len).enumerate() {
        for (p, tok) in seq.iter_mut().enumerate().skip(1) {
            if rng.random::<f64>() >= tf_prob {
                *tok = argmax(pass1_logits.row(s * seq_len + p - 1)) as u16;
            }
        }
    }
    out
}

/// Scheduled-sampling reconstruction loss and autoencoder gradients.
///
/// The loss is the mean cross-entropy over every non-pad target of every
/// track, measure and song.
pub fn reconstruction_grads(
    net: &AutoEncoder,
    ae: &ParamStore<f32>,
    songs: &[TokenizedSong],
    tf_prob: f64,
    rng: &mut impl Rng,
) -> Result<PhaseGrads, TrainError> {
    let tape = Tape::new();
    let p = ae.bind(&tape);
    let c = net.config();
    let rows = songs.len() * c.n_measures;
    let z = net.encode_songs(&p, songs)?;
    let memories = net.memories(&p, z)?;
    let mut logits = Vec::with_capacity(N_TRACKS);
    let mut targets = Vec::with_capacity(N_TRACKS * rows * c.seq_len);
    for role in crate::midi_token::TrackRole::ALL {
        let t = role.index();
        let gold = track_inputs(songs, t);
        let pass1 = net.decode(&p, role, memories[t], &gold, rows, c.seq_len)?;
        let mixed = mix_inputs(&gold, &pass1.value(), c.seq_len, tf_prob, rng);
        logits.push(net.decode(&p, role, memories[t], &mixed, rows, c.seq_len)?);
        targets.extend(shifted_targets(&gold, c.seq_len));
    }
    let loss = Var::concat(&logits, 0)
        .map_err(ModelError::from)?
        .cross_entropy(&targets, PAD as usize)
        .map_err(ModelError::from)?;
    let g = tape.backward(loss).map_err(ModelError::from)?;
    Ok(PhaseGrads {
        loss: scalar(loss),
        grads: collect_grads(&g, &p),
    })
}

/// Plain teacher-forced loss on `songs`, no gradients.
pub fn teacher_forced_loss(
    net: &AutoEncoder,
    ae: &ParamStore<f32>,
    songs: &[TokenizedSong],
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let p = ae.bind(&tape);
    let tf = net.teacher_forced(&p, songs)?;
    let targets: Vec<usize> = tf.targets.concat();
    let loss = Var::concat(&tf.logits, 0)
        .and_then(|l| l.cross_entropy(&targets, PAD as usize))
        .map_err(ModelError::from)?;
    Ok(scalar(loss))
}

/// Discriminator loss: posterior codes labelled 1, prior draws labelled 0.
/// Gradients are for the discriminator parameters only.
pub fn discriminator_grads(
    disc_net: &Discriminator,
    disc: &ParamStore<f32>,
    z_post: &Tensor<f32>,
    z_prior: &Tensor<f32>,
) -> Result<PhaseGrads, TrainError> {
    let tape = Tape::new();
    let p = disc.bind(&tape);
    let post = disc_net.logits(&p, tape.leaf(z_post.clone()))?;
    let prior = disc_net.logits(&p, tape.leaf(z_prior.clone()))?;
    let f = || -> Result<Var<'_, f32>, NumericsError> {
        let a = post.log_sigmoid()?.mean_all()?;
        let b = prior.scale(-1.0)?.log_sigmoid()?.mean_all()?;
        a.add(b)?.scale(-1.0)
    };
    let loss = f().map_err(ModelError::from)?;
    let g = tape.backward(loss).map_err(ModelError::from)?;
    Ok(PhaseGrads {
        loss: scalar(loss),
        grads: collect_grads(&g, &p),
    })
}

/// Encoder adversarial loss `β · mean(f(x))` on discriminator logits `x` of
/// posterior codes, with `f(x) = x` (density ratio, since
/// `log d − log(1 − d) = x`) or `f(x) = log σ(x)`. Gradients are for the
/// autoencoder parameters only; the discriminator is held fixed.
pub fn encoder_adversarial_grads(
    net: &AutoEncoder,
    ae: &ParamStore<f32>,
    disc_net: &Discriminator,
    disc: &ParamStore<f32>,
    songs: &[TokenizedSong],
    beta: f64,
    adv: AdvLoss,
) -> Result<PhaseGrads, TrainError> {
    let tape = Tape::new();
    let p = ae.bind(&tape);
    let pd = disc.bind(&tape);
    let z = net.encode_songs(&p, songs)?;
    let x = disc_net.logits(&pd, z)?;
    let per = match adv {
        AdvLoss::DensityRatio => Ok(x),
        AdvLoss::SingleTerm => x.log_sigmoid(),
    };
    let loss = per
        .and_then(|v| v.mean_all())
        .and_then(|v| v.scale(beta))
        .map_err(ModelError::from)?;
    let g = tape.backward(loss).map_err(ModelError::from)?;
    Ok(PhaseGrads {
        loss: scalar(loss),
        grads: collect_grads(&g, &p),
    })
}

/// Density-ratio divergence estimate from discriminator logits: the mean of
/// `log d − log(1 − d)`, which is the mean logit.
pub fn density_ratio_kl(logits: &[f32]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|&x| x as f64).sum::<f64>() / logits.len() as f64
}

/// Mean absolute per-dimension batch mean and mean per-dimension batch
/// variance of codes `[S, n_z]`.
pub fn code_moments(z: &Tensor<f32>) -> (f64, f64) {
    let (s, d) = (z.rows(), z.cols());
    if s == 0 || d == 0 {
        return (0.0, 0.0);
    }
    let mut mean_sum = 0.0;
    let mut var_sum = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..s).map(|i| z.data()[i * d + j] as f64).collect();
        let m = col.iter().sum::<f64>() / s as f64;
        mean_sum += m.abs();
        var_sum += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s as f64;
    }
    (mean_sum / d as f64, var_sum / d as f64)
}
