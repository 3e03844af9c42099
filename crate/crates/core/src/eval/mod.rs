//! Reconstruction accuracies, prior sampling, and generation metrics.
//!
//! Accuracies are token-level over non-pad positions and micro-averaged.

pub mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};

use crate::midi_token::{content_len, GridSong, TokenizedSong, TrackRole, N_TRACKS, PAD};
use crate::model::{argmax, AutoEncoder, ModelError};
use crate::numerics::{ParamStore, Tensor};

pub use metrics::{metric_dp, metric_eb, metric_qn, metric_upc, GenMetrics};

/// Songs per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Match counts per track.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub correct: [u64; N_TRACKS],
    pub total: [u64; N_TRACKS],
}

impl Counts {
    pub fn track(&self, t: usize) -> Option<f64> {
        (self.total[t] > 0).then(|| self.correct[t] as f64 / self.total[t] as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let total: u64 = self.total.iter().sum();
        let correct: u64 = self.correct.iter().sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }

    pub fn merge(&mut self, other: &Counts) {
        for t in 0..N_TRACKS {
            self.correct[t] += other.correct[t];
            self.total[t] += other.total[t];
        }
    }
}

/// Teacher-forced next-token matches over positions whose target is not pad.
pub fn accuracy_next(
    net: &AutoEncoder,
    params: &ParamStore<f32>,
    songs: &[TokenizedSong],
) -> Result<Counts, ModelError> {
    let mut counts = Counts::default();
    for chunk in songs.chunks(EVAL_CHUNK) {
        let logits = net.teacher_forced_values(params, chunk)?;
        let l = net.config().seq_len;
        for (t, lg) in logits.iter().enumerate() {
            let ids = crate::model::track_inputs(chunk, t);
            let targets = crate::model::shifted_targets(&ids, l);
            for (r, &target) in targets.iter().enumerate() {
                if target == PAD as usize {
                    continue;
                }
                counts.total[t] += 1;
                counts.correct[t] += u64::from(argmax(lg.row(r)) == target);
            }
        }
    }
    Ok(counts)
}

/// Position-wise matches between greedy reconstructions and gold, up to
/// each gold sequence's end token.
pub fn accuracy_seq(
    net: &AutoEncoder,
    params: &ParamStore<f32>,
    songs: &[TokenizedSong],
) -> Result<Counts, ModelError> {
    let mut counts = Counts::default();
    for (gold, out) in songs.iter().zip(&reconstruct(net, params, songs)?) {
        counts.merge(&sequence_matches(gold, out));
    }
    Ok(counts)
}

/// Greedy decodes of each song's own code.
pub fn reconstruct(
    net: &AutoEncoder,
    params: &ParamStore<f32>,
    songs: &[TokenizedSong],
) -> Result<Vec<TokenizedSong>, ModelError> {
    let mut out = Vec::with_capacity(songs.len());
    for chunk in songs.chunks(EVAL_CHUNK) {
        let z = net.encode_values(params, chunk)?;
        out.extend(net.decode_greedy(params, &z)?);
    }
    Ok(out)
}

/// Compares two token grids of the same shape position by position.
pub fn sequence_matches(gold: &TokenizedSong, out: &TokenizedSong) -> Counts {
    let mut c = Counts::default();
    for i in 0..gold.n_measures {
        for t in 0..N_TRACKS {
            let g = gold.sequence(i, t);
            let o = out.sequence(i, t);
            let n = content_len(g);
            c.total[t] += n as u64;
            c.correct[t] += g[..n].iter().zip(o).filter(|(a, b)| a == b).count() as u64;
        }
    }
    c
}

/// Draws `count` codes from `N(0, I)`.
pub fn sample_prior(count: usize, n_z: usize, seed: u64) -> Option<Tensor<f32>> {
    if count == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * n_z)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    Some(Tensor::new(vec![count, n_z], data).expect("shape matches"))
}

/// Decodes prior samples into songs. Also returns the malformed-token count.
pub fn generate(
    net: &AutoEncoder,
    params: &ParamStore<f32>,
    count: usize,
    seed: u64,
) -> Result<(Vec<GridSong>, usize), ModelError> {
    let Some(z) = sample_prior(count, net.config().n_z, seed) else {
        return Ok((Vec::new(), 0));
    };
    let mut songs = Vec::with_capacity(count);
    let mut malformed = 0;
    let n_z = net.config().n_z;
    for start in (0..count).step_by(EVAL_CHUNK) {
        let rows = EVAL_CHUNK.min(count - start);
        let part = Tensor::new(
            vec![rows, n_z],
            z.data()[start * n_z..(start + rows) * n_z].to_vec(),
        )
        .expect("shape matches");
        for tokens in net.decode_greedy(params, &part)? {
            let (song, bad) = tokens.to_grid();
            malformed += bad;
            songs.push(song);
        }
    }
    Ok((songs, malformed))
}

fn per_track(values: &[Option<f64>; N_TRACKS], melodic_only: bool) -> Value {
    let mut m = Map::new();
    for role in TrackRole::ALL {
        if melodic_only && role == TrackRole::Drums {
            continue;
        }
        m.insert(role.key().to_string(), json!(values[role.index()]));
    }
    Value::Object(m)
}

fn accuracy_json(c: Option<&Counts>) -> Value {
    match c {
        None => Value::Null,
        Some(c) => {
            let mut v = per_track(&std::array::from_fn(|t| c.track(t)), false);
            v["all"] = json!(c.overall());
            v
        }
    }
}

/// Report with keys `eb`, `upc`, `qn`, `dp`, `seq_acc`, `next_acc`,
/// `n_songs`. Absent quantities are `null`.
pub fn report_json(
    metrics: &GenMetrics,
    seq: Option<&Counts>,
    next: Option<&Counts>,
    n_songs: usize,
) -> Value {
    json!({
        "eb": per_track(&metrics.eb, false),
        "upc": per_track(&metrics.upc, true),
        "qn": per_track(&metrics.qn, true),
        "dp": metrics.dp,
        "seq_acc": accuracy_json(seq),
        "next_acc": accuracy_json(next),
        "n_songs": n_songs,
        "accuracy_unit": "token",
    })
}
