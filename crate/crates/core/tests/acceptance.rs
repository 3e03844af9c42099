//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; exits nonzero if any
//! criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aae_music::eval::{accuracy_next, accuracy_seq, metric_dp, metric_eb, metric_qn, metric_upc};
use aae_music::midi_token::{
    detokenize_measure, tokenize_measure, GridSong, NoteEvent, TokenizedSong, TrackMeasure,
    TrackRole, DEFAULT_MAX_NOTES, EOS, N_TRACKS, PAD, SOS, STEPS_PER_MEASURE, VOCAB_SIZE,
};
use aae_music::model::{AutoEncoder, Discriminator, Model, ModelConfig};
use aae_music::numerics::{
    attention, grad_check, AttnSpec, GradCheckOptions, NumericsError, Tape, Tensor, Var,
};
use aae_music::training::{
    reconstruction_grads, teacher_forced_loss, train_loop, AdvLoss, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_measure(rng: &mut ChaCha8Rng, role: TrackRole, max_notes: usize) -> TrackMeasure {
    let k = rng.random_range(0..=max_notes);
    let notes = (0..k)
        .map(|_| {
            NoteEvent::new(
                rng.random_range(0..STEPS_PER_MEASURE as u32),
                rng.random_range(0..128),
                rng.random_range(1..=STEPS_PER_MEASURE as u32),
            )
            .unwrap()
        })
        .collect();
    TrackMeasure::new(role, notes)
}

/// Song with between 1 and `max_per_track` short notes per track and bar.
fn sparse_song(rng: &mut ChaCha8Rng, bars: usize, max_per_track: usize) -> GridSong {
    let tracks = TrackRole::ALL.map(|r| {
        (0..bars)
            .map(|_| {
                let notes = (0..rng.random_range(1..=max_per_track))
                    .map(|_| {
                        NoteEvent::new(
                            rng.random_range(0..96),
                            rng.random_range(30..90),
                            rng.random_range(1..=24),
                        )
                        .unwrap()
                    })
                    .collect();
                TrackMeasure::new(r, notes)
            })
            .collect()
    });
    GridSong::new(tracks).unwrap()
}

// Criterion 1.
fn tokenizer_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for i in 0..10_000 {
        let m = random_measure(&mut rng, TrackRole::ALL[i % N_TRACKS], DEFAULT_MAX_NOTES);
        let d = detokenize_measure(m.role(), tokenize_measure(&m, DEFAULT_MAX_NOTES).ids());
        failures += usize::from(d.measure != m || d.malformed != 0);
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && t < Duration::from_secs(10),
        format!(
            "10000 measures, {failures} mismatches, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

/// Expected class of each position: start, (time, pitch, duration) triples,
/// end, pads.
fn conforms(ids: &[u16]) -> bool {
    let Some(end) = ids.iter().position(|&t| t == EOS) else {
        return false;
    };
    let body = &ids[1..end];
    ids[0] == SOS
        && body.len().is_multiple_of(3)
        && body
            .chunks(3)
            .all(|c| (128..=223).contains(&c[0]) && c[1] <= 127 && (224..=319).contains(&c[2]))
        && ids[end + 1..].iter().all(|&t| t == PAD)
        && ids.iter().all(|&t| (t as usize) < VOCAB_SIZE)
}

// Criterion 2.
fn vocabulary_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for i in 0..10_000 {
        // Up to twice the cap so truncation is exercised.
        let m = random_measure(
            &mut rng,
            TrackRole::ALL[i % N_TRACKS],
            2 * DEFAULT_MAX_NOTES,
        );
        let ids = tokenize_measure(&m, DEFAULT_MAX_NOTES).into_ids();
        bad += usize::from(ids.len() != 3 * DEFAULT_MAX_NOTES + 2 || !conforms(&ids));
    }
    outcome(bad == 0, format!("10000 measures, {bad} nonconforming"))
}

fn weighted_sum<'t>(
    tape: &'t Tape<f64>,
    x: Var<'t, f64>,
    seed: u64,
) -> Result<Var<'t, f64>, NumericsError> {
    let shape = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    x.mul(tape.leaf(w))?.sum()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        n_z: 16,
        n_measures: 1,
        seq_len: 14,
        l_mem: 4,
        disc_hidden: 16,
    }
}

// Criterion 3.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        step: 1e-3,
        max_entries: Some(6),
        seed: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs = Vec::new();

    // (a) One relative-attention layer with projections.
    let (batch, len, d, heads) = (2, 5, 8, 2);
    let inputs = vec![
        random_tensor(&mut rng, &[batch * len, d], 1.0),
        random_tensor(&mut rng, &[d, d], 0.5),
        random_tensor(&mut rng, &[d, d], 0.5),
        random_tensor(&mut rng, &[d, d], 0.5),
        random_tensor(&mut rng, &[2 * len - 1, d], 0.5),
        random_tensor(&mut rng, &[d], 0.5),
        random_tensor(&mut rng, &[d], 0.5),
    ];
    let spec = AttnSpec {
        batch,
        q_len: len,
        k_len: len,
        heads,
        causal: true,
        key_mask: None,
    };
    let a = grad_check(
        |tape, v| {
            let (q, k, val) = (
                v[0].linear(v[1], None)?,
                v[0].linear(v[2], None)?,
                v[0].linear(v[3], None)?,
            );
            let out = attention(q, k, val, Some((v[4], v[5], v[6])), spec.clone())?;
            weighted_sum(tape, out, 31)
        },
        &inputs,
        &opts,
    );
    errs.push(("attention", a.map(|r| r.max_rel_error)));

    // (b) Comp -> bar compressor -> song compressor.
    let cfg = small_config();
    let (net, params) = AutoEncoder::new(cfg, 4).unwrap();
    let params64 = params.cast::<f64>();
    let songs: Vec<TokenizedSong> = (0..2)
        .map(|_| TokenizedSong::from_grid(&sparse_song(&mut rng, 1, 3), cfg.max_notes()))
        .collect();
    let rows = songs.len();
    let mut inputs: Vec<Tensor<f64>> = params64.iter().map(|(_, _, t)| t.clone()).collect();
    let n_params = inputs.len();
    for _ in 0..N_TRACKS {
        inputs.push(random_tensor(
            &mut rng,
            &[rows * cfg.seq_len, cfg.d_model],
            1.0,
        ));
    }
    let ids: Vec<Vec<u16>> = (0..N_TRACKS)
        .map(|t| aae_music::model::track_inputs(&songs, t))
        .collect();
    let b = grad_check(
        |tape, v| {
            let p = &v[..n_params];
            let z_tracks = (0..N_TRACKS)
                .map(|t| net.comp(p, v[n_params + t], &ids[t]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(to_numerics)?;
            let zm = net.bar_compress(p, &z_tracks).map_err(to_numerics)?;
            let z = net.song_compress(p, zm, rows).map_err(to_numerics)?;
            weighted_sum(tape, z, 32)
        },
        &inputs,
        &opts,
    );
    errs.push(("compression chain", b.map(|r| r.max_rel_error)));

    // (c) The whole one-bar model, reconstruction plus discriminator terms.
    let (disc_net, disc_params) = Discriminator::new(&cfg, 5);
    let disc64 = disc_params.cast::<f64>();
    let mut inputs: Vec<Tensor<f64>> = params64.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.extend(disc64.iter().map(|(_, _, t)| t.clone()));
    let c = grad_check(
        |tape, v| {
            let (p, pd) = v.split_at(n_params);
            let tf = net.teacher_forced(p, &songs).map_err(to_numerics)?;
            let targets: Vec<usize> = tf.targets.concat();
            let ce = Var::concat(&tf.logits, 0)?.cross_entropy(&targets, PAD as usize)?;
            let x = disc_net.logits(pd, tf.z).map_err(to_numerics)?;
            let _ = tape;
            ce.add(x.log_sigmoid()?.mean_all()?)
        },
        &inputs,
        &opts,
    );
    errs.push(("full model", c.map(|r| r.max_rel_error)));

    let t = start.elapsed();
    let mut pass = t < Duration::from_secs(300);
    let mut parts = Vec::new();
    for (name, e) in errs {
        match e {
            Ok(x) => {
                pass &= x < 1e-3;
                parts.push(format!("{name} {x:.2e}"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error {e}"));
            }
        }
    }
    outcome(
        pass,
        format!(
            "max rel error: {}; {:.1}s",
            parts.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn to_numerics(e: aae_music::model::ModelError) -> NumericsError {
    match e {
        aae_music::model::ModelError::Numerics(n) => n,
        other => NumericsError::ShapeMismatch {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn tiny_train_config(bars: usize, batch: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::for_bars(bars);
    c.model = ModelConfig::tiny(bars);
    c.batch_size = batch;
    c.lr = lr;
    c.seed = 1;
    c.beta_start_step = u64::MAX / 2;
    c.split_train = 1.0;
    c.split_valid = 0.0;
    c.split_test = 0.0;
    c
}

fn tokenized(songs: &[GridSong], cfg: &ModelConfig) -> Vec<TokenizedSong> {
    songs
        .iter()
        .map(|s| TokenizedSong::from_grid(s, cfg.max_notes()))
        .collect()
}

fn train_accuracies(t: &Trainer) -> (f64, f64) {
    let m = &t.model;
    let next = accuracy_next(&m.net, &m.ae, t.train_set())
        .unwrap()
        .overall()
        .unwrap();
    let seq = accuracy_seq(&m.net, &m.ae, t.train_set())
        .unwrap()
        .overall()
        .unwrap();
    (next, seq)
}

// Criterion 4.
fn tiny_overfit() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_train_config(1, 8, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grids: Vec<GridSong> = (0..8).map(|_| sparse_song(&mut rng, 1, 6)).collect();
    let mut t = Trainer::new(cfg.clone(), tokenized(&grids, &cfg.model)).unwrap();
    let (mut next, mut seq) = (0.0, 0.0);
    while t.steps_done() < 3000 {
        t.step().unwrap();
        if t.steps_done().is_multiple_of(250) {
            (next, seq) = train_accuracies(&t);
            if next >= 0.99 && seq >= 0.95 {
                break;
            }
        }
    }
    let el = start.elapsed();
    outcome(
        next >= 0.99 && seq >= 0.95 && el < Duration::from_secs(1200),
        format!(
            "next {next:.4} seq {seq:.4} after {} steps at lr 1e-4, {:.0}s",
            t.steps_done(),
            el.as_secs_f64()
        ),
    )
}

// Criterion 5.
fn long_vs_short() -> Outcome {
    let steps = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let two: Vec<GridSong> = (0..8).map(|_| sparse_song(&mut rng, 2, 6)).collect();
    let one: Vec<GridSong> = two
        .iter()
        .flat_map(|s| (0..2).map(move |i| s.slice(i, 1).unwrap()))
        .collect();
    let run = |bars: usize, grids: &[GridSong]| {
        // Every step sees all sixteen measures in both settings.
        let cfg = tiny_train_config(bars, 16 / bars, 1e-3);
        let mut t = Trainer::new(cfg.clone(), tokenized(grids, &cfg.model)).unwrap();
        for _ in 0..steps {
            t.step().unwrap();
        }
        train_accuracies(&t).1
    };
    let s1 = run(1, &one);
    let s2 = run(2, &two);
    outcome(
        (s1 - s2).abs() <= 0.05,
        format!("seq accuracy 1-bar {s1:.4}, 2-bar {s2:.4} after {steps} steps"),
    )
}

// Criterion 6.
fn regularization_trend() -> Outcome {
    let (steps, every, window) = (5000, 250, 1000);
    let mut cfg = TrainConfig::for_bars(1);
    cfg.model = ModelConfig::tiny(1);
    cfg.total_steps = steps;
    cfg.seed = 1;
    cfg.beta_start_step = 1000;
    cfg.beta_ramp_steps = 2000;
    // The linear density-ratio encoder loss oscillates at this scale; the
    // saturating form keeps the adversarial game stable.
    cfg.adv_loss = AdvLoss::SingleTerm;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grids: Vec<GridSong> = (0..100).map(|_| sparse_song(&mut rng, 1, 6)).collect();
    let mut t = Trainer::new(cfg.clone(), tokenized(&grids, &cfg.model)).unwrap();
    let valid = t.valid_set().to_vec();
    // (step, kl, |mean|, var) on validation codes.
    let mut trace = Vec::new();
    while t.steps_done() < steps {
        t.step().unwrap();
        if t.steps_done().is_multiple_of(every) {
            let (kl, mu, var) = t.regularization_stats(&valid).unwrap();
            trace.push((t.steps_done(), kl, mu, var));
        }
    }
    let start = cfg.beta_start_step;
    let (_, _, mu0, var0) = *trace.iter().find(|r| r.0 == start).unwrap();
    let peak = trace
        .iter()
        .filter(|r| r.0 > start && r.0 <= start + cfg.beta_ramp_steps / 2)
        .map(|r| r.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let late: Vec<_> = trace.iter().filter(|r| r.0 > steps - window).collect();
    let mean =
        |f: fn(&&(u64, f64, f64, f64)) -> f64| late.iter().map(f).sum::<f64>() / late.len() as f64;
    let (kl1, mu1, var1) = (mean(|r| r.1), mean(|r| r.2), mean(|r| r.3));
    outcome(
        kl1 < peak && mu1 < mu0 && (var1 - 1.0).abs() < (var0 - 1.0).abs(),
        format!(
            "valid KL peak {peak:.3} -> late {kl1:.3}; |mean| {mu0:.3} -> {mu1:.3}; var {var0:.3} -> {var1:.3}"
        ),
    )
}

type Song = Vec<Vec<Vec<(u32, u32, u32)>>>;

/// Random songs as plain note lists per track and measure, plus the same
/// songs as grids. Notes in a measure are distinct.
fn raw_songs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Song>, Vec<GridSong>) {
    let mut raws = Vec::new();
    let mut grids = Vec::new();
    for _ in 0..n {
        let bars = rng.random_range(1..=4);
        let raw: Song = (0..N_TRACKS)
            .map(|_| {
                (0..bars)
                    .map(|_| {
                        let mut set = BTreeSet::new();
                        if rng.random_bool(0.7) {
                            for _ in 0..rng.random_range(1..=10) {
                                set.insert((
                                    rng.random_range(0..96),
                                    rng.random_range(0..128),
                                    rng.random_range(1..=8),
                                ));
                            }
                        }
                        set.into_iter().collect()
                    })
                    .collect()
            })
            .collect();
        let tracks = TrackRole::ALL.map(|r| {
            raw[r.index()]
                .iter()
                .map(|notes| {
                    TrackMeasure::new(
                        r,
                        notes
                            .iter()
                            .map(|&(t, p, d)| NoteEvent::new(t, p, d).unwrap())
                            .collect(),
                    )
                })
                .collect()
        });
        grids.push(GridSong::new(tracks).unwrap());
        raws.push(raw);
    }
    (raws, grids)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn oracle_eb(raws: &[Song], t: usize) -> Option<f64> {
    let bars: Vec<&Vec<(u32, u32, u32)>> = raws.iter().flat_map(|s| s[t].iter()).collect();
    ratio(bars.iter().filter(|b| b.is_empty()).count(), bars.len())
}

fn oracle_upc(raws: &[Song], t: usize) -> Option<f64> {
    if t == TrackRole::Drums.index() {
        return None;
    }
    let masks: Vec<u16> = raws
        .iter()
        .flat_map(|s| s[t].iter())
        .filter(|b| !b.is_empty())
        .map(|b| b.iter().fold(0u16, |m, &(_, p, _)| m | 1 << (p % 12)))
        .collect();
    ratio(
        masks.iter().map(|m| m.count_ones() as usize).sum(),
        masks.len(),
    )
}

fn oracle_qn(raws: &[Song], t: usize) -> Option<f64> {
    if t == TrackRole::Drums.index() {
        return None;
    }
    let durs: Vec<u32> = raws
        .iter()
        .flat_map(|s| s[t].iter().flatten().map(|n| n.2))
        .collect();
    ratio(durs.iter().filter(|&&d| d >= 3).count(), durs.len())
}

fn oracle_dp(raws: &[Song]) -> Option<f64> {
    let t = TrackRole::Drums.index();
    let onsets: Vec<u32> = raws
        .iter()
        .flat_map(|s| s[t].iter().flatten().map(|n| n.0))
        .collect();
    // Sixteenth-note grid: 96 steps per bar / 16.
    let on_grid = onsets
        .iter()
        .filter(|&&o| [0, 6, 12, 18, 24, 30, 36, 42, 48, 54, 60, 66, 72, 78, 84, 90].contains(&o))
        .count();
    ratio(on_grid, onsets.len())
}

fn degenerate_examples() -> bool {
    let single = |role: TrackRole, notes: &[(u32, u32, u32)]| {
        let tracks = TrackRole::ALL.map(|r| {
            let ns = if r == role {
                notes
                    .iter()
                    .map(|&(t, p, d)| NoteEvent::new(t, p, d).unwrap())
                    .collect()
            } else {
                Vec::new()
            };
            vec![TrackMeasure::new(r, ns)]
        });
        GridSong::new(tracks).unwrap()
    };
    let all_empty = metric_eb(&[GridSong::empty(2).unwrap()]) == [Some(1.0); 4];
    let qn = metric_qn(&[single(
        TrackRole::Bass,
        &[(0, 40, 1), (10, 41, 2), (20, 42, 3), (30, 43, 4)],
    )])[TrackRole::Bass.index()]
        == Some(0.5);
    let dp = metric_dp(&[single(
        TrackRole::Drums,
        &[(0, 36, 1), (5, 36, 1), (6, 36, 1), (7, 36, 1)],
    )]) == Some(0.5);
    all_empty && qn && dp
}

// Criterion 7.
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (raws, grids) = raw_songs(&mut rng, 1000);
    let (eb, upc, qn) = (metric_eb(&grids), metric_upc(&grids), metric_qn(&grids));
    let mut mismatches = Vec::new();
    for t in 0..N_TRACKS {
        if eb[t] != oracle_eb(&raws, t) {
            mismatches.push(format!("eb[{t}]"));
        }
        if upc[t] != oracle_upc(&raws, t) {
            mismatches.push(format!("upc[{t}]"));
        }
        if qn[t] != oracle_qn(&raws, t) {
            mismatches.push(format!("qn[{t}]"));
        }
    }
    if metric_dp(&grids) != oracle_dp(&raws) {
        mismatches.push("dp".into());
    }
    // Per-song agreement as well, so small sets are covered.
    let per_song_bad = raws
        .iter()
        .zip(&grids)
        .filter(|(r, g)| {
            let (r, g) = (std::slice::from_ref(*r), std::slice::from_ref(*g));
            metric_dp(g) != oracle_dp(r)
                || (0..N_TRACKS).any(|t| {
                    metric_eb(g)[t] != oracle_eb(r, t)
                        || metric_upc(g)[t] != oracle_upc(r, t)
                        || metric_qn(g)[t] != oracle_qn(r, t)
                })
        })
        .count();
    let degenerate = degenerate_examples();
    outcome(
        mismatches.is_empty() && per_song_bad == 0 && degenerate,
        format!(
            "1000 songs: aggregate mismatches {:?}, per-song mismatches {per_song_bad}, degenerate cases {}",
            mismatches,
            if degenerate { "ok" } else { "failed" }
        ),
    )
}

// Criterion 8.
fn scheduled_sampling_limit() -> Outcome {
    let cfg = ModelConfig::tiny(2);
    let (net, ae) = AutoEncoder::new(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grids: Vec<GridSong> = (0..4).map(|_| sparse_song(&mut rng, 2, 6)).collect();
    let songs = tokenized(&grids, &cfg);
    let plain = teacher_forced_loss(&net, &ae, &songs).unwrap();
    let same = [0u64, 1, 2, 3].iter().all(|&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        reconstruction_grads(&net, &ae, &songs, 1.0, &mut rng)
            .unwrap()
            .loss
            .to_bits()
            == plain.to_bits()
    });
    outcome(
        same,
        format!("teacher-forced loss {plain:.6}, tf_prob=1 identical bits: {same}"),
    )
}

// Criterion 9.
fn determinism_and_persistence() -> Outcome {
    let mut cfg = tiny_train_config(1, 4, 1e-3);
    cfg.total_steps = 12;
    cfg.beta_start_step = 6;
    cfg.beta_ramp_steps = 4;
    cfg.checkpoint_every = 6;
    cfg.split_train = 0.7;
    cfg.split_valid = 0.1;
    cfg.split_test = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grids: Vec<GridSong> = (0..20).map(|_| sparse_song(&mut rng, 1, 6)).collect();
    let songs = tokenized(&grids, &cfg.model);

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_loop(&cfg, songs.clone(), a.path()).unwrap();
    let rb = train_loop(&cfg, songs.clone(), b.path()).unwrap();
    let identical = std::fs::read(&ra.final_checkpoint).unwrap()
        == std::fs::read(&rb.final_checkpoint).unwrap();

    let mut t = Trainer::new(cfg.clone(), songs).unwrap();
    for _ in 0..cfg.total_steps {
        t.step().unwrap();
    }
    let before = t.valid_next_accuracy().unwrap();
    let before_seq = accuracy_seq(&t.model.net, &t.model.ae, t.valid_set())
        .unwrap()
        .overall();
    let path = a.path().join("direct.bin");
    t.checkpoint().save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let after = accuracy_next(&loaded.net, &loaded.ae, t.valid_set())
        .unwrap()
        .overall();
    let after_seq = accuracy_seq(&loaded.net, &loaded.ae, t.valid_set())
        .unwrap()
        .overall();
    let same_as_loop =
        std::fs::read(&path).unwrap() == std::fs::read(&ra.final_checkpoint).unwrap();
    outcome(
        identical && same_as_loop && before == after && before_seq == after_seq && before.is_some(),
        format!(
            "checkpoints identical: {identical} (loop vs direct: {same_as_loop}); valid next {before:?} -> {after:?}, seq {before_seq:?} -> {after_seq:?}"
        ),
    )
}

// Criterion 10.
fn uniform_baseline() -> Outcome {
    let cfg = ModelConfig::tiny(1);
    let (net, ae) = AutoEncoder::new(cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let l = cfg.seq_len;
    let songs: Vec<TokenizedSong> = (0..700)
        .map(|_| {
            let mut ids = Vec::with_capacity(N_TRACKS * l);
            for _ in 0..N_TRACKS {
                ids.push(SOS);
                ids.extend((0..l - 2).map(|_| rng.random_range(0..PAD)));
                ids.push(EOS);
            }
            TokenizedSong {
                n_measures: 1,
                n_tracks: N_TRACKS,
                seq_len: l,
                ids,
            }
        })
        .collect();
    let (mut nll, mut hits, mut n) = (0.0f64, 0usize, 0usize);
    for chunk in songs.chunks(16) {
        let logits = net.teacher_forced_values(&ae, chunk).unwrap();
        for (t, lg) in logits.iter().enumerate() {
            let ids = aae_music::model::track_inputs(chunk, t);
            let targets = aae_music::model::shifted_targets(&ids, l);
            for (r, &target) in targets.iter().enumerate() {
                if target == PAD as usize {
                    continue;
                }
                let row = lg.row(r);
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let lse = mx + row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
                nll += lse - row[target] as f64;
                hits += usize::from(aae_music::model::argmax(row) == target);
                n += 1;
            }
        }
    }
    let ce = nll / n as f64;
    let acc = hits as f64 / n as f64;
    let ln = (VOCAB_SIZE as f64).ln();
    outcome(
        n >= 100_000 && (ce - ln).abs() <= 0.05 && (acc - 1.0 / VOCAB_SIZE as f64).abs() <= 0.01,
        format!("{n} positions: cross-entropy {ce:.4} (ln 323 = {ln:.4}), accuracy {acc:.5}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("tokenizer round trip", tokenizer_round_trip),
        ("vocabulary conformance", vocabulary_conformance),
        ("gradient correctness", gradient_correctness),
        ("tiny-corpus overfit", tiny_overfit),
        ("long-vs-short trend", long_vs_short),
        ("regularization behavior", regularization_trend),
        ("metric oracle equivalence", metric_oracles),
        ("scheduled-sampling limit", scheduled_sampling_limit),
        ("determinism and persistence", determinism_and_persistence),
        ("uniform-logits baseline", uniform_baseline),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} [{}] {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
