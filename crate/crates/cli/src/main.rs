//! `aae-music`: tokenize MIDI, train, generate and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aae_music::eval::{self, GenMetrics};
use aae_music::midi_token::{
    corpus_bytes, ingest_smf, read_corpus, windows, write_smf, MidiTokenError, QuantizeConfig,
    TokenizedSong, DEFAULT_MAX_NOTES,
};
use aae_music::model::Model;
use aae_music::training::{checkpoint_path, train_loop, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Ticks per grid step in written MIDI files.
const TICKS_PER_STEP: u32 = 4;
const MANIFEST_FILE: &str = "manifest.json";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(
    name = "aae-music",
    version,
    about = "Multi-track symbolic music adversarial autoencoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize and window every MIDI file under a directory into a corpus.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_bars)]
        bars: usize,
        /// Measures between window starts; defaults to `bars`.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_MAX_NOTES)]
        max_notes: usize,
    },
    /// Train a model, resuming from the newest checkpoint in `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode prior samples into MIDI files plus a metrics report.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction accuracies and metrics of reconstructions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("BarsMismatch: checkpoint expects {model} bars, corpus song {index} has {corpus}")]
    BarsMismatch {
        model: usize,
        corpus: usize,
        index: usize,
    },
    #[error("corpus song {index} has sequence length {corpus}, checkpoint expects {model}")]
    SeqLenMismatch {
        model: usize,
        corpus: usize,
        index: usize,
    },
    #[error("no records produced from {0}")]
    EmptyOutput(PathBuf),
    #[error("{path} belongs to a different run: {what} differs")]
    ManifestMismatch { path: PathBuf, what: &'static str },
}

fn parse_bars(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(b @ (1 | 2 | 16)) => Ok(b),
        _ => Err(format!("bars must be 1, 2 or 16, got {s}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tokenize {
            input,
            out,
            bars,
            stride,
            max_notes,
        } => cmd_tokenize(&input, &out, bars, stride.unwrap_or(bars), max_notes),
        Command::Train {
            config,
            corpus,
            out,
        } => cmd_train(&config, &corpus, &out),
        Command::Generate {
            checkpoint,
            count,
            seed,
            out,
        } => cmd_generate(&checkpoint, count, seed, &out),
        Command::Evaluate {
            checkpoint,
            corpus,
            out,
        } => cmd_evaluate(&checkpoint, &corpus, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// MIDI files under `dir`, recursively, in sorted path order.
fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_midi(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn skip_reason(e: &MidiTokenError) -> &'static str {
    match e {
        MidiTokenError::UnsupportedMeter { .. } => "unsupported meter",
        MidiTokenError::Smf(_) => "unreadable file",
        MidiTokenError::NoMeasures | MidiTokenError::EmptyAfterQuantize => "no notes",
        _ => "invalid content",
    }
}

fn cmd_tokenize(
    input: &Path,
    out: &Path,
    bars: usize,
    stride: usize,
    max_notes: usize,
) -> Result<()> {
    if stride == 0 {
        bail!("stride must be positive");
    }
    let files = midi_files(input)?;
    let cfg = QuantizeConfig { max_notes };
    let mut records = Vec::new();
    let mut kept = 0usize;
    let mut skipped: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut malformed = 0usize;
    for path in &files {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let song = match ingest_smf(&bytes, &cfg) {
            Ok(s) => s,
            Err(e) => {
                log::info!("skipping {}: {e}", path.display());
                *skipped.entry(skip_reason(&e)).or_default() += 1;
                continue;
            }
        };
        let wins = windows(&song, bars, stride);
        if wins.is_empty() {
            *skipped.entry("shorter than one window").or_default() += 1;
            continue;
        }
        kept += 1;
        for w in &wins {
            let tokens = TokenizedSong::from_grid(w, max_notes);
            malformed += tokens.to_grid().1;
            records.push(tokens);
        }
    }
    let n_skipped: usize = skipped.values().sum();
    println!("files: {} kept: {kept} skipped: {n_skipped}", files.len());
    for (reason, n) in &skipped {
        println!("  skipped ({reason}): {n}");
    }
    println!("records: {}", records.len());
    println!("malformed tokens: {malformed}");
    if records.is_empty() {
        return Err(CliError::EmptyOutput(input.to_path_buf()).into());
    }
    write_file(out, &corpus_bytes(&records))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_corpus(path: &Path) -> Result<(Vec<TokenizedSong>, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let songs =
        read_corpus(&bytes).with_context(|| format!("parsing corpus {}", path.display()))?;
    Ok((songs, bytes))
}

fn cmd_train(config_path: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let config = TrainConfig::parse(&text)?;
    let (songs, bytes) = load_corpus(corpus_path)?;
    let corpus_hash = hex::encode(Sha256::digest(&bytes));
    let final_ckpt = checkpoint_path(Path::new(""), config.total_steps);
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": config.to_text(),
        "seed": config.seed,
        "corpus_sha256": corpus_hash,
        "checkpoint": final_ckpt.to_string_lossy(),
    });
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let old: Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .with_context(|| format!("parsing {}", manifest_path.display()))?;
        for what in ["config", "corpus_sha256"] {
            if old.get(what) != manifest.get(what) {
                return Err(CliError::ManifestMismatch {
                    path: manifest_path,
                    what,
                }
                .into());
            }
        }
    } else {
        write_json(&manifest_path, &manifest)?;
    }
    let outcome = train_loop(&config, songs, out)?;
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_generate(checkpoint: &Path, count: usize, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (songs, malformed) = eval::generate(&model.net, &model.ae, count, seed)?;
    fs::create_dir_all(out)?;
    for (i, song) in songs.iter().enumerate() {
        write_file(
            &out.join(format!("sample_{i:05}.mid")),
            &write_smf(song, TICKS_PER_STEP),
        )?;
    }
    let mut report = eval::report_json(&GenMetrics::compute(&songs), None, None, songs.len());
    report["malformed_tokens"] = json!(malformed);
    write_json(&out.join(REPORT_FILE), &report)?;
    println!("wrote {} files to {}", songs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (songs, _) = load_corpus(corpus)?;
    let c = model.config();
    for (index, s) in songs.iter().enumerate() {
        if s.n_measures != c.n_measures {
            return Err(CliError::BarsMismatch {
                model: c.n_measures,
                corpus: s.n_measures,
                index,
            }
            .into());
        }
        if s.seq_len != c.seq_len {
            return Err(CliError::SeqLenMismatch {
                model: c.seq_len,
                corpus: s.seq_len,
                index,
            }
            .into());
        }
    }
    let next = eval::accuracy_next(&model.net, &model.ae, &songs)?;
    let recon = eval::reconstruct(&model.net, &model.ae, &songs)?;
    let mut seq = eval::Counts::default();
    let mut grids = Vec::with_capacity(recon.len());
    let mut malformed = 0;
    for (gold, r) in songs.iter().zip(&recon) {
        seq.merge(&eval::sequence_matches(gold, r));
        let (g, bad) = r.to_grid();
        malformed += bad;
        grids.push(g);
    }
    let mut report = eval::report_json(
        &GenMetrics::compute(&grids),
        Some(&seq),
        Some(&next),
        songs.len(),
    );
    report["malformed_tokens"] = json!(malformed);
    write_json(out, &report)?;
    println!(
        "seq_acc {} next_acc {}",
        fmt_acc(seq.overall()),
        fmt_acc(next.overall())
    );
    Ok(())
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}
