use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aae_music::midi_token::{read_corpus, write_smf, GridSong, NoteEvent, TrackMeasure, TrackRole};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aae-music"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A song whose every measure holds one note per track.
fn song(n_measures: usize, shift: u32) -> GridSong {
    let tracks = TrackRole::ALL.map(|r| {
        (0..n_measures)
            .map(|i| {
                let pitch = 36 + 12 * r.index() as u32 + (i as u32 + shift) % 7;
                TrackMeasure::new(
                    r,
                    vec![NoteEvent::new(24 * (i as u32 % 4), pitch, 12).unwrap()],
                )
            })
            .collect()
    });
    GridSong::new(tracks).unwrap()
}

fn three_four(bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let at = b
        .windows(4)
        .position(|w| w == [0xff, 0x58, 0x04, 0x04])
        .expect("time signature present");
    b[at + 3] = 3;
    b
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn midi_dir(&self, name: &str, songs: &[(&str, Vec<u8>)]) -> PathBuf {
        let d = self.path(name);
        fs::create_dir_all(&d).unwrap();
        for (file, bytes) in songs {
            fs::write(d.join(file), bytes).unwrap();
        }
        d
    }

    /// One-bar corpus for the tiny model.
    fn tiny_corpus(&self, n_songs: usize) -> PathBuf {
        let files: Vec<_> = (0..n_songs)
            .map(|k| (format!("s{k}.mid"), write_smf(&song(1, k as u32), 4)))
            .collect();
        let refs: Vec<_> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
        let dir = self.midi_dir("tiny_midi", &refs);
        let out = self.path("tiny.bin");
        ok(&[
            "tokenize",
            "--in",
            s(&dir),
            "--out",
            s(&out),
            "--bars",
            "1",
            "--max-notes",
            "12",
        ]);
        out
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }
}

const SMOKE: &str = "bars = 1\nmodel = tiny\ntotal_steps = 2\nseed = 3\nbatch_size = 2\n";

#[test]
fn tokenize_windows_a_long_song() {
    let f = Fixture::new();
    let dir = f.midi_dir("in", &[("long.mid", write_smf(&song(32, 0), 4))]);
    let out = f.path("c.bin");
    let o = ok(&[
        "tokenize",
        "--in",
        s(&dir),
        "--out",
        s(&out),
        "--bars",
        "16",
    ]);
    let corpus = read_corpus(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(corpus.len(), 2);
    assert!(corpus.iter().all(|c| c.n_measures == 16 && c.seq_len == 74));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kept: 1 skipped: 0"), "{text}");
    assert!(text.contains("records: 2"), "{text}");
    assert!(text.contains("malformed tokens: 0"), "{text}");

    let overlapping = f.path("o.bin");
    ok(&[
        "tokenize",
        "--in",
        s(&dir),
        "--out",
        s(&overlapping),
        "--bars",
        "16",
        "--stride",
        "8",
    ]);
    assert_eq!(
        read_corpus(&fs::read(&overlapping).unwrap()).unwrap().len(),
        3
    );
}

#[test]
fn tokenize_skips_other_meters() {
    let f = Fixture::new();
    let good = write_smf(&song(4, 0), 4);
    let dir = f.midi_dir(
        "in",
        &[("a.mid", good.clone()), ("b.mid", three_four(&good))],
    );
    let out = f.path("c.bin");
    let o = ok(&["tokenize", "--in", s(&dir), "--out", s(&out), "--bars", "2"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kept: 1 skipped: 1"), "{text}");
    assert!(text.contains("unsupported meter"), "{text}");
    assert_eq!(read_corpus(&fs::read(&out).unwrap()).unwrap().len(), 2);
}

#[test]
fn tokenize_fails_on_empty_output() {
    let f = Fixture::new();
    let dir = f.midi_dir("empty", &[]);
    let out = f.path("c.bin");
    assert!(
        !run(&["tokenize", "--in", s(&dir), "--out", s(&out), "--bars", "1"])
            .status
            .success()
    );
    assert!(!out.exists());
    assert!(
        !run(&["tokenize", "--in", s(&dir), "--out", s(&out), "--bars", "3"])
            .status
            .success()
    );
}

#[test]
fn train_smoke_is_deterministic() {
    let f = Fixture::new();
    let corpus = f.tiny_corpus(2);
    let cfg = f.config("smoke.cfg", SMOKE);
    let (a, b) = (f.path("run_a"), f.path("run_b"));
    for run_dir in [&a, &b] {
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(run_dir),
        ]);
    }
    let ckpt = "ckpt-00000002.bin";
    assert!(a.join(ckpt).exists());
    assert_eq!(
        fs::read(a.join(ckpt)).unwrap(),
        fs::read(b.join(ckpt)).unwrap()
    );
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    let manifest: Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["checkpoint"], ckpt);
    assert_eq!(manifest["corpus_sha256"].as_str().unwrap().len(), 64);
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // Rerunning in the same directory finds the run complete.
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&a),
    ]);
    let other = f.config("other.cfg", &SMOKE.replace("seed = 3", "seed = 4"));
    assert!(!run(&[
        "train",
        "--config",
        s(&other),
        "--corpus",
        s(&corpus),
        "--out",
        s(&a)
    ])
    .status
    .success());
}

#[test]
fn train_fails_without_corpus_or_with_bad_config() {
    let f = Fixture::new();
    let cfg = f.config("smoke.cfg", SMOKE);
    let missing = f.path("missing.bin");
    let out = f.path("run");
    assert!(!run(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&missing),
        "--out",
        s(&out)
    ])
    .status
    .success());
    let corpus = f.tiny_corpus(1);
    let bad = f.config("bad.cfg", "colour = blue\n");
    let o = run(&[
        "train",
        "--config",
        s(&bad),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
}

#[test]
fn generate_writes_files_and_report() {
    let f = Fixture::new();
    let corpus = f.tiny_corpus(2);
    let cfg = f.config("smoke.cfg", SMOKE);
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&run_dir),
    ]);
    let ckpt = run_dir.join("ckpt-00000002.bin");

    let (g1, g2) = (f.path("g1"), f.path("g2"));
    for g in [&g1, &g2] {
        ok(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--count",
            "3",
            "--seed",
            "9",
            "--out",
            s(g),
        ]);
    }
    let mut files: Vec<_> = fs::read_dir(&g1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".mid"))
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["sample_00000.mid", "sample_00001.mid", "sample_00002.mid"]
    );
    for name in files.iter().map(String::as_str).chain(["report.json"]) {
        assert_eq!(
            fs::read(g1.join(name)).unwrap(),
            fs::read(g2.join(name)).unwrap(),
            "{name}"
        );
    }
    let report: Value = serde_json::from_slice(&fs::read(g1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_songs"], 3);

    let g0 = f.path("g0");
    ok(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--count",
        "0",
        "--seed",
        "9",
        "--out",
        s(&g0),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(g0.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_songs"], 0);

    let junk = f.path("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(!run(&[
        "generate",
        "--checkpoint",
        s(&junk),
        "--count",
        "1",
        "--seed",
        "1",
        "--out",
        s(&g0)
    ])
    .status
    .success());
}

#[test]
fn evaluate_memorized_corpus_and_rejects_other_bars() {
    let f = Fixture::new();
    let corpus = f.tiny_corpus(1);
    let cfg = f.config(
        "fit.cfg",
        "bars = 1\nmodel = tiny\ntotal_steps = 300\nseed = 1\nlr = 1e-3\ncheckpoint_every = 300\n",
    );
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&run_dir),
    ]);
    let ckpt = run_dir.join("ckpt-00000300.bin");
    let report_path = f.path("report.json");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&report_path),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    for key in ["eb", "upc", "qn", "dp", "seq_acc", "next_acc", "n_songs"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["seq_acc"]["all"], 1.0);
    assert_eq!(report["next_acc"]["all"], 1.0);
    assert_eq!(report["n_songs"], 1);

    let dir = f.midi_dir("two", &[("a.mid", write_smf(&song(2, 0), 4))]);
    let two_bar = f.path("two.bin");
    ok(&[
        "tokenize",
        "--in",
        s(&dir),
        "--out",
        s(&two_bar),
        "--bars",
        "2",
        "--max-notes",
        "12",
    ]);
    let o = run(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&two_bar),
        "--out",
        s(&report_path),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("BarsMismatch"));
}
