//! Tokenized corpus records.
//!
//! Each record is `u32 n_measures, u32 n_tracks, u32 seq_len` followed by
//! `n_measures · n_tracks · seq_len` little-endian `u16` ids, measure-major
//! then track-major. Records are concatenated with no file header.

use std::io::Write;

use super::{
    detokenize_measure, seq_len, tokenize_measure, GridSong, MidiTokenError, TrackMeasure,
    TrackRole, N_TRACKS, PAD, SOS, VOCAB_SIZE,
};

/// Token grid of one song (or window).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedSong {
    pub n_measures: usize,
    pub n_tracks: usize,
    pub seq_len: usize,
    pub ids: Vec<u16>,
}

impl TokenizedSong {
    pub fn from_grid(song: &GridSong, max_notes: usize) -> Self {
        let l = seq_len(max_notes);
        let mut ids = Vec::with_capacity(song.n_measures() * N_TRACKS * l);
        for i in 0..song.n_measures() {
            for role in TrackRole::ALL {
                ids.extend_from_slice(tokenize_measure(song.measure(i, role), max_notes).ids());
            }
        }
        TokenizedSong {
            n_measures: song.n_measures(),
            n_tracks: N_TRACKS,
            seq_len: l,
            ids,
        }
    }

    /// Checks sizes and id ranges.
    pub fn validate(&self) -> Result<(), MidiTokenError> {
        if self.n_tracks != N_TRACKS {
            return Err(MidiTokenError::Corpus(format!("{} tracks", self.n_tracks)));
        }
        if self.n_measures == 0 || self.seq_len < 2 || !(self.seq_len - 2).is_multiple_of(3) {
            return Err(MidiTokenError::Corpus(format!(
                "bad dimensions {}x{}x{}",
                self.n_measures, self.n_tracks, self.seq_len
            )));
        }
        if self.ids.len() != self.n_measures * self.n_tracks * self.seq_len {
            return Err(MidiTokenError::Corpus(
                "id count does not match header".into(),
            ));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(MidiTokenError::Corpus(format!(
                "token id {bad} out of range"
            )));
        }
        Ok(())
    }

    pub fn max_notes(&self) -> usize {
        (self.seq_len - 2) / 3
    }

    pub fn sequence(&self, measure: usize, track: usize) -> &[u16] {
        let start = (measure * self.n_tracks + track) * self.seq_len;
        &self.ids[start..start + self.seq_len]
    }

    /// Reads notes back; returns the song and the number of malformed ids.
    pub fn to_grid(&self) -> (GridSong, usize) {
        let mut malformed = 0;
        let tracks: [Vec<TrackMeasure>; N_TRACKS] = std::array::from_fn(|t| {
            (0..self.n_measures)
                .map(|i| {
                    let d = detokenize_measure(TrackRole::ALL[t], self.sequence(i, t));
                    malformed += d.malformed;
                    d.measure
                })
                .collect()
        });
        (
            GridSong::new(tracks).expect("n_measures is positive"),
            malformed,
        )
    }

    /// Number of non-pad ids.
    pub fn content_tokens(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }

    /// True when every sequence starts with the start token.
    pub fn well_framed(&self) -> bool {
        self.ids.chunks(self.seq_len).all(|s| s[0] == SOS)
    }
}

pub fn write_corpus(mut w: impl Write, songs: &[TokenizedSong]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for s in songs {
        for v in [s.n_measures, s.n_tracks, s.seq_len] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &id in &s.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn corpus_bytes(songs: &[TokenizedSong]) -> Vec<u8> {
    let mut out = Vec::new();
    write_corpus(&mut out, songs).expect("writing to memory");
    out
}

pub fn read_corpus(bytes: &[u8]) -> Result<Vec<TokenizedSong>, MidiTokenError> {
    let mut songs = Vec::new();
    let mut pos = 0;
    let u32_at = |p: usize| -> Result<usize, MidiTokenError> {
        bytes
            .get(p..p + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| MidiTokenError::Corpus(format!("truncated header at byte {p}")))
    };
    while pos < bytes.len() {
        let (n_measures, n_tracks, l) = (u32_at(pos)?, u32_at(pos + 4)?, u32_at(pos + 8)?);
        pos += 12;
        let count = n_measures
            .checked_mul(n_tracks)
            .and_then(|v| v.checked_mul(l))
            .ok_or_else(|| MidiTokenError::Corpus("record too large".into()))?;
        let body = bytes
            .get(pos..pos + 2 * count)
            .ok_or_else(|| MidiTokenError::Corpus(format!("truncated record at byte {pos}")))?;
        pos += 2 * count;
        let song = TokenizedSong {
            n_measures,
            n_tracks,
            seq_len: l,
            ids: body
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        };
        song.validate()?;
        songs.push(song);
    }
    Ok(songs)
}

/// Windows of `bars` measures starting every `stride` measures; a partial
/// tail window is dropped.
pub fn windows(song: &GridSong, bars: usize, stride: usize) -> Vec<GridSong> {
    assert!(bars > 0 && stride > 0, "bars and stride must be positive");
    let n = song.n_measures();
    (0..)
        .map(|k| k * stride)
        .take_while(|&s| s + bars <= n)
        .map(|s| song.slice(s, bars).expect("window within song"))
        .collect()
}
