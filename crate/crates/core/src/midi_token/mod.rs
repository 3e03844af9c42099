//! Note grid, token vocabulary, and Standard MIDI File I/O.
//!
//! Vocabulary (323 ids):
//!
//! | ids       | meaning                          |
//! |-----------|----------------------------------|
//! | 0..=127   | pitch                            |
//! | 128..=223 | onset time within the measure    |
//! | 224..=319 | duration 1..=96 steps            |
//! | 320       | pad                              |
//! | 321 / 322 | start / end of sequence          |
//!
//! A measure of one track serializes as `SOS, (time, pitch, duration)*, EOS`
//! followed by pads up to a fixed length.

pub mod corpus;
pub mod quantize;
pub mod smf;

use std::fmt;

pub use corpus::{corpus_bytes, read_corpus, windows, write_corpus, TokenizedSong};
pub use quantize::{ingest_smf, is_four_four, quantize, route_instrument, QuantizeConfig};
pub use smf::{parse_smf, write_smf, MidiSongRaw, RawNote, SmfError};

pub const STEPS_PER_MEASURE: usize = 96;
pub const N_TRACKS: usize = 4;
pub const PITCH_BASE: u16 = 0;
pub const TIME_BASE: u16 = 128;
pub const DURATION_BASE: u16 = 224;
pub const PAD: u16 = 320;
pub const SOS: u16 = 321;
pub const EOS: u16 = 322;
pub const VOCAB_SIZE: usize = 323;
pub const DEFAULT_MAX_NOTES: usize = 24;

/// Token sequence length for a given per-measure note cap.
pub const fn seq_len(max_notes: usize) -> usize {
    3 * max_notes + 2
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MidiTokenError {
    #[error("invalid note (time {time}, pitch {pitch}, duration {duration})")]
    InvalidNote {
        time: u32,
        pitch: u32,
        duration: u32,
    },
    #[error("song has no measures")]
    NoMeasures,
    #[error("track lengths differ: {0:?}")]
    RaggedTracks([usize; N_TRACKS]),
    #[error("no notes survive quantization")]
    EmptyAfterQuantize,
    #[error("meter {numerator}/{denominator} is not 4/4")]
    UnsupportedMeter { numerator: u8, denominator: u32 },
    #[error(transparent)]
    Smf(#[from] SmfError),
    #[error("corpus: {0}")]
    Corpus(String),
}

/// One note on the 96-steps-per-measure grid.
///
/// Field order gives the canonical sort order (time, pitch, duration).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoteEvent {
    time: u8,
    pitch: u8,
    duration: u8,
}

impl NoteEvent {
    pub fn new(time: u32, pitch: u32, duration: u32) -> Result<Self, MidiTokenError> {
        if time as usize >= STEPS_PER_MEASURE
            || pitch > 127
            || duration == 0
            || duration as usize > STEPS_PER_MEASURE
        {
            return Err(MidiTokenError::InvalidNote {
                time,
                pitch,
                duration,
            });
        }
        Ok(NoteEvent {
            time: time as u8,
            pitch: pitch as u8,
            duration: duration as u8,
        })
    }

    pub fn time(&self) -> u32 {
        self.time as u32
    }

    pub fn pitch(&self) -> u32 {
        self.pitch as u32
    }

    pub fn duration(&self) -> u32 {
        self.duration as u32
    }

    pub fn end(&self) -> u32 {
        self.time() + self.duration()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrackRole {
    Bass,
    Drums,
    GuitarPiano,
    Strings,
}

impl TrackRole {
    pub const ALL: [TrackRole; N_TRACKS] = [
        TrackRole::Bass,
        TrackRole::Drums,
        TrackRole::GuitarPiano,
        TrackRole::Strings,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Name used in parameter names and reports.
    pub fn key(self) -> &'static str {
        match self {
            TrackRole::Bass => "bass",
            TrackRole::Drums => "drums",
            TrackRole::GuitarPiano => "guitar_piano",
            TrackRole::Strings => "strings",
        }
    }
}

impl fmt::Display for TrackRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Notes of one track in one measure, sorted and free of exact duplicates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrackMeasure {
    role: TrackRole,
    notes: Vec<NoteEvent>,
}

impl TrackMeasure {
    pub fn new(role: TrackRole, mut notes: Vec<NoteEvent>) -> Self {
        notes.sort_unstable();
        notes.dedup();
        TrackMeasure { role, notes }
    }

    pub fn empty(role: TrackRole) -> Self {
        TrackMeasure {
            role,
            notes: Vec::new(),
        }
    }

    pub fn role(&self) -> TrackRole {
        self.role
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    /// Drops notes until at most `max` remain, lowest pitches first.
    pub fn cap(&mut self, max: usize) {
        if self.notes.len() <= max {
            return;
        }
        let mut by_pitch = self.notes.clone();
        by_pitch.sort_unstable_by_key(|n| (n.pitch, n.time, n.duration));
        let drop = by_pitch.len() - max;
        let dropped = &by_pitch[..drop];
        self.notes.retain(|n| !dropped.contains(n));
    }

    /// True when every note ends inside the measure and no two notes of the
    /// same pitch overlap. Only such measures survive a MIDI round trip.
    pub fn is_playable(&self) -> bool {
        if self
            .notes
            .iter()
            .any(|n| n.end() as usize > STEPS_PER_MEASURE)
        {
            return false;
        }
        let mut last_end = [0u32; 128];
        let mut seen = [false; 128];
        for n in &self.notes {
            let p = n.pitch as usize;
            if seen[p] && n.time() < last_end[p] {
                return false;
            }
            seen[p] = true;
            last_end[p] = n.end();
        }
        true
    }
}

/// N measures × 4 tracks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridSong {
    tracks: [Vec<TrackMeasure>; N_TRACKS],
}

impl GridSong {
    pub fn new(tracks: [Vec<TrackMeasure>; N_TRACKS]) -> Result<Self, MidiTokenError> {
        let lens = [
            tracks[0].len(),
            tracks[1].len(),
            tracks[2].len(),
            tracks[3].len(),
        ];
        if lens.iter().any(|&l| l != lens[0]) {
            return Err(MidiTokenError::RaggedTracks(lens));
        }
        if lens[0] == 0 {
            return Err(MidiTokenError::NoMeasures);
        }
        let mut tracks = tracks;
        for (t, track) in tracks.iter_mut().enumerate() {
            for m in track.iter_mut() {
                m.role = TrackRole::ALL[t];
            }
        }
        Ok(GridSong { tracks })
    }

    pub fn empty(n_measures: usize) -> Result<Self, MidiTokenError> {
        Self::new(TrackRole::ALL.map(|r| vec![TrackMeasure::empty(r); n_measures]))
    }

    pub fn n_measures(&self) -> usize {
        self.tracks[0].len()
    }

    pub fn track(&self, role: TrackRole) -> &[TrackMeasure] {
        &self.tracks[role.index()]
    }

    pub fn measure(&self, i: usize, role: TrackRole) -> &TrackMeasure {
        &self.tracks[role.index()][i]
    }

    pub fn tracks(&self) -> &[Vec<TrackMeasure>; N_TRACKS] {
        &self.tracks
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().flatten().map(|m| m.len()).sum()
    }

    pub fn is_playable(&self) -> bool {
        self.tracks.iter().flatten().all(|m| m.is_playable())
    }

    /// Measures `start..start + len` as a new song.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self, MidiTokenError> {
        Self::new(std::array::from_fn(|t| {
            self.tracks[t][start..start + len].to_vec()
        }))
    }
}

/// A validated fixed-length token sequence for one measure of one track.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u16>,
}

impl TokenSeq {
    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u16> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of ids up to and including the end-of-sequence token.
    pub fn content_len(&self) -> usize {
        content_len(&self.ids)
    }
}

/// Length of `ids` up to and including the first end-of-sequence token
/// (the whole slice when none is present).
pub fn content_len(ids: &[u16]) -> usize {
    ids.iter()
        .position(|&t| t == EOS)
        .map(|p| p + 1)
        .unwrap_or(ids.len())
}

pub fn is_time_token(t: u16) -> bool {
    (TIME_BASE..DURATION_BASE).contains(&t)
}

pub fn is_pitch_token(t: u16) -> bool {
    t < TIME_BASE
}

pub fn is_duration_token(t: u16) -> bool {
    (DURATION_BASE..PAD).contains(&t)
}

/// Serializes a measure. Notes beyond `max_notes` are dropped, lowest
/// pitches first.
pub fn tokenize_measure(m: &TrackMeasure, max_notes: usize) -> TokenSeq {
    let mut m = m.clone();
    m.cap(max_notes);
    let len = seq_len(max_notes);
    let mut ids = Vec::with_capacity(len);
    ids.push(SOS);
    for n in m.notes() {
        ids.push(TIME_BASE + n.time as u16);
        ids.push(PITCH_BASE + n.pitch as u16);
        ids.push(DURATION_BASE + n.duration as u16 - 1);
    }
    ids.push(EOS);
    ids.resize(len, PAD);
    TokenSeq { ids }
}

/// Result of reading an arbitrary id sequence back into notes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detokenized {
    pub measure: TrackMeasure,
    /// Ids before the end token that were not part of a well-formed triple.
    pub malformed: usize,
    /// Ids inspected (excluding a leading start token and the end token).
    pub scanned: usize,
}

/// Reads notes back from ids, skipping anything that does not form a
/// (time, pitch, duration) triple and stopping at the first end token.
pub fn detokenize_measure(role: TrackRole, ids: &[u16]) -> Detokenized {
    let body = match ids.first() {
        Some(&SOS) => &ids[1..],
        _ => ids,
    };
    let end = body.iter().position(|&t| t == EOS).unwrap_or(body.len());
    let body = &body[..end];
    let mut notes = Vec::new();
    let mut malformed = 0;
    let mut i = 0;
    while i < body.len() {
        if i + 2 < body.len()
            && is_time_token(body[i])
            && is_pitch_token(body[i + 1])
            && is_duration_token(body[i + 2])
        {
            notes.push(NoteEvent {
                time: (body[i] - TIME_BASE) as u8,
                pitch: (body[i + 1] - PITCH_BASE) as u8,
                duration: (body[i + 2] - DURATION_BASE + 1) as u8,
            });
            i += 3;
        } else {
            malformed += 1;
            i += 1;
        }
    }
    Detokenized {
        measure: TrackMeasure::new(role, notes),
        malformed,
        scanned: body.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(t: u32, p: u32, d: u32) -> NoteEvent {
        NoteEvent::new(t, p, d).unwrap()
    }

    #[test]
    fn note_ranges_are_checked() {
        assert!(NoteEvent::new(95, 127, 96).is_ok());
        assert!(NoteEvent::new(96, 60, 1).is_err());
        assert!(NoteEvent::new(0, 128, 1).is_err());
        assert!(NoteEvent::new(0, 60, 0).is_err());
        assert!(NoteEvent::new(0, 60, 97).is_err());
    }

    #[test]
    fn empty_measure_tokens() {
        let t = tokenize_measure(&TrackMeasure::empty(TrackRole::Bass), DEFAULT_MAX_NOTES);
        assert_eq!(t.len(), 74);
        assert_eq!(&t.ids()[..3], &[SOS, EOS, PAD]);
        assert!(t.ids()[2..].iter().all(|&x| x == PAD));
    }

    #[test]
    fn single_note_tokens() {
        let m = TrackMeasure::new(TrackRole::Bass, vec![note(0, 60, 4)]);
        let t = tokenize_measure(&m, DEFAULT_MAX_NOTES);
        assert_eq!(&t.ids()[..6], &[321, 128, 60, 227, 322, 320]);
    }

    #[test]
    fn chord_is_consecutive_triples() {
        let m = TrackMeasure::new(TrackRole::GuitarPiano, vec![note(0, 64, 1), note(0, 60, 1)]);
        let t = tokenize_measure(&m, DEFAULT_MAX_NOTES);
        assert_eq!(&t.ids()[..9], &[321, 128, 60, 224, 128, 64, 224, 322, 320]);
        assert_eq!(
            detokenize_measure(TrackRole::GuitarPiano, t.ids()).measure,
            m
        );
    }

    #[test]
    fn pitch_before_time_is_malformed() {
        let d = detokenize_measure(TrackRole::Bass, &[321, 60, 128, 227, 322]);
        assert!(d.measure.is_empty());
        assert_eq!(d.malformed, 3);
    }

    #[test]
    fn duplicate_triples_collapse() {
        let d = detokenize_measure(TrackRole::Bass, &[321, 128, 60, 227, 128, 60, 227, 322]);
        assert_eq!(d.measure.notes(), &[note(0, 60, 4)]);
        assert_eq!(d.malformed, 0);
    }

    #[test]
    fn tokens_after_end_are_ignored() {
        let d = detokenize_measure(TrackRole::Bass, &[321, 322, 128, 60, 227]);
        assert!(d.measure.is_empty());
        assert_eq!(d.malformed, 0);
    }

    #[test]
    fn overfull_measure_drops_lowest_pitches() {
        let notes: Vec<_> = (0..5).map(|i| note(i, 40 + i, 1)).collect();
        let m = TrackMeasure::new(TrackRole::Strings, notes);
        let t = tokenize_measure(&m, 3);
        assert_eq!(t.len(), seq_len(3));
        let back = detokenize_measure(TrackRole::Strings, t.ids()).measure;
        let pitches: Vec<u32> = back.notes().iter().map(|n| n.pitch()).collect();
        assert_eq!(pitches, vec![42, 43, 44]);
    }

    #[test]
    fn playability() {
        let ok = TrackMeasure::new(TrackRole::Bass, vec![note(0, 60, 12), note(12, 60, 84)]);
        assert!(ok.is_playable());
        let spill = TrackMeasure::new(TrackRole::Bass, vec![note(90, 60, 20)]);
        assert!(!spill.is_playable());
        let overlap = TrackMeasure::new(TrackRole::Bass, vec![note(0, 60, 24), note(12, 60, 4)]);
        assert!(!overlap.is_playable());
    }

    #[test]
    fn ragged_song_rejected() {
        let r = GridSong::new([
            vec![TrackMeasure::empty(TrackRole::Bass)],
            vec![],
            vec![],
            vec![],
        ]);
        assert!(matches!(r, Err(MidiTokenError::RaggedTracks(_))));
        assert!(matches!(
            GridSong::empty(0),
            Err(MidiTokenError::NoMeasures)
        ));
    }

    pub(crate) fn arb_measure(max_notes: usize) -> impl Strategy<Value = TrackMeasure> {
        (
            0usize..4,
            proptest::collection::vec((0u32..96, 0u32..128, 1u32..=96), 0..=max_notes),
        )
            .prop_map(|(r, raw)| {
                TrackMeasure::new(
                    TrackRole::ALL[r],
                    raw.into_iter().map(|(t, p, d)| note(t, p, d)).collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_measure(DEFAULT_MAX_NOTES)) {
            let t = tokenize_measure(&m, DEFAULT_MAX_NOTES);
            let d = detokenize_measure(m.role(), t.ids());
            prop_assert_eq!(d.malformed, 0);
            prop_assert_eq!(d.measure, m);
        }

        #[test]
        fn detokenize_never_panics_and_output_is_sorted(
            ids in proptest::collection::vec(0u16..323, 0..80)
        ) {
            let d = detokenize_measure(TrackRole::Drums, &ids);
            let notes = d.measure.notes();
            prop_assert!(notes.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.malformed <= d.scanned);
        }
    }
}
