//! Tick-to-grid quantization and instrument routing.

use std::collections::BTreeMap;

use super::smf::{parse_smf, MidiSongRaw};
use super::{
    GridSong, MidiTokenError, NoteEvent, TrackMeasure, TrackRole, DEFAULT_MAX_NOTES, N_TRACKS,
    STEPS_PER_MEASURE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizeConfig {
    pub max_notes: usize,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            max_notes: DEFAULT_MAX_NOTES,
        }
    }
}

/// Maps a (channel, program) pair to a track, or `None` to discard.
pub fn route_instrument(channel: u8, program: u8) -> Option<TrackRole> {
    match (channel, program) {
        (9, _) => Some(TrackRole::Drums),
        (_, 32..=39) => Some(TrackRole::Bass),
        (_, 0..=31) => Some(TrackRole::GuitarPiano),
        (_, 40..=55) => Some(TrackRole::Strings),
        _ => None,
    }
}

/// True when every time signature in the file is 4/4 (none means 4/4).
pub fn is_four_four(raw: &MidiSongRaw) -> bool {
    raw.time_signatures
        .iter()
        .all(|ts| ts.numerator == 4 && ts.denominator == 4)
}

/// `round(ticks · 24 / tpq)` with halves rounded up.
fn ticks_to_steps(ticks: u64, tpq: u64) -> u64 {
    let steps_per_quarter = (STEPS_PER_MEASURE / 4) as u64;
    (2 * ticks * steps_per_quarter + tpq) / (2 * tpq)
}

/// Places notes on the 96-step grid.
///
/// Onsets and lengths are rounded to the nearest step; lengths are clamped to
/// at least one step and cut at the measure boundary. Within a measure and
/// track, notes sharing (time, pitch) keep the longest, a note is shortened
/// where the next note of the same pitch starts, and the lowest pitches are
/// dropped beyond `max_notes`. Trailing measures empty in every track are
/// removed.
pub fn quantize(raw: &MidiSongRaw, cfg: &QuantizeConfig) -> Result<GridSong, MidiTokenError> {
    let tpq = raw.ticks_per_quarter.max(1) as u64;
    // (measure, track) -> (time, pitch) -> longest duration
    let mut cells: BTreeMap<(usize, usize), BTreeMap<(u32, u32), u32>> = BTreeMap::new();
    for n in &raw.notes {
        let Some(role) = route_instrument(n.channel, n.program) else {
            continue;
        };
        let onset = ticks_to_steps(n.start, tpq) as usize;
        let length = ticks_to_steps(n.end.saturating_sub(n.start), tpq).max(1) as usize;
        let measure = onset / STEPS_PER_MEASURE;
        let time = onset % STEPS_PER_MEASURE;
        let duration = length.min(STEPS_PER_MEASURE - time);
        let slot = cells
            .entry((measure, role.index()))
            .or_default()
            .entry((time as u32, n.pitch as u32))
            .or_insert(0);
        *slot = (*slot).max(duration as u32);
    }
    let n_measures = match cells.keys().map(|&(m, _)| m).max() {
        Some(m) => m + 1,
        None => return Err(MidiTokenError::EmptyAfterQuantize),
    };

    let mut tracks: [Vec<TrackMeasure>; N_TRACKS] =
        TrackRole::ALL.map(|r| vec![TrackMeasure::empty(r); n_measures]);
    for ((measure, t), notes) in cells {
        let mut by_pitch: Vec<(u32, u32, u32)> = notes
            .into_iter()
            .map(|((time, p), d)| (p, time, d))
            .collect();
        by_pitch.sort_unstable();
        for i in 1..by_pitch.len() {
            let (p, time, _) = by_pitch[i];
            let prev = &mut by_pitch[i - 1];
            if prev.0 == p && prev.1 + prev.2 > time {
                prev.2 = time - prev.1;
            }
        }
        let events = by_pitch
            .into_iter()
            .map(|(p, time, d)| NoteEvent::new(time, p, d))
            .collect::<Result<Vec<_>, _>>()?;
        let mut m = TrackMeasure::new(TrackRole::ALL[t], events);
        m.cap(cfg.max_notes);
        tracks[t][measure] = m;
    }
    GridSong::new(tracks)
}

/// Parses, checks the meter, and quantizes one file.
pub fn ingest_smf(bytes: &[u8], cfg: &QuantizeConfig) -> Result<GridSong, MidiTokenError> {
    let raw = parse_smf(bytes)?;
    if let Some(ts) = raw
        .time_signatures
        .iter()
        .find(|ts| ts.numerator != 4 || ts.denominator != 4)
    {
        return Err(MidiTokenError::UnsupportedMeter {
            numerator: ts.numerator,
            denominator: ts.denominator,
        });
    }
    quantize(&raw, cfg)
}
