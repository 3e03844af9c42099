//! Generation-quality metrics over note grids.

use crate::midi_token::{GridSong, TrackRole, N_TRACKS};

/// Minimum duration, in steps, of a qualified note.
pub const QUALIFIED_MIN_STEPS: u32 = 3;
/// Onset grid of 16 notes per 4/4 bar at 96 steps per bar.
pub const DRUM_GRID_STEPS: u32 = 6;

fn is_melodic(role: TrackRole) -> bool {
    role != TrackRole::Drums
}

/// Per-track ratio of measures with no notes; `None` without measures.
pub fn metric_eb(songs: &[GridSong]) -> [Option<f64>; N_TRACKS] {
    TrackRole::ALL.map(|role| {
        let (mut empty, mut total) = (0usize, 0usize);
        for s in songs {
            for m in s.track(role) {
                total += 1;
                empty += usize::from(m.is_empty());
            }
        }
        (total > 0).then(|| empty as f64 / total as f64)
    })
}

/// Per-track mean number of distinct pitch classes over non-empty bars;
/// `None` for drums and for tracks without a non-empty bar.
pub fn metric_upc(songs: &[GridSong]) -> [Option<f64>; N_TRACKS] {
    TrackRole::ALL.map(|role| {
        if !is_melodic(role) {
            return None;
        }
        let (mut sum, mut bars) = (0usize, 0usize);
        for s in songs {
            for m in s.track(role).iter().filter(|m| !m.is_empty()) {
                let mut classes = [false; 12];
                m.notes()
                    .iter()
                    .for_each(|n| classes[(n.pitch() % 12) as usize] = true);
                sum += classes.iter().filter(|&&c| c).count();
                bars += 1;
            }
        }
        (bars > 0).then(|| sum as f64 / bars as f64)
    })
}

/// Per-track fraction of notes lasting at least three steps; `None` for
/// drums and for tracks without notes.
pub fn metric_qn(songs: &[GridSong]) -> [Option<f64>; N_TRACKS] {
    TrackRole::ALL.map(|role| {
        if !is_melodic(role) {
            return None;
        }
        let (mut ok, mut total) = (0usize, 0usize);
        for s in songs {
            for n in s.track(role).iter().flat_map(|m| m.notes()) {
                total += 1;
                ok += usize::from(n.duration() >= QUALIFIED_MIN_STEPS);
            }
        }
        (total > 0).then(|| ok as f64 / total as f64)
    })
}

/// Fraction of drum onsets on the 16-note grid; `None` without drum notes.
pub fn metric_dp(songs: &[GridSong]) -> Option<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for s in songs {
        for n in s.track(TrackRole::Drums).iter().flat_map(|m| m.notes()) {
            total += 1;
            ok += usize::from(n.time() % DRUM_GRID_STEPS == 0);
        }
    }
    (total > 0).then(|| ok as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenMetrics {
    pub eb: [Option<f64>; N_TRACKS],
    pub upc: [Option<f64>; N_TRACKS],
    pub qn: [Option<f64>; N_TRACKS],
    pub dp: Option<f64>,
}

impl GenMetrics {
    pub fn compute(songs: &[GridSong]) -> Self {
        GenMetrics {
            eb: metric_eb(songs),
            upc: metric_upc(songs),
            qn: metric_qn(songs),
            dp: metric_dp(songs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_token::{NoteEvent, TrackMeasure};

    fn song_with(role: TrackRole, measures: Vec<Vec<(u32, u32, u32)>>) -> GridSong {
        let n = measures.len();
        let mut tracks = TrackRole::ALL.map(|r| vec![TrackMeasure::empty(r); n]);
        tracks[role.index()] = measures
            .into_iter()
            .map(|notes| {
                TrackMeasure::new(
                    role,
                    notes
                        .into_iter()
                        .map(|(t, p, d)| NoteEvent::new(t, p, d).unwrap())
                        .collect(),
                )
            })
            .collect();
        GridSong::new(tracks).unwrap()
    }

    #[test]
    fn empty_bar_ratios() {
        let all_empty = GridSong::empty(3).unwrap();
        assert_eq!(metric_eb(&[all_empty]), [Some(1.0); 4]);
        let s = song_with(
            TrackRole::Bass,
            vec![vec![(0, 40, 4)], vec![], vec![(0, 40, 4)], vec![(5, 41, 1)]],
        );
        assert_eq!(metric_eb(std::slice::from_ref(&s))[0], Some(0.25));
        assert_eq!(metric_eb(&[])[0], None);
    }

    #[test]
    fn pitch_classes() {
        let triad = song_with(
            TrackRole::GuitarPiano,
            vec![vec![(0, 60, 4), (0, 64, 4), (0, 67, 4), (0, 72, 4)]],
        );
        assert_eq!(metric_upc(&[triad])[2], Some(3.0));
        let chromatic = song_with(
            TrackRole::Strings,
            vec![(0..12).map(|k| (k * 2, 48 + k, 1)).collect()],
        );
        assert_eq!(metric_upc(&[chromatic])[3], Some(12.0));
        let two = song_with(
            TrackRole::Bass,
            vec![
                vec![(0, 36, 1), (4, 38, 1)],
                vec![],
                vec![(0, 36, 1), (4, 38, 1), (8, 40, 1), (12, 41, 1)],
            ],
        );
        let upc = metric_upc(&[two]);
        assert_eq!(upc[0], Some(3.0));
        assert_eq!(upc[1], None);
    }

    #[test]
    fn qualified_notes() {
        let s = song_with(
            TrackRole::Bass,
            vec![vec![(0, 40, 1), (10, 40, 2), (20, 40, 3), (30, 40, 4)]],
        );
        assert_eq!(metric_qn(&[s])[0], Some(0.5));
        let long = song_with(TrackRole::Strings, vec![vec![(0, 50, 96)]]);
        assert_eq!(metric_qn(&[long])[3], Some(1.0));
        let short = song_with(TrackRole::Strings, vec![vec![(0, 50, 1), (9, 52, 1)]]);
        assert_eq!(metric_qn(&[short])[3], Some(0.0));
        assert_eq!(metric_qn(&[GridSong::empty(1).unwrap()])[0], None);
    }

    #[test]
    fn drum_pattern() {
        let on = |ts: &[u32]| {
            song_with(
                TrackRole::Drums,
                vec![ts.iter().map(|&t| (t, 36, 1)).collect()],
            )
        };
        assert_eq!(metric_dp(&[on(&[0, 6, 12, 48])]), Some(1.0));
        assert_eq!(metric_dp(&[on(&[5])]), Some(0.0));
        assert_eq!(metric_dp(&[on(&[0, 5, 6, 7])]), Some(0.5));
        assert_eq!(metric_dp(&[GridSong::empty(2).unwrap()]), None);
    }
}
