//! Standard MIDI File reading (formats 0 and 1) and writing (format 1).

use super::{GridSong, TrackRole, N_TRACKS, STEPS_PER_MEASURE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SmfError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    UnsupportedDivision,
    #[error("chunk truncated at byte {0}")]
    TruncatedChunk(usize),
    #[error("invalid event in track {track} at byte {offset}")]
    InvalidEvent { track: usize, offset: usize },
}

/// A matched note with absolute tick times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawNote {
    pub track: usize,
    pub channel: u8,
    /// Program active on the channel at note-on.
    pub program: u8,
    pub pitch: u8,
    pub velocity: u8,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub usec_per_quarter: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MidiSongRaw {
    pub format: u16,
    pub ticks_per_quarter: u16,
    /// Sorted by (start, track, pitch).
    pub notes: Vec<RawNote>,
    pub tempos: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    /// Largest end-of-track tick over all tracks.
    pub end_tick: u64,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    NoteOn {
        channel: u8,
        pitch: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        pitch: u8,
    },
    Program {
        channel: u8,
        program: u8,
    },
    Tempo(u32),
    TimeSig {
        numerator: u8,
        denominator: u32,
    },
}

#[derive(Clone, Copy, Debug)]
struct Event {
    tick: u64,
    track: usize,
    seq: usize,
    kind: Kind,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn byte(&mut self) -> Option<u8> {
        let b = *self.bytes.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn vlq(&mut self) -> Option<u32> {
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.byte()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Some(v);
            }
        }
        None
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

/// Parses an SMF into matched notes plus tempo and meter maps.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiSongRaw, SmfError> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(SmfError::MalformedHeader("missing MThd".into()));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(SmfError::MalformedHeader(format!(
            "header length {header_len}"
        )));
    }
    let body_start = 8usize;
    if bytes.len() < body_start + header_len {
        return Err(SmfError::TruncatedChunk(body_start));
    }
    let format = be_u16(&bytes[8..10]);
    let n_tracks = be_u16(&bytes[10..12]) as usize;
    let division = be_u16(&bytes[12..14]);
    if format > 1 {
        return Err(SmfError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(SmfError::UnsupportedDivision);
    }
    if division == 0 {
        return Err(SmfError::MalformedHeader("zero ticks per quarter".into()));
    }

    let mut events = Vec::new();
    let mut track_end = Vec::new();
    let mut pos = body_start + header_len;
    while track_end.len() < n_tracks && pos < bytes.len() {
        if bytes.len() < pos + 8 {
            return Err(SmfError::TruncatedChunk(pos));
        }
        let kind = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(len)
            .ok_or(SmfError::TruncatedChunk(pos))?;
        if end > bytes.len() {
            return Err(SmfError::TruncatedChunk(pos));
        }
        if kind == b"MTrk" {
            let track = track_end.len();
            let end_tick = parse_track(&bytes[start..end], start, track, &mut events)?;
            track_end.push(end_tick);
        }
        pos = end;
    }

    // Program changes at a tick apply to notes at the same tick in any track.
    events.sort_by_key(|e| {
        let rank = u8::from(!matches!(e.kind, Kind::Program { .. }));
        (e.tick, rank, e.track, e.seq)
    });

    let mut program = [0u8; 16];
    let mut open: std::collections::HashMap<(u8, u8), std::collections::VecDeque<RawNote>> =
        Default::default();
    let mut notes = Vec::new();
    let mut tempos = Vec::new();
    let mut time_signatures = Vec::new();
    for e in &events {
        match e.kind {
            Kind::NoteOn {
                channel,
                pitch,
                velocity,
            } => open
                .entry((channel, pitch))
                .or_default()
                .push_back(RawNote {
                    track: e.track,
                    channel,
                    program: program[channel as usize],
                    pitch,
                    velocity,
                    start: e.tick,
                    end: e.tick,
                }),
            Kind::NoteOff { channel, pitch } => {
                if let Some(mut n) = open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                    n.end = e.tick;
                    notes.push(n);
                }
            }
            Kind::Program {
                channel,
                program: p,
            } => program[channel as usize] = p,
            Kind::Tempo(usec_per_quarter) => tempos.push(TempoChange {
                tick: e.tick,
                usec_per_quarter,
            }),
            Kind::TimeSig {
                numerator,
                denominator,
            } => time_signatures.push(TimeSignature {
                tick: e.tick,
                numerator,
                denominator,
            }),
        }
    }
    for (_, queue) in open {
        for mut n in queue {
            n.end = track_end[n.track].max(n.start);
            notes.push(n);
        }
    }
    notes.sort_by_key(|n| (n.start, n.track, n.pitch, n.end, n.channel));

    Ok(MidiSongRaw {
        format,
        ticks_per_quarter: division,
        notes,
        tempos,
        time_signatures,
        end_tick: track_end.iter().copied().max().unwrap_or(0),
    })
}

/// Appends the track's events; returns its end tick.
fn parse_track(
    data: &[u8],
    base: usize,
    track: usize,
    events: &mut Vec<Event>,
) -> Result<u64, SmfError> {
    let mut c = Cursor {
        bytes: data,
        pos: 0,
    };
    let truncated = |c: &Cursor| SmfError::TruncatedChunk(base + c.pos);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut seq = 0usize;
    while c.pos < data.len() {
        let delta = c.vlq().ok_or_else(|| truncated(&c))?;
        tick += delta as u64;
        let at = c.pos;
        let first = c.byte().ok_or_else(|| truncated(&c))?;
        let mut push = |kind: Kind| {
            events.push(Event {
                tick,
                track,
                seq,
                kind,
            });
            seq += 1;
        };
        match first {
            0xff => {
                running = None;
                let meta = c.byte().ok_or_else(|| truncated(&c))?;
                let len = c.vlq().ok_or_else(|| truncated(&c))? as usize;
                let payload = c.take(len).ok_or_else(|| truncated(&c))?;
                match meta {
                    0x2f => return Ok(tick),
                    0x51 if len == 3 => push(Kind::Tempo(
                        ((payload[0] as u32) << 16)
                            | ((payload[1] as u32) << 8)
                            | payload[2] as u32,
                    )),
                    0x58 if len >= 2 => push(Kind::TimeSig {
                        numerator: payload[0],
                        denominator: 1u32.checked_shl(payload[1] as u32).unwrap_or(0),
                    }),
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = c.vlq().ok_or_else(|| truncated(&c))? as usize;
                c.take(len).ok_or_else(|| truncated(&c))?;
            }
            0xf1..=0xfe => {
                return Err(SmfError::InvalidEvent {
                    track,
                    offset: base + at,
                })
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, c.byte().ok_or_else(|| truncated(&c))?)
                } else {
                    match running {
                        Some(s) => (s, first),
                        None => {
                            return Err(SmfError::InvalidEvent {
                                track,
                                offset: base + at,
                            })
                        }
                    }
                };
                let channel = status & 0x0f;
                let two_data = !matches!(status & 0xf0, 0xc0 | 0xd0);
                let d2 = if two_data {
                    c.byte().ok_or_else(|| truncated(&c))?
                } else {
                    0
                };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(SmfError::InvalidEvent {
                        track,
                        offset: base + at,
                    });
                }
                match status & 0xf0 {
                    0x90 if d2 > 0 => push(Kind::NoteOn {
                        channel,
                        pitch: d1,
                        velocity: d2,
                    }),
                    0x80 | 0x90 => push(Kind::NoteOff { channel, pitch: d1 }),
                    0xc0 => push(Kind::Program {
                        channel,
                        program: d1,
                    }),
                    _ => {}
                }
            }
        }
    }
    Ok(tick)
}

/// Channel and program written for each role.
pub fn role_channel_program(role: TrackRole) -> (u8, u8) {
    match role {
        TrackRole::Bass => (0, 33),
        TrackRole::Drums => (9, 0),
        TrackRole::GuitarPiano => (1, 0),
        TrackRole::Strings => (2, 48),
    }
}

pub const WRITE_VELOCITY: u8 = 100;
pub const WRITE_TEMPO_USEC: u32 = 500_000;

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Writes a format-1 file with one track per role, 4/4 at 120 bpm.
///
/// # Panics
/// If `ticks_per_step` is 0 or the resulting ticks-per-quarter exceeds 0x7fff.
pub fn write_smf(song: &GridSong, ticks_per_step: u32) -> Vec<u8> {
    let steps_per_quarter = (STEPS_PER_MEASURE / 4) as u32;
    let tpq = ticks_per_step
        .checked_mul(steps_per_quarter)
        .filter(|&t| t > 0 && t <= 0x7fff)
        .expect("ticks_per_step must be in 1..=1365");
    let song_end = (song.n_measures() * STEPS_PER_MEASURE) as u64 * ticks_per_step as u64;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(N_TRACKS as u16).to_be_bytes());
    out.extend_from_slice(&(tpq as u16).to_be_bytes());

    for role in TrackRole::ALL {
        let (channel, program) = role_channel_program(role);
        // (tick, 0 = off / 1 = on, pitch)
        let mut timeline: Vec<(u64, u8, u8)> = Vec::new();
        for (i, m) in song.track(role).iter().enumerate() {
            let base = (i * STEPS_PER_MEASURE) as u64;
            for n in m.notes() {
                let on = (base + n.time() as u64) * ticks_per_step as u64;
                let off = on + n.duration() as u64 * ticks_per_step as u64;
                timeline.push((on, 1, n.pitch() as u8));
                timeline.push((off, 0, n.pitch() as u8));
            }
        }
        timeline.sort_unstable();

        let mut body = Vec::new();
        if role == TrackRole::ALL[0] {
            body.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
            body.extend_from_slice(&WRITE_TEMPO_USEC.to_be_bytes()[1..]);
            body.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 4, 2, 24, 8]);
        }
        if channel != 9 {
            body.extend_from_slice(&[0x00, 0xc0 | channel, program]);
        }
        let mut now = 0u64;
        for &(tick, on, pitch) in &timeline {
            push_vlq(&mut body, (tick - now) as u32);
            now = tick;
            if on == 1 {
                body.extend_from_slice(&[0x90 | channel, pitch, WRITE_VELOCITY]);
            } else {
                body.extend_from_slice(&[0x80 | channel, pitch, 0]);
            }
        }
        push_vlq(&mut body, (song_end.max(now) - now) as u32);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);

        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn one_note_format0() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [
            0x00, 0x90, 60, 100, // note on C4
            0x60, 0x80, 60, 0, // one quarter later, off
            0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        b
    }

    #[test]
    fn one_note_file() {
        let raw = parse_smf(&one_note_format0()).unwrap();
        assert_eq!(raw.format, 0);
        assert_eq!(raw.ticks_per_quarter, 96);
        assert_eq!(raw.notes.len(), 1);
        let n = raw.notes[0];
        assert_eq!((n.channel, n.pitch, n.start, n.end), (0, 60, 0, 96));
    }

    #[test]
    fn unclosed_note_ends_at_track_end() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [0x00, 0x90, 64, 80, 0x83, 0x00, 0xff, 0x2f, 0x00];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        let raw = parse_smf(&b).unwrap();
        assert_eq!(raw.notes[0].end, 384);
        assert_eq!(raw.end_tick, 384);
    }

    #[test]
    fn running_status_and_zero_velocity_off() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [
            0x00, 0xc3, 40, // program 40 on channel 3
            0x00, 0x93, 60, 90, 0x00, 64, 90, // running status
            0x18, 60, 0, 0x00, 64, 0, //
            0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        let raw = parse_smf(&b).unwrap();
        assert_eq!(raw.notes.len(), 2);
        assert!(raw
            .notes
            .iter()
            .all(|n| n.end == 24 && n.program == 40 && n.channel == 3));
    }

    #[test]
    fn header_errors() {
        let mut b = one_note_format0();
        b[2] = b'X';
        b[3] = b'X';
        assert!(matches!(parse_smf(&b), Err(SmfError::MalformedHeader(_))));
        let mut b = one_note_format0();
        b[9] = 2;
        assert_eq!(parse_smf(&b), Err(SmfError::UnsupportedFormat(2)));
        let mut b = one_note_format0();
        b[12] = 0xe7;
        assert_eq!(parse_smf(&b), Err(SmfError::UnsupportedDivision));
        let b = one_note_format0();
        assert!(matches!(
            parse_smf(&b[..b.len() - 3]),
            Err(SmfError::TruncatedChunk(_))
        ));
    }

    #[test]
    fn meta_events_are_read() {
        let song = GridSong::empty(1).unwrap();
        let raw = parse_smf(&write_smf(&song, 10)).unwrap();
        assert_eq!(raw.format, 1);
        assert_eq!(raw.ticks_per_quarter, 240);
        assert_eq!(
            raw.tempos,
            vec![TempoChange {
                tick: 0,
                usec_per_quarter: 500_000
            }]
        );
        assert_eq!(raw.time_signatures[0].numerator, 4);
        assert_eq!(raw.time_signatures[0].denominator, 4);
        assert_eq!(raw.end_tick, 960);
        assert!(raw.notes.is_empty());
    }

    #[test]
    fn vlq_encoding() {
        for (v, enc) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x3fff, vec![0xff, 0x7f]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, v);
            assert_eq!(out, enc);
            assert_eq!(
                Cursor {
                    bytes: &enc,
                    pos: 0
                }
                .vlq(),
                Some(v)
            );
        }
    }
}
