//! Standard MIDI File parsing and serialization.
//!
//! Supports SMF formats 0 and 1 with tick-based (non-SMPTE) division.
//! Note-on/note-off pairs are matched FIFO per (channel, pitch), a velocity-0
//! note-on counts as a note-off, and non-note channel messages are kept as
//! opaque byte blobs so untransferred material survives a read/write cycle
//! verbatim.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated chunk: {0}")]
    TruncatedChunk(String),
    #[error("bad variable-length quantity at byte {0}")]
    BadVariableLength(usize),
    #[error("no notes in any track")]
    NoNotes,
}

/// A single note with its timing in ticks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Note {
    /// MIDI pitch, 0..=127.
    pub pitch: u8,
    /// Strike velocity, 1..=127 (velocity 0 is a note-off on the wire).
    pub velocity: u8,
    pub start_tick: u32,
    /// Always >= 1.
    pub duration_ticks: u32,
}

/// A non-note channel message preserved verbatim (CC, pitch bend, program
/// change, aftertouch). `data` holds the full message including status byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub tick: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Track {
    pub name: String,
    /// MIDI channel 0..=15 used when writing this track's notes.
    pub channel: u8,
    /// Sorted by (start_tick, pitch, duration_ticks, velocity).
    pub notes: Vec<Note>,
    /// Opaque channel messages re-emitted verbatim on write.
    pub extras: Vec<RawEvent>,
}

/// In-memory symbolic score: the bridge between SMF bytes and token work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    /// Ticks per quarter note, 1..=32767.
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Track>,
    /// (tick, microseconds per quarter), sorted strictly by tick, entry at 0.
    pub tempo_map: Vec<(u32, u32)>,
    /// (tick, numerator, denominator), sorted strictly by tick, entry at 0.
    pub time_signature_map: Vec<(u32, u8, u8)>,
}

pub const DEFAULT_TEMPO: u32 = 500_000; // 120 BPM
pub const DEFAULT_TIME_SIGNATURE: (u8, u8) = (4, 4);

impl Score {
    /// An empty score with default tempo (120 BPM) and 4/4 time.
    pub fn new(ticks_per_quarter: u16) -> Self {
        Score {
            ticks_per_quarter,
            tracks: Vec::new(),
            tempo_map: vec![(0, DEFAULT_TEMPO)],
            time_signature_map: vec![(0, DEFAULT_TIME_SIGNATURE.0, DEFAULT_TIME_SIGNATURE.1)],
        }
    }

    /// Microseconds per quarter in effect at `tick`.
    pub fn tempo_at(&self, tick: u32) -> u32 {
        let mut us = DEFAULT_TEMPO;
        for &(t, v) in &self.tempo_map {
            if t <= tick {
                us = v;
            } else {
                break;
            }
        }
        us
    }

    /// Last tick covered by any note (end of the piece's sounding content).
    pub fn last_note_end(&self) -> u32 {
        self.tracks
            .iter()
            .flat_map(|t| t.notes.iter())
            .map(|n| n.start_tick.saturating_add(n.duration_ticks))
            .max()
            .unwrap_or(0)
    }
}

/// Bar boundaries derived from a time-signature map. Bars extend indefinitely
/// past the last signature change (the grid is generated on demand).
pub struct BarGrid {
    ticks_per_quarter: u32,
    signatures: Vec<(u32, u8, u8)>,
    /// Cached bar start ticks, always one beyond the last requested bar.
    starts: Vec<u64>,
}

impl BarGrid {
    pub fn new(score: &Score) -> Self {
        let mut signatures = score.time_signature_map.clone();
        if signatures.is_empty() || signatures[0].0 != 0 {
            signatures.insert(0, (0, DEFAULT_TIME_SIGNATURE.0, DEFAULT_TIME_SIGNATURE.1));
        }
        BarGrid {
            ticks_per_quarter: score.ticks_per_quarter as u32,
            signatures,
            starts: vec![0],
        }
    }

    fn bar_len_at(&self, tick: u64) -> u64 {
        let mut sig = (DEFAULT_TIME_SIGNATURE.0, DEFAULT_TIME_SIGNATURE.1);
        for &(t, n, d) in &self.signatures {
            if (t as u64) <= tick {
                sig = (n, d);
            } else {
                break;
            }
        }
        let (num, den) = sig;
        if num == 0 || den == 0 {
            return 4 * self.ticks_per_quarter as u64;
        }
        // num beats of 4/den quarters each; clamp so the grid always advances.
        (num as u64 * 4 * self.ticks_per_quarter as u64 / den as u64).max(1)
    }

    fn extend_to_bar(&mut self, bar: usize) {
        while self.starts.len() <= bar + 1 {
            let last = *self.starts.last().unwrap();
            let mut next = last + self.bar_len_at(last);
            // A signature change strictly inside the bar starts a new bar.
            for &(t, _, _) in &self.signatures {
                let t = t as u64;
                if t > last && t < next {
                    next = t;
                    break;
                }
            }
            self.starts.push(next);
        }
    }

    pub fn bar_start(&mut self, bar: usize) -> u64 {
        self.extend_to_bar(bar);
        self.starts[bar]
    }

    pub fn bar_len(&mut self, bar: usize) -> u64 {
        self.bar_start(bar + 1) - self.bar_start(bar)
    }

    /// Index of the bar containing `tick`.
    pub fn bar_of(&mut self, tick: u64) -> usize {
        let mut bar = 0;
        loop {
            self.extend_to_bar(bar);
            if tick < self.starts[bar + 1] {
                return bar;
            }
            bar += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::TruncatedChunk(format!(
                "{what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, MidiError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, MidiError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, MidiError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self
                .u8("vlq")
                .map_err(|_| MidiError::BadVariableLength(start))?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::BadVariableLength(start))
    }
}

#[derive(Default)]
struct TrackAccumulator {
    name: String,
    channel: Option<u8>,
    notes: Vec<Note>,
    extras: Vec<RawEvent>,
    /// FIFO of open notes per (channel, pitch): (start_tick, velocity).
    open: HashMap<(u8, u8), Vec<(u32, u8)>>,
    has_channel_events: bool,
}

impl TrackAccumulator {
    fn note_on(&mut self, tick: u32, channel: u8, pitch: u8, velocity: u8) {
        self.channel.get_or_insert(channel);
        self.has_channel_events = true;
        self.open
            .entry((channel, pitch))
            .or_default()
            .push((tick, velocity));
    }

    fn note_off(&mut self, tick: u32, channel: u8, pitch: u8) {
        self.channel.get_or_insert(channel);
        self.has_channel_events = true;
        if let Some(queue) = self.open.get_mut(&(channel, pitch)) {
            if !queue.is_empty() {
                let (start, velocity) = queue.remove(0);
                self.notes.push(Note {
                    pitch,
                    velocity,
                    start_tick: start,
                    duration_ticks: tick.saturating_sub(start).max(1),
                });
            }
        }
    }

    fn extra(&mut self, tick: u32, data: Vec<u8>) {
        if let Some(status) = data.first() {
            self.channel.get_or_insert(status & 0x0f);
        }
        self.has_channel_events = true;
        self.extras.push(RawEvent { tick, data });
    }

    fn finish(mut self, end_tick: u32) -> Track {
        // Close any note-ons left open at end of track with duration 1.
        let mut leftovers: Vec<((u8, u8), (u32, u8))> = Vec::new();
        for (&(ch, pitch), queue) in self.open.iter() {
            for &(start, vel) in queue.iter() {
                leftovers.push(((ch, pitch), (start, vel)));
            }
        }
        let _ = end_tick;
        for ((_, pitch), (start, velocity)) in leftovers {
            self.notes.push(Note {
                pitch,
                velocity,
                start_tick: start,
                duration_ticks: 1,
            });
        }
        self.notes.sort_by_key(|n| {
            (n.start_tick, n.pitch, n.duration_ticks, n.velocity)
        });
        Track {
            name: self.name,
            channel: self.channel.unwrap_or(0),
            notes: self.notes,
            extras: self.extras,
        }
    }
}

/// Parse an SMF format-0 or format-1 file into a `Score`.
///
/// In a format-1 file, a first chunk containing no channel events is the
/// conductor track: its tempo and time-signature metas are captured globally
/// and it does not become a `Track`.
pub fn read_smf(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .take(4, "header magic")
        .map_err(|_| MidiError::MalformedHeader("file shorter than 4 bytes".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader(format!(
            "expected MThd, got {:02x?}",
            magic
        )));
    }
    let header_len = cur.u32("header length")?;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {header_len} < 6"
        )));
    }
    let format = cur.u16("format")?;
    let ntrks = cur.u16("track count")?;
    let division = cur.u16("division")?;
    cur.take(header_len as usize - 6, "header padding")?;

    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format!("SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("division is zero".into()));
    }

    let mut tempo_map: Vec<(u32, u32)> = Vec::new();
    let mut time_signature_map: Vec<(u32, u8, u8)> = Vec::new();
    let mut chunks: Vec<(Track, bool)> = Vec::new(); // (track, has_channel_events)

    for _ in 0..ntrks {
        let magic = cur.take(4, "track magic")?;
        let len = cur.u32("track length")? as usize;
        let data = cur.take(len, "track data")?;
        if magic != b"MTrk" {
            continue; // alien chunk: skip per the SMF spec
        }
        let mut tc = Cursor::new(data);
        let mut acc = TrackAccumulator::default();
        let mut tick: u32 = 0;
        let mut running_status: Option<u8> = None;

        while tc.remaining() > 0 {
            tick = tick.saturating_add(tc.vlq()?);
            let first = tc.u8("event status")?;
            let status = if first & 0x80 != 0 {
                if first < 0xf0 {
                    running_status = Some(first);
                }
                first
            } else {
                // Running status: data byte re-using the previous status.
                tc.pos -= 1;
                running_status.ok_or_else(|| {
                    MidiError::TruncatedChunk("data byte with no running status".into())
                })?
            };

            match status {
                0xff => {
                    running_status = None;
                    let meta_type = tc.u8("meta type")?;
                    let meta_len = tc.vlq()? as usize;
                    let payload = tc.take(meta_len, "meta payload")?;
                    match meta_type {
                        0x03 => acc.name = String::from_utf8_lossy(payload).into_owned(),
                        0x51 if meta_len >= 3 => {
                            let us = ((payload[0] as u32) << 16)
                                | ((payload[1] as u32) << 8)
                                | payload[2] as u32;
                            upsert_sorted(&mut tempo_map, tick, us);
                        }
                        0x58 if meta_len >= 2 => {
                            let num = payload[0];
                            let den = 1u8.checked_shl(payload[1] as u32).unwrap_or(4);
                            upsert_sorted_sig(&mut time_signature_map, tick, num, den);
                        }
                        0x2f => break, // end of track
                        _ => {}
                    }
                }
                0xf0 | 0xf7 => {
                    running_status = None;
                    let len = tc.vlq()? as usize;
                    tc.take(len, "sysex payload")?;
                }
                _ => {
                    let kind = status & 0xf0;
                    let channel = status & 0x0f;
                    match kind {
                        0x90 => {
                            let pitch = tc.u8("note-on pitch")? & 0x7f;
                            let velocity = tc.u8("note-on velocity")? & 0x7f;
                            if velocity == 0 {
                                acc.note_off(tick, channel, pitch);
                            } else {
                                acc.note_on(tick, channel, pitch, velocity);
                            }
                        }
                        0x80 => {
                            let pitch = tc.u8("note-off pitch")? & 0x7f;
                            let _vel = tc.u8("note-off velocity")?;
                            acc.note_off(tick, channel, pitch);
                        }
                        0xa0 | 0xb0 | 0xe0 => {
                            let d1 = tc.u8("data byte 1")?;
                            let d2 = tc.u8("data byte 2")?;
                            acc.extra(tick, vec![status, d1, d2]);
                        }
                        0xc0 | 0xd0 => {
                            let d1 = tc.u8("data byte 1")?;
                            acc.extra(tick, vec![status, d1]);
                        }
                        _ => {
                            return Err(MidiError::TruncatedChunk(format!(
                                "unexpected status byte {status:#04x}"
                            )));
                        }
                    }
                }
            }
        }
        let has_events = acc.has_channel_events;
        chunks.push((acc.finish(tick), has_events));
    }

    if tempo_map.first().map(|e| e.0) != Some(0) {
        tempo_map.insert(0, (0, DEFAULT_TEMPO));
    }
    if time_signature_map.first().map(|e| e.0) != Some(0) {
        time_signature_map.insert(0, (0, DEFAULT_TIME_SIGNATURE.0, DEFAULT_TIME_SIGNATURE.1));
    }

    let mut tracks: Vec<Track> = Vec::new();
    for (i, (track, has_events)) in chunks.into_iter().enumerate() {
        let conductor = format == 1 && i == 0 && !has_events;
        if !conductor {
            tracks.push(track);
        }
    }

    Ok(Score {
        ticks_per_quarter: division,
        tracks,
        tempo_map,
        time_signature_map,
    })
}

fn upsert_sorted(map: &mut Vec<(u32, u32)>, tick: u32, value: u32) {
    match map.binary_search_by_key(&tick, |e| e.0) {
        Ok(i) => map[i].1 = value, // same tick: last event wins
        Err(i) => map.insert(i, (tick, value)),
    }
}

fn upsert_sorted_sig(map: &mut Vec<(u32, u8, u8)>, tick: u32, num: u8, den: u8) {
    match map.binary_search_by_key(&tick, |e| e.0) {
        Ok(i) => {
            map[i].1 = num;
            map[i].2 = den;
        }
        Err(i) => map.insert(i, (tick, num, den)),
    }
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    value &= 0x0fff_ffff;
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i > 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

enum TrackEvent<'a> {
    NoteOff { channel: u8, pitch: u8 },
    Extra(&'a [u8]),
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    Tempo(u32),
    TimeSignature(u8, u8),
    TrackName(&'a str),
}

fn write_chunk(events: &mut Vec<(u32, u8, TrackEvent<'_>)>, out: &mut Vec<u8>) {
    events.sort_by_key(|e| (e.0, e.1));
    let mut body: Vec<u8> = Vec::new();
    let mut last_tick = 0u32;
    for (tick, _, ev) in events.iter() {
        push_vlq(&mut body, tick - last_tick);
        last_tick = *tick;
        match ev {
            TrackEvent::TrackName(name) => {
                body.push(0xff);
                body.push(0x03);
                push_vlq(&mut body, name.len() as u32);
                body.extend_from_slice(name.as_bytes());
            }
            TrackEvent::TimeSignature(num, den) => {
                body.extend_from_slice(&[0xff, 0x58, 0x04, *num, den.trailing_zeros() as u8, 24, 8]);
            }
            TrackEvent::Tempo(us) => {
                body.extend_from_slice(&[
                    0xff,
                    0x51,
                    0x03,
                    (us >> 16) as u8,
                    (us >> 8) as u8,
                    *us as u8,
                ]);
            }
            TrackEvent::NoteOff { channel, pitch } => {
                body.extend_from_slice(&[0x80 | channel, *pitch, 0]);
            }
            TrackEvent::NoteOn {
                channel,
                pitch,
                velocity,
            } => {
                body.extend_from_slice(&[0x90 | channel, *pitch, *velocity]);
            }
            TrackEvent::Extra(data) => body.extend_from_slice(data),
        }
    }
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]); // end of track
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

/// Serialize a `Score` as a format-1 SMF.
///
/// A meta-only conductor chunk carries the tempo and time-signature maps;
/// each `Track` becomes its own chunk. `read_smf(write_smf(s)) == s` for any
/// score satisfying the type invariants (same-pitch notes on one track must
/// not overlap, which MIDI cannot represent unambiguously).
pub fn write_smf(score: &Score) -> Vec<u8> {
    let default_maps = score.tempo_map == vec![(0, DEFAULT_TEMPO)]
        && score.time_signature_map
            == vec![(0, DEFAULT_TIME_SIGNATURE.0, DEFAULT_TIME_SIGNATURE.1)];
    let write_conductor = !score.tracks.is_empty() || !default_maps;
    let nchunks = score.tracks.len() as u16 + write_conductor as u16;

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes()); // format 1
    out.extend_from_slice(&nchunks.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());

    if write_conductor {
        let mut events: Vec<(u32, u8, TrackEvent<'_>)> = Vec::new();
        for &(tick, num, den) in &score.time_signature_map {
            events.push((tick, 0, TrackEvent::TimeSignature(num, den)));
        }
        for &(tick, us) in &score.tempo_map {
            events.push((tick, 1, TrackEvent::Tempo(us)));
        }
        write_chunk(&mut events, &mut out);
    }

    for track in &score.tracks {
        let mut events: Vec<(u32, u8, TrackEvent<'_>)> = Vec::new();
        if !track.name.is_empty() {
            events.push((0, 0, TrackEvent::TrackName(&track.name)));
        }
        for extra in &track.extras {
            events.push((extra.tick, 2, TrackEvent::Extra(&extra.data)));
        }
        for note in &track.notes {
            events.push((
                note.start_tick,
                3,
                TrackEvent::NoteOn {
                    channel: track.channel & 0x0f,
                    pitch: note.pitch & 0x7f,
                    velocity: note.velocity.clamp(1, 127),
                },
            ));
            events.push((
                note.start_tick.saturating_add(note.duration_ticks),
                1, // note-offs sort before same-tick note-ons
                TrackEvent::NoteOff {
                    channel: track.channel & 0x0f,
                    pitch: note.pitch & 0x7f,
                },
            ));
        }
        write_chunk(&mut events, &mut out);
    }
    out
}

/// Index of the track with the most notes; ties break to the lowest index.
pub fn select_melody_track(score: &Score) -> Result<usize, MidiError> {
    let mut best: Option<(usize, usize)> = None; // (count, index)
    for (i, track) in score.tracks.iter().enumerate() {
        let count = track.notes.len();
        if count > 0 && best.map(|(c, _)| count > c).unwrap_or(true) {
            best = Some((count, i));
        }
    }
    best.map(|(_, i)| i).ok_or(MidiError::NoNotes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-encoded SMF: format 0, division 480, one track with a single
    /// note-on (pitch 60, vel 100) at tick 0 and note-off at tick 480.
    fn single_note_smf() -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: Vec<u8> = vec![
            0x00, 0x90, 60, 100, // tick 0: note on
            0x83, 0x60, 0x80, 60, 0x40, // tick 480 (VLQ 83 60): note off
            0x00, 0xff, 0x2f, 0x00, // end of track
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(&track);
        v
    }

    #[test]
    fn reads_single_note_file() {
        let score = read_smf(&single_note_smf()).unwrap();
        assert_eq!(score.ticks_per_quarter, 480);
        assert_eq!(score.tracks.len(), 1);
        assert_eq!(
            score.tracks[0].notes,
            vec![Note {
                pitch: 60,
                velocity: 100,
                start_tick: 0,
                duration_ticks: 480
            }]
        );
        assert_eq!(score.tempo_map, vec![(0, DEFAULT_TEMPO)]);
    }

    #[test]
    fn empty_track_yields_empty_track() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&96u16.to_be_bytes());
        let track: Vec<u8> = vec![0x00, 0xff, 0x2f, 0x00];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(&track);
        let score = read_smf(&v).unwrap();
        assert_eq!(score.tracks.len(), 1);
        assert!(score.tracks[0].notes.is_empty());
    }

    #[test]
    fn velocity_zero_note_on_closes_note() {
        // Running status: note-on at tick 0, then vel-0 note-on at tick 240.
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: Vec<u8> = vec![
            0x00, 0x90, 64, 90, // note on via explicit status
            0x81, 0x70, 64, 0, // tick 240 via running status, velocity 0
            0x00, 0xff, 0x2f, 0x00,
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(&track);
        let score = read_smf(&v).unwrap();
        assert_eq!(
            score.tracks[0].notes,
            vec![Note {
                pitch: 64,
                velocity: 90,
                start_tick: 0,
                duration_ticks: 240
            }]
        );
    }

    #[test]
    fn rejects_format_2_and_smpte_and_bad_magic() {
        let mut f2 = single_note_smf();
        f2[9] = 2;
        assert!(matches!(read_smf(&f2), Err(MidiError::UnsupportedFormat(_))));

        let mut smpte = single_note_smf();
        smpte[12] = 0xe8; // negative division
        assert!(matches!(
            read_smf(&smpte),
            Err(MidiError::UnsupportedFormat(_))
        ));

        let mut bad = single_note_smf();
        bad[0] = b'X';
        assert!(matches!(read_smf(&bad), Err(MidiError::MalformedHeader(_))));
    }

    #[test]
    fn unmatched_note_on_closed_with_duration_one() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: Vec<u8> = vec![0x00, 0x90, 72, 80, 0x00, 0xff, 0x2f, 0x00];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(&track);
        let score = read_smf(&v).unwrap();
        assert_eq!(score.tracks[0].notes[0].duration_ticks, 1);
    }

    #[test]
    fn empty_score_writes_zero_chunks() {
        let bytes = write_smf(&Score::new(480));
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(u16::from_be_bytes([bytes[10], bytes[11]]), 0);
        let back = read_smf(&bytes).unwrap();
        assert_eq!(back, Score::new(480));
    }

    #[test]
    fn tempo_changes_round_trip_through_conductor() {
        let mut score = Score::new(480);
        score.tempo_map = vec![(0, 500_000), (960, 400_000)];
        score.tracks.push(Track {
            name: "melody".into(),
            channel: 0,
            notes: vec![Note {
                pitch: 60,
                velocity: 80,
                start_tick: 0,
                duration_ticks: 480,
            }],
            extras: vec![],
        });
        let bytes = write_smf(&score);
        // Conductor chunk holds both set-tempo metas in tick order.
        let conductor_start = 14;
        assert_eq!(&bytes[conductor_start..conductor_start + 4], b"MTrk");
        let back = read_smf(&bytes).unwrap();
        assert_eq!(back, score);
    }

    #[test]
    fn extras_round_trip_verbatim() {
        let mut score = Score::new(480);
        score.tracks.push(Track {
            name: String::new(),
            channel: 3,
            notes: vec![Note {
                pitch: 55,
                velocity: 70,
                start_tick: 10,
                duration_ticks: 20,
            }],
            extras: vec![
                RawEvent {
                    tick: 0,
                    data: vec![0xc3, 5],
                },
                RawEvent {
                    tick: 15,
                    data: vec![0xb3, 7, 100],
                },
            ],
        });
        let back = read_smf(&write_smf(&score)).unwrap();
        assert_eq!(back, score);
    }

    #[test]
    fn select_melody_track_prefers_most_notes_lowest_index() {
        let mut score = Score::new(480);
        for count in [3usize, 10, 10] {
            let notes = (0..count)
                .map(|i| Note {
                    pitch: 60,
                    velocity: 64,
                    start_tick: i as u32 * 480,
                    duration_ticks: 240,
                })
                .collect();
            score.tracks.push(Track {
                name: String::new(),
                channel: 0,
                notes,
                extras: vec![],
            });
        }
        assert_eq!(select_melody_track(&score).unwrap(), 1);

        let single = Score {
            tracks: score.tracks[..1].to_vec(),
            ..Score::new(480)
        };
        assert_eq!(select_melody_track(&single).unwrap(), 0);

        let mut empty = Score::new(480);
        empty.tracks.push(Track::default());
        empty.tracks.push(Track::default());
        assert_eq!(select_melody_track(&empty), Err(MidiError::NoNotes));
    }

    #[test]
    fn select_melody_track_is_permutation_covariant() {
        let mut score = Score::new(480);
        for count in [2usize, 7, 4] {
            let notes = (0..count)
                .map(|i| Note {
                    pitch: 50,
                    velocity: 64,
                    start_tick: i as u32 * 100,
                    duration_ticks: 50,
                })
                .collect();
            score.tracks.push(Track {
                name: String::new(),
                channel: 0,
                notes,
                extras: vec![],
            });
        }
        assert_eq!(select_melody_track(&score).unwrap(), 1);
        score.tracks.swap(0, 1);
        assert_eq!(select_melody_track(&score).unwrap(), 0);
    }

    #[test]
    fn bar_grid_follows_time_signature_changes() {
        let mut score = Score::new(480);
        score.time_signature_map = vec![(0, 4, 4), (1920, 3, 4)];
        let mut grid = BarGrid::new(&score);
        assert_eq!(grid.bar_start(0), 0);
        assert_eq!(grid.bar_start(1), 1920);
        assert_eq!(grid.bar_start(2), 1920 + 1440);
        assert_eq!(grid.bar_of(1919), 0);
        assert_eq!(grid.bar_of(1920), 1);
    }

    pub(crate) fn arb_score() -> impl Strategy<Value = Score> {
        let note = (0u8..128, 1u8..128, 0u32..3840, 1u32..960).prop_map(
            |(pitch, velocity, start, dur)| Note {
                pitch,
                velocity,
                start_tick: start,
                duration_ticks: dur,
            },
        );
        let track = (prop::collection::vec(note, 0..12), 0u8..16).prop_map(|(mut notes, ch)| {
            // Same-pitch overlap on one channel is not representable in MIDI;
            // drop later conflicting notes.
            notes.sort_by_key(|n| (n.start_tick, n.pitch, n.duration_ticks, n.velocity));
            let mut kept: Vec<Note> = Vec::new();
            for n in notes {
                let overlaps = kept.iter().any(|k| {
                    k.pitch == n.pitch
                        && n.start_tick < k.start_tick + k.duration_ticks
                        && k.start_tick < n.start_tick + n.duration_ticks
                });
                if !overlaps {
                    kept.push(n);
                }
            }
            Track {
                name: String::new(),
                // channel is unobservable for a track with no events
                channel: if kept.is_empty() { 0 } else { ch },
                notes: kept,
                extras: vec![],
            }
        });
        (
            prop::collection::vec(track, 1..4),
            prop::collection::vec((1u32..8000, 200_000u32..1_500_000), 0..3),
        )
            .prop_map(|(tracks, tempi)| {
                let mut score = Score::new(480);
                score.tracks = tracks;
                for (tick, us) in tempi {
                    upsert_sorted(&mut score.tempo_map, tick, us);
                }
                score
            })
    }

    proptest! {
        #[test]
        fn smf_round_trip(score in arb_score()) {
            let bytes = write_smf(&score);
            let back = read_smf(&bytes).unwrap();
            prop_assert_eq!(back, score);
        }

        #[test]
        fn parsing_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
            let _ = read_smf(&bytes);
        }

        #[test]
        fn parsing_mutated_valid_files_never_panics(
            score in arb_score(),
            flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)
        ) {
            let mut bytes = write_smf(&score);
            for (idx, val) in flips {
                let i = idx.index(bytes.len());
                bytes[i] ^= val;
            }
            let _ = read_smf(&bytes);
        }
    }
}
