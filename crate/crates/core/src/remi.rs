//! REMI event codec: converts a `Score` track to a token sequence and back.
//!
//! Eight event families share one fixed vocabulary of 364 ids. Each note is
//! the four-token group Position, NoteVelocity, NoteOn, NoteDuration; tempo
//! is the group Position, TempoClass, TempoValue emitted at every beat where
//! the effective BPM changes; chords are detected per beat and emitted as
//! Position, Chord. Bars delimit groups.
//!
//! Quantization grid: 16 positions per bar, 32nd-note duration unit with
//! classes covering 1..=64 units, 32 equal velocity bins, BPM clamped to
//! 30..=209 and split into three 60-BPM bands.

use crate::midi::{BarGrid, Score};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

pub const CODEC_VERSION: &str = "remi-v1";
/// Discrete onset locations per bar.
pub const POSITIONS_PER_BAR: u32 = 16;
pub const VOCAB_SIZE: usize = 364;

pub const BPM_MIN: i64 = 30;
pub const BPM_MAX: i64 = 209;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("track {0} has no notes")]
    EmptyTrack(usize),
    #[error("track index {0} out of range")]
    TrackIndex(usize),
    #[error("grammar violation at token {index}: {detail}")]
    GrammarViolation { index: usize, detail: String },
    #[error("token id {0} out of vocabulary")]
    OutOfVocabulary(u32),
    #[error("class {class} out of range for {family:?}")]
    ClassOutOfRange { family: EventFamily, class: u32 },
    #[error("token text line {line}: {detail}")]
    TextFormat { line: usize, detail: String },
}

/// The eight event families, in vocabulary block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventFamily {
    Bar,
    Position,
    Chord,
    TempoClass,
    TempoValue,
    NoteVelocity,
    NoteOn,
    NoteDuration,
}

pub const FAMILIES: [EventFamily; 8] = [
    EventFamily::Bar,
    EventFamily::Position,
    EventFamily::Chord,
    EventFamily::TempoClass,
    EventFamily::TempoValue,
    EventFamily::NoteVelocity,
    EventFamily::NoteOn,
    EventFamily::NoteDuration,
];

impl EventFamily {
    pub fn class_count(self) -> u32 {
        match self {
            EventFamily::Bar => 1,
            EventFamily::Position => POSITIONS_PER_BAR,
            EventFamily::Chord => 60,
            EventFamily::TempoClass => 3,
            EventFamily::TempoValue => 60,
            EventFamily::NoteVelocity => 32,
            EventFamily::NoteOn => 128,
            EventFamily::NoteDuration => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventFamily::Bar => "Bar",
            EventFamily::Position => "Position",
            EventFamily::Chord => "Chord",
            EventFamily::TempoClass => "TempoClass",
            EventFamily::TempoValue => "TempoValue",
            EventFamily::NoteVelocity => "NoteVelocity",
            EventFamily::NoteOn => "NoteOn",
            EventFamily::NoteDuration => "NoteDuration",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        FAMILIES.iter().copied().find(|f| f.name() == name)
    }

    /// Kebab-case name used in configs and CLI flags.
    pub fn kebab_name(self) -> &'static str {
        match self {
            EventFamily::Bar => "bar",
            EventFamily::Position => "position",
            EventFamily::Chord => "chord",
            EventFamily::TempoClass => "tempo-class",
            EventFamily::TempoValue => "tempo-value",
            EventFamily::NoteVelocity => "note-velocity",
            EventFamily::NoteOn => "note-on",
            EventFamily::NoteDuration => "note-duration",
        }
    }

    pub fn from_kebab(name: &str) -> Option<Self> {
        FAMILIES.iter().copied().find(|f| f.kebab_name() == name)
    }

    fn block_start(self) -> u32 {
        let mut start = 0;
        for f in FAMILIES {
            if f == self {
                return start;
            }
            start += f.class_count();
        }
        unreachable!()
    }
}

impl fmt::Display for EventFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A (family, class) pair; the unit everything downstream works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventToken {
    pub family: EventFamily,
    pub class: u32,
}

impl EventToken {
    pub fn new(family: EventFamily, class: u32) -> Self {
        EventToken { family, class }
    }
}

/// The fixed bijection between token ids 0..364 and (family, class) pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id_of(&self, token: EventToken) -> Result<u32, CodecError> {
        if token.class >= token.family.class_count() {
            return Err(CodecError::ClassOutOfRange {
                family: token.family,
                class: token.class,
            });
        }
        Ok(token.family.block_start() + token.class)
    }

    pub fn token_of(&self, id: u32) -> Result<EventToken, CodecError> {
        let mut start = 0;
        for f in FAMILIES {
            let count = f.class_count();
            if id < start + count {
                return Ok(EventToken::new(f, id - start));
            }
            start += count;
        }
        Err(CodecError::OutOfVocabulary(id))
    }

    pub fn family_of(&self, id: u32) -> Result<EventFamily, CodecError> {
        Ok(self.token_of(id)?.family)
    }

    /// Contiguous id range of a family's block.
    pub fn classes_of(&self, family: EventFamily) -> std::ops::Range<u32> {
        let start = family.block_start();
        start..start + family.class_count()
    }

    /// Stable hash of the vocabulary layout; embedded in checkpoints so a
    /// model trained under one codec cannot silently drive another.
    pub fn hash(&self) -> String {
        let mut desc = String::from(CODEC_VERSION);
        for f in FAMILIES {
            desc.push_str(&format!(";{}:{}", f.name(), f.class_count()));
        }
        let digest = Sha256::digest(desc.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary
}

/// An ordered run of token ids over the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = EventToken> + '_ {
        let v = Vocabulary;
        self.ids.iter().map(move |&id| v.token_of(id).expect("id in vocabulary"))
    }

    /// Class values of all tokens in the selected families, in order.
    pub fn selected_classes(&self, selected: &BTreeSet<EventFamily>) -> Vec<i64> {
        self.tokens()
            .filter(|t| selected.contains(&t.family))
            .map(|t| t.class as i64)
            .collect()
    }

    /// Indices of tokens whose family is in the selected set.
    pub fn selected_slots(&self, selected: &BTreeSet<EventFamily>) -> Vec<usize> {
        self.tokens()
            .enumerate()
            .filter(|(_, t)| selected.contains(&t.family))
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Duration unit in ticks: a 32nd note.
fn duration_unit(ticks_per_quarter: u16) -> f64 {
    ticks_per_quarter as f64 / 8.0
}

fn duration_class_to_ticks(class: u32, ticks_per_quarter: u16) -> u64 {
    ((class as f64 + 1.0) * duration_unit(ticks_per_quarter)).round() as u64
}

fn velocity_to_bin(velocity: u8) -> u32 {
    (velocity as u32 / 4).min(31)
}

fn bin_to_velocity(bin: u32) -> u8 {
    (bin * 4 + 2) as u8
}

fn bpm_of_us(us_per_quarter: u32) -> i64 {
    let bpm = (60_000_000.0 / us_per_quarter.max(1) as f64).round() as i64;
    bpm.clamp(BPM_MIN, BPM_MAX)
}

fn bpm_to_tempo_classes(bpm: i64) -> (u32, u32) {
    let offset = (bpm - BPM_MIN) as u32;
    ((offset / 60).min(2), offset % 60)
}

fn tempo_classes_to_us(class: u32, value: u32) -> u32 {
    let bpm = BPM_MIN as f64 + class as f64 * 60.0 + value as f64;
    (60_000_000.0 / bpm).round() as u32
}

#[derive(Debug, Clone, Copy)]
struct QuantNote {
    bar: usize,
    pos: u32,
    pitch: u8,
    vel_bin: u32,
    dur_class: u32,
    tick: u64,
    dur_ticks: u64,
}

fn quantize_notes(score: &Score, track: usize, grid: &mut BarGrid) -> Vec<QuantNote> {
    let mut out = Vec::with_capacity(score.tracks[track].notes.len());
    for note in &score.tracks[track].notes {
        let mut bar = grid.bar_of(note.start_tick as u64);
        let mut step = grid.bar_len(bar) as f64 / POSITIONS_PER_BAR as f64;
        let mut pos =
            ((note.start_tick as u64 - grid.bar_start(bar)) as f64 / step).round() as u32;
        if pos >= POSITIONS_PER_BAR {
            bar += 1;
            pos = 0;
            step = grid.bar_len(bar) as f64 / POSITIONS_PER_BAR as f64;
        }
        let tick = grid.bar_start(bar) + (pos as f64 * step).round() as u64;
        let unit = duration_unit(score.ticks_per_quarter);
        let dur_class = ((note.duration_ticks as f64 / unit).round() as i64).clamp(1, 64) as u32 - 1;
        out.push(QuantNote {
            bar,
            pos,
            pitch: note.pitch,
            vel_bin: velocity_to_bin(note.velocity),
            dur_class,
            tick,
            dur_ticks: duration_class_to_ticks(dur_class, score.ticks_per_quarter),
        });
    }
    out.sort_by_key(|n| (n.bar, n.pos, n.pitch, n.dur_class, n.vel_bin));
    out
}

// ---------------------------------------------------------------------------
// Chord detection
// ---------------------------------------------------------------------------

const CHORD_QUALITIES: [(&str, &[i64]); 5] = [
    ("maj", &[0, 4, 7]),
    ("min", &[0, 3, 7]),
    ("dim", &[0, 3, 6]),
    ("aug", &[0, 4, 8]),
    ("dom7", &[0, 4, 7, 10]),
];

/// Best template match over sounding pitch classes; `None` unless at least
/// three template tones sound. Ties break to lowest root, then quality order.
fn detect_chord(sounding: &BTreeSet<u8>) -> Option<u32> {
    let mut best: Option<(usize, u32)> = None; // (tone count, class)
    for root in 0..12u32 {
        for (quality, (_, template)) in CHORD_QUALITIES.iter().enumerate() {
            let count = template
                .iter()
                .filter(|&&t| sounding.contains(&(((root as i64 + t) % 12) as u8)))
                .count();
            if count >= 3 {
                let class = root * 5 + quality as u32;
                if best.map(|(c, _)| count > c).unwrap_or(true) {
                    best = Some((count, class));
                }
            }
        }
    }
    best.map(|(_, class)| class)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKind {
    Chord(u32),
    Tempo(u32, u32),
    Note { pitch: u8, vel_bin: u32, dur_class: u32 },
}

/// Encode one track of a score as a REMI token sequence.
pub fn encode(score: &Score, track: usize) -> Result<TokenSequence, CodecError> {
    if track >= score.tracks.len() {
        return Err(CodecError::TrackIndex(track));
    }
    if score.tracks[track].notes.is_empty() {
        return Err(CodecError::EmptyTrack(track));
    }
    let mut grid = BarGrid::new(score);
    let notes = quantize_notes(score, track, &mut grid);
    let bars = notes.iter().map(|n| n.bar).max().unwrap() + 1;

    // (bar, pos, order-within-position, group)
    let mut groups: Vec<(usize, u32, u8, GroupKind)> = Vec::new();

    for n in &notes {
        groups.push((
            n.bar,
            n.pos,
            2,
            GroupKind::Note {
                pitch: n.pitch,
                vel_bin: n.vel_bin,
                dur_class: n.dur_class,
            },
        ));
    }

    // Tempo at every beat where the effective BPM changes; chords per beat.
    let tpq = score.ticks_per_quarter as u64;
    let mut last_bpm: Option<i64> = None;
    for bar in 0..bars {
        let bar_start = grid.bar_start(bar);
        let bar_len = grid.bar_len(bar);
        let step = bar_len as f64 / POSITIONS_PER_BAR as f64;
        let mut beat = bar_start;
        while beat < bar_start + bar_len {
            let pos = ((beat - bar_start) as f64 / step).round() as u32;
            let bpm = bpm_of_us(score.tempo_at(beat.min(u32::MAX as u64) as u32));
            if last_bpm != Some(bpm) {
                let (tc, tv) = bpm_to_tempo_classes(bpm);
                groups.push((bar, pos.min(POSITIONS_PER_BAR - 1), 1, GroupKind::Tempo(tc, tv)));
                last_bpm = Some(bpm);
            }
            let beat_end = beat + tpq;
            let sounding: BTreeSet<u8> = notes
                .iter()
                .filter(|n| n.tick < beat_end && n.tick + n.dur_ticks > beat)
                .map(|n| n.pitch % 12)
                .collect();
            if let Some(class) = detect_chord(&sounding) {
                groups.push((bar, pos.min(POSITIONS_PER_BAR - 1), 0, GroupKind::Chord(class)));
            }
            beat += tpq;
        }
    }

    groups.sort_by(|a, b| (a.0, a.1, a.2, &a.3).cmp(&(b.0, b.1, b.2, &b.3)));

    let v = Vocabulary;
    let mut ids: Vec<u32> = Vec::new();
    let mut current_bar = 0usize;
    ids.push(v.id_of(EventToken::new(EventFamily::Bar, 0))?);
    for (bar, pos, _, group) in groups {
        while current_bar < bar {
            current_bar += 1;
            ids.push(v.id_of(EventToken::new(EventFamily::Bar, 0))?);
        }
        ids.push(v.id_of(EventToken::new(EventFamily::Position, pos))?);
        match group {
            GroupKind::Chord(class) => {
                ids.push(v.id_of(EventToken::new(EventFamily::Chord, class))?);
            }
            GroupKind::Tempo(tc, tv) => {
                ids.push(v.id_of(EventToken::new(EventFamily::TempoClass, tc))?);
                ids.push(v.id_of(EventToken::new(EventFamily::TempoValue, tv))?);
            }
            GroupKind::Note {
                pitch,
                vel_bin,
                dur_class,
            } => {
                ids.push(v.id_of(EventToken::new(EventFamily::NoteVelocity, vel_bin))?);
                ids.push(v.id_of(EventToken::new(EventFamily::NoteOn, pitch as u32))?);
                ids.push(v.id_of(EventToken::new(EventFamily::NoteDuration, dur_class))?);
            }
        }
    }
    Ok(TokenSequence::new(ids))
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    GroupStart,
    AfterPosition,
    AfterTempoClass,
    AfterNoteVelocity,
    AfterNoteOn,
}

/// Check the family-adjacency grammar; `Ok` iff the sequence decodes.
pub fn check_grammar(seq: &TokenSequence) -> Result<(), CodecError> {
    let v = Vocabulary;
    let mut expect = Expect::GroupStart;
    let mut seen_bar = false;
    for (i, &id) in seq.ids.iter().enumerate() {
        let family = v.family_of(id)?;
        let fail = |detail: &str| CodecError::GrammarViolation {
            index: i,
            detail: detail.to_string(),
        };
        expect = match (expect, family) {
            (Expect::GroupStart, EventFamily::Bar) => {
                seen_bar = true;
                Expect::GroupStart
            }
            (Expect::GroupStart, EventFamily::Position) => {
                if !seen_bar {
                    return Err(fail("Position before any Bar"));
                }
                Expect::AfterPosition
            }
            (Expect::GroupStart, f) => {
                return Err(fail(&format!("{f} may not start a group")));
            }
            (Expect::AfterPosition, EventFamily::Chord) => Expect::GroupStart,
            (Expect::AfterPosition, EventFamily::TempoClass) => Expect::AfterTempoClass,
            (Expect::AfterPosition, EventFamily::NoteVelocity) => Expect::AfterNoteVelocity,
            (Expect::AfterPosition, f) => {
                return Err(fail(&format!("{f} may not follow Position")));
            }
            (Expect::AfterTempoClass, EventFamily::TempoValue) => Expect::GroupStart,
            (Expect::AfterTempoClass, f) => {
                return Err(fail(&format!("expected TempoValue after TempoClass, got {f}")));
            }
            (Expect::AfterNoteVelocity, EventFamily::NoteOn) => Expect::AfterNoteOn,
            (Expect::AfterNoteVelocity, f) => {
                return Err(fail(&format!("expected NoteOn after NoteVelocity, got {f}")));
            }
            (Expect::AfterNoteOn, EventFamily::NoteDuration) => Expect::GroupStart,
            (Expect::AfterNoteOn, f) => {
                return Err(fail(&format!("expected NoteDuration after NoteOn, got {f}")));
            }
        };
    }
    if expect != Expect::GroupStart {
        return Err(CodecError::GrammarViolation {
            index: seq.ids.len(),
            detail: "sequence ends mid-group".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Rebuild notes and tempi on `track` of a copy of `template`; every other
/// track is carried over verbatim.
pub fn decode(seq: &TokenSequence, template: &Score, track: usize) -> Result<Score, CodecError> {
    if track >= template.tracks.len() {
        return Err(CodecError::TrackIndex(track));
    }
    check_grammar(seq)?;

    let v = Vocabulary;
    let mut grid = BarGrid::new(template);
    let tpq = template.ticks_per_quarter;

    let mut notes: Vec<crate::midi::Note> = Vec::new();
    let mut tempo_map: Vec<(u32, u32)> = Vec::new();

    let mut bar: Option<usize> = None;
    let mut pos: u32 = 0;
    let mut pending_vel: u32 = 0;
    let mut pending_pitch: u32 = 0;
    let mut pending_tempo_class: u32 = 0;

    for &id in &seq.ids {
        let token = v.token_of(id)?;
        match token.family {
            EventFamily::Bar => {
                bar = Some(bar.map(|b| b + 1).unwrap_or(0));
            }
            EventFamily::Position => pos = token.class,
            EventFamily::Chord => {} // re-derivable from notes
            EventFamily::TempoClass => pending_tempo_class = token.class,
            EventFamily::TempoValue => {
                let b = bar.unwrap_or(0);
                let step = grid.bar_len(b) as f64 / POSITIONS_PER_BAR as f64;
                let tick = grid.bar_start(b) + (pos as f64 * step).round() as u64;
                let us = tempo_classes_to_us(pending_tempo_class, token.class);
                match tempo_map.binary_search_by_key(&(tick as u32), |e| e.0) {
                    Ok(i) => tempo_map[i].1 = us,
                    Err(i) => tempo_map.insert(i, (tick as u32, us)),
                }
            }
            EventFamily::NoteVelocity => pending_vel = token.class,
            EventFamily::NoteOn => pending_pitch = token.class,
            EventFamily::NoteDuration => {
                let b = bar.unwrap_or(0);
                let step = grid.bar_len(b) as f64 / POSITIONS_PER_BAR as f64;
                let tick = grid.bar_start(b) + (pos as f64 * step).round() as u64;
                notes.push(crate::midi::Note {
                    pitch: pending_pitch as u8,
                    velocity: bin_to_velocity(pending_vel),
                    start_tick: tick as u32,
                    duration_ticks: duration_class_to_ticks(token.class, tpq).max(1) as u32,
                });
            }
        }
    }

    if tempo_map.first().map(|e| e.0) != Some(0) {
        tempo_map.insert(0, (0, template.tempo_at(0)));
    }

    notes.sort_by_key(|n| (n.start_tick, n.pitch, n.duration_ticks, n.velocity));
    let mut out = template.clone();
    out.tracks[track].notes = notes;
    out.tempo_map = tempo_map;
    Ok(out)
}

/// Consecutive non-overlapping windows of exactly `length` tokens; a final
/// partial window is dropped.
pub fn segment(seq: &TokenSequence, length: usize) -> Vec<TokenSequence> {
    assert!(length >= 8, "segment length must be at least 8");
    seq.ids
        .chunks_exact(length)
        .map(|w| TokenSequence::new(w.to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Token text format
// ---------------------------------------------------------------------------

/// Serialize as line-oriented text: a header carrying the grid resolution,
/// vocabulary size, and codec version, then one `Family:class` per line.
pub fn to_text(seq: &TokenSequence) -> String {
    let v = Vocabulary;
    let mut out = format!("{CODEC_VERSION} q={POSITIONS_PER_BAR} C={VOCAB_SIZE}\n");
    for &id in &seq.ids {
        let t = v.token_of(id).expect("id in vocabulary");
        out.push_str(&format!("{}:{}\n", t.family.name(), t.class));
    }
    out
}

pub fn from_text(text: &str) -> Result<TokenSequence, CodecError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CodecError::TextFormat {
        line: 1,
        detail: "empty input".into(),
    })?;
    let expected = format!("{CODEC_VERSION} q={POSITIONS_PER_BAR} C={VOCAB_SIZE}");
    if header.trim() != expected {
        return Err(CodecError::TextFormat {
            line: 1,
            detail: format!("bad header; expected \"{expected}\""),
        });
    }
    let v = Vocabulary;
    let mut ids = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, class) = line.split_once(':').ok_or_else(|| CodecError::TextFormat {
            line: i + 1,
            detail: "expected Family:class".into(),
        })?;
        let family = EventFamily::from_name(name).ok_or_else(|| CodecError::TextFormat {
            line: i + 1,
            detail: format!("unknown family {name:?}"),
        })?;
        let class: u32 = class.parse().map_err(|_| CodecError::TextFormat {
            line: i + 1,
            detail: format!("bad class {class:?}"),
        })?;
        ids.push(v.id_of(EventToken::new(family, class)).map_err(|e| {
            CodecError::TextFormat {
                line: i + 1,
                detail: e.to_string(),
            }
        })?);
    }
    Ok(TokenSequence::new(ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{Note, Track};
    use proptest::prelude::*;

    fn score_with_notes(notes: Vec<Note>) -> Score {
        let mut s = Score::new(480);
        s.tracks.push(Track {
            name: String::new(),
            channel: 0,
            notes,
            extras: vec![],
        });
        s
    }

    fn ids(tokens: &[(EventFamily, u32)]) -> TokenSequence {
        let v = Vocabulary;
        TokenSequence::new(
            tokens
                .iter()
                .map(|&(f, c)| v.id_of(EventToken::new(f, c)).unwrap())
                .collect(),
        )
    }

    #[test]
    fn vocabulary_blocks_are_contiguous_and_total_364() {
        let v = Vocabulary;
        assert_eq!(v.size(), 364);
        assert_eq!(v.classes_of(EventFamily::Bar), 0..1);
        assert_eq!(v.classes_of(EventFamily::Position), 1..17);
        assert_eq!(v.classes_of(EventFamily::Chord), 17..77);
        assert_eq!(v.classes_of(EventFamily::TempoClass), 77..80);
        assert_eq!(v.classes_of(EventFamily::TempoValue), 80..140);
        assert_eq!(v.classes_of(EventFamily::NoteVelocity), 140..172);
        assert_eq!(v.classes_of(EventFamily::NoteOn), 172..300);
        assert_eq!(v.classes_of(EventFamily::NoteDuration), 300..364);
        assert_eq!(v.family_of(0).unwrap(), EventFamily::Bar);
        assert_eq!(v.token_of(172).unwrap(), EventToken::new(EventFamily::NoteOn, 0));
        assert!(matches!(v.family_of(364), Err(CodecError::OutOfVocabulary(364))));
    }

    #[test]
    fn vocabulary_is_bijective() {
        let v = Vocabulary;
        for id in 0..VOCAB_SIZE as u32 {
            let t = v.token_of(id).unwrap();
            assert_eq!(v.id_of(t).unwrap(), id);
        }
    }

    #[test]
    fn encodes_single_quarter_note_at_120_bpm() {
        // Pitch 60, velocity 64, bar 1 beat 1, one quarter, constant 120 BPM.
        let s = score_with_notes(vec![Note {
            pitch: 60,
            velocity: 64,
            start_tick: 0,
            duration_ticks: 480,
        }]);
        let seq = encode(&s, 0).unwrap();
        let expected = ids(&[
            (EventFamily::Bar, 0),
            (EventFamily::Position, 0),
            (EventFamily::TempoClass, 1),
            (EventFamily::TempoValue, 30),
            (EventFamily::Position, 0),
            (EventFamily::NoteVelocity, 16),
            (EventFamily::NoteOn, 60),
            (EventFamily::NoteDuration, 7),
        ]);
        assert_eq!(seq, expected);
    }

    #[test]
    fn empty_track_is_an_error() {
        let s = score_with_notes(vec![]);
        assert_eq!(encode(&s, 0), Err(CodecError::EmptyTrack(0)));
    }

    #[test]
    fn simultaneous_notes_emit_lowest_pitch_first() {
        let s = score_with_notes(vec![
            Note {
                pitch: 64,
                velocity: 64,
                start_tick: 0,
                duration_ticks: 480,
            },
            Note {
                pitch: 60,
                velocity: 64,
                start_tick: 0,
                duration_ticks: 480,
            },
        ]);
        let seq = encode(&s, 0).unwrap();
        let v = Vocabulary;
        let pitches: Vec<u32> = seq
            .tokens()
            .filter(|t| t.family == EventFamily::NoteOn)
            .map(|t| t.class)
            .collect();
        assert_eq!(pitches, vec![60, 64]);
        assert!(check_grammar(&seq).is_ok());
        let _ = v;
    }

    #[test]
    fn decode_reconstructs_bin_centers() {
        let seq = ids(&[
            (EventFamily::Bar, 0),
            (EventFamily::Position, 0),
            (EventFamily::TempoClass, 1),
            (EventFamily::TempoValue, 30),
            (EventFamily::Position, 0),
            (EventFamily::NoteVelocity, 16),
            (EventFamily::NoteOn, 60),
            (EventFamily::NoteDuration, 7),
        ]);
        let template = score_with_notes(vec![]);
        let out = decode(&seq, &template, 0).unwrap();
        assert_eq!(
            out.tracks[0].notes,
            vec![Note {
                pitch: 60,
                velocity: 66,
                start_tick: 0,
                duration_ticks: 480
            }]
        );
        assert_eq!(out.tempo_map, vec![(0, 500_000)]);
    }

    #[test]
    fn decode_lone_bar_gives_empty_track() {
        let seq = ids(&[(EventFamily::Bar, 0)]);
        let template = score_with_notes(vec![Note {
            pitch: 70,
            velocity: 70,
            start_tick: 0,
            duration_ticks: 100,
        }]);
        let out = decode(&seq, &template, 0).unwrap();
        assert!(out.tracks[0].notes.is_empty());
    }

    #[test]
    fn note_on_without_velocity_is_grammar_violation() {
        let seq = ids(&[
            (EventFamily::Bar, 0),
            (EventFamily::Position, 0),
            (EventFamily::NoteOn, 60),
        ]);
        let template = score_with_notes(vec![]);
        match decode(&seq, &template, 0) {
            Err(CodecError::GrammarViolation { index: 2, .. }) => {}
            other => panic!("expected grammar violation at token 2, got {other:?}"),
        }
    }

    #[test]
    fn segment_drops_partial_windows() {
        let seq = TokenSequence::new(vec![0; 300]);
        let segs = segment(&seq, 128);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.len() == 128));

        assert_eq!(segment(&TokenSequence::new(vec![0; 128]), 128).len(), 1);
        assert_eq!(segment(&TokenSequence::new(vec![0; 100]), 128).len(), 0);
    }

    #[test]
    fn text_round_trip_and_header_check() {
        let s = score_with_notes(vec![Note {
            pitch: 72,
            velocity: 100,
            start_tick: 240,
            duration_ticks: 120,
        }]);
        let seq = encode(&s, 0).unwrap();
        let text = to_text(&seq);
        assert!(text.starts_with("remi-v1 q=16 C=364\n"));
        assert_eq!(from_text(&text).unwrap(), seq);

        let bad = text.replacen("remi-v1", "remi-v0", 1);
        assert!(matches!(
            from_text(&bad),
            Err(CodecError::TextFormat { line: 1, .. })
        ));
    }

    #[test]
    fn chord_detector_finds_c_major() {
        let sounding: BTreeSet<u8> = [0u8, 4, 7].into_iter().collect();
        assert_eq!(detect_chord(&sounding), Some(0)); // root 0, maj
        let sparse: BTreeSet<u8> = [0u8, 4].into_iter().collect();
        assert_eq!(detect_chord(&sparse), None);
    }

    pub(crate) fn arb_quantizable_score() -> impl Strategy<Value = Score> {
        // Notes on the 16th grid with 32nd-multiple durations, so encoding is
        // lossless up to the codec's declared quantization.
        let note = (0u8..128, 1u8..128, 0u32..64, 1u32..33).prop_map(|(pitch, vel, slot, units)| {
            Note {
                pitch,
                velocity: vel,
                start_tick: slot * 120,
                duration_ticks: units * 60,
            }
        });
        prop::collection::vec(note, 1..24).prop_map(|mut notes| {
            notes.sort_by_key(|n| (n.start_tick, n.pitch, n.duration_ticks, n.velocity));
            notes.dedup_by_key(|n| (n.start_tick, n.pitch));
            score_with_notes(notes)
        })
    }

    proptest! {
        #[test]
        fn encode_output_is_grammar_valid(s in arb_quantizable_score()) {
            let seq = encode(&s, 0).unwrap();
            prop_assert!(check_grammar(&seq).is_ok());
        }

        #[test]
        fn encode_decode_encode_is_identity(s in arb_quantizable_score()) {
            let seq = encode(&s, 0).unwrap();
            let decoded = decode(&seq, &s, 0).unwrap();
            let seq2 = encode(&decoded, 0).unwrap();
            prop_assert_eq!(seq, seq2);
        }

        #[test]
        fn note_group_counts_are_coupled(s in arb_quantizable_score()) {
            let seq = encode(&s, 0).unwrap();
            let count = |family: EventFamily| {
                seq.tokens().filter(|t| t.family == family).count()
            };
            let n_on = count(EventFamily::NoteOn);
            prop_assert_eq!(count(EventFamily::NoteVelocity), n_on);
            prop_assert_eq!(count(EventFamily::NoteDuration), n_on);
            prop_assert!(count(EventFamily::Position) >= n_on);
        }
    }
}
