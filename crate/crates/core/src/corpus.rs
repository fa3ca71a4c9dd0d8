//! A small bundled corpus of public-domain melodies.
//!
//! Training the attention model from scratch needs *some* prior exposure to
//! token statistics before fine-tuning on a single favorite piece; these
//! traditional tunes provide that at desk scale.

use crate::midi::{Note, Score, Track};
use crate::remi::{encode, segment, TokenSequence};

/// (pitch, duration in eighth notes); each note starts when the previous
/// ends.
type Tune = &'static [(u8, u32)];

// Beethoven, "Ode to Joy" theme.
const ODE_TO_JOY: Tune = &[
    (64, 2), (64, 2), (65, 2), (67, 2), (67, 2), (65, 2), (64, 2), (62, 2),
    (60, 2), (60, 2), (62, 2), (64, 2), (64, 3), (62, 1), (62, 4),
    (64, 2), (64, 2), (65, 2), (67, 2), (67, 2), (65, 2), (64, 2), (62, 2),
    (60, 2), (60, 2), (62, 2), (64, 2), (62, 3), (60, 1), (60, 4),
];

// Traditional, "Twinkle Twinkle Little Star".
const TWINKLE: Tune = &[
    (60, 2), (60, 2), (67, 2), (67, 2), (69, 2), (69, 2), (67, 4),
    (65, 2), (65, 2), (64, 2), (64, 2), (62, 2), (62, 2), (60, 4),
    (67, 2), (67, 2), (65, 2), (65, 2), (64, 2), (64, 2), (62, 4),
    (67, 2), (67, 2), (65, 2), (65, 2), (64, 2), (64, 2), (62, 4),
];

// Traditional, "Frere Jacques".
const FRERE_JACQUES: Tune = &[
    (60, 2), (62, 2), (64, 2), (60, 2), (60, 2), (62, 2), (64, 2), (60, 2),
    (64, 2), (65, 2), (67, 4), (64, 2), (65, 2), (67, 4),
    (67, 1), (69, 1), (67, 1), (65, 1), (64, 2), (60, 2),
    (67, 1), (69, 1), (67, 1), (65, 1), (64, 2), (60, 2),
    (60, 2), (55, 2), (60, 4), (60, 2), (55, 2), (60, 4),
];

const TUNES: [(&str, Tune); 3] = [
    ("ode-to-joy", ODE_TO_JOY),
    ("twinkle", TWINKLE),
    ("frere-jacques", FRERE_JACQUES),
];

const TICKS_PER_QUARTER: u16 = 480;

fn tune_to_score(name: &str, tune: Tune, repeats: usize) -> Score {
    let eighth = TICKS_PER_QUARTER as u32 / 2;
    let mut notes = Vec::new();
    let mut tick = 0u32;
    for _ in 0..repeats {
        for &(pitch, eighths) in tune {
            notes.push(Note {
                pitch,
                velocity: 80,
                start_tick: tick,
                duration_ticks: eighths * eighth,
            });
            tick += eighths * eighth;
        }
    }
    let mut score = Score::new(TICKS_PER_QUARTER);
    score.tracks.push(Track {
        name: name.to_string(),
        channel: 0,
        notes,
        extras: vec![],
    });
    score
}

/// The bundled tunes as scores, each repeated twice so every tune yields at
/// least one full training segment at the default sequence length.
pub fn builtin_scores() -> Vec<Score> {
    TUNES
        .iter()
        .map(|(name, tune)| tune_to_score(name, tune, 2))
        .collect()
}

/// Tokenize the corpus and cut it into training segments of `length` tokens.
pub fn pretraining_segments(length: usize) -> Vec<TokenSequence> {
    let mut out = Vec::new();
    for score in builtin_scores() {
        let seq = encode(&score, 0).expect("bundled tunes have notes");
        out.extend(segment(&seq, length));
    }
    out
}
