//! The transfer engine: event selection fixes every token outside the
//! selected families, and event learning rewrites selected slots — sampled
//! from the model until the model naturally produces the pattern interval's
//! first step, then forced to follow the rest of the interval sequence.

use crate::midi::{select_melody_track, MidiError, Score};
use crate::pattern::{
    extract_smp_auto, smp_to_smpi, PatternError, PatternInterval, SelectedEventStream,
    SignaturePattern, TieRule,
};
use crate::predictor::{sample_from_distribution, Predictor, PredictorError};
use crate::remi::{
    check_grammar, decode, encode, CodecError, EventFamily, EventToken, TokenSequence, Vocabulary,
    VOCAB_SIZE,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("model vocabulary size {model} does not match codec size {codec}")]
    VocabularyMismatch { model: usize, codec: usize },
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// How forced values outside a family's class range are mapped back in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundPolicy {
    /// NoteOn values fold by octaves (+/-12) into 0..=127, preserving pitch
    /// class; other families clamp.
    #[default]
    OctaveFold,
    /// Clamp to the family's class range.
    Saturate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub selected: BTreeSet<EventFamily>,
    pub temperature: f64,
    pub seed: u64,
    pub bound_policy: BoundPolicy,
    /// Disables the flag state machine when false: selected slots are all
    /// model-sampled and no intervals are forced.
    pub event_learning: bool,
    /// When true, the natural trigger counts as having realized the first
    /// interval, so forcing starts at the second.
    pub trigger_counts_first: bool,
    /// Signature pattern length requested from the favorite (auto-shrinks).
    pub pattern_length: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            selected: [EventFamily::NoteOn].into_iter().collect(),
            temperature: 1.0,
            seed: 42,
            bound_policy: BoundPolicy::OctaveFold,
            event_learning: true,
            trigger_counts_first: false,
            pattern_length: 8,
        }
    }
}

/// One completed flag episode: the trigger slot and the slots whose values
/// were forced from the pattern interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    /// Token index of the slot whose sampled value matched the first
    /// interval.
    pub trigger_index: usize,
    /// Token indices of the forced slots, in order.
    pub forced_indices: Vec<usize>,
    /// True if any forced value was folded or clamped into range.
    pub bounded: bool,
}

#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub seq: TokenSequence,
    /// Set when the input held no selected-family tokens; the sequence is
    /// returned unchanged.
    pub empty_selection: bool,
    pub injections: Vec<Injection>,
}

fn bound_class(family: EventFamily, raw: i64, policy: BoundPolicy) -> (u32, bool) {
    let count = family.class_count() as i64;
    if (0..count).contains(&raw) {
        return (raw as u32, false);
    }
    let bounded = match (policy, family) {
        (BoundPolicy::OctaveFold, EventFamily::NoteOn) => {
            let mut c = raw;
            while c < 0 {
                c += 12;
            }
            while c >= count {
                c -= 12;
            }
            c
        }
        _ => raw.clamp(0, count - 1),
    };
    (bounded as u32, true)
}

/// Rewrite `input` slot by slot. Every token outside `cfg.selected` is copied
/// through; selected slots are sampled from the model constrained to their
/// family until the sampled value differs from the previous slot by the first
/// interval, after which the remaining intervals are forced in order.
pub fn transfer(
    input: &TokenSequence,
    model: &dyn Predictor,
    smpi: &PatternInterval,
    cfg: &TransferConfig,
) -> Result<TransferOutput, TransferError> {
    assert!(!cfg.selected.is_empty(), "selected family set must be non-empty");
    assert!(cfg.temperature >= 0.0, "temperature must be non-negative");
    assert!(!smpi.is_empty(), "pattern interval must be non-empty");
    if model.vocab_size() != VOCAB_SIZE {
        return Err(TransferError::VocabularyMismatch {
            model: model.vocab_size(),
            codec: VOCAB_SIZE,
        });
    }
    let v = Vocabulary;
    let has_selected = input
        .ids
        .iter()
        .any(|&id| cfg.selected.contains(&v.family_of(id).expect("id in vocabulary")));
    if !has_selected {
        return Ok(TransferOutput {
            seq: input.clone(),
            empty_selection: true,
            injections: Vec::new(),
        });
    }

    let interval_count = smpi.len(); // a - 1
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut session = model.session();
    let mut out: Vec<u32> = Vec::with_capacity(input.len());
    let mut injections: Vec<Injection> = Vec::new();

    let mut flag = false;
    let mut idx: usize = 1; // 1-based index into the interval list
    let mut prev_slot: Option<usize> = None; // token index of previous selected slot in out
    let mut current: Option<Injection> = None;

    for (n, &id) in input.ids.iter().enumerate() {
        let family = v.family_of(id).expect("id in vocabulary");
        let token = if cfg.selected.contains(&family) {
            let class_of = |ids: &[u32], slot: usize| -> i64 {
                v.token_of(ids[slot]).expect("id in vocabulary").class as i64
            };
            let chosen = if !flag {
                let allowed: Vec<u32> = v.classes_of(family).collect();
                let dist = session.next_distribution();
                let sampled =
                    sample_from_distribution(&dist, &allowed, cfg.temperature, &mut rng)?;
                let sampled_class = v.token_of(sampled).expect("id in vocabulary").class as i64;
                if cfg.event_learning {
                    if let Some(p) = prev_slot {
                        if sampled_class - class_of(&out, p) == smpi.deltas[0] {
                            let start_idx = if cfg.trigger_counts_first { 2 } else { 1 };
                            if start_idx <= interval_count {
                                flag = true;
                                idx = start_idx;
                            }
                            current = Some(Injection {
                                trigger_index: n,
                                forced_indices: Vec::new(),
                                bounded: false,
                            });
                            if !flag {
                                // single-interval pattern already realized
                                injections.push(current.take().unwrap());
                            }
                        }
                    }
                }
                sampled
            } else {
                let base = class_of(&out, prev_slot.expect("flag implies a previous slot"));
                let raw = base + smpi.deltas[idx - 1];
                let (class, bounded) = bound_class(family, raw, cfg.bound_policy);
                let inj = current.as_mut().expect("flag implies an open injection");
                inj.forced_indices.push(n);
                inj.bounded |= bounded;
                idx += 1;
                if idx > interval_count {
                    idx = 1;
                    flag = false;
                    injections.push(current.take().unwrap());
                }
                v.id_of(EventToken::new(family, class)).expect("class bounded")
            };
            prev_slot = Some(n);
            chosen
        } else {
            id
        };
        out.push(token);
        session.push(token);
    }
    if let Some(inj) = current.take() {
        injections.push(inj); // input ended mid-forcing
    }

    Ok(TransferOutput {
        seq: TokenSequence::new(out),
        empty_selection: false,
        injections,
    })
}

/// Everything produced by a whole-score transfer, kept for reporting.
#[derive(Debug, Clone)]
pub struct ScoreTransfer {
    pub score: Score,
    pub input_tokens: TokenSequence,
    pub output: TransferOutput,
    pub smp: SignaturePattern,
    pub smpi: PatternInterval,
    pub input_track: usize,
    pub favorite_track: usize,
}

/// Whole-score pipeline: pick the melody track of each piece, extract the
/// favorite's pattern interval, transfer the input's token sequence, and
/// decode onto a copy of the input so untouched tracks pass through
/// byte-identical.
pub fn transfer_score(
    input: &Score,
    favorite: &Score,
    model: &dyn Predictor,
    cfg: &TransferConfig,
) -> Result<ScoreTransfer, TransferError> {
    let input_track = select_melody_track(input)?;
    let favorite_track = select_melody_track(favorite)?;
    let input_tokens = encode(input, input_track)?;
    let favorite_tokens = encode(favorite, favorite_track)?;
    let stream = SelectedEventStream::from_sequence(&favorite_tokens, &cfg.selected);
    let smp = extract_smp_auto(&stream, cfg.pattern_length, TieRule::Deterministic)?;
    let smpi = smp_to_smpi(&smp);
    let output = transfer(&input_tokens, model, &smpi, cfg)?;
    debug_assert!(check_grammar(&output.seq).is_ok());
    let score = decode(&output.seq, input, input_track)?;
    Ok(ScoreTransfer {
        score,
        input_tokens,
        output,
        smp,
        smpi,
        input_track,
        favorite_track,
    })
}
