//! End-to-end orchestration: favorite + input MIDI in, a run directory with
//! the transferred MIDI, checkpoint, pattern, token dumps, reports, and a
//! hash manifest out. Each stage matches the corresponding CLI subcommand, so
//! a pipeline run and a manual chain of subcommands produce identical bytes.

use crate::corpus;
use crate::metrics::{evaluate_distributions, pattern_similarity, MetricsError};
use crate::midi::{read_smf, select_melody_track, write_smf, MidiError, Score};
use crate::pattern::{
    extract_smp_auto, smp_to_smpi, PatternError, PatternInterval, SelectedEventStream, TieRule,
};
use crate::predictor::{
    compute_favorite_weights, finetune, AttentionModel, Checkpoint, CheckpointModel,
    FavoriteWeights, FinetuneOptions, ModelKind, NGramModel, PredictorError,
};
use crate::remi::{decode, encode, from_text, segment, to_text, CodecError, TokenSequence};
use crate::storage::{
    self, distribution_report_csv, loss_curve_csv, ps_report_csv, save_checkpoint, PipelineConfig,
    RunManifest, StorageError,
};
use crate::transfer::{transfer, TransferConfig, TransferError};
use crate::remi::Vocabulary;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("favorite yields {tokens} tokens, fewer than one segment of {needed}")]
    FavoriteTooShort { tokens: usize, needed: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Train a model on the favorite according to the config: the attention
/// model is seeded, exposed to the bundled corpus, then fine-tuned with the
/// favorite-aware loss; the n-gram just counts the favorite's segments.
pub fn train_on_favorite(
    favorite_tokens: &TokenSequence,
    config: &PipelineConfig,
) -> Result<Checkpoint, PipelineError> {
    let segments = segment(favorite_tokens, config.sequence_length);
    if segments.is_empty() {
        return Err(PipelineError::FavoriteTooShort {
            tokens: favorite_tokens.len(),
            needed: config.sequence_length,
        });
    }
    let weights = compute_favorite_weights(favorite_tokens, &config.selected, config.alpha)?;
    match config.model {
        ModelKind::Attention => {
            let mut model = AttentionModel::new(config.attention_config(), config.seed);
            if config.pretrain_epochs > 0 {
                let corpus_segments = corpus::pretraining_segments(config.sequence_length);
                let pretrain = finetune(
                    &model,
                    &corpus_segments,
                    &FavoriteWeights::uniform(1.0),
                    &FinetuneOptions {
                        epochs: config.pretrain_epochs,
                        stop_loss: 0.0,
                        learning_rate: config.learning_rate,
                        grad_clip: config.grad_clip,
                        seed: config.seed,
                    },
                )?;
                model = match pretrain.model {
                    CheckpointModel::Attention(m) => m,
                    CheckpointModel::NGram(_) => unreachable!(),
                };
            }
            let ckpt = finetune(
                &model,
                &segments,
                &weights,
                &FinetuneOptions {
                    epochs: config.epochs,
                    stop_loss: config.stop_loss,
                    learning_rate: config.learning_rate,
                    grad_clip: config.grad_clip,
                    seed: config.seed,
                },
            )?;
            Ok(ckpt)
        }
        ModelKind::NGram => {
            let mut model = NGramModel::new(
                config.ngram_order,
                config.ngram_delta,
                crate::remi::VOCAB_SIZE,
            );
            model.fit(&segments);
            Ok(Checkpoint {
                vocab_hash: Vocabulary.hash(),
                seed: config.seed,
                loss_curve: Vec::new(),
                weights: Some(weights),
                model: CheckpointModel::NGram(model),
            })
        }
    }
}

pub fn transfer_config_from(config: &PipelineConfig) -> TransferConfig {
    TransferConfig {
        selected: config.selected.clone(),
        temperature: config.temperature,
        seed: config.seed,
        pattern_length: config.pattern_length,
        ..TransferConfig::default()
    }
}

/// Paths of every artifact a run produces, relative to the run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub favorite_tokens: PathBuf,
    pub input_tokens: PathBuf,
    pub transferred_tokens: PathBuf,
    pub checkpoint: PathBuf,
    pub smpi: PathBuf,
    pub loss_curve: PathBuf,
    pub eval_vs_favorite: PathBuf,
    pub eval_vs_input: PathBuf,
    pub similarity: PathBuf,
    pub transferred_midi: PathBuf,
}

impl RunLayout {
    pub fn new() -> Self {
        RunLayout {
            config: "config.txt".into(),
            manifest: "manifest.txt".into(),
            favorite_tokens: "tokens/favorite.tokens".into(),
            input_tokens: "tokens/input.tokens".into(),
            transferred_tokens: "tokens/transferred.tokens".into(),
            checkpoint: "checkpoints/model.ckpt".into(),
            smpi: "patterns/smpi.txt".into(),
            loss_curve: "reports/loss_curve.csv".into(),
            eval_vs_favorite: "reports/eval_vs_favorite.csv".into(),
            eval_vs_input: "reports/eval_vs_input.csv".into(),
            similarity: "reports/similarity.csv".into(),
            transferred_midi: "transferred.mid".into(),
        }
    }
}

impl Default for RunLayout {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub layout: RunLayout,
    pub manifest: RunManifest,
    pub transferred: Score,
    pub smpi: PatternInterval,
    pub empty_selection: bool,
}

/// Chain every stage into `run_dir`. Rerunning with the same inputs, config,
/// and seed writes byte-identical artifacts (the manifest's timestamps
/// excepted).
pub fn run_pipeline(
    favorite_path: &Path,
    input_path: &Path,
    run_dir: &Path,
    config: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    let layout = RunLayout::new();
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    for sub in ["tokens", "checkpoints", "patterns", "reports"] {
        fs::create_dir_all(run_dir.join(sub)).map_err(io_err(run_dir))?;
    }
    let mut stages: Vec<(String, u64)> = Vec::new();

    let favorite_bytes = fs::read(favorite_path).map_err(io_err(favorite_path))?;
    let input_bytes = fs::read(input_path).map_err(io_err(input_path))?;
    let favorite = read_smf(&favorite_bytes)?;
    let input = read_smf(&input_bytes)?;

    storage::save_config(config, &run_dir.join(&layout.config))?;

    // tokenize
    let favorite_track = select_melody_track(&favorite)?;
    let input_track = select_melody_track(&input)?;
    let favorite_tokens = encode(&favorite, favorite_track)?;
    let input_tokens = encode(&input, input_track)?;
    storage::save_text(&run_dir.join(&layout.favorite_tokens), &to_text(&favorite_tokens))?;
    storage::save_text(&run_dir.join(&layout.input_tokens), &to_text(&input_tokens))?;
    stages.push(("tokenize".into(), unix_now()));

    // train
    let ckpt = train_on_favorite(&favorite_tokens, config)?;
    save_checkpoint(&ckpt, &run_dir.join(&layout.checkpoint))?;
    storage::save_text(&run_dir.join(&layout.loss_curve), &loss_curve_csv(&ckpt.loss_curve))?;
    stages.push(("train".into(), unix_now()));

    // extract pattern
    let stream = SelectedEventStream::from_sequence(&favorite_tokens, &config.selected);
    let smp = extract_smp_auto(&stream, config.pattern_length, TieRule::Deterministic)?;
    let smpi = smp_to_smpi(&smp);
    storage::save_text(&run_dir.join(&layout.smpi), &format!("{}\n", smpi.to_line()))?;
    stages.push(("extract-pattern".into(), unix_now()));

    // transfer, driving the model reloaded from its checkpoint so a manual
    // train-then-transfer chain is bit-identical
    let loaded = storage::load_checkpoint(&run_dir.join(&layout.checkpoint))?;
    let tcfg = transfer_config_from(config);
    let output = transfer(&input_tokens, loaded.predictor(), &smpi, &tcfg)?;
    storage::save_text(&run_dir.join(&layout.transferred_tokens), &to_text(&output.seq))?;
    let transferred = decode(&output.seq, &input, input_track)?;
    let midi_bytes = write_smf(&transferred);
    fs::write(run_dir.join(&layout.transferred_midi), &midi_bytes)
        .map_err(io_err(run_dir))?;
    stages.push(("transfer".into(), unix_now()));

    // evaluate
    let vs_favorite = evaluate_distributions(&transferred, &favorite);
    let vs_input = evaluate_distributions(&transferred, &input);
    storage::save_text(
        &run_dir.join(&layout.eval_vs_favorite),
        &distribution_report_csv(&vs_favorite),
    )?;
    storage::save_text(
        &run_dir.join(&layout.eval_vs_input),
        &distribution_report_csv(&vs_input),
    )?;
    stages.push(("evaluate".into(), unix_now()));

    // pattern similarity, input and transferred against the favorite
    let favorite_stream = SelectedEventStream::from_sequence(&favorite_tokens, &config.selected);
    let input_stream = SelectedEventStream::from_sequence(&input_tokens, &config.selected);
    let transferred_stream = SelectedEventStream::from_sequence(&output.seq, &config.selected);
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for p in 2..=5usize {
        if let Ok(ps) = pattern_similarity(&favorite_stream, &input_stream, p) {
            rows.push(("input".into(), p, ps));
        }
        if let Ok(ps) = pattern_similarity(&favorite_stream, &transferred_stream, p) {
            rows.push(("transferred".into(), p, ps));
        }
    }
    storage::save_text(&run_dir.join(&layout.similarity), &ps_report_csv(&rows))?;
    stages.push(("similarity".into(), unix_now()));

    // manifest
    let run_id = storage::sha256_hex(
        format!(
            "{}|{}|{}",
            storage::sha256_hex(&favorite_bytes),
            storage::sha256_hex(&input_bytes),
            config.to_text()
        )
        .as_bytes(),
    )[..12]
        .to_string();
    let rel = |p: &Path| p.to_string_lossy().into_owned();
    let hash_of = |p: &Path| storage::sha256_file(&run_dir.join(p));
    let manifest = RunManifest {
        run_id,
        seed: config.seed,
        inputs: vec![
            (
                "favorite".into(),
                favorite_path.display().to_string(),
                storage::sha256_hex(&favorite_bytes),
            ),
            (
                "input".into(),
                input_path.display().to_string(),
                storage::sha256_hex(&input_bytes),
            ),
        ],
        outputs: vec![
            ("config".into(), rel(&layout.config), hash_of(&layout.config)?),
            (
                "favorite-tokens".into(),
                rel(&layout.favorite_tokens),
                hash_of(&layout.favorite_tokens)?,
            ),
            (
                "input-tokens".into(),
                rel(&layout.input_tokens),
                hash_of(&layout.input_tokens)?,
            ),
            (
                "checkpoint".into(),
                rel(&layout.checkpoint),
                hash_of(&layout.checkpoint)?,
            ),
            ("smpi".into(), rel(&layout.smpi), hash_of(&layout.smpi)?),
            (
                "transferred-tokens".into(),
                rel(&layout.transferred_tokens),
                hash_of(&layout.transferred_tokens)?,
            ),
            (
                "transferred".into(),
                rel(&layout.transferred_midi),
                hash_of(&layout.transferred_midi)?,
            ),
            (
                "eval-vs-favorite".into(),
                rel(&layout.eval_vs_favorite),
                hash_of(&layout.eval_vs_favorite)?,
            ),
            (
                "eval-vs-input".into(),
                rel(&layout.eval_vs_input),
                hash_of(&layout.eval_vs_input)?,
            ),
            (
                "similarity".into(),
                rel(&layout.similarity),
                hash_of(&layout.similarity)?,
            ),
        ],
        stages,
    };
    storage::save_manifest(&manifest, &run_dir.join(&layout.manifest))?;

    Ok(PipelineOutcome {
        run_dir: run_dir.to_path_buf(),
        layout,
        manifest,
        transferred,
        smpi,
        empty_selection: output.empty_selection,
    })
}

/// Round-trip helper shared by tests and the CLI: parse token text back into
/// a sequence.
pub fn tokens_from_file(path: &Path) -> Result<TokenSequence, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(from_text(&text)?)
}
