//! `favtune`: transfer a MIDI piece toward a favorite piece, stage by stage
//! or as one pipeline run.

use clap::{Args, Parser, Subcommand};
use favtune::metrics::{evaluate_distributions, kendall_tau, pattern_similarity};
use favtune::midi::{read_smf, select_melody_track, write_smf};
use favtune::pattern::{
    extract_smp_auto, smp_to_smpi, PatternInterval, SelectedEventStream, TieRule,
};
use favtune::pipeline::{run_pipeline, train_on_favorite, transfer_config_from, PipelineError};
use favtune::remi::{decode, encode, from_text, to_text, EventFamily};
use favtune::storage::{
    self, distribution_report_csv, load_checkpoint, loss_curve_csv, ps_report_csv,
    save_checkpoint, PipelineConfig, StorageError,
};
use favtune::transfer::transfer;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_IO: u8 = 3;
const EXIT_DOMAIN: u8 = 4;

#[derive(Parser)]
#[command(
    name = "favtune",
    version,
    about = "Symbolic music transfer toward a single favorite piece"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Pipeline config file (flat key = value text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed for training, pattern choice, and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Event family to transfer.
    #[arg(long, value_parser = ["note-on", "note-duration", "position"])]
    select: Option<String>,
    /// Signature pattern length to extract from the favorite.
    #[arg(long)]
    pattern_length: Option<usize>,
    /// Sampling temperature for model-driven slots.
    #[arg(long)]
    temperature: Option<f64>,
    /// Fine-tuning epoch limit.
    #[arg(long)]
    epochs: Option<usize>,
    /// Predictor backing the transfer.
    #[arg(long, value_parser = ["attention", "ngram"])]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// MIDI to token text (melody track unless --track is given).
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        track: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token text back to MIDI, onto a template file's tracks.
    Detokenize {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        track: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a next-token model on the favorite piece.
    Train {
        #[arg(long)]
        favorite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the loss curve CSV here.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Extract the favorite's signature pattern interval.
    ExtractPattern {
        #[arg(long)]
        favorite: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rewrite the input's selected events under a trained model and pattern.
    Transfer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smpi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Distribution-overlap metrics between two MIDI files.
    Evaluate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pattern similarity of b against a over a range of pattern lengths.
    Similarity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Single pattern length (default: 2 through 5).
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Kendall tau-b between two numeric columns (one value per line).
    Correlate {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
    },
    /// Run every stage into a run directory.
    Pipeline {
        #[arg(long)]
        favorite: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Run directory (default: $FAVTUNE_RUN_ROOT or ./runs, plus a name
        /// derived from the input files and seed).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

struct CliFailure {
    code: u8,
    message: String,
}

impl CliFailure {
    fn io(message: String) -> Self {
        CliFailure {
            code: EXIT_IO,
            message,
        }
    }

    fn domain(message: String) -> Self {
        CliFailure {
            code: EXIT_DOMAIN,
            message,
        }
    }
}

impl From<PipelineError> for CliFailure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Io { .. } => EXIT_IO,
            PipelineError::Storage(StorageError::Io { .. }) => EXIT_IO,
            _ => EXIT_DOMAIN,
        };
        CliFailure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<StorageError> for CliFailure {
    fn from(e: StorageError) -> Self {
        let code = match &e {
            StorageError::Io { .. } => EXIT_IO,
            _ => EXIT_DOMAIN,
        };
        CliFailure {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! domain_from {
    ($($ty:path),*) => {
        $(impl From<$ty> for CliFailure {
            fn from(e: $ty) -> Self {
                CliFailure::domain(e.to_string())
            }
        })*
    };
}

domain_from!(
    favtune::midi::MidiError,
    favtune::remi::CodecError,
    favtune::pattern::PatternError,
    favtune::predictor::PredictorError,
    favtune::transfer::TransferError,
    favtune::metrics::MetricsError
);

fn read_file(path: &Path) -> Result<Vec<u8>, CliFailure> {
    fs::read(path).map_err(|e| CliFailure::io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliFailure> {
    fs::read_to_string(path).map_err(|e| CliFailure::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliFailure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliFailure::io(format!("{}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliFailure::io(format!("{}: {e}", path.display())))
}

/// Data goes to --out when given, stdout otherwise.
fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), CliFailure> {
    match out {
        Some(path) => write_file(path, content.as_bytes()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn resolve_config(overrides: &Overrides) -> Result<PipelineConfig, CliFailure> {
    let mut config = match &overrides.config {
        Some(path) => storage::load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(select) = &overrides.select {
        let family = EventFamily::from_kebab(select)
            .ok_or_else(|| CliFailure::domain(format!("unknown event family {select:?}")))?;
        config.selected = [family].into_iter().collect();
    }
    if let Some(a) = overrides.pattern_length {
        config.pattern_length = a;
    }
    if let Some(t) = overrides.temperature {
        config.temperature = t;
    }
    if let Some(e) = overrides.epochs {
        config.epochs = e;
    }
    if let Some(m) = &overrides.model {
        config.model = favtune::predictor::ModelKind::from_name(m)
            .ok_or_else(|| CliFailure::domain(format!("unknown model {m:?}")))?;
    }
    config
        .validate("(cli)")
        .map_err(CliFailure::from)?;
    Ok(config)
}

fn load_score(path: &Path) -> Result<favtune::midi::Score, CliFailure> {
    Ok(read_smf(&read_file(path)?)?)
}

fn run(command: Command) -> Result<(), CliFailure> {
    match command {
        Command::Tokenize { input, track, out } => {
            let score = load_score(&input)?;
            let track = match track {
                Some(t) => t,
                None => select_melody_track(&score)?,
            };
            let seq = encode(&score, track)?;
            emit(&out, &to_text(&seq))
        }
        Command::Detokenize {
            tokens,
            template,
            track,
            out,
        } => {
            let seq = from_text(&read_text(&tokens)?)?;
            let template_score = load_score(&template)?;
            let track = match track {
                Some(t) => t,
                None => select_melody_track(&template_score)?,
            };
            let score = decode(&seq, &template_score, track)?;
            write_file(&out, &write_smf(&score))
        }
        Command::Train {
            favorite,
            out,
            loss_curve,
            overrides,
        } => {
            let config = resolve_config(&overrides)?;
            let score = load_score(&favorite)?;
            let track = select_melody_track(&score)?;
            let tokens = encode(&score, track)?;
            let ckpt = train_on_favorite(&tokens, &config)?;
            save_checkpoint(&ckpt, &out)?;
            if let Some(path) = loss_curve {
                write_file(&path, loss_curve_csv(&ckpt.loss_curve).as_bytes())?;
            }
            if let Some(last) = ckpt.loss_curve.last() {
                eprintln!(
                    "trained {} epochs, final loss {last:.6}",
                    ckpt.loss_curve.len()
                );
            }
            Ok(())
        }
        Command::ExtractPattern {
            favorite,
            out,
            overrides,
        } => {
            let config = resolve_config(&overrides)?;
            let score = load_score(&favorite)?;
            let track = select_melody_track(&score)?;
            let tokens = encode(&score, track)?;
            let stream = SelectedEventStream::from_sequence(&tokens, &config.selected);
            let smp = extract_smp_auto(&stream, config.pattern_length, TieRule::Deterministic)?;
            let smpi = smp_to_smpi(&smp);
            emit(&out, &format!("{}\n", smpi.to_line()))
        }
        Command::Transfer {
            input,
            checkpoint,
            smpi,
            out,
            overrides,
        } => {
            let config = resolve_config(&overrides)?;
            let score = load_score(&input)?;
            let track = select_melody_track(&score)?;
            let tokens = encode(&score, track)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let interval = PatternInterval::from_line(&read_text(&smpi)?)
                .map_err(CliFailure::domain)?;
            let tcfg = transfer_config_from(&config);
            let output = transfer(&tokens, ckpt.predictor(), &interval, &tcfg)?;
            if output.empty_selection {
                eprintln!("warning: input has no selected-family tokens; output equals input");
            }
            let transferred = decode(&output.seq, &score, track)?;
            write_file(&out, &write_smf(&transferred))
        }
        Command::Evaluate { a, b, out } => {
            let sa = load_score(&a)?;
            let sb = load_score(&b)?;
            let report = evaluate_distributions(&sa, &sb);
            emit(&out, &distribution_report_csv(&report))
        }
        Command::Similarity {
            a,
            b,
            p,
            out,
            overrides,
        } => {
            let config = resolve_config(&overrides)?;
            let sa = load_score(&a)?;
            let sb = load_score(&b)?;
            let ta = encode(&sa, select_melody_track(&sa)?)?;
            let tb = encode(&sb, select_melody_track(&sb)?)?;
            let stream_a = SelectedEventStream::from_sequence(&ta, &config.selected);
            let stream_b = SelectedEventStream::from_sequence(&tb, &config.selected);
            let ps_range: Vec<usize> = match p {
                Some(p) => vec![p],
                None => vec![2, 3, 4, 5],
            };
            let mut rows = Vec::new();
            for p in ps_range {
                let ps = pattern_similarity(&stream_a, &stream_b, p)?;
                rows.push(("b-vs-a".to_string(), p, ps));
            }
            emit(&out, &ps_report_csv(&rows))
        }
        Command::Correlate { x, y } => {
            let parse_column = |path: &Path| -> Result<Vec<f64>, CliFailure> {
                read_text(path)?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(|l| {
                        l.parse::<f64>().map_err(|e| {
                            CliFailure::domain(format!("{}: bad number {l:?}: {e}", path.display()))
                        })
                    })
                    .collect()
            };
            let xs = parse_column(&x)?;
            let ys = parse_column(&y)?;
            let (tau, p_value) = kendall_tau(&xs, &ys)?;
            println!("tau,p_value");
            println!("{tau:.12},{p_value:.12}");
            Ok(())
        }
        Command::Pipeline {
            favorite,
            input,
            out,
            overrides,
        } => {
            let config = resolve_config(&overrides)?;
            let run_dir = match out {
                Some(dir) => dir,
                None => {
                    let root = std::env::var("FAVTUNE_RUN_ROOT")
                        .map(PathBuf::from)
                        .unwrap_or_else(|_| PathBuf::from("runs"));
                    let stem = |p: &Path| {
                        p.file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "piece".into())
                    };
                    root.join(format!(
                        "{}-{}-seed{}",
                        stem(&favorite),
                        stem(&input),
                        config.seed
                    ))
                }
            };
            let outcome = run_pipeline(&favorite, &input, &run_dir, &config)?;
            if outcome.empty_selection {
                eprintln!("warning: input has no selected-family tokens; output equals input");
            }
            println!("{}", outcome.run_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
