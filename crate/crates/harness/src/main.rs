use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genreplay::checkpoint;
use genreplay::data::{build_stream, load_csv, write_csv, LabelMode};
use genreplay::experiment::probe_csv;
use genreplay::{parse_config, run_experiment, HarnessError};
use genreplay_core::flatness_probe;

/// Semi-supervised drifted-stream experiments.
#[derive(Parser)]
#[command(name = "genreplay", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell of a config. GENREPLAY_OUT overrides output.dir.
    Run { config: PathBuf },
    /// Accuracy of a checkpoint under uniform parameter noise; prints probe CSV.
    Probe {
        checkpoint: PathBuf,
        /// CSV of features and integer class labels.
        testset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15,0.2,0.25")]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// The test set's first line is a header.
        #[arg(long)]
        header: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the stream described by a config's dataset and stream keys as CSV files.
    GenStream {
        spec: PathBuf,
        out: PathBuf,
        /// Stream seed when the config does not fix stream.seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn probe(
    ckpt: &Path,
    testset: &Path,
    bounds: &[f64],
    draws: usize,
    seed: u64,
    header: bool,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let model = checkpoint::load(ckpt)?;
    let classes = model.dims().classes;
    let table = load_csv(testset, header, LabelMode::Raw { classes })?;
    let points = flatness_probe(&model, &table.data, bounds, draws, seed)?;
    let text = probe_csv(&points);
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `gold.csv`, then per step `t<k>_test.csv` (features, label),
/// `t<k>_unlabeled.csv` (features) and `t<k>_hidden.csv` (the unlabeled
/// rows' labels, for evaluation only).
fn gen_stream(spec: &Path, out: &Path, seed: u64) -> Result<(), HarnessError> {
    let cfg = parse_config(spec)?;
    let stream = build_stream(&cfg, seed)?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_csv(&out.join("gold.csv"), stream.gold.features(), Some(stream.gold.labels()))?;
    for seg in &stream.segments {
        let t = seg.time_index();
        write_csv(
            &out.join(format!("t{t}_test.csv")),
            seg.test_features(),
            Some(seg.oracle().test_labels()),
        )?;
        write_csv(&out.join(format!("t{t}_unlabeled.csv")), seg.learner_view().unlabeled(), None)?;
        let hidden = seg.oracle().hidden_unlabeled_labels();
        let text: String = hidden.iter().map(|y| format!("{y}\n")).collect();
        let path = out.join(format!("t{t}_hidden.csv"));
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    }
    eprintln!(
        "wrote gold set ({} rows) and {} segments to {}",
        stream.gold.len(),
        stream.segments.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            eprint!("resolved config:\n{}", cfg.to_text());
            match run_experiment(&cfg) {
                Ok(report) => {
                    if let Ok(s) = std::fs::read_to_string(report.dir.join("summary.txt")) {
                        eprint!("{s}");
                    }
                    if report.failures() > 0 {
                        eprintln!("{} of {} cells failed", report.failures(), report.cells.len());
                    }
                    ExitCode::from(report.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Probe {
            checkpoint,
            testset,
            bounds,
            draws,
            seed,
            header,
            out,
        } => match probe(&checkpoint, &testset, &bounds, draws, seed, header, out.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::GenStream { spec, out, seed } => match gen_stream(&spec, &out, seed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(HarnessError::Config(e)) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
