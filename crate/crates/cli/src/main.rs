use std::path::PathBuf;
use std::process::ExitCode;

use audiofuse::experiment::{self, json_text, load_datasets, prepare_out_dir, run_eval, run_synth, train_on, Overrides, RunConfig};
use audiofuse::gradcheck::{self, Size};
use audiofuse::model::Arch;
use audiofuse::signal_io::{CueMode, Split, SynthSpec};
use audiofuse::training::aggregate;
use audiofuse::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "audiofuse", version, about = "Spectrogram/waveform fusion classifier for heart-sound recordings")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic heart-sound dataset (WAV files and manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_per_class: usize,
        /// Falls back to AUDIOFUSE_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "both", value_parser = parse_str::<CueMode>)]
        cue_mode: CueMode,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_str::<Arch>)]
        arch: Option<Arch>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seeds; each run goes to `<out_dir>/seed-<s>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        force: bool,
        /// Suppress per-epoch lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "validation", value_parser = parse_str::<Split>)]
        split: Split,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer and the end-to-end models.
    Gradcheck {
        #[arg(long, default_value = "mini", value_parser = parse_str::<Size>)]
        size: Size,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Add a component with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn parse_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(experiment::SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Argument(format!("{}={raw:?} is not an unsigned integer", experiment::SEED_ENV))),
        Err(_) => Ok(None),
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Synth {
            out,
            n_per_class,
            seed,
            cue_mode,
            val_fraction,
            workers,
            force,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let spec = SynthSpec::new(n_per_class, seed, cue_mode);
            let entries = run_synth(&out, &spec, val_fraction, force, workers)?;
            println!("wrote {} clips to {}", entries.len(), out.display());
        }
        Command::Train {
            config,
            arch,
            seed,
            seeds,
            workers,
            out_dir,
            manifest,
            max_epochs,
            force,
            quiet,
        } => {
            let ov = Overrides {
                arch,
                seed,
                workers,
                out_dir,
                manifest,
                max_epochs,
            };
            let cfg = RunConfig::load(&config, &ov)?;
            prepare_out_dir(&cfg.out_dir, force)?;
            let (tr, va) = load_datasets(&cfg)?;
            let log = |r: &audiofuse::training::EpochRecord| {
                if !quiet {
                    let auc = r.val_auc.map_or("nan".into(), |a| format!("{a:.4}"));
                    eprintln!(
                        "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  val_auc {auc}",
                        r.epoch, r.train_loss, r.val_loss, r.val_acc
                    );
                }
            };
            if seeds.is_empty() {
                let report = train_on(&cfg, &tr, &va, log)?;
                print!("{}", json_text(&report)?);
            } else {
                let mut reports = Vec::new();
                for &s in &seeds {
                    let mut c = cfg.clone();
                    c.train.seed = s;
                    c.out_dir = cfg.out_dir.join(format!("seed-{s}"));
                    prepare_out_dir(&c.out_dir, force)?;
                    reports.push(train_on(&c, &tr, &va, log)?.validation);
                }
                let agg = aggregate(&seeds, reports)?;
                let text = json_text(&agg)?;
                let path = cfg.out_dir.join("aggregate.json");
                std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
                print!("{text}");
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            workers,
            out,
        } => {
            let report = run_eval(&checkpoint, &manifest, split, workers)?;
            let text = json_text(&report)?;
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
            }
            print!("{text}");
        }
        Command::Gradcheck {
            size,
            seeds,
            workers,
            inject_fault,
        } => {
            let report = gradcheck::run(&gradcheck::Options {
                size,
                seeds,
                workers,
                corrupt: inject_fault,
            })?;
            print!("{}", report.table());
            if !report.passed() {
                let bad: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
                eprintln!("ERROR gradcheck: {} component(s) above {:e}: {}", bad.len(), report.tolerance, bad.join(", "));
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR usage: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
