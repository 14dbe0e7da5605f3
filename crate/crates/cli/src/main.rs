use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sate::analysis::{evaluation_slice, model_report, write_csv, EVAL_SEED, EVAL_UTTERANCES};
use sate::corpus::{dataset_digest, generate, load_dataset, save_dataset, Dataset};
use sate::harness::{
    ablate_adaptor, ablate_pretrain, average_checkpoints, evaluate, recipe_model, run_ctc_position_sweep, run_recipe,
    save_sweep, write_ablation_csv, Manifest, Pretrained, Settings, System, SystemKind,
};
use sate::model::{AnyModel, Checkpoint};
use sate::{Result, SateError};

#[derive(Parser)]
#[command(name = "sate", version, about = "Stacked acoustic-and-textual encoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value settings file; a run manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataRun {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recipe's model and save the averaged best checkpoints.
    Train {
        #[command(flatten)]
        run: DataRun,
        #[arg(long)]
        seed: u64,
    },
    /// Score a trained model, or the ASR→MT cascade, on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint; not used for the cascade.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Average checkpoints parameter by parameter.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Per-layer encoder localness of a trained model, as CSV.
    Localness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train E2E ST and ASR models with the CTC head at each listed layer.
    SweepCtc {
        #[command(flatten)]
        run: DataRun,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
    },
    /// SATE with each pre-trained module left out in turn.
    AblatePretrain {
        #[command(flatten)]
        run: DataRun,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// SATE with each adaptor variant.
    AblateAdaptor {
        #[command(flatten)]
        run: DataRun,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
}

fn settings(common: &Common) -> Result<Settings> {
    let text = common.config.as_deref().map(fs::read_to_string).transpose()?;
    Settings::load(text.as_deref(), &common.overrides)
}

/// Settings whose data section describes the dataset on disk.
fn with_data(common: &Common, dir: &Path, seed: Option<u64>) -> Result<(Settings, Dataset, String)> {
    let mut s = settings(common)?;
    let data = load_dataset(dir)?;
    s.data = data.spec.clone();
    if let Some(seed) = seed {
        s.train.seed = seed;
    }
    s.validate()?;
    Ok((s, data, dataset_digest(dir)?))
}

fn load_model(s: &Settings, path: &Path) -> Result<AnyModel> {
    let (kind, cfg) = recipe_model(s)?;
    AnyModel::from_checkpoint(kind, &cfg, &Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let s = settings(&common)?;
            s.data.validate()?;
            save_dataset(&out, &generate(&s.data)?)?;
            Manifest::new("gen-data", &s, Some(dataset_digest(&out)?)).write(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { run, seed } => {
            let (mut s, data, digest) = with_data(&run.common, &run.data, Some(seed))?;
            s.train.ckpt_dir = Some(run.out.join("checkpoints"));
            Manifest::new("train", &s, Some(digest)).write(&run.out)?;
            let trained = run_recipe(&s, &data, &Pretrained::load(&s)?)?;
            trained.model.checkpoint().save(&run.out.join("model.ckpt"))?;
            trained.outcome.log.write_csv(&run.out.join("metrics.csv"))?;
            for r in &trained.outcome.best {
                println!("kept step {} dev score {:.3}", r.step, r.score);
            }
            println!("wrote {}", run.out.join("model.ckpt").display());
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
            beam,
        } => {
            let (s, dataset, _) = with_data(&common, &data, None)?;
            let record = if s.recipe.kind == SystemKind::Cascade {
                let cascade = Pretrained::load(&s)?.cascade(&s.resolved_model())?;
                evaluate(&System::Cascade(&cascade), &dataset, &split, beam)?
            } else {
                let path = checkpoint.ok_or_else(|| SateError::Config("--checkpoint is required".into()))?;
                evaluate(&System::Model(&load_model(&s, &path)?), &dataset, &split, beam)?
            };
            println!("system,split,beam,metric,value,n,mean_decode_ms");
            println!(
                "{},{},{},{},{:.4},{},{:.3}",
                record.system, record.split, record.beam, record.metric, record.value, record.n, record.mean_decode_ms
            );
        }
        Command::Average { out, checkpoints } => {
            let loaded = checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            average_checkpoints(&loaded.iter().collect::<Vec<_>>())?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Localness {
            common,
            data,
            checkpoint,
            out,
        } => {
            let (s, dataset, _) = with_data(&common, &data, None)?;
            let model = load_model(&s, &checkpoint)?;
            let slice = evaluation_slice(&dataset.dev, EVAL_UTTERANCES, EVAL_SEED);
            let report = model_report(model.kind().name(), &model, &slice)?;
            match out {
                Some(p) => write_csv(&[report], fs::File::create(p)?)?,
                None => write_csv(&[report], std::io::stdout().lock())?,
            }
        }
        Command::SweepCtc { run, seed, layers } => {
            let (s, data, digest) = with_data(&run.common, &run.data, seed)?;
            Manifest::new("sweep-ctc", &s, Some(digest))
                .note("layers", format!("{layers:?}"))
                .write(&run.out)?;
            save_sweep(&run_ctc_position_sweep(&s, &data, &layers)?, &run.out)?;
            println!("wrote {}", run.out.join("sweep.csv").display());
        }
        Command::AblatePretrain { run, seed, beam } => {
            let (s, data, digest) = with_data(&run.common, &run.data, seed)?;
            Manifest::new("ablate-pretrain", &s, Some(digest)).write(&run.out)?;
            let rows = ablate_pretrain(&s, &data, &Pretrained::load(&s)?, beam)?;
            write_ablation_csv(&rows, fs::File::create(run.out.join("ablation.csv"))?)?;
            println!("wrote {}", run.out.join("ablation.csv").display());
        }
        Command::AblateAdaptor { run, seed, beam } => {
            let (s, data, digest) = with_data(&run.common, &run.data, seed)?;
            Manifest::new("ablate-adaptor", &s, Some(digest)).write(&run.out)?;
            let rows = ablate_adaptor(&s, &data, &Pretrained::load(&s)?, beam)?;
            write_ablation_csv(&rows, fs::File::create(run.out.join("ablation.csv"))?)?;
            println!("wrote {}", run.out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SateError::Config(_) => ExitCode::from(2),
                SateError::Diverged { last_good, .. } => {
                    if let Some(p) = last_good {
                        eprintln!("last good parameters: {}", p.display());
                    }
                    ExitCode::from(3)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}
