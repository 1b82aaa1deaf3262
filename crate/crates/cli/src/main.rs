use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use spnd::backbone::{NormMode, Variant};
use spnd::datamodel::{validate_pair, FoldPlan, PairedSample};
use spnd::dataset_io::{generate_synthetic, load_dataset, make_folds, PairingPolicy, SyntheticConfig};
use spnd::eval_report::{ablation_suite, crossval, evaluate, export_embeddings, read_selection_log};
use spnd::model::Network;
use spnd::trainer::{train_spnd, TrainConfig};

#[derive(Parser)]
#[command(name = "spnd", version, about = "Paired-sample expression recognition with self-paced selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON training configuration; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding `manifest.csv` and `labels.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    no_spl: bool,
    #[arg(long)]
    norm_mode: Option<NormMode>,
}

#[derive(Args, Clone)]
struct Folds {
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Seed of the subject shuffle.
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    /// Reuse a fold plan written by `prepare`.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic identity/deviation dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a manifest, build pairs and write a fold plan.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        folds: Folds,
    },
    /// Train one model, optionally on a single fold's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        folds: Folds,
        /// Hold this fold out and evaluate on it.
        #[arg(long)]
        fold: Option<usize>,
    },
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        folds: Folds,
    },
    /// Baseline / SPL / NDF / NDF+SPL table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        folds: Folds,
    },
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        folds: Folds,
        #[arg(long)]
        fold: Option<usize>,
    },
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// A `selection_pace{p}.csv` log marking the last pace's selection.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::desk(1),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if common.no_spl {
        cfg.spl_enabled = false;
    }
    if let Some(m) = common.norm_mode {
        cfg.backbone.norm_mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &Path, size: usize, channels: usize) -> Result<(usize, Vec<PairedSample>)> {
    let (labels, pairs) = load_dataset(data, size, channels, PairingPolicy::FirstNeutralXPeaks)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    info!("{} pairs over {} classes", pairs.len(), labels.k());
    Ok((labels.k(), pairs))
}

fn fold_plan(pairs: &[PairedSample], folds: &Folds) -> Result<FoldPlan> {
    match &folds.plan {
        Some(path) => Ok(serde_json::from_str(&fs::read_to_string(path)?)?),
        None => Ok(make_folds(pairs, folds.folds, folds.fold_seed)?),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, config, seed } => {
            let mut cfg: SyntheticConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SyntheticConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic(&cfg)?;
            ds.write_to(&out)?;
            println!("wrote {} records to {}", ds.records.len(), out.display());
        }
        Command::Prepare { data, out, folds } => {
            ensure_dir(&out)?;
            let labels = spnd::dataset_io::read_labels(&data)?;
            let records = spnd::dataset_io::parse_manifest(&data.join("manifest.csv"), &labels)?;
            let pairs = spnd::dataset_io::build_pairs(&records, PairingPolicy::FirstNeutralXPeaks)?;
            let mut bad = 0;
            for p in &pairs {
                for v in validate_pair(p) {
                    bad += 1;
                    eprintln!("{}: {v}", p.id());
                }
            }
            if bad > 0 {
                bail!("{bad} pairing violations");
            }
            let plan = fold_plan(&pairs, &folds)?;
            fs::write(out.join("folds.json"), serde_json::to_string_pretty(&plan)?)?;
            let mut w = csv::Writer::from_path(out.join("pairs.csv"))?;
            w.write_record(["sample_id", "reference_id", "subject_id", "label", "fold"])?;
            for p in &pairs {
                w.write_record([
                    p.id(),
                    p.reference.as_ref().map(|r| r.sample_id.as_str()).unwrap_or(""),
                    &p.subject_id,
                    &p.label.to_string(),
                    &plan.fold_of(&p.subject_id).map(|f| f.to_string()).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            println!(
                "{} records, {} pairs, {} subjects, fold sizes {:?}",
                records.len(),
                pairs.len(),
                plan.assignment.len(),
                plan.fold_sizes()
            );
        }
        Command::Train { common, folds, fold } => {
            let cfg = train_config(&common)?;
            let (k, pairs) = load(&common.data, cfg.backbone.input_size, cfg.backbone.in_channels)?;
            let (train, test) = match fold {
                Some(f) => {
                    let (a, b) = fold_plan(&pairs, &folds)?.split(&pairs, f)?;
                    (a, Some(b))
                }
                None => (pairs, None),
            };
            let (model, history) = train_spnd(&train, k, &cfg, Some(&common.out))?;
            println!("final training loss {:.5}", history.final_loss().unwrap_or(f64::NAN));
            if let Some(test) = test {
                let r = evaluate(&model, &test)?;
                r.write_metrics(&common.out.join("metrics.json"))?;
                r.write_confusion(&common.out.join("confusion.csv"))?;
                println!("test accuracy {:.4} on {} pairs", r.accuracy, r.n_samples);
            }
        }
        Command::Crossval { common, folds } => {
            let cfg = train_config(&common)?;
            let (k, pairs) = load(&common.data, cfg.backbone.input_size, cfg.backbone.in_channels)?;
            let plan = fold_plan(&pairs, &folds)?;
            let report = crossval(&pairs, &plan, k, &cfg, Some(&common.out))?;
            for f in &report.folds {
                println!("fold {}: {:.4}", f.fold, f.result.accuracy);
            }
            println!("mean accuracy {:.4}", report.mean_accuracy);
        }
        Command::Ablate { common, folds } => {
            let cfg = train_config(&common)?;
            let (k, pairs) = load(&common.data, cfg.backbone.input_size, cfg.backbone.in_channels)?;
            let plan = fold_plan(&pairs, &folds)?;
            for row in ablation_suite(&pairs, &plan, k, &cfg, Some(&common.out))? {
                println!(
                    "{:<8} ndf={} spl={} accuracy {:.4}",
                    row.method,
                    u8::from(row.ndf),
                    u8::from(row.spl),
                    row.accuracy
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            folds,
            fold,
        } => {
            ensure_dir(&out)?;
            let model = Network::<f32>::load(&checkpoint)?;
            let b = &model.config.backbone;
            let (_, pairs) = load(&data, b.input_size, b.in_channels)?;
            let pairs = match fold {
                Some(f) => fold_plan(&pairs, &folds)?.split(&pairs, f)?.1,
                None => pairs,
            };
            let r = evaluate(&model, &pairs)?;
            r.write_metrics(&out.join("metrics.json"))?;
            r.write_confusion(&out.join("confusion.csv"))?;
            println!("accuracy {:.4} on {} pairs", r.accuracy, r.n_samples);
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            selection,
        } => {
            let model = Network::<f32>::load(&checkpoint)?;
            let b = &model.config.backbone;
            let (_, pairs) = load(&data, b.input_size, b.in_channels)?;
            let selected = match selection {
                Some(p) => read_selection_log(&p)?,
                None => HashSet::new(),
            };
            let n = export_embeddings(&model, &pairs, &selected, &out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
