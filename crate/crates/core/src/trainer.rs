//! Alternating optimization: select samples with the model fixed, then train
//! on the selection with the weights warm-started from the previous pace.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Variant};
use crate::datamodel::{ClassIndex, Image, PairedSample};
use crate::dataset_io::{augment_images, AugmentationSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, PairBatch};
use crate::optim::{Adam, OptimizerConfig};
use crate::rng;
use crate::spl_scheduler::{select_pace, PaceSchedule, PaceState, ScoredSample};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochAllocation {
    #[default]
    EqualFloorRemainderLast,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Overrides `backbone.variant`.
    pub variant: Variant,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub total_epochs: usize,
    #[serde(default)]
    pub pace_schedule: PaceSchedule,
    #[serde(default = "yes")]
    pub spl_enabled: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epoch_allocation: EpochAllocation,
    #[serde(default = "yes")]
    pub reset_optimizer_per_pace: bool,
    /// Re-initialize weights at every pace instead of warm-starting.
    #[serde(default)]
    pub reinit_per_pace: bool,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub classifier_bias: bool,
    /// Write a checkpoint after every pace when an output directory is given.
    #[serde(default = "yes")]
    pub checkpoint_every_pace: bool,
}

impl TrainConfig {
    /// CPU-sized preset: 48×48 inputs, batch 32, 60 epochs.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            variant: Variant::Paired,
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            total_epochs: 60,
            pace_schedule: PaceSchedule::default(),
            spl_enabled: true,
            seed: 0,
            epoch_allocation: EpochAllocation::default(),
            reset_optimizer_per_pace: true,
            reinit_per_pace: false,
            augmentation: AugmentationSpec::default(),
            backbone: BackboneConfig::desk(in_channels),
            classifier_bias: false,
            checkpoint_every_pace: true,
        }
    }

    /// Full-size preset for posed, lab-recorded datasets.
    pub fn in_the_lab(in_channels: usize) -> Self {
        Self {
            batch_size: 128,
            total_epochs: 250,
            backbone: BackboneConfig::full(in_channels),
            ..Self::desk(in_channels)
        }
    }

    /// Full-size preset for in-the-wild datasets.
    pub fn in_the_wild(in_channels: usize) -> Self {
        Self {
            total_epochs: 150,
            ..Self::in_the_lab(in_channels)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paces(&self) -> PaceSchedule {
        if self.spl_enabled {
            self.pace_schedule.clone()
        } else {
            PaceSchedule::single()
        }
    }

    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                variant: self.variant,
                ..self.backbone.clone()
            },
            n_classes,
            classifier_bias: self.classifier_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.pace_schedule.validate()?;
        self.augmentation.validate()?;
        self.model_config(2).backbone.validate()?;
        if self.batch_size == 0 || (self.variant == Variant::Paired && self.batch_size < 2) {
            return Err(Error::Config("batch_size must be >= 2 for the paired variant".into()));
        }
        if self.total_epochs < self.paces().len() {
            return Err(Error::Config(format!(
                "total_epochs {} is fewer than the {} paces",
                self.total_epochs,
                self.paces().len()
            )));
        }
        Ok(())
    }
}

/// `floor(total / n)` epochs per pace with the remainder on the last one.
pub fn allocate_epochs(total_epochs: usize, n_paces: usize) -> Result<Vec<usize>> {
    if n_paces == 0 || total_epochs < n_paces {
        return Err(Error::Config(format!(
            "cannot split {total_epochs} epochs over {n_paces} paces"
        )));
    }
    let base = total_epochs / n_paces;
    let mut out = vec![base; n_paces];
    out[n_paces - 1] += total_epochs % n_paces;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pace: usize,
    pub loss: f64,
    pub selected_per_class: Vec<usize>,
}

impl EpochRecord {
    pub fn selected_total(&self) -> usize {
        self.selected_per_class.iter().sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub paces: Vec<PaceState>,
    /// Per pace: how many mini-batch gradients each sample entered.
    pub contributions: Vec<BTreeMap<String, usize>>,
    /// Per pace: parameter checksum at its first and after its last step.
    pub checksums: Vec<(u64, u64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainHistory {
    pub fn pace_losses(&self, pace: usize) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.pace == pace).map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "pace", "loss", "selected_total"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.pace.to_string(),
                format!("{:.9}", e.loss),
                e.selected_total().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn memory_image(pair: &PairedSample, reference: bool) -> Result<Option<&Image>> {
    let rec = if reference {
        match &pair.reference {
            Some(r) => r,
            None => return Ok(None),
        }
    } else {
        &pair.target
    };
    rec.image
        .memory()
        .map(|a| Some(a.as_ref()))
        .ok_or_else(|| Error::Config(format!("image of `{}` is not loaded", rec.sample_id)))
}

fn needs_reference(variant: Variant) -> bool {
    variant == Variant::Paired
}

/// Inference-mode losses for every pair, in order.
pub fn inference_losses(model: &Network<f32>, pairs: &[&PairedSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = PairBatch::from_pairs(chunk, &model.config.backbone)?;
        let labels: Vec<ClassIndex> = chunk.iter().map(|p| p.label).collect();
        out.extend(model.losses(&batch, &labels)?);
    }
    Ok(out)
}

/// Mutable state a pace trains against.
pub struct RunContext<'a> {
    pub model: &'a mut Network<f32>,
    pub optimizer: &'a mut Adam<f32>,
    pub history: &'a mut TrainHistory,
}

/// Trains for `epochs` passes over `selected`, shuffled per epoch, with one
/// augmentation draw applied to both images of every pair.
pub fn run_pace(
    ctx: &mut RunContext<'_>,
    selected: &[&PairedSample],
    epochs: usize,
    pace: usize,
    selected_per_class: &[usize],
    config: &TrainConfig,
) -> Result<()> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let variant = ctx.model.variant();
    let mut counters: BTreeMap<String, usize> = selected.iter().map(|p| (p.id().to_string(), 0)).collect();
    for _ in 0..epochs {
        let epoch = ctx.history.epochs.len();
        let mut order: Vec<usize> = (0..selected.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[0x5EED, pace as u64, epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut targets = Vec::with_capacity(chunk.len());
            let mut refs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let pair = selected[i];
                let draw = rng::derive_seed(
                    config.augmentation.seed ^ config.seed,
                    &[epoch as u64, bi as u64, j as u64],
                );
                let reference = if needs_reference(variant) {
                    memory_image(pair, true)?
                } else {
                    None
                };
                let (t, r) = augment_images(
                    memory_image(pair, false)?.expect("target"),
                    reference,
                    &config.augmentation,
                    draw,
                );
                targets.push(t);
                refs.extend(r);
                labels.push(pair.label);
                *counters.get_mut(pair.id()).expect("counter") += 1;
            }
            let tr: Vec<&Image> = targets.iter().collect();
            let rr: Vec<&Image> = refs.iter().collect();
            let refs_arg = needs_reference(variant).then_some(rr.as_slice());
            let batch = PairBatch::from_images(&tr, refs_arg, &ctx.model.config.backbone)?;
            let losses = ctx.model.train_batch(&batch, &labels)?;
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += losses.iter().sum::<f64>();
            ctx.optimizer.step(ctx.model.params_mut());
        }
        let loss = loss_sum / selected.len() as f64;
        debug!("pace {pace} epoch {epoch}: loss {loss:.5}");
        ctx.history.epochs.push(EpochRecord {
            epoch,
            pace,
            loss,
            selected_per_class: selected_per_class.to_vec(),
        });
    }
    ctx.history.contributions.push(counters);
    Ok(())
}

/// Runs every pace on `pairs`. With `out_dir` set, writes the history,
/// per-pace selection logs, checkpoints and run metadata there.
pub fn train_spnd(
    pairs: &[PairedSample],
    n_classes: usize,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Network<f32>, TrainHistory)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptySelection);
    }
    let model_config = config.model_config(n_classes);
    if needs_reference(config.variant) {
        if let Some(p) = pairs.iter().find(|p| p.reference.is_none()) {
            return Err(Error::VariantMismatch {
                model: "paired".into(),
                data: format!("pair `{}` without reference", p.id()),
            });
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let schedule = config.paces();
    let budget = allocate_epochs(config.total_epochs, schedule.len())?;
    let mut model = Network::<f32>::new(&model_config, config.seed)?;
    let mut optimizer = Adam::new(config.optimizer.clone());
    let mut history = TrainHistory::default();
    let all: Vec<&PairedSample> = pairs.iter().collect();

    for (pace, (&fraction, &epochs)) in schedule.fractions.iter().zip(&budget).enumerate() {
        if pace > 0 && config.reinit_per_pace {
            model = Network::new(&model_config, config.seed)?;
        }
        if config.reset_optimizer_per_pace {
            optimizer.reset();
        }
        let losses = inference_losses(&model, &all, config.batch_size)?;
        let scored: Vec<ScoredSample> = pairs
            .iter()
            .zip(&losses)
            .map(|(p, &loss)| ScoredSample {
                sample_id: p.id().to_string(),
                class: p.label,
                loss,
            })
            .collect();
        let state = select_pace(&scored, fraction, pace)?;
        let selected: Vec<&PairedSample> = pairs
            .iter()
            .zip(&state.selection)
            .filter(|(_, &v)| v)
            .map(|(p, _)| p)
            .collect();
        let per_class: Vec<usize> = (0..n_classes)
            .map(|k| state.selected_per_class().get(&k).copied().unwrap_or(0))
            .collect();
        info!(
            "pace {pace}: fraction {fraction:.2}, {} of {} selected, {epochs} epochs",
            selected.len(),
            pairs.len()
        );
        let start = model.checksum();
        run_pace(
            &mut RunContext {
                model: &mut model,
                optimizer: &mut optimizer,
                history: &mut history,
            },
            &selected,
            epochs,
            pace,
            &per_class,
            config,
        )?;
        history.checksums.push((start, model.checksum()));
        if let Some(dir) = out_dir {
            let log = dir.join(format!("selection_pace{pace}.csv"));
            state.write_log(fs::File::create(&log).map_err(|e| Error::io(&log, e))?)?;
            if config.checkpoint_every_pace {
                let ckpt = dir.join(format!("pace{pace}.ckpt"));
                model.save(&ckpt)?;
                history.checkpoints.push(ckpt);
            }
        }
        history.paces.push(state);
    }

    if let Some(dir) = out_dir {
        history.write_csv(&dir.join("history.csv"))?;
        let ckpt = dir.join("final.ckpt");
        model.save(&ckpt)?;
        history.checkpoints.push(ckpt);
        let meta = serde_json::json!({
            "version": VERSION,
            "seed": config.seed,
            "augmentation_seed": config.augmentation.seed,
            "n_classes": n_classes,
            "n_pairs": pairs.len(),
            "epoch_allocation": budget,
            "config": config,
        });
        let path = dir.join("run_meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((model, history))
}
