//! Backbone(s) plus classifier, wired per variant.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{read_checkpoint, write_checkpoint};
use crate::backbone::{forward_basic, forward_dual, images_to_act, Backbone, BackboneConfig, Tape, Variant};
use crate::datamodel::{ClassIndex, Image, PairedSample};
use crate::error::{Error, Result};
use crate::ndf_head::{head_backward, logits_batch, loss_and_dlogits, ndf_batch, softmax, ClassifierParams};
use crate::rng;
use crate::tensor::{Act, Param, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub n_classes: usize,
    #[serde(default)]
    pub classifier_bias: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.backbone.variant
    }
}

/// Network input for one mini-batch.
pub struct PairBatch<T> {
    pub targets: Act<T>,
    pub references: Option<Act<T>>,
}

impl<T: Real> PairBatch<T> {
    pub fn from_images(targets: &[&Image], references: Option<&[&Image]>, cfg: &BackboneConfig) -> Result<Self> {
        let targets_act = images_to_act(targets, cfg)?;
        let references = match (cfg.variant, references) {
            (Variant::Paired, Some(r)) => Some(images_to_act(r, cfg)?),
            (Variant::Paired, None) => {
                return Err(Error::VariantMismatch {
                    model: "paired".into(),
                    data: "reference-free".into(),
                })
            }
            _ => None,
        };
        Ok(Self {
            targets: targets_act,
            references,
        })
    }

    /// Builds a batch from pairs whose images are already decoded.
    pub fn from_pairs(pairs: &[&PairedSample], cfg: &BackboneConfig) -> Result<Self> {
        let mut targets = Vec::with_capacity(pairs.len());
        let mut refs = Vec::with_capacity(pairs.len());
        let mut all_refs = true;
        for p in pairs {
            targets.push(
                p.target
                    .image
                    .memory()
                    .ok_or_else(|| Error::Config(format!("image of `{}` is not loaded", p.id())))?
                    .as_ref(),
            );
            match p.reference.as_ref().and_then(|r| r.image.memory()) {
                Some(img) => refs.push(img.as_ref()),
                None => all_refs = false,
            }
        }
        Self::from_images(&targets, all_refs.then_some(refs.as_slice()), cfg)
    }

    pub fn len(&self) -> usize {
        self.targets.n
    }

    pub fn is_empty(&self) -> bool {
        self.targets.n == 0
    }
}

enum Tapes<T> {
    Single(Tape<T>),
    Dual(Tape<T>, Tape<T>),
}

/// NDFs (`M × D`) plus what backpropagation needs.
pub struct Forward<T> {
    pub ndf: Vec<T>,
    pub v_tar: Vec<T>,
    pub v_ref: Option<Vec<T>>,
    tapes: Tapes<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub expression: Backbone<T>,
    /// Neutral-information network of the dual variant.
    pub neutral: Option<Backbone<T>>,
    pub head: ClassifierParams<T>,
}

impl<T: Real> Network<T> {
    /// Deterministic initialization. The dual variant starts both networks from
    /// the same weights, so their features coincide before training.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let expression = Backbone::new(&config.backbone, seed)?;
        let neutral = (config.variant() == Variant::Dual).then(|| expression.clone());
        let mut r = rng::stream(seed, &[0xC1A5]);
        let head = ClassifierParams::init(
            config.n_classes,
            config.backbone.feature_dim,
            config.classifier_bias,
            &mut r,
        );
        Ok(Self {
            config: config.clone(),
            expression,
            neutral,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    pub fn forward(&self, batch: &PairBatch<T>, training: bool) -> Result<Forward<T>> {
        match self.variant() {
            Variant::Paired | Variant::Baseline => {
                let f = forward_basic(&self.expression, &batch.targets, batch.references.as_ref(), training)?;
                Ok(Forward {
                    ndf: ndf_batch(&f.v_tar, f.v_ref.as_deref()),
                    v_tar: f.v_tar,
                    v_ref: f.v_ref,
                    tapes: Tapes::Single(f.tape),
                })
            }
            Variant::Dual => {
                let neutral = self.neutral.as_ref().expect("dual network");
                let f = forward_dual(&self.expression, neutral, &batch.targets, training)?;
                Ok(Forward {
                    ndf: ndf_batch(&f.v_tar, Some(&f.v_ref)),
                    v_tar: f.v_tar,
                    v_ref: Some(f.v_ref),
                    tapes: Tapes::Dual(f.expression_tape, f.neutral_tape),
                })
            }
        }
    }

    /// Inference-mode class probabilities, one row per sample.
    pub fn predict(&self, batch: &PairBatch<T>) -> Result<Vec<Vec<f64>>> {
        let f = self.forward(batch, false)?;
        let logits = logits_batch(&f.ndf, batch.len(), &self.head);
        Ok(logits
            .chunks(self.head.k)
            .map(|row| softmax(row).into_iter().map(|p| p.as_f64()).collect())
            .collect())
    }

    /// Inference-mode per-sample cross-entropy.
    pub fn losses(&self, batch: &PairBatch<T>, labels: &[ClassIndex]) -> Result<Vec<f64>> {
        let f = self.forward(batch, false)?;
        let logits = logits_batch(&f.ndf, batch.len(), &self.head);
        Ok(loss_and_dlogits(&logits, self.head.k, labels, T::one()).0)
    }

    /// Training-mode forward and backward of the mean batch loss. Gradients
    /// accumulate into the parameters; running statistics are updated.
    pub fn train_batch(&mut self, batch: &PairBatch<T>, labels: &[ClassIndex]) -> Result<Vec<f64>> {
        let m = batch.len();
        if m == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != m || labels.iter().any(|&l| l >= self.head.k) {
            return Err(Error::Shape("labels do not match the batch".into()));
        }
        let f = self.forward(batch, true)?;
        let logits = logits_batch(&f.ndf, m, &self.head);
        let scale = T::one() / T::from_usize(m).unwrap();
        let (losses, dlogits) = loss_and_dlogits(&logits, self.head.k, labels, scale);
        let dndf = head_backward(&mut self.head, &f.ndf, &dlogits, m);
        let neg: Vec<T> = dndf.iter().map(|&g| -g).collect();
        match (&f.tapes, self.variant()) {
            (Tapes::Single(tape), Variant::Paired) => {
                let mut both = dndf;
                both.extend_from_slice(&neg);
                self.expression.backward(tape, &both);
                self.expression.commit_running(tape);
            }
            (Tapes::Single(tape), _) => {
                self.expression.backward(tape, &dndf);
                self.expression.commit_running(tape);
            }
            (Tapes::Dual(te, tn), _) => {
                self.expression.backward(te, &dndf);
                self.expression.commit_running(te);
                let neutral = self.neutral.as_mut().expect("dual network");
                neutral.backward(tn, &neg);
                neutral.commit_running(tn);
            }
        }
        Ok(losses)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.expression.params_mut();
        if let Some(n) = self.neutral.as_mut() {
            out.extend(n.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = self
            .expression
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("expression.{n}"), t))
            .collect();
        if let Some(nn) = &self.neutral {
            out.extend(nn.named_tensors().into_iter().map(|(n, t)| (format!("neutral.{n}"), t)));
        }
        out.push(("head.theta".into(), self.head.theta.value.as_slice()));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), b.value.as_slice()));
        }
        out
    }

    /// Hash over the bit patterns of every weight and running statistic.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named_tensors() {
            h.write(name.as_bytes());
            for v in t {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_string(&self.config)?;
        write_checkpoint(w, &json, &self.named_tensors()).map_err(|e| Error::io("checkpoint", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let raw = read_checkpoint(r)?;
        let config: ModelConfig = serde_json::from_str(&raw.config_json)?;
        let mut net = Self::new(&config, 0)?;
        let mut stored: BTreeMap<String, Vec<f32>> = raw.tensors.into_iter().collect();
        let mut assign = |name: String, dst: &mut Vec<T>| -> Result<()> {
            let src = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong length")));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::lit(s as f64);
            }
            Ok(())
        };
        for (n, t) in net.expression.named_tensors_mut() {
            assign(format!("expression.{n}"), t)?;
        }
        if let Some(nn) = net.neutral.as_mut() {
            for (n, t) in nn.named_tensors_mut() {
                assign(format!("neutral.{n}"), t)?;
            }
        }
        assign("head.theta".into(), &mut net.head.theta.value)?;
        if let Some(b) = net.head.bias.as_mut() {
            assign("head.bias".into(), &mut b.value)?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(f))
    }
}
