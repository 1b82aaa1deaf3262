//! Per-class self-paced sample selection.
//!
//! For fixed model parameters the self-paced objective
//! `Σ_k Σ_{i∈N_k} v_{k,i}·l_{k,i} − Σ_k λ_k Σ_{i∈N_k} v_{k,i}` is minimized
//! by `v_{k,i} = [l_{k,i} < λ_k]`. Thresholds are not free hyperparameters:
//! each pace places `λ_k` so that exactly `ceil(fraction·|N_k|)` samples of
//! class `k` fall strictly below it.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::ClassIndex;
use crate::error::{Error, Result};

/// Largest instance [`brute_force_weights`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Slack subtracted before rounding a quota up, so `0.6 · 10` is 6 and not 7.
const QUOTA_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaceSchedule {
    pub fractions: Vec<f64>,
}

impl Default for PaceSchedule {
    fn default() -> Self {
        pace_schedule(0.5, 0.1).expect("valid defaults")
    }
}

impl PaceSchedule {
    pub fn single() -> Self {
        Self { fractions: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.fractions.is_empty()
            && self.fractions.windows(2).all(|w| w[0] < w[1])
            && self.fractions.iter().all(|&f| f > 0.0 && f <= 1.0)
            && *self.fractions.last().unwrap() == 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "pace fractions must be strictly increasing in (0,1] and end at 1.0".into(),
            ))
        }
    }
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// `[start, start+step, …]` capped with a final `1.0`.
pub fn pace_schedule(start: f64, step: f64) -> Result<PaceSchedule> {
    if !(start > 0.0 && start <= 1.0) || !(step > 0.0) {
        return Err(Error::Config(format!(
            "pace schedule needs 0 < start <= 1 and step > 0, got start={start}, step={step}"
        )));
    }
    let mut fractions = Vec::new();
    let mut i = 0u32;
    loop {
        let f = round12(start + step * i as f64);
        if f >= 1.0 {
            break;
        }
        fractions.push(f);
        i += 1;
    }
    fractions.push(1.0);
    Ok(PaceSchedule { fractions })
}

pub fn quota(fraction: f64, class_size: usize) -> usize {
    ((fraction * class_size as f64 - QUOTA_SLACK).ceil().max(0.0) as usize).min(class_size)
}

/// One sample's standing in the current pace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub class: ClassIndex,
    pub loss: f64,
}

/// Makes equal losses strictly increasing in insertion order by nudging later
/// duplicates up to the next representable value. Order between distinct
/// losses is preserved.
pub fn break_ties(losses: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut out = losses.to_vec();
    for w in 1..order.len() {
        let (prev, cur) = (order[w - 1], order[w]);
        if out[cur] <= out[prev] {
            out[cur] = out[prev].next_up();
        }
    }
    out
}

fn threshold(sorted: &[f64], q: usize) -> f64 {
    let last = sorted[q - 1];
    let delta = 1e-6 * (1.0 + last.abs());
    if q == sorted.len() || sorted[q] == last {
        return last + delta;
    }
    let mid = 0.5 * (last + sorted[q]);
    if mid > last {
        mid
    } else {
        last.next_up()
    }
}

/// Thresholds admitting `ceil(fraction·|N_k|)` samples of every class.
///
/// `λ_k` is the midpoint between the quota-th and the next smallest loss of
/// class `k`. Tied losses are first split in insertion order by
/// [`break_ties`], so the quota is met exactly even when a tie straddles it.
pub fn pace_lambdas(
    per_class_losses: &BTreeMap<ClassIndex, Vec<f64>>,
    fraction: f64,
) -> Result<BTreeMap<ClassIndex, f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("pace fraction {fraction} outside (0,1]")));
    }
    let mut out = BTreeMap::new();
    for (&class, losses) in per_class_losses {
        if losses.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        if losses.iter().any(|l| l.is_nan()) {
            return Err(Error::NonFinite("pace_lambdas"));
        }
        let mut sorted = break_ties(losses);
        sorted.sort_by(f64::total_cmp);
        out.insert(class, threshold(&sorted, quota(fraction, losses.len())));
    }
    Ok(out)
}

fn lambda_of(s: &ScoredSample, lambdas: &BTreeMap<ClassIndex, f64>) -> Result<f64> {
    lambdas.get(&s.class).copied().ok_or_else(|| Error::MissingLambda {
        sample: s.sample_id.clone(),
        class: s.class,
    })
}

/// Closed-form minimizer: `v = 1` iff `loss < λ_class`.
pub fn solve_weights(samples: &[ScoredSample], lambdas: &BTreeMap<ClassIndex, f64>) -> Result<Vec<bool>> {
    samples
        .iter()
        .map(|s| Ok(s.loss < lambda_of(s, lambdas)?))
        .collect()
}

/// `Σ v·l − Σ λ·v`, missing thresholds counting as zero.
pub fn spl_objective(samples: &[ScoredSample], selection: &[bool], lambdas: &BTreeMap<ClassIndex, f64>) -> f64 {
    let mut weighted_loss = 0.0;
    let mut reward = 0.0;
    for (s, &v) in samples.iter().zip(selection) {
        if v {
            weighted_loss += s.loss;
            reward += lambdas.get(&s.class).copied().unwrap_or(0.0);
        }
    }
    weighted_loss - reward
}

/// Exhaustive minimizer of the self-paced objective over all `2^n` binary
/// vectors. Among equal objective values the vector with fewer selections
/// wins, so a loss equal to its threshold stays unselected.
pub fn brute_force_weights(samples: &[ScoredSample], lambdas: &BTreeMap<ClassIndex, f64>) -> Result<Vec<bool>> {
    let n = samples.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            max: BRUTE_FORCE_LIMIT,
            got: n,
        });
    }
    let terms: Vec<f64> = samples
        .iter()
        .map(|s| Ok(s.loss - lambda_of(s, lambdas)?))
        .collect::<Result<_>>()?;
    let mut best_mask = 0u32;
    let mut best_value = 0.0f64;
    let mut best_count = 0u32;
    for mask in 1u32..(1u32 << n) {
        let mut value = 0.0;
        for (i, t) in terms.iter().enumerate() {
            if mask & (1 << i) != 0 {
                value += t;
            }
        }
        let count = mask.count_ones();
        if value < best_value || (value == best_value && count < best_count) {
            best_mask = mask;
            best_value = value;
            best_count = count;
        }
    }
    Ok((0..n).map(|i| best_mask & (1 << i) != 0).collect())
}

/// Selection state of one pace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaceState {
    pub pace_index: usize,
    pub fraction: f64,
    pub lambdas: BTreeMap<ClassIndex, f64>,
    /// Losses as measured, before tie splitting.
    pub samples: Vec<ScoredSample>,
    pub selection: Vec<bool>,
}

impl PaceState {
    pub fn selected_count(&self) -> usize {
        self.selection.iter().filter(|&&v| v).count()
    }

    pub fn selected_per_class(&self) -> BTreeMap<ClassIndex, usize> {
        let mut out = BTreeMap::new();
        for (s, &v) in self.samples.iter().zip(&self.selection) {
            *out.entry(s.class).or_insert(0) += usize::from(v);
        }
        out
    }

    pub fn class_sizes(&self) -> BTreeMap<ClassIndex, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.class).or_insert(0) += 1;
        }
        out
    }

    pub fn is_selected(&self, sample_id: &str) -> Option<bool> {
        self.samples
            .iter()
            .position(|s| s.sample_id == sample_id)
            .map(|i| self.selection[i])
    }

    /// CSV with header `pace,sample_id,class,loss,selected`.
    pub fn write_log<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["pace", "sample_id", "class", "loss", "selected"])?;
        for (s, &v) in self.samples.iter().zip(&self.selection) {
            wr.write_record([
                self.pace_index.to_string(),
                s.sample_id.clone(),
                s.class.to_string(),
                format!("{:.9}", s.loss),
                u8::from(v).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("selection log", e))?;
        Ok(())
    }
}

/// Thresholds and weights for one pace: ties are split per class in
/// insertion order, `λ` comes from [`pace_lambdas`] and `v` from
/// [`solve_weights`] on the tie-split losses.
pub fn select_pace(samples: &[ScoredSample], fraction: f64, pace_index: usize) -> Result<PaceState> {
    let mut by_class: BTreeMap<ClassIndex, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let mut effective = samples.to_vec();
    let mut per_class = BTreeMap::new();
    for (&class, idx) in &by_class {
        let raw: Vec<f64> = idx.iter().map(|&i| samples[i].loss).collect();
        let split = break_ties(&raw);
        for (&i, &l) in idx.iter().zip(&split) {
            effective[i].loss = l;
        }
        per_class.insert(class, split);
    }
    let lambdas = pace_lambdas(&per_class, fraction)?;
    let selection = solve_weights(&effective, &lambdas)?;
    Ok(PaceState {
        pace_index,
        fraction,
        lambdas,
        samples: samples.to_vec(),
        selection,
    })
}
