//! Synthetic paired-expression corpus with known identity/deviation
//! decomposition.
//!
//! Every subject owns a fixed random identity image made of signed Gaussian
//! blobs around mid-gray. Every class owns a fixed localized blob pair on a ring
//! around the image center, mirrored left to right; blobs of different classes
//! have disjoint support.
//! A neutral frame is `identity + noise`, a peak frame of class `k` is
//! `identity + deviation_k + noise`, clipped to `[0, 1]`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestRow};
use crate::datamodel::{ClassIndex, FrameRole, Image, ImageRef, LabelSpace, SampleRecord};
use crate::error::{Error, Result};
use crate::rng;

const IDENTITY_BLOBS: usize = 6;
const GT_MAGIC: &[u8; 8] = b"SPNDGT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub identity_amplitude: f64,
    pub deviation_amplitude: f64,
    pub noise_sigma: f64,
    pub frames_per_subject_per_class: usize,
    pub label_corruption_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            n_classes: 4,
            image_size: 48,
            identity_amplitude: 0.3,
            deviation_amplitude: 0.1,
            noise_sigma: 0.05,
            frames_per_subject_per_class: 3,
            label_corruption_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.n_subjects == 0 || self.frames_per_subject_per_class == 0 {
            return bad("n_subjects and frames_per_subject_per_class must be positive");
        }
        if self.image_size < 4 {
            return bad("image_size must be >= 4");
        }
        if !(self.identity_amplitude >= 0.0 && self.deviation_amplitude >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("amplitudes and noise sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.label_corruption_rate) {
            return bad("label_corruption_rate must lie in [0,1]");
        }
        Ok(())
    }
}

/// The factors a synthetic frame was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGroundTruth {
    pub sample_id: String,
    pub identity_component: Vec<f32>,
    pub deviation_component: Vec<f32>,
    pub noise: Vec<f32>,
    /// `None` for neutral frames.
    pub true_label: Option<ClassIndex>,
    /// Label written to the manifest; differs from `true_label` for corrupted frames.
    pub observed_label: Option<ClassIndex>,
}

impl SyntheticGroundTruth {
    pub fn is_corrupted(&self) -> bool {
        self.true_label != self.observed_label
    }

    pub fn compose(&self) -> Vec<f32> {
        self.identity_component
            .iter()
            .zip(&self.deviation_component)
            .zip(&self.noise)
            .map(|((i, d), n)| (i + d + n).clamp(0.0, 1.0))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub labels: LabelSpace,
    pub records: Vec<SampleRecord>,
    pub ground_truth: Vec<SyntheticGroundTruth>,
    pub manifest: Manifest,
}

impl SyntheticDataset {
    pub fn truth_of(&self, sample_id: &str) -> Option<&SyntheticGroundTruth> {
        self.ground_truth.iter().find(|g| g.sample_id == sample_id)
    }

    /// Writes PNGs, `manifest.csv`, `ground_truth.bin` and `gen_config.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for r in &self.records {
            if let ImageRef::Memory(img) = &r.image {
                super::save_png(img, &images.join(format!("{}.png", r.sample_id)))?;
            }
        }
        self.manifest.write(&dir.join("manifest.csv"))?;
        let gt_path = dir.join("ground_truth.bin");
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&gt_path).map_err(|e| Error::io(&gt_path, e))?,
        );
        let s = self.config.image_size;
        write_ground_truth(&mut f, &self.ground_truth, s, s, 1).map_err(|e| Error::io(&gt_path, e))?;
        f.flush().map_err(|e| Error::io(&gt_path, e))?;
        let cfg_path = dir.join("gen_config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let labels_path = dir.join("labels.json");
        std::fs::write(&labels_path, serde_json::to_string(self.labels.names())?)
            .map_err(|e| Error::io(&labels_path, e))?;
        Ok(())
    }
}

fn gaussian_blob(size: usize, cy: f64, cx: f64, sigma: f64, radius: f64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= radius * radius {
                out[y * size + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

/// Class deviation patterns: unit-peak blob pairs with pairwise disjoint
/// support. Each pair is mirror-symmetric about the vertical axis so a
/// horizontal flip preserves the class.
pub fn deviation_patterns(size: usize, n_classes: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let ring = 0.3 * s;
    let sigma = s / 12.0;
    let step = PI / n_classes as f64;
    let neighbor = 2.0 * ring * (step / 2.0).sin();
    let radius = (2.5 * sigma).min(0.49 * neighbor);
    (0..n_classes)
        .map(|k| {
            let angle = -PI / 2.0 + (k as f64 + 0.5) * step;
            let (dy, dx) = (ring * angle.sin(), ring * angle.cos());
            let right = gaussian_blob(size, center + dy, center + dx, sigma, radius);
            let left = gaussian_blob(size, center + dy, center - dx, sigma, radius);
            right.iter().zip(left).map(|(a, b)| a + b).collect()
        })
        .collect()
}

fn identity_pattern(size: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let mut field = vec![0.0; size * size];
    for _ in 0..IDENTITY_BLOBS {
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let sigma = rng.random_range(s / 16.0..s / 6.0);
        let weight = rng.random_range(-1.0..1.0);
        for (f, b) in field.iter_mut().zip(gaussian_blob(size, cy, cx, sigma, f64::INFINITY)) {
            *f += weight * b;
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    field.iter().map(|v| 0.5 + amplitude * v / peak).collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let size = config.image_size;
    let npx = size * size;
    let k = config.n_classes;
    let labels = LabelSpace::numbered(k)?;
    let deviations: Vec<Vec<f32>> = deviation_patterns(size, k)
        .into_iter()
        .map(|p| p.iter().map(|v| (v * config.deviation_amplitude) as f32).collect())
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("sigma checked");

    let mut truths = Vec::new();
    for subj in 0..config.n_subjects {
        let mut id_rng = rng::stream(config.seed, &[0x1D, subj as u64]);
        let identity: Vec<f32> = identity_pattern(size, config.identity_amplitude, &mut id_rng)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let mut noise_rng = rng::stream(config.seed, &[0x40, subj as u64]);
        let mut draw_noise = || -> Vec<f32> {
            if config.noise_sigma == 0.0 {
                vec![0.0; npx]
            } else {
                (0..npx).map(|_| noise.sample(&mut noise_rng) as f32).collect()
            }
        };
        let subject = format!("S{subj:03}");
        truths.push(SyntheticGroundTruth {
            sample_id: format!("{subject}_n00"),
            identity_component: identity.clone(),
            deviation_component: vec![0.0; npx],
            noise: draw_noise(),
            true_label: None,
            observed_label: None,
        });
        for class in 0..k {
            for frame in 0..config.frames_per_subject_per_class {
                truths.push(SyntheticGroundTruth {
                    sample_id: format!("{subject}_c{class}_f{frame:02}"),
                    identity_component: identity.clone(),
                    deviation_component: deviations[class].clone(),
                    noise: draw_noise(),
                    true_label: Some(class),
                    observed_label: Some(class),
                });
            }
        }
    }

    let mut peaks: Vec<usize> = (0..truths.len()).filter(|&i| truths[i].true_label.is_some()).collect();
    let n_corrupt = (config.label_corruption_rate * peaks.len() as f64).round() as usize;
    let mut crng = rng::stream(config.seed, &[0xC0]);
    peaks.shuffle(&mut crng);
    for &i in peaks.iter().take(n_corrupt) {
        let truth = truths[i].true_label.expect("peak");
        let shift = crng.random_range(1..k);
        truths[i].observed_label = Some((truth + shift) % k);
    }

    let mut records = Vec::with_capacity(truths.len());
    let mut rows = Vec::with_capacity(truths.len());
    for gt in &truths {
        let subject = gt.sample_id[..4].to_string();
        let role = if gt.true_label.is_some() {
            FrameRole::Peak
        } else {
            FrameRole::Neutral
        };
        let img = Image::new(size, size, 1, gt.compose())?;
        records.push(SampleRecord {
            sample_id: gt.sample_id.clone(),
            subject_id: subject.clone(),
            sequence_id: format!("{subject}_seq"),
            frame_role: role,
            label: gt.observed_label,
            image: ImageRef::Memory(Arc::new(img)),
        });
        rows.push(ManifestRow {
            sample_id: gt.sample_id.clone(),
            subject_id: subject.clone(),
            sequence_id: format!("{subject}_seq"),
            frame_role: role,
            label: gt
                .observed_label
                .map(|l| labels.name(l).to_string())
                .unwrap_or_default(),
            path: format!("images/{}.png", gt.sample_id),
        });
    }

    Ok(SyntheticDataset {
        config: config.clone(),
        labels,
        records,
        ground_truth: truths,
        manifest: Manifest { rows },
    })
}

/// Binary layout (little endian):
/// magic `SPNDGT01`, `u32` count, `u32` height, `u32` width, `u32` channels,
/// then per record: `u32` id length, id bytes, `i32` true label (-1 = none),
/// `i32` observed label (-1 = none), identity, deviation and noise as
/// `height·width·channels` `f32` values each.
pub fn write_ground_truth<W: Write>(
    w: &mut W,
    truths: &[SyntheticGroundTruth],
    height: usize,
    width: usize,
    channels: usize,
) -> std::io::Result<()> {
    w.write_all(GT_MAGIC)?;
    for v in [truths.len(), height, width, channels] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    let label = |l: Option<ClassIndex>| l.map(|v| v as i32).unwrap_or(-1);
    for gt in truths {
        w.write_u32::<LittleEndian>(gt.sample_id.len() as u32)?;
        w.write_all(gt.sample_id.as_bytes())?;
        w.write_i32::<LittleEndian>(label(gt.true_label))?;
        w.write_i32::<LittleEndian>(label(gt.observed_label))?;
        for arr in [&gt.identity_component, &gt.deviation_component, &gt.noise] {
            for &v in arr.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

pub fn read_ground_truth<R: Read>(r: &mut R) -> Result<Vec<SyntheticGroundTruth>> {
    let bad = |m: &str| Error::Checkpoint(format!("ground truth: {m}"));
    let io = |e: std::io::Error| bad(&e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != GT_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let h = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let c = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let len = h * w * c;
    let label = |v: i32| (v >= 0).then_some(v as usize);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut id = vec![0u8; n];
        r.read_exact(&mut id).map_err(io)?;
        let true_label = label(r.read_i32::<LittleEndian>().map_err(io)?);
        let observed_label = label(r.read_i32::<LittleEndian>().map_err(io)?);
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut a = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut a).map_err(io)?;
            arrays.push(a);
        }
        let noise = arrays.pop().unwrap();
        let deviation_component = arrays.pop().unwrap();
        let identity_component = arrays.pop().unwrap();
        out.push(SyntheticGroundTruth {
            sample_id: String::from_utf8(id).map_err(|_| bad("sample id is not utf-8"))?,
            identity_component,
            deviation_component,
            noise,
            true_label,
            observed_label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::{build_pairs, PairingPolicy};

    fn small(noise: f64, corruption: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 5,
            n_classes: 3,
            image_size: 24,
            noise_sigma: noise,
            label_corruption_rate: corruption,
            frames_per_subject_per_class: 2,
            seed: 17,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn record_counts() {
        let cfg = SyntheticConfig {
            n_subjects: 20,
            n_classes: 4,
            frames_per_subject_per_class: 3,
            image_size: 16,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let peaks = ds.records.iter().filter(|r| r.frame_role == FrameRole::Peak).count();
        let neutrals = ds.records.iter().filter(|r| r.frame_role == FrameRole::Neutral).count();
        assert_eq!((peaks, neutrals), (240, 20));
        assert_eq!(build_pairs(&ds.records, PairingPolicy::FirstNeutralXPeaks).unwrap().len(), 240);
    }

    #[test]
    fn noiseless_peak_minus_neutral_is_the_deviation() {
        let ds = generate_synthetic(&small(0.0, 0.2)).unwrap();
        let pairs = build_pairs(&ds.records, PairingPolicy::FirstNeutralXPeaks).unwrap();
        let patterns = deviation_patterns(24, 3);
        for p in &pairs {
            let t = p.target.image.memory().unwrap();
            let r = p.reference.as_ref().unwrap().image.memory().unwrap();
            let truth = ds.truth_of(p.id()).unwrap();
            let class = truth.true_label.unwrap();
            for ((a, b), d) in t.data.iter().zip(&r.data).zip(&patterns[class]) {
                assert!(((a - b) as f64 - d * 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_corruption_keeps_true_labels() {
        let ds = generate_synthetic(&small(0.05, 0.0)).unwrap();
        assert!(ds.ground_truth.iter().all(|g| !g.is_corrupted()));
        for (r, g) in ds.records.iter().zip(&ds.ground_truth) {
            assert_eq!(r.label, g.true_label);
        }
    }

    #[test]
    fn corruption_rate_is_exact_and_labels_are_wrong() {
        let ds = generate_synthetic(&small(0.05, 0.2)).unwrap();
        let peaks: Vec<_> = ds.ground_truth.iter().filter(|g| g.true_label.is_some()).collect();
        let bad = peaks.iter().filter(|g| g.is_corrupted()).count();
        assert_eq!(bad, (0.2 * peaks.len() as f64).round() as usize);
    }

    #[test]
    fn generation_is_reproducible_and_composes() {
        let a = generate_synthetic(&small(0.05, 0.2)).unwrap();
        let b = generate_synthetic(&small(0.05, 0.2)).unwrap();
        assert_eq!(a.ground_truth, b.ground_truth);
        for (r, g) in a.records.iter().zip(&a.ground_truth) {
            assert_eq!(r.image.memory().unwrap().data, g.compose());
        }
    }

    #[test]
    fn class_patterns_have_disjoint_support() {
        for k in [2, 4, 7] {
            let pats = deviation_patterns(48, k);
            for i in 0..k {
                for j in i + 1..k {
                    let dot: f64 = pats[i].iter().zip(&pats[j]).map(|(a, b)| a * b).sum();
                    assert_eq!(dot, 0.0, "classes {i} and {j} of {k} overlap");
                }
            }
        }
    }

    #[test]
    fn class_patterns_survive_horizontal_flip() {
        let n = 48;
        for (k, p) in deviation_patterns(n, 4).iter().enumerate() {
            for y in 0..n {
                for x in 0..n {
                    let d = (p[y * n + x] - p[y * n + (n - 1 - x)]).abs();
                    assert!(d < 1e-12, "class {k} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn ground_truth_blob_roundtrip() {
        let ds = generate_synthetic(&small(0.05, 0.2)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &ds.ground_truth, 24, 24, 1).unwrap();
        let back = read_ground_truth(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds.ground_truth);
    }
}
