//! Manifest ingestion, pairing, subject-independent folds, augmentation and
//! the synthetic confound generator.

mod augment;
mod synthetic;

pub use augment::{augment_images, augment_pair, AugmentOp, AugmentationSpec};
pub use synthetic::{
    generate_synthetic, read_ground_truth, write_ground_truth, SyntheticConfig, SyntheticDataset,
    SyntheticGroundTruth,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    FoldPlan, FrameRole, Image, ImageRef, LabelSpace, PairedSample, SampleRecord,
};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_HEADER: [&str; 6] = [
    "sample_id",
    "subject_id",
    "sequence_id",
    "frame_role",
    "label",
    "path",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub subject_id: String,
    pub sequence_id: String,
    pub frame_role: FrameRole,
    pub label: String,
    pub path: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record(MANIFEST_HEADER)?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reads a manifest CSV. Image paths are resolved against the manifest's directory.
pub fn parse_manifest(path: &Path, labels: &LabelSpace) -> Result<Vec<SampleRecord>> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_reader(file, &root, labels)
}

pub fn parse_manifest_reader<R: std::io::Read>(
    reader: R,
    root: &Path,
    labels: &LabelSpace,
) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 0,
            message: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Row 1 is the first data row.
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(Error::Manifest {
                row,
                message: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
        let sample_id = field(0);
        let subject_id = field(1);
        if sample_id.is_empty() || subject_id.is_empty() {
            return Err(Error::Manifest {
                row,
                message: "sample_id and subject_id must be nonempty".into(),
            });
        }
        if !seen.insert(sample_id.clone()) {
            return Err(Error::Manifest {
                row,
                message: format!("duplicate sample_id `{sample_id}`"),
            });
        }
        let frame_role: FrameRole = field(3)
            .parse()
            .map_err(|message| Error::Manifest { row, message })?;
        let label_name = field(4);
        let label = if label_name.is_empty() {
            if frame_role != FrameRole::Neutral {
                return Err(Error::Manifest {
                    row,
                    message: format!("{} frame without a label", frame_role.as_str()),
                });
            }
            None
        } else {
            Some(
                labels
                    .index_of(&label_name)
                    .ok_or_else(|| Error::UnknownLabel {
                        row,
                        label: label_name.clone(),
                    })?,
            )
        };
        let rel = field(5);
        out.push(SampleRecord {
            sample_id,
            subject_id,
            sequence_id: field(2),
            frame_role,
            label,
            image: ImageRef::Path(root.join(rel)),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// The first neutral frame of each sequence pairs with every peak frame.
    FirstNeutralXPeaks,
    /// Each labeled frame stands alone (dual and baseline variants).
    SelfOnly,
}

pub fn build_pairs(records: &[SampleRecord], policy: PairingPolicy) -> Result<Vec<PairedSample>> {
    match policy {
        PairingPolicy::SelfOnly => Ok(records
            .iter()
            .filter(|r| r.frame_role != FrameRole::Neutral)
            .filter_map(|r| {
                r.label.map(|label| PairedSample {
                    target: r.clone(),
                    reference: None,
                    label,
                    subject_id: r.subject_id.clone(),
                })
            })
            .collect()),
        PairingPolicy::FirstNeutralXPeaks => {
            let mut groups: BTreeMap<(&str, &str), Vec<&SampleRecord>> = BTreeMap::new();
            for r in records {
                groups
                    .entry((r.subject_id.as_str(), r.sequence_id.as_str()))
                    .or_default()
                    .push(r);
            }
            let mut pairs = Vec::new();
            for ((subject, sequence), members) in groups {
                let mut peaks: Vec<&SampleRecord> = members
                    .iter()
                    .copied()
                    .filter(|r| r.frame_role == FrameRole::Peak)
                    .collect();
                if peaks.is_empty() {
                    continue;
                }
                peaks.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
                let neutral = members
                    .iter()
                    .copied()
                    .filter(|r| r.frame_role == FrameRole::Neutral)
                    .min_by(|a, b| a.sample_id.cmp(&b.sample_id))
                    .ok_or_else(|| Error::MissingNeutral(format!("{subject}/{sequence}")))?;
                for p in peaks {
                    let label = p.label.ok_or_else(|| Error::Manifest {
                        row: 0,
                        message: format!("peak `{}` has no label", p.sample_id),
                    })?;
                    pairs.push(PairedSample {
                        target: p.clone(),
                        reference: Some(neutral.clone()),
                        label,
                        subject_id: subject.to_string(),
                    });
                }
            }
            Ok(pairs)
        }
    }
}

/// Seeded shuffle of the distinct subjects, then round-robin assignment.
pub fn make_folds(pairs: &[PairedSample], k: usize, seed: u64) -> Result<FoldPlan> {
    let subjects: BTreeSet<&str> = pairs.iter().map(|p| p.subject_id.as_str()).collect();
    if k == 0 || k > subjects.len() {
        return Err(Error::TooManyFolds {
            folds: k,
            subjects: subjects.len(),
        });
    }
    let mut order: Vec<&str> = subjects.into_iter().collect();
    order.shuffle(&mut rng::stream(seed, &[0xF01D]));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignment })
}

/// Decodes an image file, resizes it bilinearly to `size × size` and converts
/// it to `channels` (1 or 3) channels in `[0, 1]`.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let data = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Image::new(size, size, channels, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(source)) => Err(Error::Image {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(Error::Shape("image buffer size".into())),
    }
}

/// Replaces every path-backed image with its decoded, resized pixels.
pub fn load_images(records: &mut [SampleRecord], size: usize, channels: usize) -> Result<()> {
    let mut cache: BTreeMap<PathBuf, Arc<Image>> = BTreeMap::new();
    for r in records.iter_mut() {
        if let ImageRef::Path(p) = &r.image {
            let img = match cache.get(p) {
                Some(img) => img.clone(),
                None => {
                    let img = Arc::new(load_image(p, size, channels)?);
                    cache.insert(p.clone(), img.clone());
                    img
                }
            };
            r.image = ImageRef::Memory(img);
        }
    }
    Ok(())
}

/// Class names from `<dir>/labels.json`, a JSON array of strings.
pub fn read_labels(dir: &Path) -> Result<LabelSpace> {
    let path = dir.join("labels.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    LabelSpace::new(serde_json::from_str(&text)?)
}

/// Labels from `labels.json`, records from `manifest.csv`, images decoded to
/// `size × size × channels`, then paired.
pub fn load_dataset(
    dir: &Path,
    size: usize,
    channels: usize,
    policy: PairingPolicy,
) -> Result<(LabelSpace, Vec<PairedSample>)> {
    let labels = read_labels(dir)?;
    let mut records = parse_manifest(&dir.join("manifest.csv"), &labels)?;
    load_images(&mut records, size, channels)?;
    let pairs = build_pairs(&records, policy)?;
    Ok((labels, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSpace {
        LabelSpace::new(vec!["anger".into(), "happy".into(), "sad".into()]).unwrap()
    }

    fn parse(text: &str) -> Result<Vec<SampleRecord>> {
        parse_manifest_reader(text.as_bytes(), Path::new("/data"), &labels())
    }

    const HEADER: &str = "sample_id,subject_id,sequence_id,frame_role,label,path\n";

    #[test]
    fn four_row_manifest() {
        let text = format!(
            "{HEADER}a0,S1,q1,neutral,,a0.png\na1,S1,q1,peak,happy,a1.png\n\
             a2,S1,q1,peak,happy,a2.png\na3,S1,q1,peak,happy,a3.png\n"
        );
        let recs = parse(&text).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].label, None);
        assert_eq!(recs[1].label, Some(1));
        match &recs[2].image {
            ImageRef::Path(p) => assert_eq!(p, Path::new("/data/a2.png")),
            _ => panic!("expected path"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let text = format!("{HEADER}a1,S1,q1,peak,joy,a1.png\n");
        match parse(&text) {
            Err(Error::UnknownLabel { row, label }) => {
                assert_eq!(row, 1);
                assert_eq!(label, "joy");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_manifest_is_empty() {
        assert!(parse(HEADER).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_names_row_number() {
        let text = format!("{HEADER}a0,S1,q1,neutral,,a0.png\na1,S1,q1,peak\n");
        match parse(&text) {
            Err(Error::Manifest { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{HEADER}a1,S1,q1,peak,,a1.png\n");
        assert!(matches!(parse(&text), Err(Error::Manifest { row: 1, .. })));
        assert!(parse("id,subject\n").is_err());
    }

    fn seq(subject: &str, seq: &str, neutrals: &[&str], peaks: &[&str]) -> Vec<SampleRecord> {
        let img = Arc::new(Image::filled(2, 2, 1, 0.0));
        let mk = |id: &str, role, label| SampleRecord {
            sample_id: id.into(),
            subject_id: subject.into(),
            sequence_id: seq.into(),
            frame_role: role,
            label,
            image: ImageRef::Memory(img.clone()),
        };
        neutrals
            .iter()
            .map(|id| mk(id, FrameRole::Neutral, None))
            .chain(peaks.iter().map(|id| mk(id, FrameRole::Peak, Some(0))))
            .collect()
    }

    #[test]
    fn first_neutral_pairs_with_each_peak() {
        let recs = seq("S1", "q", &["n2", "n1"], &["p1", "p2", "p3"]);
        let pairs = build_pairs(&recs, PairingPolicy::FirstNeutralXPeaks).unwrap();
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.reference.as_ref().unwrap().sample_id.as_str(), p.id()))
            .collect();
        assert_eq!(got, vec![("n1", "p1"), ("n1", "p2"), ("n1", "p3")]);
    }

    #[test]
    fn sequence_without_neutral_is_an_error() {
        let recs = seq("S1", "q7", &[], &["p1"]);
        match build_pairs(&recs, PairingPolicy::FirstNeutralXPeaks) {
            Err(Error::MissingNeutral(name)) => assert!(name.contains("q7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn self_only_keeps_labeled_frames() {
        let mut recs = seq("S1", "q", &["n"], &["p1", "p2", "p3", "p4", "p5"]);
        recs.retain(|r| r.frame_role == FrameRole::Peak);
        let pairs = build_pairs(&recs, PairingPolicy::SelfOnly).unwrap();
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|p| p.reference.is_none()));
    }

    fn pairs_for_subjects(n: usize) -> Vec<PairedSample> {
        let recs: Vec<SampleRecord> = (0..n)
            .flat_map(|s| seq(&format!("S{s:03}"), "q", &["n"], &["p1", "p2"]))
            .collect();
        build_pairs(&recs, PairingPolicy::FirstNeutralXPeaks).unwrap()
    }

    #[test]
    fn ten_subjects_ten_folds_is_a_bijection() {
        let plan = make_folds(&pairs_for_subjects(10), 10, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![1; 10]);
    }

    #[test]
    fn fold_sizes_for_118_subjects() {
        // 118 = 10 * 11 + 8: eight folds receive a twelfth subject.
        let plan = make_folds(&pairs_for_subjects(118), 10, 11).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![11; 2], vec![12; 8]].concat());
    }

    #[test]
    fn folds_are_subject_disjoint() {
        let pairs = pairs_for_subjects(13);
        let plan = make_folds(&pairs, 4, 5).unwrap();
        let mut total = 0;
        for f in 0..4 {
            let (train, test) = plan.split(&pairs, f).unwrap();
            let tr: BTreeSet<_> = train.iter().map(|p| &p.subject_id).collect();
            assert!(test.iter().all(|p| !tr.contains(&p.subject_id)));
            assert_eq!(train.len() + test.len(), pairs.len());
            total += test.len();
        }
        assert_eq!(total, pairs.len());
        assert!(make_folds(&pairs, 14, 0).is_err());
    }
}
