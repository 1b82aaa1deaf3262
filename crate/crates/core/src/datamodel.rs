//! Domain types shared across the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassIndex = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRole {
    Neutral,
    Peak,
    Single,
}

impl FrameRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameRole::Neutral => "neutral",
            FrameRole::Peak => "peak",
            FrameRole::Single => "single",
        }
    }
}

impl std::str::FromStr for FrameRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "neutral" => Ok(FrameRole::Neutral),
            "peak" => Ok(FrameRole::Peak),
            "single" => Ok(FrameRole::Single),
            other => Err(format!("unknown frame role `{other}`")),
        }
    }
}

/// Channel-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer of {} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Where the pixels of a record live.
#[derive(Clone, Debug)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<Image>),
}

impl ImageRef {
    pub fn memory(&self) -> Option<&Arc<Image>> {
        match self {
            ImageRef::Memory(img) => Some(img),
            ImageRef::Path(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub sequence_id: String,
    pub frame_role: FrameRole,
    pub label: Option<ClassIndex>,
    pub image: ImageRef,
}

/// A target expression image, optionally bound to a same-subject neutral reference.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub target: SampleRecord,
    pub reference: Option<SampleRecord>,
    pub label: ClassIndex,
    pub subject_id: String,
}

impl PairedSample {
    pub fn id(&self) -> &str {
        &self.target.sample_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptySubject,
    SubjectMismatch,
    TargetRole(FrameRole),
    TargetUnlabeled,
    LabelMismatch,
    ReferenceRole(FrameRole),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySubject => write!(f, "empty subject id"),
            Violation::SubjectMismatch => write!(f, "subject mismatch"),
            Violation::TargetRole(r) => write!(f, "target has role {}", r.as_str()),
            Violation::TargetUnlabeled => write!(f, "target has no label"),
            Violation::LabelMismatch => write!(f, "pair label differs from target label"),
            Violation::ReferenceRole(r) => write!(f, "reference has role {}", r.as_str()),
        }
    }
}

/// Every invariant a pair breaks; an empty list means the pair is well formed.
pub fn validate_pair(pair: &PairedSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let t = &pair.target;
    if pair.subject_id.is_empty() || t.subject_id.is_empty() {
        out.push(Violation::EmptySubject);
    }
    if t.subject_id != pair.subject_id {
        out.push(Violation::SubjectMismatch);
    }
    if t.frame_role == FrameRole::Neutral {
        out.push(Violation::TargetRole(t.frame_role));
    }
    match t.label {
        None => out.push(Violation::TargetUnlabeled),
        Some(l) if l != pair.label => out.push(Violation::LabelMismatch),
        Some(_) => {}
    }
    if let Some(r) = &pair.reference {
        if r.subject_id != t.subject_id && !out.contains(&Violation::SubjectMismatch) {
            out.push(Violation::SubjectMismatch);
        }
        if r.frame_role != FrameRole::Neutral {
            out.push(Violation::ReferenceRole(r.frame_role));
        }
    }
    out
}

/// Pooled feature vector of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config("label space needs at least two classes".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("label names must be unique".into()));
        }
        Ok(Self { names })
    }

    /// `class0, class1, ...`
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("class{i}")).collect())
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<ClassIndex> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, class: ClassIndex) -> &str {
        &self.names[class]
    }
}

/// Subject-to-fold assignment for subject-independent cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, test)` pairs for `fold`; subjects missing from the plan are an error.
    pub fn split(
        &self,
        pairs: &[PairedSample],
        fold: usize,
    ) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for p in pairs {
            match self.fold_of(&p.subject_id) {
                Some(f) if f == fold => test.push(p.clone()),
                Some(_) => train.push(p.clone()),
                None => {
                    return Err(Error::Config(format!(
                        "subject `{}` is not in the fold plan",
                        p.subject_id
                    )))
                }
            }
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, subject: &str, role: FrameRole, label: Option<usize>) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            subject_id: subject.into(),
            sequence_id: "seq".into(),
            frame_role: role,
            label,
            image: ImageRef::Memory(Arc::new(Image::filled(2, 2, 1, 0.5))),
        }
    }

    fn good_pair() -> PairedSample {
        PairedSample {
            target: rec("p1", "S1", FrameRole::Peak, Some(2)),
            reference: Some(rec("n1", "S1", FrameRole::Neutral, None)),
            label: 2,
            subject_id: "S1".into(),
        }
    }

    #[test]
    fn well_formed_pair_is_ok() {
        assert!(validate_pair(&good_pair()).is_empty());
    }

    #[test]
    fn reference_from_other_subject_is_reported() {
        let mut p = good_pair();
        p.reference.as_mut().unwrap().subject_id = "S2".into();
        let v = validate_pair(&p);
        assert_eq!(v, vec![Violation::SubjectMismatch]);
        assert_eq!(v[0].to_string(), "subject mismatch");
    }

    #[test]
    fn reference_free_pair_is_ok() {
        let mut p = good_pair();
        p.reference = None;
        p.target.frame_role = FrameRole::Single;
        assert!(validate_pair(&p).is_empty());
    }

    #[test]
    fn label_space_rejects_duplicates() {
        assert!(LabelSpace::new(vec!["a".into(), "a".into()]).is_err());
        assert!(LabelSpace::new(vec!["a".into()]).is_err());
        assert_eq!(LabelSpace::numbered(3).unwrap().index_of("class2"), Some(2));
    }

    mod corruption {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn single_field_corruption_is_reported(which in 0usize..5, other in 0usize..7) {
                let mut p = good_pair();
                match which {
                    0 => p.reference.as_mut().unwrap().subject_id = format!("X{other}"),
                    1 => p.reference.as_mut().unwrap().frame_role =
                        if other % 2 == 0 { FrameRole::Peak } else { FrameRole::Single },
                    2 => p.label = 3 + other,
                    3 => p.target.label = None,
                    _ => { p.subject_id = String::new(); }
                }
                prop_assert!(!validate_pair(&p).is_empty());
            }
        }
    }
}
