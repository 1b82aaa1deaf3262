#![allow(dead_code)]

use spnd::backbone::{Architecture, BackboneConfig, NormMode, Variant};
use spnd::datamodel::PairedSample;
use spnd::dataset_io::{build_pairs, generate_synthetic, PairingPolicy, SyntheticConfig, SyntheticDataset};
use spnd::trainer::TrainConfig;

pub const SIZE: usize = 16;

pub fn tiny_backbone(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        input_size: SIZE,
        stage_channels: vec![4, 8],
        architecture: Architecture::Plain,
        feature_dim: 8,
        norm_mode: NormMode::Joint,
        epsilon: 1e-5,
        variant,
    }
}

pub fn tiny_config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 8,
        total_epochs: epochs,
        backbone: tiny_backbone(variant),
        checkpoint_every_pace: false,
        ..TrainConfig::desk(1)
    }
}

pub fn tiny_synthetic(subjects: usize, classes: usize, corruption: f64, seed: u64) -> (SyntheticDataset, Vec<PairedSample>) {
    let ds = generate_synthetic(&SyntheticConfig {
        n_subjects: subjects,
        n_classes: classes,
        image_size: SIZE,
        frames_per_subject_per_class: 2,
        label_corruption_rate: corruption,
        deviation_amplitude: 0.3,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let pairs = build_pairs(&ds.records, PairingPolicy::FirstNeutralXPeaks).unwrap();
    (ds, pairs)
}
