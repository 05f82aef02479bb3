#![allow(dead_code)]

use learngene::collective::{uniform_stack, CollectiveConfig, ExpansionSchedule};
use learngene::datasets::{DataConfig, SourceConfig, StreamConfig, SyntheticConfig};
use learngene::fisher::FisherConfig;
use learngene::harness::{ExperimentConfig, OpenEvalConfig, PositionConfig};
use learngene::individual::{AdaptConfig, IndividualConfig};
use learngene::learngene::CriterionConfig;

/// A configuration small enough to run every experiment in seconds.
pub fn tiny_config() -> ExperimentConfig {
    let collective = CollectiveConfig {
        layers: uniform_stack(6, 8, &[1, 2]),
        head_hidden: vec![16],
        epochs_per_task: 2,
        replay_per_class: 4,
        expansion: ExpansionSchedule {
            widen_every: 3,
            deepen_every: 5,
            protect_top: 2,
            widen_jitter: 0.1,
        },
        ..Default::default()
    };
    ExperimentConfig {
        data: DataConfig {
            source: SourceConfig::Synthetic(SyntheticConfig {
                num_classes: 24,
                samples_per_class: 40,
                image_size: 16,
                ..Default::default()
            }),
            base_count: 12,
            open_count: 4,
            novel_count: 8,
            stream: StreamConfig {
                classes_per_task: 3,
                num_tasks: 8,
                train_per_class: 10,
                val_per_class: 5,
            },
            sample_caps: vec![3, 6],
            ..Default::default()
        },
        collective: collective.clone(),
        criterion: CriterionConfig {
            early_window: 3,
            late_window: 3,
            ..Default::default()
        },
        k: 2,
        individual: IndividualConfig {
            front_widths: vec![8, 8],
            front_out: None,
            head_hidden: vec![16],
        },
        adapt: AdaptConfig {
            epochs: 4,
            fisher: FisherConfig {
                samples: 16,
                ..Default::default()
            },
            ..Default::default()
        },
        seeds: vec![0, 1],
        episodes_per_seed: 2,
        n_way: 3,
        k_shot: 5,
        query_per_class: 5,
        compare_epoch: 2,
        snapshots: 2,
        position: PositionConfig {
            collective: Some(CollectiveConfig {
                layers: uniform_stack(9, 8, &[1, 2]),
                ..collective
            }),
            ..Default::default()
        },
        open: OpenEvalConfig {
            samples_per_class: 5,
            ..Default::default()
        },
    }
}
