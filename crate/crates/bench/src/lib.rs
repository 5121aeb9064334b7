//! Shared fixtures for the criterion benchmarks.

use dann_core::data::SynthConfig;
use dann_core::engine::{DataConfig, OptimConfig, RunConfig};
use dann_core::model::{DannConfig, StemConfig};

/// The run configuration exercised by the training-step benchmark.
pub fn bench_run_config(patch_size: usize, batch_size: usize) -> RunConfig {
    RunConfig {
        model: DannConfig {
            patch_size,
            stem: StemConfig::default(),
            ..DannConfig::default()
        },
        data: DataConfig {
            synth: Some(SynthConfig {
                per_class_per_domain: 16,
                patch_size,
                ..SynthConfig::default()
            }),
            manifest: None,
            cap: 1600,
            batch_size,
        },
        optim: OptimConfig {
            epochs_per_cycle: 1,
            cycles: 1,
            ..OptimConfig::default()
        },
        ..RunConfig::default()
    }
}
