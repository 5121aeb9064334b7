use dann_core::analysis::{domain_gap, extract_features};
use dann_core::data::{Split, SynthConfig};
use dann_core::engine::{evaluate, train, DataConfig, RunConfig, TrainMode};
use dann_core::model::DannConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let cycles: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let mode = match args.get(4).map(|s| s.as_str()) {
        Some("baseline") => TrainMode::Baseline,
        _ => TrainMode::Dann,
    };

    let mut cfg = RunConfig {
        model: DannConfig {
            patch_size: 64,
            ..DannConfig::default()
        },
        data: DataConfig {
            synth: Some(SynthConfig::benchmark(0)),
            manifest: None,
            cap: 1600,
            batch_size: 32,
        },
        seed,
        mode,
        ..RunConfig::default()
    };
    cfg.optim.epochs_per_cycle = epochs;
    cfg.optim.cycles = cycles;

    let t0 = Instant::now();
    let manifest = cfg.prepare_manifest().unwrap();
    println!("data generated in {:?} ({} records)", t0.elapsed(), manifest.records.len());

    let t0 = Instant::now();
    let outcome = train::<f32>(&cfg, &manifest).unwrap();
    println!("trained {} epochs in {:?}", outcome.metrics.records.len(), t0.elapsed());
    for r in &outcome.metrics.records {
        println!(
            "  epoch {:2} total {:.4} cell {:.4} dom {:.4} srcacc {:.3} tgtacc {:.3} domacc {:.3} lr {:.2e} ({:.1}s)",
            r.epoch, r.total_loss, r.cell_loss, r.domain_loss, r.source_cell_acc, r.target_cell_acc, r.domain_acc, r.lr, r.wall_secs
        );
    }
    let eval = evaluate(&outcome.model, &manifest, Split::Test).unwrap();
    println!(
        "TEST: src {:.3} tgt {:.3} dom {:.3}",
        eval.cell_acc_source, eval.cell_acc_target, eval.domain_acc
    );
    let t0 = Instant::now();
    let emb = extract_features(&outcome.model, &manifest, Some(Split::Test)).unwrap();
    let gap = domain_gap(&emb).unwrap();
    println!("domain gap {:.3} (n={}) in {:?}", gap.domain_accuracy, gap.n, t0.elapsed());
}
