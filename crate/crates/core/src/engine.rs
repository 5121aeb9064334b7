//! Training orchestration: balanced batch loop, loss assembly, backward,
//! Adam stepping under the one-cycle schedule, per-epoch metrics,
//! checkpointing, and the multi-run suite.
//!
//! Baseline mode trains the identical architecture with the reversal
//! strength forced to zero and the domain-head parameters excluded from the
//! optimizer, for controlled adapted-vs-non-adapted comparisons.

use crate::checkpoint::{self, Counters};
use crate::data::{derive_seed, BalancedSampler, Manifest, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{cell_loss_terms, domain_loss, total_loss, BatchLabels, LossConfig, LossDiagnostics};
use crate::model::{DannConfig, DannModel};
use crate::optim::{Adam, AdamConfig, OneCycleSchedule};
use crate::tensor::{Precision, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Seed streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_POISON: u64 = 3;
const STREAM_SUITE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Dann,
    Baseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub pct_ramp_up: f64,
    pub epochs_per_cycle: u64,
    pub cycles: u64,
    /// Restart Adam moments at each cycle boundary.
    pub reset_moments_per_cycle: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adam: AdamConfig::default(),
            max_lr: 1e-3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            pct_ramp_up: 0.3,
            epochs_per_cycle: 5,
            cycles: 3,
            reset_moments_per_cycle: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Generate data in-process when set.
    pub synth: Option<SynthConfig>,
    /// Load an existing manifest CSV when set.
    pub manifest: Option<PathBuf>,
    /// Per-dataset record cap applied after loading.
    pub cap: usize,
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: Some(SynthConfig::default()),
            manifest: None,
            cap: 1600,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: DannConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub mode: TrainMode,
    pub precision: Precision,
    /// Checkpoints, metric logs, and the resolved-config echo land here.
    pub out_dir: Option<PathBuf>,
    /// Self-check hook: replace suppressed target cell labels with random
    /// values right before the loss. The parameter trajectory must not move.
    #[serde(default)]
    pub poison_suppressed_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DannConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            mode: TrainMode::Dann,
            precision: Precision::F32,
            out_dir: None,
            poison_suppressed_labels: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.data.synth.is_none() && self.data.manifest.is_none() {
            return Err(Error::Config(
                "data config needs either a synth block or a manifest path".into(),
            ));
        }
        if self.optim.epochs_per_cycle == 0 || self.optim.cycles == 0 {
            return Err(Error::Config("epochs_per_cycle and cycles must be >= 1".into()));
        }
        Ok(())
    }

    /// Builds or loads the manifest, applies the cap, and checks geometry.
    /// Data identity depends only on the data config, not the run seed, so
    /// suite runs with different seeds train on the same set.
    pub fn prepare_manifest(&self) -> Result<Manifest> {
        let mut manifest = match (&self.data.synth, &self.data.manifest) {
            (Some(synth), None) => crate::data::generate_synthetic(synth)?,
            (None, Some(path)) => Manifest::load_csv(path)?,
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data config must not set both synth and manifest".into(),
                ))
            }
            (None, None) => unreachable!("validate checked this"),
        };
        if manifest.patch_size != self.model.patch_size {
            return Err(Error::Config(format!(
                "manifest patch size {} != model patch size {}",
                manifest.patch_size, self.model.patch_size
            )));
        }
        manifest.cap_per_dataset(self.data.cap, derive_seed(self.seed, 4));
        Ok(manifest)
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub total_loss: f64,
    pub cell_loss: f64,
    pub domain_loss: f64,
    pub source_cell_acc: f64,
    /// Bookkeeping accuracy on suppressed target labels; never fed back.
    pub target_cell_acc: f64,
    pub domain_acc: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<EpochRecord>,
}

impl MetricLog {
    /// Line-delimited JSON, one record per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub model: DannModel<T>,
    pub metrics: MetricLog,
    pub zero_source_batches: u64,
    pub final_checkpoint: Option<PathBuf>,
}

fn assemble_batch<T: Scalar>(
    manifest: &Manifest,
    indices: &[usize],
) -> Result<(Tensor<T>, Vec<u8>, Vec<u8>)> {
    let s = manifest.patch_size;
    let per = 3 * s * s;
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut y_c = Vec::with_capacity(indices.len());
    let mut y_d = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&manifest.load_and_preprocess::<T>(i)?);
        y_c.push(manifest.records[i].y_c);
        y_d.push(manifest.records[i].y_d);
    }
    Ok((
        Tensor::from_vec(vec![indices.len(), 3, s, s], data)?,
        y_c,
        y_d,
    ))
}

struct EpochAccumulator {
    total: f64,
    cell: f64,
    domain: f64,
    batches: usize,
    source_hits: u64,
    source_total: u64,
    target_hits: u64,
    target_total: u64,
    domain_hits: u64,
    domain_total: u64,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            total: 0.0,
            cell: 0.0,
            domain: 0.0,
            batches: 0,
            source_hits: 0,
            source_total: 0,
            target_hits: 0,
            target_total: 0,
            domain_hits: 0,
            domain_total: 0,
        }
    }

    fn update<T: Scalar>(
        &mut self,
        total: f64,
        cell: f64,
        domain: f64,
        p_c: &Tensor<T>,
        p_d: &Tensor<T>,
        y_c: &[u8],
        y_d: &[u8],
    ) {
        self.total += total;
        self.cell += cell;
        self.domain += domain;
        self.batches += 1;
        let pc = p_c.data();
        let pd = p_d.data();
        for i in 0..y_c.len() {
            let cell_pred = u8::from(pc[i].to_f64() > 0.5);
            let dom_pred = u8::from(pd[i].to_f64() > 0.5);
            if y_d[i] == 0 {
                self.source_total += 1;
                self.source_hits += u64::from(cell_pred == y_c[i]);
            } else {
                self.target_total += 1;
                self.target_hits += u64::from(cell_pred == y_c[i]);
            }
            self.domain_total += 1;
            self.domain_hits += u64::from(dom_pred == y_d[i]);
        }
    }

    fn record(&self, epoch: u64, lr: f64, wall_secs: f64) -> EpochRecord {
        let rate = |hits: u64, total: u64| {
            if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            }
        };
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            total_loss: self.total / n,
            cell_loss: self.cell / n,
            domain_loss: self.domain / n,
            source_cell_acc: rate(self.source_hits, self.source_total),
            target_cell_acc: rate(self.target_hits, self.target_total),
            domain_acc: rate(self.domain_hits, self.domain_total),
            lr,
            wall_secs,
        }
    }
}

/// Runs the full `cycles x epochs_per_cycle` protocol on the given manifest
/// and returns the trained model plus its metric log. Deterministic under
/// the config seed.
pub fn train<T: Scalar>(cfg: &RunConfig, manifest: &Manifest) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model = DannModel::<T>::new(cfg.model.clone(), derive_seed(cfg.seed, STREAM_INIT))?;
    let params = match cfg.mode {
        TrainMode::Dann => model.parameters(),
        TrainMode::Baseline => model.parameters_without_domain_head(),
    };
    let mut adam = Adam::new(cfg.optim.adam, &params);
    let sampler = BalancedSampler::new(
        manifest,
        Split::Train,
        cfg.data.batch_size,
        derive_seed(cfg.seed, STREAM_SAMPLER),
    )?;
    let steps_per_epoch = sampler.batches_per_epoch() as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Data(
            "batch size exceeds the smallest training stratum".into(),
        ));
    }
    let schedule = OneCycleSchedule {
        max_lr: cfg.optim.max_lr,
        div_factor: cfg.optim.div_factor,
        final_div_factor: cfg.optim.final_div_factor,
        pct_ramp_up: cfg.optim.pct_ramp_up,
        steps_per_cycle: steps_per_epoch * cfg.optim.epochs_per_cycle,
        cycles: cfg.optim.cycles,
    };
    schedule.validate()?;

    let mut poison_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_POISON));
    let diagnostics = LossDiagnostics::default();
    let mut metrics = MetricLog::default();
    let mut global_step: u64 = 0;

    for cycle in 0..cfg.optim.cycles {
        for epoch_in_cycle in 0..cfg.optim.epochs_per_cycle {
            let epoch = cycle * cfg.optim.epochs_per_cycle + epoch_in_cycle;
            let epoch_start = Instant::now();
            let mut acc = EpochAccumulator::new();
            let mut lr = schedule.lr_at(global_step);
            for batch_indices in sampler.epoch(epoch) {
                lr = schedule.lr_at(global_step);
                let lambda = match cfg.mode {
                    TrainMode::Dann => cfg.model.grl.lambda_at(global_step),
                    TrainMode::Baseline => 0.0,
                };
                let (images, mut y_c, y_d) = assemble_batch::<T>(manifest, &batch_indices)?;
                if cfg.poison_suppressed_labels {
                    for (c, &d) in y_c.iter_mut().zip(&y_d) {
                        if d == 1 {
                            *c = poison_rng.random_range(0..=1);
                        }
                    }
                }
                let labels = BatchLabels::training(y_c, y_d)?;
                debug_assert!(labels.source_count() > 0, "balanced sampler broke its contract");

                let out = model.forward(&images, Mode::Train, lambda)?;
                let cell = cell_loss_terms(&out.p_c, &labels, &cfg.loss)?;
                let dom = domain_loss(&out.p_d, &labels.y_d, &cfg.loss)?;
                let total = total_loss(&cell, &dom, &labels.y_d, &cfg.loss, Some(&diagnostics))?;
                let total_value = total.item().to_f64();
                if !total_value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: global_step,
                        value: total_value,
                    });
                }

                model.zero_grad();
                total.backward()?;
                adam.step(&params, lr)?;

                let cell_value = {
                    let sum: f64 = cell.data().iter().map(|v| v.to_f64()).sum();
                    cfg.loss.gamma * sum / labels.source_count() as f64
                };
                acc.update(
                    total_value,
                    cell_value,
                    total_value - cell_value,
                    &out.p_c,
                    &out.p_d,
                    &labels.y_c,
                    &labels.y_d,
                );
                global_step += 1;
            }
            metrics
                .records
                .push(acc.record(epoch, lr, epoch_start.elapsed().as_secs_f64()));
        }
        if cfg.optim.reset_moments_per_cycle {
            adam.reset_moments();
        }
        if let Some(dir) = &cfg.out_dir {
            let counters = Counters {
                global_step,
                epochs_completed: (cycle + 1) * cfg.optim.epochs_per_cycle,
                cycles_completed: cycle + 1,
            };
            checkpoint::save(
                &dir.join(format!("cycle_{cycle}.ckpt")),
                &model,
                Some((&adam, &params)),
                counters,
                Some(serde_json::to_value(cfg)?),
            )?;
        }
    }

    let final_checkpoint = match &cfg.out_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            let counters = Counters {
                global_step,
                epochs_completed: cfg.optim.cycles * cfg.optim.epochs_per_cycle,
                cycles_completed: cfg.optim.cycles,
            };
            checkpoint::save(
                &path,
                &model,
                Some((&adam, &params)),
                counters,
                Some(serde_json::to_value(cfg)?),
            )?;
            metrics.write_jsonl(&dir.join("metrics.jsonl"))?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutcome {
        model,
        metrics,
        zero_source_batches: diagnostics.zero_source_batches.get(),
        final_checkpoint,
    })
}

/// Eval-mode metrics at threshold 0.5 (probability ties predict class 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cell_acc_source: f64,
    pub cell_acc_target: f64,
    pub domain_acc: f64,
    /// `cell_confusion_*[truth][prediction]` counts.
    pub cell_confusion_source: [[u64; 2]; 2],
    pub cell_confusion_target: [[u64; 2]; 2],
    pub domain_confusion: [[u64; 2]; 2],
    pub n_source: u64,
    pub n_target: u64,
}

pub fn evaluate<T: Scalar>(
    model: &DannModel<T>,
    manifest: &Manifest,
    split: Split,
) -> Result<EvalMetrics> {
    let indices = manifest.indices_for_split(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("evaluation split '{split}' is empty")));
    }
    let mut cell_conf_src = [[0u64; 2]; 2];
    let mut cell_conf_tgt = [[0u64; 2]; 2];
    let mut dom_conf = [[0u64; 2]; 2];
    for chunk in indices.chunks(64) {
        let (images, y_c, y_d) = assemble_batch::<T>(manifest, chunk)?;
        let out = model.forward(&images, Mode::Eval, 0.0)?;
        let pc = out.p_c.data();
        let pd = out.p_d.data();
        for i in 0..chunk.len() {
            let cell_pred = usize::from(pc[i].to_f64() > 0.5);
            let dom_pred = usize::from(pd[i].to_f64() > 0.5);
            if y_d[i] == 0 {
                cell_conf_src[y_c[i] as usize][cell_pred] += 1;
            } else {
                cell_conf_tgt[y_c[i] as usize][cell_pred] += 1;
            }
            dom_conf[y_d[i] as usize][dom_pred] += 1;
        }
    }
    let acc = |conf: &[[u64; 2]; 2]| {
        let hits = conf[0][0] + conf[1][1];
        let total: u64 = conf.iter().flatten().sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    };
    let n_source: u64 = cell_conf_src.iter().flatten().sum();
    let n_target: u64 = cell_conf_tgt.iter().flatten().sum();
    Ok(EvalMetrics {
        cell_acc_source: acc(&cell_conf_src),
        cell_acc_target: acc(&cell_conf_tgt),
        domain_acc: acc(&dom_conf),
        cell_confusion_source: cell_conf_src,
        cell_confusion_target: cell_conf_tgt,
        domain_confusion: dom_conf,
        n_source,
        n_target,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub target_cell_acc: f64,
    pub source_cell_acc: f64,
    pub domain_acc: f64,
}

/// Aggregate over independent training runs, evaluated on the test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub mode: TrainMode,
    pub runs: Vec<RunResult>,
    pub mean_target_acc: f64,
    pub median_target_acc: f64,
    pub min_target_acc: f64,
    pub max_target_acc: f64,
}

/// Trains `n_runs` models with independent seeds on one shared manifest and
/// reports test-split accuracies.
pub fn run_suite<T: Scalar>(cfg: &RunConfig, n_runs: usize) -> Result<SuiteSummary> {
    if n_runs == 0 {
        return Err(Error::Config("suite needs n_runs >= 1".into()));
    }
    let manifest = cfg.prepare_manifest()?;
    let mut runs = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = derive_seed(cfg.seed, STREAM_SUITE + run as u64);
        run_cfg.out_dir = cfg
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("run_{run}")));
        let outcome = train::<T>(&run_cfg, &manifest)?;
        let eval = evaluate(&outcome.model, &manifest, Split::Test)?;
        runs.push(RunResult {
            run,
            seed: run_cfg.seed,
            target_cell_acc: eval.cell_acc_target,
            source_cell_acc: eval.cell_acc_source,
            domain_acc: eval.domain_acc,
        });
    }
    let mut accs: Vec<f64> = runs.iter().map(|r| r.target_cell_acc).collect();
    accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if accs.len() % 2 == 1 {
        accs[accs.len() / 2]
    } else {
        (accs[accs.len() / 2 - 1] + accs[accs.len() / 2]) / 2.0
    };
    Ok(SuiteSummary {
        mode: cfg.mode,
        mean_target_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        median_target_acc: median,
        min_target_acc: accs[0],
        max_target_acc: *accs.last().unwrap(),
        runs,
    })
}
