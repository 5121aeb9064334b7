//! Latent-space analysis: stem feature extraction, exact t-SNE embedding,
//! nearest-neighbor domain-gap quantification, and plot-data export.
//!
//! The t-SNE here is the exact O(N^2) algorithm: per-point Gaussian
//! bandwidths found by binary search to match the configured perplexity,
//! symmetrized similarities, early exaggeration, and momentum gradient
//! descent on the KL divergence against a Student-t low-dimensional kernel.
//! No tree approximation; inputs are capped at a few thousand points.

use crate::data::{Manifest, Split};
use crate::engine::MetricLog;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::DannModel;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Row metadata carried alongside extracted features.
#[derive(Debug, Clone)]
pub struct EmbeddingMeta {
    pub dataset: String,
    pub y_c: u8,
    pub y_d: u8,
}

/// N x d feature matrix plus per-row metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub meta: Vec<EmbeddingMeta>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, features: Vec<f64>, meta: Vec<EmbeddingMeta>) -> Result<Self> {
        if features.len() != dim * meta.len() {
            return Err(Error::Data(format!(
                "feature matrix of {} values does not factor as {} x {dim}",
                features.len(),
                meta.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in feature matrix".into()));
        }
        Ok(EmbeddingSet {
            dim,
            features,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Eval-mode stem features for every record of a split (or the whole
/// manifest), one row per sample.
pub fn extract_features<T: Scalar>(
    model: &DannModel<T>,
    manifest: &Manifest,
    split: Option<Split>,
) -> Result<EmbeddingSet> {
    let indices: Vec<usize> = match split {
        Some(s) => manifest.indices_for_split(s),
        None => (0..manifest.records.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Data("no records to extract features from".into()));
    }
    let d = model.cfg.feature_dim();
    let s = manifest.patch_size;
    let mut features = Vec::with_capacity(indices.len() * d);
    let mut meta = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
        for &i in chunk {
            data.extend_from_slice(&manifest.load_and_preprocess::<T>(i)?);
            let rec = &manifest.records[i];
            meta.push(EmbeddingMeta {
                dataset: rec.dataset.clone(),
                y_c: rec.y_c,
                y_d: rec.y_d,
            });
        }
        let images = Tensor::from_vec(vec![chunk.len(), 3, s, s], data)?;
        let feats = model.stem_features(&images, Mode::Eval)?;
        features.extend(feats.data().iter().map(|v| v.to_f64()));
    }
    EmbeddingSet::new(d, features, meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations that run with exaggerated similarities.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// 2-D coordinates plus the KL divergence sampled along the descent.
#[derive(Debug, Clone)]
pub struct TsneOutput {
    pub coords: Vec<[f64; 2]>,
    /// `(iteration, KL)` pairs, measured with the un-exaggerated target
    /// distribution every 50 iterations and at the final iteration.
    pub kl_trace: Vec<(usize, f64)>,
}

const PERPLEXITY_TOLERANCE: f64 = 1e-4;
const BANDWIDTH_SEARCH_ITERS: usize = 50;

/// Exact t-SNE to two dimensions. Deterministic under the config seed.
pub fn tsne(embedding: &EmbeddingSet, cfg: &TsneConfig) -> Result<TsneOutput> {
    let n = embedding.len();
    if n > 5000 {
        return Err(Error::Data(format!(
            "exact t-SNE is capped at 5000 points, got {n}"
        )));
    }
    if cfg.perplexity < 1.0 || (n as f64 - 1.0) / 3.0 < cfg.perplexity {
        return Err(Error::Data(format!(
            "perplexity {} infeasible for {n} points (need 3*perplexity + 1 <= N)",
            cfg.perplexity
        )));
    }

    // Pairwise squared distances in the input space.
    let d2: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if i == j {
                0.0
            } else {
                squared_distance(embedding.row(i), embedding.row(j))
            }
        })
        .collect();

    // Per-point bandwidth by binary search on the conditional entropy.
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(&d2[i * n..(i + 1) * n], i, cfg.perplexity))
        .collect::<Result<_>>()?;

    // Symmetrize: p_ij = (p_j|i + p_i|j) / 2N.
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (rows[i][j] + rows[j][i]) / (2.0 * n as f64);
        }
    }
    let p_floor = 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-1e-4..1e-4),
                rng.random_range(-1e-4..1e-4),
            ]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::new();

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        // Student-t similarities in the embedding.
        let num: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i == j {
                    0.0
                } else {
                    1.0 / (1.0 + squared_distance(&y[i], &y[j]))
                }
            })
            .collect();
        let num_sum: f64 = num.iter().sum();

        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0f64; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let q = (num[i * n + j] / num_sum).max(p_floor);
                    let coeff =
                        4.0 * (exaggeration * p[i * n + j] - q) * num[i * n + j];
                    g[0] += coeff * (y[i][0] - y[j][0]);
                    g[1] += coeff * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();

        let momentum = if iter < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        for i in 0..n {
            for k in 0..2 {
                // Jacobs-style gains: grow when gradient and velocity agree.
                gains[i][k] = if grad[i][k].signum() != velocity[i][k].signum() {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                velocity[i][k] =
                    momentum * velocity[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        // Keep the embedding centered.
        let mut mean = [0.0f64; 2];
        for yi in &y {
            mean[0] += yi[0];
            mean[1] += yi[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }

        if (iter + 1) % 50 == 0 || iter + 1 == cfg.iterations {
            let q_sum = num_sum;
            let kl: f64 = (0..n * n)
                .into_par_iter()
                .map(|idx| {
                    let pij = p[idx];
                    if pij <= 0.0 {
                        0.0
                    } else {
                        let q = (num[idx] / q_sum).max(p_floor);
                        pij * (pij / q).ln()
                    }
                })
                .sum();
            kl_trace.push((iter + 1, kl));
        }
    }

    Ok(TsneOutput {
        coords: y,
        kl_trace,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Binary search on the Gaussian bandwidth of one point until the
/// conditional distribution's perplexity matches the target within 1e-4.
fn calibrate_row(d2_row: &[f64], i: usize, target_perplexity: f64) -> Result<Vec<f64>> {
    let n = d2_row.len();
    let mut beta = 1.0f64;
    let mut beta_min = f64::NEG_INFINITY;
    let mut beta_max = f64::INFINITY;
    let mut row = vec![0.0f64; n];
    for _ in 0..BANDWIDTH_SEARCH_ITERS {
        let mut sum = 0.0;
        for j in 0..n {
            row[j] = if j == i { 0.0 } else { (-beta * d2_row[j]).exp() };
            sum += row[j];
        }
        if sum <= 0.0 {
            // Bandwidth collapsed; widen.
            beta_max = beta;
            beta = if beta_min.is_finite() {
                (beta + beta_min) / 2.0
            } else {
                beta / 2.0
            };
            continue;
        }
        let mut entropy = 0.0;
        for j in 0..n {
            row[j] /= sum;
            if row[j] > 0.0 {
                entropy -= row[j] * row[j].ln();
            }
        }
        let perp = entropy.exp();
        let diff = perp - target_perplexity;
        if diff.abs() <= PERPLEXITY_TOLERANCE {
            return Ok(row);
        }
        if diff > 0.0 {
            // Too many effective neighbors: sharpen.
            beta_min = beta;
            beta = if beta_max.is_finite() {
                (beta + beta_max) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            beta_max = beta;
            beta = if beta_min.is_finite() {
                (beta + beta_min) / 2.0
            } else {
                beta / 2.0
            };
        }
    }
    Err(Error::Data(format!(
        "perplexity calibration failed for point {i}: target {target_perplexity} not reached within {PERPLEXITY_TOLERANCE}"
    )))
}

/// Cross-validated k-nearest-neighbor accuracy on arbitrary binary labels.
///
/// Exact-tie handling: zero-distance neighbors (exact duplicates of the
/// query) do not vote — they share the query's geometry and would decide by
/// label alone — unless nothing else is available. Remaining distance ties
/// break by record index, and a split vote falls back to the nearest voting
/// neighbor. A dataset duplicated across both label values therefore scores
/// at chance, not systematically wrong.
pub fn knn_cv_accuracy(
    features: &[f64],
    dim: usize,
    labels: &[u8],
    k: usize,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let n = labels.len();
    if features.len() != n * dim {
        return Err(Error::Data("feature matrix does not match label count".into()));
    }
    if n < folds || folds < 2 {
        return Err(Error::Data(format!(
            "need at least {folds} points for {folds}-fold cross-validation"
        )));
    }
    // Shuffled round-robin fold assignment.
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % folds;
    }

    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && fold_of[j] != fold_of[i])
                .map(|j| (squared_distance(row(i), row(j)), j))
                .collect();
            candidates
                .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let voters: Vec<&(f64, usize)> = {
                let nonzero: Vec<&(f64, usize)> =
                    candidates.iter().filter(|&&(d, _)| d > 0.0).collect();
                if nonzero.is_empty() {
                    candidates.iter().collect()
                } else {
                    nonzero
                }
            };
            let take = k.min(voters.len());
            let votes: usize = voters[..take]
                .iter()
                .map(|&&(_, j)| labels[j] as usize)
                .sum();
            let pred = if 2 * votes > take {
                1
            } else if 2 * votes < take {
                0
            } else {
                labels[voters[0].1]
            };
            usize::from(pred == labels[i])
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Domain separability of a feature set: 5-fold cross-validated 5-NN
/// accuracy at predicting the domain label. 0.5 means no detectable shift,
/// 1.0 maximal shift. Swapping the domain labels leaves it unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainGapReport {
    pub domain_accuracy: f64,
    /// Accuracy restricted to look-alike (index 0) and mitosis (index 1)
    /// rows.
    pub per_class_accuracy: [f64; 2],
    pub k: usize,
    pub folds: usize,
    pub n: usize,
}

pub fn domain_gap(embedding: &EmbeddingSet) -> Result<DomainGapReport> {
    let n = embedding.len();
    let domains: Vec<u8> = embedding.meta.iter().map(|m| m.y_d).collect();
    if !domains.contains(&0) || !domains.contains(&1) {
        return Err(Error::Data("domain gap needs both domains present".into()));
    }
    let (k, folds) = (5, 5);
    let accuracy = knn_cv_accuracy(&embedding.features, embedding.dim, &domains, k, folds, 0)?;

    let mut per_class = [0.0f64; 2];
    for class in 0..2u8 {
        let idx: Vec<usize> = (0..n).filter(|&i| embedding.meta[i].y_c == class).collect();
        per_class[class as usize] = if idx.len() >= folds
            && idx.iter().any(|&i| domains[i] == 0)
            && idx.iter().any(|&i| domains[i] == 1)
        {
            let mut feats = Vec::with_capacity(idx.len() * embedding.dim);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in &idx {
                feats.extend_from_slice(embedding.row(i));
                labels.push(domains[i]);
            }
            knn_cv_accuracy(&feats, embedding.dim, &labels, k, folds, 0)?
        } else {
            f64::NAN
        };
    }
    Ok(DomainGapReport {
        domain_accuracy: accuracy,
        per_class_accuracy: per_class,
        k,
        folds,
        n,
    })
}

/// Tab-separated embedding export: `x  y  dataset  y_C  y_D`, one row per
/// point, exact float round-trip via Rust's shortest representation.
pub fn export_embedding(
    path: &Path,
    coords: &[[f64; 2]],
    meta: &[EmbeddingMeta],
) -> Result<()> {
    if coords.len() != meta.len() {
        return Err(Error::Data("coordinate/metadata length mismatch".into()));
    }
    if coords.is_empty() {
        return Err(Error::Data("nothing to export".into()));
    }
    let mut out = String::from("x\ty\tdataset\ty_C\ty_D\n");
    for (c, m) in coords.iter().zip(meta) {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", c[0], c[1], m.dataset, m.y_c, m.y_d));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Tab-separated metric export, one row per epoch.
pub fn export_metrics(path: &Path, metrics: &MetricLog) -> Result<()> {
    if metrics.records.is_empty() {
        return Err(Error::Data("nothing to export".into()));
    }
    let mut out = String::from(
        "epoch\ttotal_loss\tcell_loss\tdomain_loss\tsource_cell_acc\ttarget_cell_acc\tdomain_acc\tlr\twall_secs\n",
    );
    for r in &metrics.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epoch,
            r.total_loss,
            r.cell_loss,
            r.domain_loss,
            r.source_cell_acc,
            r.target_cell_acc,
            r.domain_acc,
            r.lr,
            r.wall_secs
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
