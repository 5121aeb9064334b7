//! Masked dual-task loss: a domain cross-entropy summed over the batch, a
//! cell cross-entropy that contributes only for source-domain samples, and a
//! weighted total whose classification term is normalized by the source
//! count.
//!
//! The cell loss is binary cross-entropy on the cell-head probability `p_C`;
//! the domain branch never feeds it. Samples of the target domain (`y_D = 1`)
//! contribute exactly zero to the cell term, so their cell labels cannot
//! influence training. Masks are multiplicative constants, which keeps the
//! exclusion bitwise exact.
//!
//! Probabilities are clamped to `[eps, 1 - eps]` before any logarithm, so
//! every loss value is finite for probabilities in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::cell::Cell;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the classification term; must be >= 0.
    pub gamma: f64,
    /// Probability clamp, `0 < eps < 0.5`.
    pub eps: f64,
    /// Optional division of the domain sum by the batch size. Off by default:
    /// the literal total couples the effective domain weight to batch size.
    pub batch_normalize_domain: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            eps: 1e-7,
            batch_normalize_domain: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!(
                "eps must lie in (0, 0.5), got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-batch labels. `label_visible` is the firewall between target-domain
/// cell labels and the loss: during training it is false exactly where
/// `y_D = 1`, and the cell mask requires it.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub y_c: Vec<u8>,
    pub y_d: Vec<u8>,
    pub label_visible: Vec<bool>,
}

impl BatchLabels {
    /// Training labels: target-domain cell labels are suppressed.
    pub fn training(y_c: Vec<u8>, y_d: Vec<u8>) -> Result<Self> {
        validate_binary(&y_c)?;
        validate_binary(&y_d)?;
        if y_c.len() != y_d.len() {
            return Err(Error::Data("label vectors differ in length".into()));
        }
        let label_visible = y_d.iter().map(|&d| d == 0).collect();
        Ok(BatchLabels {
            y_c,
            y_d,
            label_visible,
        })
    }

    /// Evaluation labels: everything visible, for scoring target accuracy.
    pub fn eval(y_c: Vec<u8>, y_d: Vec<u8>) -> Result<Self> {
        validate_binary(&y_c)?;
        validate_binary(&y_d)?;
        if y_c.len() != y_d.len() {
            return Err(Error::Data("label vectors differ in length".into()));
        }
        let label_visible = vec![true; y_c.len()];
        Ok(BatchLabels {
            y_c,
            y_d,
            label_visible,
        })
    }

    pub fn len(&self) -> usize {
        self.y_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_c.is_empty()
    }

    pub fn source_count(&self) -> usize {
        self.y_d.iter().filter(|&&d| d == 0).count()
    }
}

fn validate_binary(labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("label {bad} outside {{0, 1}}")));
    }
    Ok(())
}

/// Counters for degenerate batches; never aborts training.
#[derive(Debug, Default)]
pub struct LossDiagnostics {
    pub zero_source_batches: Cell<u64>,
}

fn mask_tensor<T: Scalar>(flags: impl Iterator<Item = bool>) -> Tensor<T> {
    let data: Vec<T> = flags.map(|f| if f { T::ONE } else { T::ZERO }).collect();
    let n = data.len();
    Tensor::make(vec![n], data, false, None)
}

fn clamped<T: Scalar>(p: &Tensor<T>, eps: f64) -> Tensor<T> {
    p.clamp(T::from_f64(eps), T::from_f64(1.0 - eps))
}

/// Domain cross-entropy, summed over the batch: `-log p_D` for target
/// samples, `-log(1 - p_D)` for source samples.
pub fn domain_loss<T: Scalar>(p_d: &Tensor<T>, y_d: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    if p_d.numel() != y_d.len() {
        return Err(Error::ShapeMismatch {
            op: "domain_loss",
            left: p_d.shape().to_vec(),
            right: vec![y_d.len()],
        });
    }
    let p = clamped(p_d, cfg.eps);
    let one_minus = Tensor::full(p.shape().to_vec(), T::ONE).sub(&p)?;
    let target_mask = mask_tensor::<T>(y_d.iter().map(|&d| d == 1));
    let source_mask = mask_tensor::<T>(y_d.iter().map(|&d| d == 0));
    let terms = target_mask
        .mul(&p.log()?)?
        .add(&source_mask.mul(&one_minus.log()?)?)?
        .neg();
    let sum = terms.sum();
    if cfg.batch_normalize_domain {
        Ok(sum.scale(T::from_f64(1.0 / y_d.len() as f64)))
    } else {
        Ok(sum)
    }
}

/// Per-sample cell cross-entropy: `-log p_C` where `y_C = 1` and `y_D = 0`,
/// `-log(1 - p_C)` where `y_C = 0` and `y_D = 0`, exactly zero elsewhere.
pub fn cell_loss_terms<T: Scalar>(
    p_c: &Tensor<T>,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if p_c.numel() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cell_loss_terms",
            left: p_c.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let p = clamped(p_c, cfg.eps);
    let one_minus = Tensor::full(p.shape().to_vec(), T::ONE).sub(&p)?;
    // The visibility gate keeps suppressed labels out of the mask even if a
    // caller hands over bogus y_C values for target samples.
    let pos = mask_tensor::<T>(
        (0..labels.len()).map(|i| labels.label_visible[i] && labels.y_d[i] == 0 && labels.y_c[i] == 1),
    );
    let neg = mask_tensor::<T>(
        (0..labels.len()).map(|i| labels.label_visible[i] && labels.y_d[i] == 0 && labels.y_c[i] == 0),
    );
    let terms = pos.mul(&p.log()?)?.add(&neg.mul(&one_minus.log()?)?)?.neg();
    Ok(terms)
}

/// Weighted total: `gamma / n_source * sum(cell_terms) + domain_sum`.
/// A batch without source samples drops the classification term and bumps
/// the diagnostic counter instead of dividing by zero.
pub fn total_loss<T: Scalar>(
    cell_terms: &Tensor<T>,
    domain_loss_sum: &Tensor<T>,
    y_d: &[u8],
    cfg: &LossConfig,
    diagnostics: Option<&LossDiagnostics>,
) -> Result<Tensor<T>> {
    if cell_terms.numel() != y_d.len() {
        return Err(Error::ShapeMismatch {
            op: "total_loss",
            left: cell_terms.shape().to_vec(),
            right: vec![y_d.len()],
        });
    }
    let n_source = y_d.iter().filter(|&&d| d == 0).count();
    if n_source == 0 {
        if let Some(diag) = diagnostics {
            diag.zero_source_batches.set(diag.zero_source_batches.get() + 1);
        }
        return Ok(domain_loss_sum.clone());
    }
    let weight = T::from_f64(cfg.gamma / n_source as f64);
    cell_terms.sum().scale(weight).add(domain_loss_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn domain_loss_half_probability() {
        let cfg = LossConfig::default();
        let loss = domain_loss(&probs(&[0.5]), &[1], &cfg).unwrap();
        assert!((loss.item() - LN2).abs() < 1e-6);
        assert!((loss.item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn domain_loss_sums_over_batch() {
        let cfg = LossConfig::default();
        let loss = domain_loss(&probs(&[0.5, 0.5]), &[0, 1], &cfg).unwrap();
        assert!((loss.item() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn domain_loss_clamp_keeps_values_finite() {
        let cfg = LossConfig::default();
        let loss = domain_loss(&probs(&[1.0 - 1e-7]), &[0], &cfg).unwrap();
        assert!((loss.item() - (-(1e-7f64).ln())).abs() < 1e-3);
        assert!((loss.item() - 16.118).abs() < 1e-2);

        // Extreme raw probabilities stay finite thanks to the clamp.
        for p in [0.0, 1.0] {
            for y in [0u8, 1u8] {
                let l = domain_loss(&probs(&[p]), &[y], &cfg).unwrap();
                assert!(l.item().is_finite());
            }
        }
    }

    #[test]
    fn domain_loss_length_mismatch() {
        let cfg = LossConfig::default();
        assert!(domain_loss(&probs(&[0.5]), &[0, 1], &cfg).is_err());
    }

    #[test]
    fn cell_terms_match_hand_values() {
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 0, 1], vec![0, 0, 1]).unwrap();
        let terms = cell_loss_terms(&probs(&[0.5, 0.9, 0.123]), &labels, &cfg).unwrap();
        let t = terms.to_vec();
        assert!((t[0] - LN2).abs() < 1e-6); // y_C=1, y_D=0 at p=0.5
        assert!((t[1] - 2.302585).abs() < 1e-6); // y_C=0, y_D=0 at p=0.9
        assert_eq!(t[2], 0.0); // target sample contributes exactly zero
    }

    #[test]
    fn target_samples_contribute_exactly_zero_for_any_probability() {
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1], vec![1]).unwrap();
        for p in [0.0, 0.1, 0.5, 0.77, 1.0] {
            let terms = cell_loss_terms(&probs(&[p]), &labels, &cfg).unwrap();
            assert_eq!(terms.to_vec()[0], 0.0);
        }
    }

    #[test]
    fn total_loss_two_sample_hand_case() {
        // One source sample with cell term ln 2, one target sample, both
        // domain probabilities at 0.5: ln2 / 1 + 2 ln2 = 2.079442.
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 1], vec![0, 1]).unwrap();
        let p_c = probs(&[0.5, 0.5]);
        let p_d = probs(&[0.5, 0.5]);
        let cell = cell_loss_terms(&p_c, &labels, &cfg).unwrap();
        let dom = domain_loss(&p_d, &labels.y_d, &cfg).unwrap();
        let total = total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap();
        assert!((total.item() - 2.0794).abs() < 1e-4);
        assert!((total.item() - 3.0 * LN2).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_leaves_domain_sum_only() {
        let cfg = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        let labels = BatchLabels::training(vec![1, 0], vec![0, 0]).unwrap();
        let cell = cell_loss_terms(&probs(&[0.3, 0.3]), &labels, &cfg).unwrap();
        let dom = domain_loss(&probs(&[0.4, 0.6]), &labels.y_d, &cfg).unwrap();
        let total = total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap();
        assert_eq!(total.item(), dom.item());
    }

    #[test]
    fn all_source_batch_reduces_to_mean_plus_domain_sum() {
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 0], vec![0, 0]).unwrap();
        let p_c = probs(&[0.6, 0.2]);
        let p_d = probs(&[0.3, 0.7]);
        let cell = cell_loss_terms(&p_c, &labels, &cfg).unwrap();
        let dom = domain_loss(&p_d, &labels.y_d, &cfg).unwrap();
        let total = total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap();
        let cell_mean = cell.to_vec().iter().sum::<f64>() / 2.0;
        let dom_hand = -(1.0f64 - 0.3).ln() - (1.0f64 - 0.7).ln();
        assert!((total.item() - (cell_mean + dom_hand)).abs() < 1e-12);
    }

    #[test]
    fn zero_source_batch_falls_back_and_counts() {
        let cfg = LossConfig::default();
        let diag = LossDiagnostics::default();
        let labels = BatchLabels::training(vec![0, 1], vec![1, 1]).unwrap();
        let cell = cell_loss_terms(&probs(&[0.5, 0.5]), &labels, &cfg).unwrap();
        let dom = domain_loss(&probs(&[0.5, 0.5]), &labels.y_d, &cfg).unwrap();
        let total = total_loss(&cell, &dom, &labels.y_d, &cfg, Some(&diag)).unwrap();
        assert_eq!(total.item(), dom.item());
        assert_eq!(diag.zero_source_batches.get(), 1);
    }

    #[test]
    fn mask_exactness_is_bitwise() {
        // Perturbing the cell probability of a target sample must leave the
        // total loss bit-identical.
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 1, 0], vec![0, 1, 0]).unwrap();
        let p_d = probs(&[0.4, 0.8, 0.3]);
        let total_at = |target_p: f64| -> f64 {
            let p_c = probs(&[0.7, target_p, 0.2]);
            let cell = cell_loss_terms(&p_c, &labels, &cfg).unwrap();
            let dom = domain_loss(&p_d, &labels.y_d, &cfg).unwrap();
            total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap().item()
        };
        let reference = total_at(0.5);
        for p in [0.0, 0.01, 0.33, 0.99, 1.0] {
            assert_eq!(reference.to_bits(), total_at(p).to_bits());
        }
    }

    #[test]
    fn duplicating_source_samples_keeps_classification_term() {
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 0, 1], vec![0, 0, 1]).unwrap();
        let p_c = probs(&[0.6, 0.25, 0.5]);
        let cell = cell_loss_terms(&p_c, &labels, &cfg).unwrap();
        let n_src = labels.source_count() as f64;
        let term = cfg.gamma / n_src * cell.to_vec().iter().sum::<f64>();

        let labels2 = BatchLabels::training(vec![1, 1, 0, 0, 1], vec![0, 0, 0, 0, 1]).unwrap();
        let p_c2 = probs(&[0.6, 0.6, 0.25, 0.25, 0.5]);
        let cell2 = cell_loss_terms(&p_c2, &labels2, &cfg).unwrap();
        let term2 = cfg.gamma / labels2.source_count() as f64 * cell2.to_vec().iter().sum::<f64>();
        assert!((term - term2).abs() < 1e-12);
    }

    #[test]
    fn gradient_flows_through_losses() {
        let cfg = LossConfig::default();
        let labels = BatchLabels::training(vec![1, 0], vec![0, 1]).unwrap();
        let p_c = Tensor::param(vec![2], vec![0.6, 0.5]).unwrap();
        let p_d = Tensor::param(vec![2], vec![0.3, 0.8]).unwrap();
        let cell = cell_loss_terms(&p_c, &labels, &cfg).unwrap();
        let dom = domain_loss(&p_d, &labels.y_d, &cfg).unwrap();
        let total = total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap();
        total.backward().unwrap();
        let gc = p_c.grad().unwrap();
        // d/dp (-log p) = -1/p for the source positive; target slot exactly 0.
        assert!((gc[0] - (-1.0 / 0.6)).abs() < 1e-9);
        assert_eq!(gc[1], 0.0);
        let gd = p_d.grad().unwrap();
        assert!((gd[0] - 1.0 / 0.7).abs() < 1e-9); // -log(1-p) differentiates to 1/(1-p)
        assert!((gd[1] - (-1.0 / 0.8)).abs() < 1e-9);
    }

    #[test]
    fn training_labels_enforce_visibility_rule() {
        let labels = BatchLabels::training(vec![1, 0], vec![0, 1]).unwrap();
        assert_eq!(labels.label_visible, vec![true, false]);
        assert!(BatchLabels::training(vec![2, 0], vec![0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_decreasing_in_source_positive_probability(
            p1 in 1e-6f64..0.999_998,
            delta in 1e-6f64..0.5,
        ) {
            let p2 = (p1 + delta).min(1.0 - 1e-6);
            prop_assume!(p2 > p1);
            let cfg = LossConfig::default();
            let labels = BatchLabels::training(vec![1, 1], vec![0, 1]).unwrap();
            let eval = |p: f64| {
                let cell = cell_loss_terms(&probs(&[p, 0.5]), &labels, &cfg).unwrap();
                let dom = domain_loss(&probs(&[0.5, 0.5]), &labels.y_d, &cfg).unwrap();
                total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap().item()
            };
            prop_assert!(eval(p2) < eval(p1));
        }

        #[test]
        fn loss_finite_for_any_probability_vector(
            p_c in proptest::collection::vec(0.0f64..=1.0, 4),
            p_d in proptest::collection::vec(0.0f64..=1.0, 4),
        ) {
            let cfg = LossConfig::default();
            let labels = BatchLabels::training(vec![1, 0, 1, 0], vec![0, 0, 1, 1]).unwrap();
            let cell = cell_loss_terms(&probs(&p_c), &labels, &cfg).unwrap();
            let dom = domain_loss(&probs(&p_d), &labels.y_d, &cfg).unwrap();
            let total = total_loss(&cell, &dom, &labels.y_d, &cfg, None).unwrap();
            prop_assert!(total.item().is_finite());
        }
    }
}
