//! The dual-head network: a shared convolutional stem feeding a cell
//! classification head, and a gradient-reversed domain classification head
//! that also sees the cell head's intermediate features.
//!
//! Wiring: `features = stem(x)` flattened; cell head is
//! linear -> batch-norm -> ReLU -> linear -> sigmoid. The domain head applies
//! the gradient reversal layer to the features, then
//! linear -> batch-norm -> ReLU; with `concat_intermediate` the post-ReLU
//! cell hidden activations pass through the same reversal layer and are
//! concatenated before the final linear -> sigmoid. Reversal on every path
//! into the domain head keeps the adversarial signal from training the cell
//! head to be domain-discriminative.

use crate::error::{Error, Result};
use crate::layers::{grl_forward, BatchNorm, Conv2d, GrlConfig, Linear, Mode, ResidualBlock};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Convolutional stem configuration: a 7x7 stride-2 entry convolution, a
/// 3x3 stride-2 max pool, then four stages of residual blocks with widths
/// `base_width * [1, 2, 4, 8]`, ending in a global average pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub blocks_per_stage: [usize; 4],
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            in_channels: 3,
            base_width: 16,
            blocks_per_stage: [1, 1, 1, 1],
        }
    }
}

impl StemConfig {
    /// Preset with the classic 2-2-2-2 basic-block layout, for scaling up.
    pub fn resnet18_layout() -> Self {
        StemConfig {
            in_channels: 3,
            base_width: 64,
            blocks_per_stage: [2, 2, 2, 2],
        }
    }

    /// Width of the flattened feature vector after global average pooling.
    pub fn feature_dim(&self) -> usize {
        self.base_width * 8
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DannConfig {
    /// Side length of the square input patches.
    pub patch_size: usize,
    pub stem: StemConfig,
    /// Hidden width of the cell head's first linear layer.
    pub cell_hidden: usize,
    /// Hidden width of the domain head's first linear layer.
    pub domain_hidden: usize,
    pub grl: GrlConfig,
    /// Concatenate the (reversed) cell hidden activations into the domain
    /// head before its output layer.
    pub concat_intermediate: bool,
}

impl Default for DannConfig {
    fn default() -> Self {
        DannConfig {
            patch_size: 128,
            stem: StemConfig::default(),
            cell_hidden: 64,
            domain_hidden: 64,
            grl: GrlConfig::default(),
            concat_intermediate: true,
        }
    }
}

impl DannConfig {
    pub fn feature_dim(&self) -> usize {
        self.stem.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 32 || self.patch_size % 32 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a positive multiple of 32, got {}",
                self.patch_size
            )));
        }
        if self.stem.base_width < 1
            || self.stem.in_channels < 1
            || self.cell_hidden < 1
            || self.domain_hidden < 1
            || self.stem.blocks_per_stage.iter().any(|&b| b < 1)
        {
            return Err(Error::Config("all model widths must be >= 1".into()));
        }
        self.grl.validate()
    }
}

/// Per-batch head outputs plus the intermediates the analysis tooling needs.
pub struct HeadOutputs<T: Scalar> {
    /// Probability of the mitotic-figure class, shape `[N]`, in (0, 1).
    pub p_c: Tensor<T>,
    /// Probability of the target domain, shape `[N]`, in (0, 1).
    pub p_d: Tensor<T>,
    /// Flattened stem output, shape `[N, d_f]`.
    pub features: Tensor<T>,
    /// Post-ReLU activations of the cell head's first layer, shape `[N, h_C]`.
    pub cell_hidden: Tensor<T>,
}

pub struct DannModel<T: Scalar> {
    pub cfg: DannConfig,
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    blocks: Vec<ResidualBlock<T>>,
    cell_fc1: Linear<T>,
    cell_bn: BatchNorm<T>,
    cell_fc2: Linear<T>,
    dom_fc1: Linear<T>,
    dom_bn: BatchNorm<T>,
    dom_fc2: Linear<T>,
}

impl<T: Scalar> DannModel<T> {
    /// Builds a model with fan-in-scaled uniform weights, zero biases, and
    /// batch-norm scale 1 / shift 0. Construction order is fixed, so a seed
    /// fully determines every parameter.
    pub fn new(cfg: DannConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.stem.base_width;
        let conv1 = Conv2d::new(cfg.stem.in_channels, w, 7, 2, 3, &mut rng);
        let bn1 = BatchNorm::new(w);
        let mut blocks = Vec::new();
        let mut c_in = w;
        for (stage, &count) in cfg.stem.blocks_per_stage.iter().enumerate() {
            let c_out = w << stage;
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(c_in, c_out, stride, &mut rng));
                c_in = c_out;
            }
        }
        let d_f = cfg.feature_dim();
        let cell_fc1 = Linear::new(d_f, cfg.cell_hidden, &mut rng);
        let cell_bn = BatchNorm::new(cfg.cell_hidden);
        let cell_fc2 = Linear::new(cfg.cell_hidden, 1, &mut rng);
        let dom_fc1 = Linear::new(d_f, cfg.domain_hidden, &mut rng);
        let dom_bn = BatchNorm::new(cfg.domain_hidden);
        let dom_final_in = cfg.domain_hidden
            + if cfg.concat_intermediate {
                cfg.cell_hidden
            } else {
                0
            };
        let dom_fc2 = Linear::new(dom_final_in, 1, &mut rng);
        Ok(DannModel {
            cfg,
            conv1,
            bn1,
            blocks,
            cell_fc1,
            cell_bn,
            cell_fc2,
            dom_fc1,
            dom_bn,
            dom_fc2,
        })
    }

    /// Stem features for a batch: `[N, 3, S, S]` to `[N, d_f]`.
    pub fn stem_features(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.stem.in_channels || s[2] != self.cfg.patch_size || s[3] != self.cfg.patch_size {
            return Err(Error::InvalidShape {
                op: "stem_features",
                shape: s.to_vec(),
                detail: format!(
                    "expected [N, {}, {}, {}]",
                    self.cfg.stem.in_channels, self.cfg.patch_size, self.cfg.patch_size
                ),
            });
        }
        let mut h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        h = h.maxpool2d(3, 2, 1)?;
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        h.global_avg_pool()
    }

    /// Full dual-head forward pass. `lambda` is the current reversal
    /// strength (already evaluated from the GRL schedule).
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, lambda: f64) -> Result<HeadOutputs<T>> {
        let features = self.stem_features(x, mode)?;
        let n = features.shape()[0];

        let cell_pre = self.cell_fc1.forward(&features)?;
        let cell_hidden = self.cell_bn.forward(&cell_pre, mode)?.relu();
        let p_c = self
            .cell_fc2
            .forward(&cell_hidden)?
            .reshape(vec![n])?
            .sigmoid();

        let dom_in = grl_forward(&features, lambda);
        let dom_hidden = self
            .dom_bn
            .forward(&self.dom_fc1.forward(&dom_in)?, mode)?
            .relu();
        let dom_cat = if self.cfg.concat_intermediate {
            dom_hidden.concat_cols(&grl_forward(&cell_hidden, lambda))?
        } else {
            dom_hidden
        };
        let p_d = self
            .dom_fc2
            .forward(&dom_cat)?
            .reshape(vec![n])?
            .sigmoid();

        Ok(HeadOutputs {
            p_c,
            p_d,
            features,
            cell_hidden,
        })
    }

    /// Every trainable parameter exactly once, in a deterministic order
    /// that is stable across runs and processes.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.conv1.collect_params("stem.conv1", &mut out);
        self.bn1.collect_params("stem.bn1", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_params(&format!("stem.block{i}"), &mut out);
        }
        self.cell_fc1.collect_params("cell.fc1", &mut out);
        self.cell_bn.collect_params("cell.bn", &mut out);
        self.cell_fc2.collect_params("cell.fc2", &mut out);
        self.dom_fc1.collect_params("domain.fc1", &mut out);
        self.dom_bn.collect_params("domain.bn", &mut out);
        self.dom_fc2.collect_params("domain.fc2", &mut out);
        out
    }

    /// Parameters excluding the domain head, for baseline-mode training.
    pub fn parameters_without_domain_head(&self) -> Vec<(String, Tensor<T>)> {
        self.parameters()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("domain."))
            .collect()
    }

    /// Stem parameters only (the shared feature extractor).
    pub fn stem_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.parameters()
            .into_iter()
            .filter(|(name, _)| name.starts_with("stem."))
            .collect()
    }

    /// Batch-norm running statistics, named like the parameters.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.bn1.collect_buffers("stem.bn1", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_buffers(&format!("stem.block{i}"), &mut out);
        }
        self.cell_bn.collect_buffers("cell.bn", &mut out);
        self.dom_bn.collect_buffers("domain.bn", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}
