//! Neural layers: linear, batch normalization, 2-D convolution, residual
//! blocks, and the gradient reversal layer.
//!
//! Convolution is realized as im2col unfolding followed by one matrix
//! product, so it shares the matmul gradient path. Batch normalization is a
//! dedicated primitive with the classic hand-derived backward, verified
//! against finite differences.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Forward-pass mode: training uses batch statistics and updates running
/// buffers, eval freezes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fan-in-scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::make(shape, data, true, None)
}

/// Fully connected layer computing `x W^T + b`, weight shape `[out, in]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: uniform_fan_in(vec![d_out, d_in], d_in, rng),
            bias: Tensor::make(vec![d_out], vec![T::ZERO; d_out], true, None),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let wt = self.weight.permute(&[1, 0])?;
        x.matmul(&wt)?.add(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Batch normalization over `[N, d]` (per feature) or `[N, C, H, W]`
/// (per channel). Variance epsilon 1e-5, running-stat momentum 0.1.
/// Normalization uses the biased batch variance; the running variance stores
/// the unbiased estimate.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    features: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::make(vec![features], vec![T::ONE; features], true, None),
            beta: Tensor::make(vec![features], vec![T::ZERO; features], true, None),
            running_mean: Tensor::make(vec![features], vec![T::ZERO; features], false, None),
            running_var: Tensor::make(vec![features], vec![T::ONE; features], false, None),
            momentum: 0.1,
            eps: 1e-5,
            features,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match x.shape().len() {
            2 => self.forward_2d(x, mode),
            4 => {
                let s = x.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                if c != self.features {
                    return Err(Error::ShapeMismatch {
                        op: "batchnorm",
                        left: s,
                        right: vec![self.features],
                    });
                }
                let flat = x.permute(&[0, 2, 3, 1])?.reshape(vec![n * h * w, c])?;
                let y = self.forward_2d(&flat, mode)?;
                y.reshape(vec![n, h, w, c])?.permute(&[0, 3, 1, 2])
            }
            _ => Err(Error::InvalidShape {
                op: "batchnorm",
                shape: x.shape().to_vec(),
                detail: "expected [N, d] or [N, C, H, W]".into(),
            }),
        }
    }

    fn forward_2d(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let (m, c) = (s[0], s[1]);
        if c != self.features {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: s.to_vec(),
                right: vec![self.features],
            });
        }
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::InvalidShape {
                        op: "batchnorm",
                        shape: s.to_vec(),
                        detail: "train mode needs at least 2 rows".into(),
                    });
                }
                self.forward_train(x, m, c)
            }
            Mode::Eval => self.forward_eval(x, m, c),
        }
    }

    fn forward_train(&self, x: &Tensor<T>, m: usize, c: usize) -> Result<Tensor<T>> {
        let xd = x.to_vec();
        let inv_m = T::ONE / T::from_f64(m as f64);
        let mut mean = vec![T::ZERO; c];
        for row in 0..m {
            for col in 0..c {
                mean[col] += xd[row * c + col];
            }
        }
        for v in &mut mean {
            *v *= inv_m;
        }
        let mut var = vec![T::ZERO; c];
        for row in 0..m {
            for col in 0..c {
                let d = xd[row * c + col] - mean[col];
                var[col] += d * d;
            }
        }
        for v in &mut var {
            *v *= inv_m;
        }
        let eps = T::from_f64(self.eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::ZERO; m * c];
        for row in 0..m {
            for col in 0..c {
                xhat[row * c + col] = (xd[row * c + col] - mean[col]) * rstd[col];
            }
        }

        // Running statistics: only train mode touches them; unbiased variance.
        let mom = T::from_f64(self.momentum);
        let unbias = T::from_f64(m as f64 / (m as f64 - 1.0));
        self.running_mean.map_data_mut(|rm| {
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = (T::ONE - mom) * *r + mom * b;
            }
        });
        self.running_var.map_data_mut(|rv| {
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = (T::ONE - mom) * *r + mom * b * unbias;
            }
        });

        let g = self.gamma.to_vec();
        let mut y = vec![T::ZERO; m * c];
        {
            let b = self.beta.data();
            for row in 0..m {
                for col in 0..c {
                    y[row * c + col] = g[col] * xhat[row * c + col] + b[col];
                }
            }
        }

        let saved_xhat = xhat;
        let saved_rstd = rstd;
        let saved_gamma = g;
        Ok(Tensor::from_op(
            vec![m, c],
            y,
            "batchnorm_train",
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |up| {
                let inv_m = T::ONE / T::from_f64(m as f64);
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for row in 0..m {
                    for col in 0..c {
                        let idx = row * c + col;
                        sum_g[col] += up[idx];
                        sum_gx[col] += up[idx] * saved_xhat[idx];
                    }
                }
                let mut dx = vec![T::ZERO; m * c];
                for row in 0..m {
                    for col in 0..c {
                        let idx = row * c + col;
                        dx[idx] = saved_gamma[col]
                            * saved_rstd[col]
                            * (up[idx] - sum_g[col] * inv_m - saved_xhat[idx] * sum_gx[col] * inv_m);
                    }
                }
                vec![Some(dx), Some(sum_gx), Some(sum_g)]
            }),
        ))
    }

    fn forward_eval(&self, x: &Tensor<T>, m: usize, c: usize) -> Result<Tensor<T>> {
        let eps = T::from_f64(self.eps);
        let rstd: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::ONE / (v + eps).sqrt())
            .collect();
        let rmean = self.running_mean.to_vec();
        let xd = x.to_vec();
        let g = self.gamma.to_vec();
        let mut y = vec![T::ZERO; m * c];
        {
            let b = self.beta.data();
            for row in 0..m {
                for col in 0..c {
                    let idx = row * c + col;
                    y[idx] = g[col] * (xd[idx] - rmean[col]) * rstd[col] + b[col];
                }
            }
        }
        let saved_x = xd;
        let saved_rstd = rstd.clone();
        let saved_rmean = rmean;
        let saved_gamma = g;
        Ok(Tensor::from_op(
            vec![m, c],
            y,
            "batchnorm_eval",
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |up| {
                let mut dx = vec![T::ZERO; m * c];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for row in 0..m {
                    for col in 0..c {
                        let idx = row * c + col;
                        dx[idx] = up[idx] * saved_gamma[col] * saved_rstd[col];
                        dgamma[col] += up[idx] * (saved_x[idx] - saved_rmean[col]) * saved_rstd[col];
                        dbeta[col] += up[idx];
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

/// 2-D convolution, weight `[F, C, kh, kw]`, bias `[F]`.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: uniform_fan_in(vec![c_out, c_in, kernel, kernel], fan_in, rng),
            bias: Tensor::make(vec![c_out], vec![T::ZERO; c_out], true, None),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ws = self.weight.shape().to_vec();
        let (f, ckk) = (ws[0], ws[1] * ws[2] * ws[3]);
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let cols = x.unfold(ws[2], ws[3], self.stride, self.padding)?;
        let oh = (h + 2 * self.padding - ws[2]) / self.stride + 1;
        let ow = (w + 2 * self.padding - ws[3]) / self.stride + 1;
        let wmat = self.weight.reshape(vec![f, ckk])?.permute(&[1, 0])?;
        let out = cols.matmul(&wmat)?.add(&self.bias)?;
        out.reshape(vec![n, oh, ow, f])?.permute(&[0, 3, 1, 2])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Basic residual block: conv-bn-relu-conv-bn plus a shortcut, then relu.
/// The shortcut is a projection (1x1 conv + bn) when the stride or channel
/// count changes, identity otherwise.
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let projection = (stride != 1 || c_in != c_out)
            .then(|| (Conv2d::new(c_in, c_out, 1, stride, 0, rng), BatchNorm::new(c_out)));
        ResidualBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm::new(c_out),
            projection,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let main = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let main = self.bn2.forward(&self.conv2.forward(&main)?, mode)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(main.add(&shortcut)?.relu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &self.projection {
            conv.collect_params(&format!("{prefix}.proj"), out);
            bn.collect_params(&format!("{prefix}.proj_bn"), out);
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
        if let Some((_, bn)) = &self.projection {
            bn.collect_buffers(&format!("{prefix}.proj_bn"), out);
        }
    }
}

/// Gradient reversal configuration: reversal strength and its schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrlConfig {
    /// Reversal strength used by the constant schedule; must be >= 0.
    /// Zero disables the adversarial signal.
    pub lambda: f64,
    pub schedule: GrlSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// Linear ramp from `start` to `end` over the first `over_steps` steps,
    /// holding `end` afterwards.
    Ramp { start: f64, end: f64, over_steps: u64 },
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            lambda: 1.0,
            schedule: GrlSchedule::Constant,
        }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.schedule {
            GrlSchedule::Constant => self.lambda >= 0.0,
            GrlSchedule::Ramp { start, end, .. } => start >= 0.0 && end >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("GRL lambda must be non-negative".into()))
        }
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.lambda,
            GrlSchedule::Ramp {
                start,
                end,
                over_steps,
            } => {
                if over_steps == 0 || step >= over_steps {
                    end
                } else {
                    start + (end - start) * step as f64 / over_steps as f64
                }
            }
        }
    }
}

/// Gradient reversal layer: numerically the identity in the forward pass,
/// multiplies the incoming gradient by `-lambda` in the backward pass.
pub fn grl_forward<T: Scalar>(x: &Tensor<T>, lambda: f64) -> Tensor<T> {
    x.scale_grad(T::from_f64(-lambda))
}
