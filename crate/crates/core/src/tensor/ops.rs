//! Tensor operations: elementwise suite, reductions, shape ops, matrix
//! product, and the im2col unfolding that backs convolution.
//!
//! Broadcasting follows trailing-axis alignment with extent-1 stretching.
//! Every backward path is deterministic: plain loops, fixed reduction order.

use super::{strides_for, Scalar, Tensor};
use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Shape produced by broadcasting `a` against `b`, trailing axes aligned.
pub fn broadcast_shapes(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Broadcast strides of `shape` against `out_shape`: stride 0 on stretched axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

fn apply_binary<T: Scalar>(
    out_shape: &[usize],
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let out_strides = strides_for(out_shape);
    let mut out = Vec::with_capacity(numel);
    for lin in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        let mut rem = lin;
        for d in 0..out_shape.len() {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            ia += idx * sa[d];
            ib += idx * sb[d];
        }
        out.push(f(a[ia], b[ib]));
    }
    out
}

/// Sums `grad` (shaped `out_shape`) back down to `in_shape`, collapsing
/// stretched and prepended axes. Inverse of broadcasting, for backward.
pub(crate) fn reduce_broadcast<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    in_shape: &[usize],
) -> Vec<T> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let numel_in: usize = in_shape.iter().product();
    let mut out = vec![T::ZERO; numel_in];
    let s_in = broadcast_strides(in_shape, out_shape);
    let out_strides = strides_for(out_shape);
    for (lin, &g) in grad.iter().enumerate() {
        let mut ii = 0;
        let mut rem = lin;
        for d in 0..out_shape.len() {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            ii += idx * s_in[d];
        }
        out[ii] += g;
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape(), "add")?;
        let data = apply_binary(
            &out_shape,
            &self.data(),
            self.shape(),
            &rhs.data(),
            rhs.shape(),
            |x, y| x + y,
        );
        let (la, lb) = (self.shape().to_vec(), rhs.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "add",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_broadcast(g, &os, &la)),
                    Some(reduce_broadcast(g, &os, &lb)),
                ]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape(), "sub")?;
        let data = apply_binary(
            &out_shape,
            &self.data(),
            self.shape(),
            &rhs.data(),
            rhs.shape(),
            |x, y| x - y,
        );
        let (la, lb) = (self.shape().to_vec(), rhs.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "sub",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let gb: Vec<T> = reduce_broadcast(g, &os, &lb).iter().map(|&v| -v).collect();
                vec![Some(reduce_broadcast(g, &os, &la)), Some(gb)]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape(), "mul")?;
        let a = self.to_vec();
        let b = rhs.to_vec();
        let data = apply_binary(&out_shape, &a, self.shape(), &b, rhs.shape(), |x, y| x * y);
        let (la, lb) = (self.shape().to_vec(), rhs.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "mul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let gb_full = apply_binary(&os, g, &os, &a, &la, |gv, av| gv * av);
                let ga_full = apply_binary(&os, g, &os, &b, &lb, |gv, bv| gv * bv);
                vec![
                    Some(reduce_broadcast(&ga_full, &os, &la)),
                    Some(reduce_broadcast(&gb_full, &os, &lb)),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| -x).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "neg",
            vec![self.clone()],
            Box::new(|g| vec![Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    /// Multiply by a compile-time-known constant (not a graph input).
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by `c`.
    /// With `c = -lambda` this is the gradient reversal layer.
    pub fn scale_grad(&self, c: T) -> Tensor<T> {
        Tensor::from_op(
            self.shape().to_vec(),
            self.to_vec(),
            "scale_grad",
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let x = self.to_vec();
        let data: Vec<T> = x.iter().map(|&v| v.maximum(T::ZERO)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "relu",
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                        .collect(),
                )]
            }),
        )
    }

    /// Natural log. Errors on any non-positive element; callers clamp first.
    pub fn log(&self) -> Result<Tensor<T>> {
        let x = self.to_vec();
        if let Some(bad) = x.iter().find(|v| **v <= T::ZERO) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let data: Vec<T> = x.iter().map(|&v| v.ln()).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "log",
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(&x).map(|(&gv, &xv)| gv / xv).collect())]),
        ))
    }

    /// Clamp to `[lo, hi]`; subgradient is 1 inside the interval, 0 outside.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let x = self.to_vec();
        let data: Vec<T> = x.iter().map(|&v| v.maximum(lo).minimum(hi)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "clamp",
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { T::ZERO })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let y: Vec<T> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= T::ZERO {
                    T::ONE / (T::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        let saved = y.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            y,
            "sigmoid",
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&saved)
                        .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let numel = self.numel();
        Tensor::from_op(
            vec![1],
            vec![acc],
            "sum",
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; numel])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let numel = self.numel();
        let mut acc = T::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let inv = T::ONE / T::from_f64(numel as f64);
        Tensor::from_op(
            vec![1],
            vec![acc * inv],
            "mean",
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] * inv; numel])]),
        )
    }

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&self) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let width = *shape.last().expect("softmax needs rank >= 1");
        let x = self.to_vec();
        let mut y = vec![T::ZERO; x.len()];
        for row in 0..x.len() / width {
            let s = &x[row * width..(row + 1) * width];
            let mut mx = s[0];
            for &v in s {
                mx = mx.maximum(v);
            }
            let mut denom = T::ZERO;
            for (j, &v) in s.iter().enumerate() {
                let e = (v - mx).exp();
                y[row * width + j] = e;
                denom += e;
            }
            for j in 0..width {
                y[row * width + j] /= denom;
            }
        }
        let saved = y.clone();
        Tensor::from_op(
            shape,
            y,
            "softmax",
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; g.len()];
                for row in 0..g.len() / width {
                    let o = row * width;
                    let mut dot = T::ZERO;
                    for j in 0..width {
                        dot += g[o + j] * saved[o + j];
                    }
                    for j in 0..width {
                        dx[o + j] = saved[o + j] * (g[o + j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape,
                detail: format!("tensor has {} elements", self.numel()),
            });
        }
        Ok(Tensor::from_op(
            new_shape,
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Permutes axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                detail: format!("axes {axes:?} is not a permutation"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_copy(&self.data(), &in_shape, axes);
        // Backward permutes by the inverse permutation.
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "permute",
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_copy(g, &os, &inverse))]),
        ))
    }

    /// Column-wise concatenation of two `[N, d]` tensors.
    pub fn concat_cols(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let a = self.data();
        let b = rhs.data();
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(&a[i * da..(i + 1) * da]);
            data.extend_from_slice(&b[i * db..(i + 1) * db]);
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![n, da + db],
            data,
            "concat_cols",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut ga = vec![T::ZERO; n * da];
                let mut gb = vec![T::ZERO; n * db];
                for i in 0..n {
                    let row = &g[i * (da + db)..(i + 1) * (da + db)];
                    ga[i * da..(i + 1) * da].copy_from_slice(&row[..da]);
                    gb[i * db..(i + 1) * db].copy_from_slice(&row[da..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.to_vec();
        let b = rhs.to_vec();
        let mut out = vec![T::ZERO; m * n];
        gemm(m, k, n, &a, &b, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            "matmul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // dA = dC . B^T, dB = A^T . dC
                let gc = ArrayView2::from_shape((m, n), g).unwrap();
                let av = ArrayView2::from_shape((m, k), a.as_slice()).unwrap();
                let bv = ArrayView2::from_shape((k, n), b.as_slice()).unwrap();
                let mut da = vec![T::ZERO; m * k];
                let mut db = vec![T::ZERO; k * n];
                {
                    let mut dav = ArrayViewMut2::from_shape((m, k), da.as_mut_slice()).unwrap();
                    general_mat_mul(T::ONE, &gc, &bv.t(), T::ZERO, &mut dav);
                }
                {
                    let mut dbv = ArrayViewMut2::from_shape((k, n), db.as_mut_slice()).unwrap();
                    general_mat_mul(T::ONE, &av.t(), &gc, T::ZERO, &mut dbv);
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// im2col unfolding: `[N, C, H, W]` to `[N*OH*OW, C*kh*kw]` receptive-field
    /// rows, zero-padded. Backward is the col2im scatter-add.
    pub fn unfold(&self, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "unfold",
                shape: s.to_vec(),
                detail: "expected [N, C, H, W]".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "unfold",
                shape: s.to_vec(),
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape {
                op: "unfold",
                shape: s.to_vec(),
                detail: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let x = self.data();
        let mut cols = vec![T::ZERO; n * oh * ow * ckk];
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((ni * oh + oy) * ow + ox) * ckk;
                    for ci in 0..c {
                        let plane = (ni * c + ci) * h * w;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = plane + iy as usize * w;
                            let dst = row + (ci * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cols[dst + kx] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        let in_shape = s.to_vec();
        Ok(Tensor::from_op(
            vec![n * oh * ow, ckk],
            cols,
            "unfold",
            vec![self.clone()],
            Box::new(move |g| {
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let mut dx = vec![T::ZERO; n * c * h * w];
                for ni in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = ((ni * oh + oy) * ow + ox) * ckk;
                            for ci in 0..c {
                                let plane = (ni * c + ci) * h * w;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let dst = plane + iy as usize * w;
                                    let src = row + (ci * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[dst + ix as usize] += g[src + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Max pooling over `[N, C, H, W]`; ties resolve to the first maximum in
    /// scan order. Backward routes the gradient to the saved argmax.
    pub fn maxpool2d(&self, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: s.to_vec(),
                detail: "expected [N, C, H, W]".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if stride == 0 || k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: s.to_vec(),
                detail: format!("kernel {k}, stride {stride}, padding {padding}"),
            });
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let x = self.data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![usize::MAX; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::from_f64(f64::NEG_INFINITY);
                        let mut best_idx = usize::MAX;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = plane + iy as usize * w + ix as usize;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        drop(x);
        let in_numel = n * c * h * w;
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            "maxpool2d",
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; in_numel];
                for (o, &idx) in argmax.iter().enumerate() {
                    dx[idx] += g[o];
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Global average pool: `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: s.to_vec(),
                detail: "expected [N, C, H, W]".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let area = h * w;
        let inv = T::ONE / T::from_f64(area as f64);
        let x = self.data();
        let mut out = vec![T::ZERO; n * c];
        for (o, item) in out.iter_mut().enumerate() {
            let base = o * area;
            let mut acc = T::ZERO;
            for &v in &x[base..base + area] {
                acc += v;
            }
            *item = acc * inv;
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            "global_avg_pool",
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; n * c * area];
                for (o, &gv) in g.iter().enumerate() {
                    let gs = gv * inv;
                    for v in &mut dx[o * area..(o + 1) * area] {
                        *v = gs;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Copies `data` (shaped `in_shape`) into the axis order given by `axes`.
fn permute_copy<T: Scalar>(data: &[T], in_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_for(in_shape);
    let out_strides = strides_for(&out_shape);
    let numel: usize = in_shape.iter().product();
    let mut out = vec![data.first().copied().unwrap_or(T::ZERO); numel];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut src = 0;
        let mut rem = lin;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            src += idx * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    out
}

fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let av = ArrayView2::from_shape((m, k), a).unwrap();
    let bv = ArrayView2::from_shape((k, n), b).unwrap();
    let mut cv = ArrayViewMut2::from_shape((m, n), out).unwrap();
    general_mat_mul(T::ONE, &av, &bv, T::ZERO, &mut cv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_grad_wrt_a_frozen() {
        // d/dA sum(A.B) at A=[[1,2]], B=[[3],[4]] equals [[3,4]]; value frozen
        // from the central-difference oracle at 64-bit, step 1e-5.
        let a = p(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let s = a.matmul(&b).unwrap().sum();
        s.backward().unwrap();
        let g = a.grad().unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn relu_and_log_basics() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);

        let y = p(&[1], &[0.5]);
        let l = y.log().unwrap().sum();
        l.backward().unwrap();
        assert!((y.grad().unwrap()[0] - 2.0).abs() < 1e-12);

        assert!(t(&[2], &[0.0, 1.0]).log().is_err());
        assert!(t(&[1], &[-3.0]).log().is_err());
    }

    #[test]
    fn softmax_symmetry_and_rows() {
        let x = t(&[2], &[0.0, 0.0]);
        assert_eq!(x.softmax_last().to_vec(), vec![0.5, 0.5]);

        let x = t(&[2, 2], &[1.0, 1.0, 5.0, 5.0]);
        let y = x.softmax_last().to_vec();
        assert!(y.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn clamp_subgradient() {
        let x = p(&[3], &[-1.0, 0.5, 2.0]);
        let s = x.clamp(0.0, 1.0).sum();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_grad() {
        let a = p(&[2, 3], &[0.0; 6]);
        let b = p(&[3], &[1.0, 2.0, 3.0]);
        let s = a.add(&b).unwrap().sum();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 3]); // summed over the stretched axis
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn concat_cases() {
        let a = t(&[1, 1], &[1.0]);
        let b = t(&[1, 2], &[2.0, 3.0]);
        assert_eq!(a.concat_cols(&b).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);

        // N x 0 concatenated with N x d equals b.
        let empty = t(&[2, 0], &[]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = empty.concat_cols(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), b.to_vec());

        let (ga, gb) = {
            let a = p(&[2, 1], &[0.0, 0.0]);
            let b = p(&[2, 2], &[0.0; 4]);
            a.concat_cols(&b).unwrap().sum().backward().unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        assert_eq!(ga, vec![1.0; 2]);
        assert_eq!(gb, vec![1.0; 4]);

        let a = t(&[2, 1], &[0.0; 2]);
        let b = t(&[3, 1], &[0.0; 3]);
        assert!(a.concat_cols(&b).is_err());
    }

    #[test]
    fn unfold_conv_ones_and_shape_law() {
        // 1x1x3x3 ones against a 3x3 ones kernel, stride 1, no padding: sum is 9.
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let cols = x.unfold(3, 3, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 9]);
        let w = t(&[9, 1], &[1.0; 9]);
        assert_eq!(cols.matmul(&w).unwrap().to_vec(), vec![9.0]);

        // Shape law: 4x4 input, 3x3 kernel, stride 1, pad 1 keeps 4x4.
        let x = t(&[1, 1, 4, 4], &[0.5; 16]);
        let cols = x.unfold(3, 3, 1, 1).unwrap();
        assert_eq!(cols.shape(), &[16, 9]);

        assert!(x.unfold(5, 5, 1, 0).is_err());
        assert!(x.unfold(3, 3, 0, 0).is_err());
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let x = p(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]);
        let y = x.maxpool2d(2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_values() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0]);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.to_vec(), vec![2.5, 15.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.permute(&[1, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn scale_grad_is_identity_forward_scaled_backward() {
        let x = p(&[2], &[1.5, -2.0]);
        let y = x.scale_grad(-0.5);
        assert_eq!(y.to_vec(), vec![1.5, -2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-0.5, -0.5]);
    }
}
