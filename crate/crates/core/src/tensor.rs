//! Dense row-major tensor with shape-checked arithmetic, 2-D convolution and
//! patch extraction.
//!
//! Values are stored as `f64` regardless of the tagged element type; the tag
//! controls on-disk representation only. Converting `f32` data through `f64`
//! and back is lossless, so NPY round-trips stay byte-identical. All
//! reductions therefore accumulate in `f64` by construction.

use crate::error::{Error, Result};

/// On-disk element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    pub fn item_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense multi-dimensional array, C-order (last index fastest).
///
/// Semantics are carried by convention: feature maps are `C x H x W`,
/// filter banks `C_out x C_in x k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds an `f64`-tagged tensor from a flat buffer.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, Dtype::F64)
    }

    /// Builds a tensor with an explicit dtype tag. `f32`-tagged tensors still
    /// hold `f64` values; they are rounded to `f32` on write.
    pub fn with_dtype(shape: impl Into<Vec<usize>>, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "all dimension sizes must be >= 1, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expect} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Retags the tensor. Retagging to `f32` rounds values through `f32` so
    /// that in-memory values always equal what a write-then-read would yield.
    pub fn astype(mut self, dtype: Dtype) -> Self {
        if dtype == Dtype::F32 && self.dtype != Dtype::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Elementwise `alpha * self + beta * other`; shapes must agree.
    pub fn lin_comb(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "lin_comb shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: Dtype::F64,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: Dtype::F64,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Dimension(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// 2-D convolution (cross-correlation indexing, zero padding).
///
/// `input` is `C_in x H x W`, `filters` is `C_out x C_in x k x k` with odd
/// `k = 2s + 1`, `bias` is `C_out`, and `padding` must equal `s` so the
/// output is `C_out x H x W`. Out-of-image reads are zero.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    input.expect_rank(3, "conv2d input")?;
    filters.expect_rank(4, "conv2d filters")?;
    bias.expect_rank(1, "conv2d bias")?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, fc_in, kh, kw) = (
        filters.shape[0],
        filters.shape[1],
        filters.shape[2],
        filters.shape[3],
    );
    if fc_in != c_in {
        return Err(Error::Dimension(format!(
            "conv2d: input has {c_in} channels but filters expect {fc_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv2d: filter support must be square and odd, got {kh}x{kw}"
        )));
    }
    if bias.shape[0] != c_out {
        return Err(Error::Dimension(format!(
            "conv2d: bias length {} != {c_out} output channels",
            bias.shape[0]
        )));
    }
    let s = (kh - 1) / 2;
    if padding != s {
        return Err(Error::Dimension(format!(
            "conv2d: padding {padding} must equal filter extent {s}"
        )));
    }

    let mut out = vec![0.0f64; c_out * h * w];
    let inp = input.data();
    let flt = filters.data();
    let plane = h * w;
    for d in 0..c_out {
        let b = bias.data()[d];
        for a in 0..h {
            for bcol in 0..w {
                let mut acc = 0.0f64;
                for j in 0..c_in {
                    let in_base = j * plane;
                    let f_base = (d * c_in + j) * kh * kw;
                    for p in 0..kh {
                        let row = a as isize + p as isize - s as isize;
                        if row < 0 || row >= h as isize {
                            continue;
                        }
                        let row_base = in_base + row as usize * w;
                        let f_row = f_base + p * kw;
                        for q in 0..kw {
                            let col = bcol as isize + q as isize - s as isize;
                            if col < 0 || col >= w as isize {
                                continue;
                            }
                            acc += flt[f_row + q] * inp[row_base + col as usize];
                        }
                    }
                }
                out[d * plane + a * w + bcol] = acc + b;
            }
        }
    }
    Tensor::from_vec(vec![c_out, h, w], out)
}

/// Patch extraction: turns `C x H x W` into `(C*k*k) x H x W` where row
/// `c*k*k + (p+s)*k + (q+s)` at pixel `(a, b)` holds `input[c][a+p][b+q]`
/// (zero outside the image). With this row order, a per-pixel dot product
/// against a flattened filter reproduces `conv2d` exactly.
pub fn unfold(input: &Tensor, k: usize, padding: usize) -> Result<Tensor> {
    input.expect_rank(3, "unfold input")?;
    if k % 2 == 0 {
        return Err(Error::Dimension(format!("unfold: k must be odd, got {k}")));
    }
    let s = (k - 1) / 2;
    if padding != s {
        return Err(Error::Dimension(format!(
            "unfold: padding {padding} must equal (k-1)/2 = {s}"
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let plane = h * w;
    let rows = c * k * k;
    let mut out = vec![0.0f64; rows * plane];
    let inp = input.data();
    for ci in 0..c {
        for p in 0..k {
            for q in 0..k {
                let r = ci * k * k + p * k + q;
                let out_base = r * plane;
                for a in 0..h {
                    let row = a as isize + p as isize - s as isize;
                    if row < 0 || row >= h as isize {
                        continue;
                    }
                    let in_base = ci * plane + row as usize * w;
                    for b in 0..w {
                        let col = b as isize + q as isize - s as isize;
                        if col < 0 || col >= w as isize {
                            continue;
                        }
                        out[out_base + a * w + b] = inp[in_base + col as usize];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![rows, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_multiply_add() {
        let input = t(&[1, 1, 1], &[2.0]);
        let filt = t(&[1, 1, 1, 1], &[3.0]);
        let bias = t(&[1], &[1.0]);
        let out = conv2d(&input, &filt, &bias, 0).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn ones_3x3_window_overlaps() {
        // Hand enumeration: center pixel sees all 9 ones, corners see 4.
        let input = t(&[1, 3, 3], &[1.0; 9]);
        let filt = t(&[1, 1, 3, 3], &[1.0; 9]);
        let bias = t(&[1], &[0.0]);
        let out = conv2d(&input, &filt, &bias, 1).unwrap();
        assert_eq!(out.get(&[0, 1, 1]), 9.0);
        for &(a, b) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.get(&[0, a, b]), 4.0);
        }
        for &(a, b) in &[(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(out.get(&[0, a, b]), 6.0);
        }
    }

    #[test]
    fn identity_filter_is_identity() {
        let input = t(&[2, 2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0, 0.5, 1.5, 2.5, 3.5, 4.5, 5.5]);
        // 2->2 channel identity: filter[d][j] = delta_dj at the center.
        let mut f = vec![0.0; 2 * 2 * 9];
        f[(0 * 2 + 0) * 9 + 4] = 1.0;
        f[(1 * 2 + 1) * 9 + 4] = 1.0;
        let filt = t(&[2, 2, 3, 3], &f);
        let bias = t(&[2], &[0.0, 0.0]);
        let out = conv2d(&input, &filt, &bias, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = t(&[2, 2, 2], &[0.0; 8]);
        let filt = t(&[1, 3, 1, 1], &[0.0; 3]);
        let bias = t(&[1], &[0.0]);
        assert!(matches!(
            conv2d(&input, &filt, &bias, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn unfold_k1_is_reshape() {
        let input = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = unfold(&input, 1, 0).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn unfold_padded_window() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = unfold(&input, 3, 1).unwrap();
        assert_eq!(out.shape(), &[9, 2, 2]);
        let at00: Vec<f64> = (0..9).map(|r| out.get(&[r, 0, 0])).collect();
        assert_eq!(at00, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_zero_input() {
        let input = Tensor::zeros(vec![3, 4, 5]).unwrap();
        let out = unfold(&input, 3, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_dot_equals_conv() {
        // Deterministic pseudo-random fixture.
        let mut rng = crate::rng::SplitMix64::new(7);
        let (c_in, c_out, h, w, k) = (3, 2, 5, 4, 3);
        let input = t(
            &[c_in, h, w],
            &(0..c_in * h * w).map(|_| rng.next_sym()).collect::<Vec<_>>(),
        );
        let filt = t(
            &[c_out, c_in, k, k],
            &(0..c_out * c_in * k * k)
                .map(|_| rng.next_sym())
                .collect::<Vec<_>>(),
        );
        let bias = Tensor::zeros(vec![c_out]).unwrap();
        let conv = conv2d(&input, &filt, &bias, 1).unwrap();
        let unf = unfold(&input, k, 1).unwrap();
        let rows = c_in * k * k;
        for d in 0..c_out {
            let fslice = &filt.data()[d * rows..(d + 1) * rows];
            for a in 0..h {
                for b in 0..w {
                    let dot: f64 = (0..rows).map(|r| fslice[r] * unf.get(&[r, a, b])).sum();
                    let got = conv.get(&[d, a, b]);
                    let denom = dot.abs().max(got.abs()).max(1e-12);
                    assert!(
                        ((dot - got) / denom).abs() < 1e-6,
                        "pixel ({a},{b}) channel {d}: {dot} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    proptest! {
        // conv2d is linear in its input for fixed filters and zero bias.
        #[test]
        fn conv_linearity(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let (c_in, c_out, h, w) = (2usize, 2usize, 4usize, 4usize);
            let mk = |rng: &mut crate::rng::SplitMix64, n: usize| {
                (0..n).map(|_| rng.next_sym()).collect::<Vec<_>>()
            };
            let x = t(&[c_in, h, w], &mk(&mut rng, c_in * h * w));
            let y = t(&[c_in, h, w], &mk(&mut rng, c_in * h * w));
            let filt = t(&[c_out, c_in, 3, 3], &mk(&mut rng, c_out * c_in * 9));
            let bias = Tensor::zeros(vec![c_out]).unwrap();
            let lhs = conv2d(&x.lin_comb(alpha, &y, beta).unwrap(), &filt, &bias, 1).unwrap();
            let cx = conv2d(&x, &filt, &bias, 1).unwrap();
            let cy = conv2d(&y, &filt, &bias, 1).unwrap();
            let rhs = cx.lin_comb(alpha, &cy, beta).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                let denom = l.abs().max(r.abs()).max(1e-9);
                prop_assert!(((l - r) / denom).abs() < 1e-6);
            }
        }
    }
}
