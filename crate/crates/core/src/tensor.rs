//! Dense row-major tensors and the three linear maps the networks are built
//! from: shared-kernel convolution, locally-connected (unshared-kernel)
//! convolution, and fully-connected transforms.
//!
//! Feature maps are stored height-major as `[H, W, C]`. Shared kernels are
//! `[D_K, D_K, M, N]` and unshared kernels `[D_G, D_G, D_K, D_K, M, N]`, so the
//! element written `G[k,l,n] = sum K[i,j,m,n] * F[(k-1)s+i, (l-1)s+j, m]` with
//! 1-based indices is computed here with 0-based storage as
//! `G[k][l][n] = sum K[i][j][m][n] * F[k*s+i-pad][l*s+j-pad][m]`, where reads
//! that land in the padding band contribute zero.
//!
//! Every reduction accumulates in `f64` in the fixed order `i`, then `j`, then
//! `m`, and the result is rounded to `f32` once. Repeated calls on identical
//! inputs are therefore bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major offset of a multi-index. Panics on rank or bound violations.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                assert!(i < extent, "index {i} out of bounds for extent {extent}");
                acc * extent + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape("dot", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape("max_abs_diff", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(op, &self.shape, shape));
        }
        Ok(())
    }
}

/// Output extent of a strided, zero-padded window sweep, or `None` when the
/// window does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Spatial bookkeeping shared by the shared and unshared convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_c]
    }

    /// Input coordinate read by output row/column `o` at kernel tap `i`, or
    /// `None` inside the padding band.
    #[inline]
    pub fn source(&self, o: usize, i: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + i).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    /// Number of non-padding taps feeding output position `(oy, ox)` per
    /// output channel.
    pub fn fan_in(&self, oy: usize, ox: usize) -> usize {
        let rows = (0..self.ksize)
            .filter(|&i| self.source(oy, i, self.in_h).is_some())
            .count();
        let cols = (0..self.ksize)
            .filter(|&j| self.source(ox, j, self.in_w).is_some())
            .count();
        rows * cols * self.in_c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    weights: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::Input(format!(
                "conv kernel must have shape [D_K, D_K, M, N], got {s:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Input("stride must be positive".into()));
        }
        Ok(Self {
            weights,
            stride,
            padding,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn ksize(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<[usize; 3]> {
        Ok(self.geometry(input_shape)?.output_shape())
    }

    pub(crate) fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        geometry_for(
            "conv2d",
            input_shape,
            self.ksize(),
            self.in_channels(),
            self.out_channels(),
            self.stride,
            self.padding,
            self.weights.shape(),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn geometry_for(
    op: &'static str,
    input_shape: &[usize],
    ksize: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
    padding: usize,
    kernel_shape: &[usize],
) -> Result<ConvGeometry> {
    if input_shape.len() != 3 || input_shape[2] != in_c {
        return Err(Error::dim(op, input_shape, kernel_shape));
    }
    let (in_h, in_w) = (input_shape[0], input_shape[1]);
    let out_h = conv_output_size(in_h, ksize, stride, padding);
    let out_w = conv_output_size(in_w, ksize, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            ksize,
            stride,
            padding,
        }),
        _ => Err(Error::dim(op, input_shape, kernel_shape)),
    }
}

/// One full `D_K x D_K x M` kernel per output position and output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalKernel {
    weights: Tensor,
    stride: usize,
    padding: usize,
}

impl LocalKernel {
    pub fn new(weights: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 6 || s[2] != s[3] || s[2] == 0 {
            return Err(Error::Input(format!(
                "local kernel must have shape [D_G, D_G, D_K, D_K, M, N], got {s:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Input("stride must be positive".into()));
        }
        Ok(Self {
            weights,
            stride,
            padding,
        })
    }

    /// Replicates a shared kernel to every output position of an input of
    /// the given `[H, W, M]` shape.
    pub fn broadcast(kernel: &ConvKernel, input_shape: &[usize]) -> Result<Self> {
        let g = kernel.geometry(input_shape)?;
        let per_position = kernel.weights.data();
        let mut data = Vec::with_capacity(g.out_h * g.out_w * per_position.len());
        for _ in 0..g.out_h * g.out_w {
            data.extend_from_slice(per_position);
        }
        let mut shape = vec![g.out_h, g.out_w];
        shape.extend_from_slice(kernel.weights.shape());
        Self::new(Tensor::new(shape, data)?, kernel.stride, kernel.padding)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn ksize(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[4]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[5]
    }

    /// The `[D_K, D_K, M, N]` slice used at output position `(k, l)`.
    pub fn position_kernel(&self, k: usize, l: usize) -> Result<ConvKernel> {
        let s = self.weights.shape();
        if k >= s[0] || l >= s[1] {
            return Err(Error::dim("position_kernel", &[k, l], &s[..2]));
        }
        let per = s[2] * s[3] * s[4] * s[5];
        let start = (k * s[1] + l) * per;
        let data = self.weights.data()[start..start + per].to_vec();
        ConvKernel::new(Tensor::new(s[2..].to_vec(), data)?, self.stride, self.padding)
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<[usize; 3]> {
        Ok(self.geometry(input_shape)?.output_shape())
    }

    pub(crate) fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        let g = geometry_for(
            "local_conv",
            input_shape,
            self.ksize(),
            self.in_channels(),
            self.out_channels(),
            self.stride,
            self.padding,
            self.weights.shape(),
        )?;
        let s = self.weights.shape();
        if s[0] != g.out_h || s[1] != g.out_w {
            return Err(Error::dim("local_conv", &s[..2], &[g.out_h, g.out_w]));
        }
        Ok(g)
    }
}

pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let g = kernel.geometry(input.shape())?;
    let mut out = vec![0.0f32; g.output_len()];
    conv_forward_raw(&g, input.data(), kernel.weights.data(), None, &mut out);
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Adjoints of [`conv2d_forward`]: `(grad_input, grad_weights)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = kernel.geometry(input.shape())?;
    grad_output.expect_shape("conv2d_backward", &g.output_shape())?;
    let mut grad_in = vec![0.0f64; g.input_len()];
    let mut grad_w = vec![0.0f64; kernel.weights.len()];
    conv_backward_raw(
        &g,
        input.data(),
        kernel.weights.data(),
        grad_output.data(),
        &mut grad_w,
        Some(&mut grad_in),
    );
    Ok((
        Tensor::new(input.shape().to_vec(), to_f32(&grad_in))?,
        Tensor::new(kernel.weights.shape().to_vec(), to_f32(&grad_w))?,
    ))
}

pub fn local_conv_forward(input: &Tensor, kernel: &LocalKernel) -> Result<Tensor> {
    let g = kernel.geometry(input.shape())?;
    let mut out = vec![0.0f32; g.output_len()];
    local_conv_forward_raw(&g, input.data(), kernel.weights.data(), None, &mut out);
    Tensor::new(g.output_shape().to_vec(), out)
}

pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (p, q) = linear_dims(input, weights)?;
    bias.expect_shape("linear_forward", &[q])?;
    let mut out = vec![0.0f32; q];
    linear_forward_raw(p, q, input.data(), weights.data(), Some(bias.data()), &mut out);
    Tensor::new(vec![q], out)
}

/// Adjoints of [`linear_forward`]: `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (p, q) = linear_dims(input, weights)?;
    grad_output.expect_shape("linear_backward", &[q])?;
    let mut grad_in = vec![0.0f64; p];
    let mut grad_w = vec![0.0f64; p * q];
    linear_backward_raw(
        p,
        q,
        input.data(),
        weights.data(),
        grad_output.data(),
        &mut grad_w,
        Some(&mut grad_in),
    );
    Ok((
        Tensor::new(vec![p], to_f32(&grad_in))?,
        Tensor::new(vec![p, q], to_f32(&grad_w))?,
        grad_output.clone(),
    ))
}

fn linear_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let ws = weights.shape();
    if input.rank() != 1 || ws.len() != 2 || ws[0] != input.len() {
        return Err(Error::dim("linear", input.shape(), ws));
    }
    Ok((ws[0], ws[1]))
}

pub(crate) fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

// Slice kernels used by the network engine. Zero inputs are skipped: adding a
// signed zero product never changes an f64 accumulator, so the result is the
// same as the dense sum.

pub(crate) fn conv_forward_raw(
    g: &ConvGeometry,
    input: &[f32],
    weights: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let n_out = g.out_c;
    let mut acc = vec![0.0f64; n_out];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..g.ksize {
                let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                for j in 0..g.ksize {
                    let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                    let in_base = (iy * g.in_w + ix) * g.in_c;
                    let k_base = (i * g.ksize + j) * g.in_c;
                    for m in 0..g.in_c {
                        let x = input[in_base + m];
                        if x == 0.0 {
                            continue;
                        }
                        let x = x as f64;
                        let row = &weights[(k_base + m) * n_out..(k_base + m + 1) * n_out];
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += w as f64 * x;
                        }
                    }
                }
            }
            let dst = &mut out[(oy * g.out_w + ox) * n_out..(oy * g.out_w + ox + 1) * n_out];
            match bias {
                Some(b) => {
                    for ((d, &a), &b) in dst.iter_mut().zip(&acc).zip(b) {
                        *d = (a + b as f64) as f32;
                    }
                }
                None => {
                    for (d, &a) in dst.iter_mut().zip(&acc) {
                        *d = a as f32;
                    }
                }
            }
        }
    }
}

pub(crate) fn local_conv_forward_raw(
    g: &ConvGeometry,
    input: &[f32],
    weights: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let n_out = g.out_c;
    let per_position = g.ksize * g.ksize * g.in_c * n_out;
    let mut acc = vec![0.0f64; n_out];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let kernel = &weights[(oy * g.out_w + ox) * per_position..][..per_position];
            for i in 0..g.ksize {
                let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                for j in 0..g.ksize {
                    let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                    let in_base = (iy * g.in_w + ix) * g.in_c;
                    let k_base = (i * g.ksize + j) * g.in_c;
                    for m in 0..g.in_c {
                        let x = input[in_base + m];
                        if x == 0.0 {
                            continue;
                        }
                        let x = x as f64;
                        let row = &kernel[(k_base + m) * n_out..(k_base + m + 1) * n_out];
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += w as f64 * x;
                        }
                    }
                }
            }
            let dst = &mut out[(oy * g.out_w + ox) * n_out..(oy * g.out_w + ox + 1) * n_out];
            match bias {
                Some(b) => {
                    for ((d, &a), &b) in dst.iter_mut().zip(&acc).zip(b) {
                        *d = (a + b as f64) as f32;
                    }
                }
                None => {
                    for (d, &a) in dst.iter_mut().zip(&acc) {
                        *d = a as f32;
                    }
                }
            }
        }
    }
}

/// Accumulates (`+=`) weight and, optionally, input adjoints.
pub(crate) fn conv_backward_raw<G: Copy + Into<f64>>(
    g: &ConvGeometry,
    input: &[f32],
    weights: &[f32],
    grad_out: &[G],
    grad_w: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let n_out = g.out_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = &grad_out[(oy * g.out_w + ox) * n_out..(oy * g.out_w + ox + 1) * n_out];
            if go.iter().all(|&v| v.into() == 0.0) {
                continue;
            }
            for i in 0..g.ksize {
                let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                for j in 0..g.ksize {
                    let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                    let in_base = (iy * g.in_w + ix) * g.in_c;
                    let k_base = (i * g.ksize + j) * g.in_c;
                    for m in 0..g.in_c {
                        let span = (k_base + m) * n_out..(k_base + m + 1) * n_out;
                        let x = input[in_base + m];
                        if x != 0.0 {
                            let x = x as f64;
                            for (gw, &d) in grad_w[span.clone()].iter_mut().zip(go) {
                                *gw += x * d.into();
                            }
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let s: f64 = weights[span]
                                .iter()
                                .zip(go)
                                .map(|(&w, &d)| w as f64 * d.into())
                                .sum();
                            gi[in_base + m] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn linear_forward_raw(
    p: usize,
    q: usize,
    input: &[f32],
    weights: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let mut acc = vec![0.0f64; q];
    for (pi, &x) in input.iter().enumerate().take(p) {
        if x == 0.0 {
            continue;
        }
        let x = x as f64;
        for (a, &w) in acc.iter_mut().zip(&weights[pi * q..(pi + 1) * q]) {
            *a += w as f64 * x;
        }
    }
    match bias {
        Some(b) => {
            for ((d, &a), &b) in out.iter_mut().zip(&acc).zip(b) {
                *d = (a + b as f64) as f32;
            }
        }
        None => {
            for (d, &a) in out.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
}

pub(crate) fn linear_backward_raw<G: Copy + Into<f64>>(
    p: usize,
    q: usize,
    input: &[f32],
    weights: &[f32],
    grad_out: &[G],
    grad_w: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    for pi in 0..p {
        let x = input[pi];
        if x != 0.0 {
            let x = x as f64;
            for (gw, &d) in grad_w[pi * q..(pi + 1) * q].iter_mut().zip(grad_out) {
                *gw += x * d.into();
            }
        }
        if let Some(gi) = grad_in.as_deref_mut() {
            gi[pi] += weights[pi * q..(pi + 1) * q]
                .iter()
                .zip(grad_out)
                .map(|(&w, &d)| w as f64 * d.into())
                .sum::<f64>();
        }
    }
}
