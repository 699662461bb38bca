//! Dense 2-D correlation layer and the plane kernels shared with the
//! decomposed layer.
//!
//! Convention throughout the crate: `out[p] = Σ_v W[v] x[stride·p + v - pad]`
//! (correlation, no kernel flip), with zero padding.

use crate::error::{DcfError, Result};
use crate::tensor::Tensor;

/// Plane geometry of one correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(DcfError::invalid("kernel and stride must be positive"));
        }
        let out_h = output_size(h, kernel, stride, pad)?;
        let out_w = output_size(w, kernel, stride, pad)?;
        Ok(Geometry {
            h,
            w,
            out_h,
            out_w,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `floor((n + 2 pad - k) / stride) + 1`, rejecting empty outputs.
pub fn output_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < kernel {
        return Err(DcfError::shape(format!(
            "kernel {kernel} does not fit input {n} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Outputs `o` in `[lo, hi)` with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// `out += input ⋆ kernel`.
pub(crate) fn correlate_add(input: &[f64], kernel: &[f64], out: &mut [f64], g: &Geometry) {
    let l = g.kernel;
    for ky in 0..l {
        let (oy0, oy1) = valid_range(g.out_h, g.h, ky, g.stride, g.pad);
        for kx in 0..l {
            let wv = kernel[ky * l + kx];
            if wv == 0.0 {
                continue;
            }
            let (ox0, ox1) = valid_range(g.out_w, g.w, kx, g.stride, g.pad);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let in_row = &input[iy * g.w..(iy + 1) * g.w];
                let out_row = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                if g.stride == 1 {
                    let ix0 = ox0 + kx - g.pad;
                    for (o, i) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..ix0 + (ox1 - ox0)]) {
                        *o += wv * i;
                    }
                } else {
                    for ox in ox0..ox1 {
                        out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate_add`] in the input: `grad_in += grad_out ⋆ᵀ kernel`.
pub(crate) fn correlate_transpose_add(grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64], g: &Geometry) {
    let l = g.kernel;
    for ky in 0..l {
        let (oy0, oy1) = valid_range(g.out_h, g.h, ky, g.stride, g.pad);
        for kx in 0..l {
            let wv = kernel[ky * l + kx];
            if wv == 0.0 {
                continue;
            }
            let (ox0, ox1) = valid_range(g.out_w, g.w, kx, g.stride, g.pad);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let go_row = &grad_out[oy * g.out_w..(oy + 1) * g.out_w];
                let gi_row = &mut grad_in[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    let ix0 = ox0 + kx - g.pad;
                    for (i, o) in gi_row[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&go_row[ox0..ox1]) {
                        *i += wv * o;
                    }
                } else {
                    for ox in ox0..ox1 {
                        gi_row[ox * g.stride + kx - g.pad] += wv * go_row[ox];
                    }
                }
            }
        }
    }
}

/// Gradient of [`correlate_add`] in the kernel: `grad_k[v] += Σ_p grad_out[p] x[s p + v - pad]`.
pub(crate) fn kernel_grad_add(input: &[f64], grad_out: &[f64], grad_k: &mut [f64], g: &Geometry) {
    let l = g.kernel;
    for ky in 0..l {
        let (oy0, oy1) = valid_range(g.out_h, g.h, ky, g.stride, g.pad);
        for kx in 0..l {
            let (ox0, ox1) = valid_range(g.out_w, g.w, kx, g.stride, g.pad);
            if ox0 >= ox1 {
                continue;
            }
            let mut acc = 0.0;
            for oy in oy0..oy1 {
                let iy = oy * g.stride + ky - g.pad;
                let in_row = &input[iy * g.w..(iy + 1) * g.w];
                let go_row = &grad_out[oy * g.out_w..(oy + 1) * g.out_w];
                if g.stride == 1 {
                    let ix0 = ox0 + kx - g.pad;
                    acc += go_row[ox0..ox1]
                        .iter()
                        .zip(&in_row[ix0..ix0 + (ox1 - ox0)])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                } else {
                    for ox in ox0..ox1 {
                        acc += go_row[ox] * in_row[ox * g.stride + kx - g.pad];
                    }
                }
            }
            grad_k[ky * l + kx] += acc;
        }
    }
}

/// Dense convolution layer: `M x M' x L x L` weights plus `M` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Tensor,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let want = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != want {
            return Err(DcfError::shape(format!(
                "conv weights: expected {want} values, got {}",
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(DcfError::shape(format!(
                "conv bias: expected {} values, got {}",
                self.out_channels,
                self.bias.len()
            )));
        }
        if self.stride == 0 || self.kernel == 0 {
            return Err(DcfError::invalid("kernel and stride must be positive"));
        }
        Ok(())
    }

    /// Filter `W[λ, λ']` as an `L x L` slice.
    pub fn filter(&self, out_c: usize, in_c: usize) -> &[f64] {
        let n = self.kernel * self.kernel;
        let start = (out_c * self.in_channels + in_c) * n;
        &self.weights[start..start + n]
    }

    pub(crate) fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        if x.channels() != self.in_channels {
            return Err(DcfError::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Geometry::new(x.height(), x.width(), self.kernel, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn conv2d_forward(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let g = spec.geometry(x)?;
    let mut out = Tensor::zeros([x.batch(), spec.out_channels, g.out_h, g.out_w]);
    for n in 0..x.batch() {
        for oc in 0..spec.out_channels {
            let plane = out.channel_mut(n, oc);
            plane.fill(spec.bias[oc]);
            for ic in 0..spec.in_channels {
                correlate_add(x.channel(n, ic), spec.filter(oc, ic), plane, &g);
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(x: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = spec.geometry(x)?;
    if grad_out.shape() != [x.batch(), spec.out_channels, g.out_h, g.out_w] {
        return Err(DcfError::shape("conv upstream gradient shape"));
    }
    let ksq = spec.kernel * spec.kernel;
    let mut gw = vec![0.0; spec.weights.len()];
    let mut gb = vec![0.0; spec.out_channels];
    let mut gx = Tensor::zeros(x.shape());
    for n in 0..x.batch() {
        for oc in 0..spec.out_channels {
            let go = grad_out.channel(n, oc);
            gb[oc] += go.iter().sum::<f64>();
            for ic in 0..spec.in_channels {
                let idx = (oc * spec.in_channels + ic) * ksq;
                kernel_grad_add(x.channel(n, ic), go, &mut gw[idx..idx + ksq], &g);
                correlate_transpose_add(go, spec.filter(oc, ic), gx.channel_mut(n, ic), &g);
            }
        }
    }
    Ok(ConvGrads {
        weights: gw,
        bias: gb,
        input: gx,
    })
}
