//! Decomposed convolutional layer: filters are fixed-basis expansions
//! `W[λ, λ'] = Σ_k a[λ, λ', k] ψ_k` with only the coefficients trained.
//!
//! Forward runs in two steps. The Ψ-step correlates every input channel
//! with every basis filter; the a-step mixes the `M'·K` responses linearly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::bases::{disk_mask, pixel_area, BasisKind, BasisSet};
use crate::error::{DcfError, Result};
use crate::nn::conv::{correlate_add, correlate_transpose_add, output_size, ConvSpec, Geometry};
use crate::nn::{Layer, Network};
use crate::tensor::Tensor;

/// Gram condition number above which the solve switches to a pseudo-inverse.
pub const PINV_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub struct DcfLayer {
    pub basis: Arc<BasisSet>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `M x M' x K`, row-major.
    pub coeffs: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcfGrads {
    pub coeffs: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Tensor,
}

impl DcfLayer {
    pub fn zeros(basis: Arc<BasisSet>, in_channels: usize, out_channels: usize, stride: usize, padding: usize) -> Self {
        let k = basis.count();
        DcfLayer {
            basis,
            in_channels,
            out_channels,
            coeffs: vec![0.0; out_channels * in_channels * k],
            bias: vec![0.0; out_channels],
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.out_channels * self.in_channels * self.basis.count();
        if self.coeffs.len() != want {
            return Err(DcfError::shape(format!(
                "dcf coefficients: expected {want} values, got {}",
                self.coeffs.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(DcfError::shape(format!(
                "dcf bias: expected {} values, got {}",
                self.out_channels,
                self.bias.len()
            )));
        }
        if self.stride == 0 {
            return Err(DcfError::invalid("stride must be positive"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> usize {
        self.basis.size()
    }

    pub fn count(&self) -> usize {
        self.basis.count()
    }

    /// Coefficient vector `a[λ, λ', ·]`.
    pub fn coeff(&self, out_c: usize, in_c: usize) -> &[f64] {
        let k = self.count();
        let start = (out_c * self.in_channels + in_c) * k;
        &self.coeffs[start..start + k]
    }

    /// `M·M'·K + M`.
    pub fn param_count(&self) -> usize {
        self.coeffs.len() + self.bias.len()
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        self.validate()?;
        if x.channels() != self.in_channels {
            return Err(DcfError::shape(format!(
                "dcf expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Geometry::new(x.height(), x.width(), self.kernel(), self.stride, self.padding)
    }

    /// The equivalent dense layer.
    pub fn to_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
            weights: reconstruct_filters(self),
            bias: self.bias.clone(),
        }
    }
}

/// Ψ-step: `y[n, λ'·K + k] = ψ_k ⋆ x[n, λ']`.
pub fn basis_response(x: &Tensor, layer: &DcfLayer) -> Result<Tensor> {
    let g = layer.geometry(x)?;
    let k = layer.count();
    let mut y = Tensor::zeros([x.batch(), layer.in_channels * k, g.out_h, g.out_w]);
    for n in 0..x.batch() {
        for ic in 0..layer.in_channels {
            let src = x.channel(n, ic);
            for b in 0..k {
                correlate_add(src, layer.basis.sample(b), y.channel_mut(n, ic * k + b), &g);
            }
        }
    }
    Ok(y)
}

/// a-step on a precomputed basis response.
fn mix(y: &Tensor, layer: &DcfLayer) -> Tensor {
    let k = layer.count();
    let feat = layer.in_channels * k;
    let mut out = Tensor::zeros([y.batch(), layer.out_channels, y.height(), y.width()]);
    for n in 0..y.batch() {
        for oc in 0..layer.out_channels {
            let coeffs = &layer.coeffs[oc * feat..(oc + 1) * feat];
            let plane = out.channel_mut(n, oc);
            plane.fill(layer.bias[oc]);
            for (f, &a) in coeffs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, v) in plane.iter_mut().zip(y.channel(n, f)) {
                    *d += a * v;
                }
            }
        }
    }
    out
}

pub fn dcf_forward(x: &Tensor, layer: &DcfLayer) -> Result<Tensor> {
    Ok(dcf_forward_cached(x, layer)?.0)
}

/// Forward pass that also returns the Ψ-step response for reuse in backward.
pub fn dcf_forward_cached(x: &Tensor, layer: &DcfLayer) -> Result<(Tensor, Tensor)> {
    let y = basis_response(x, layer)?;
    Ok((mix(&y, layer), y))
}

pub fn dcf_backward(x: &Tensor, layer: &DcfLayer, grad_out: &Tensor) -> Result<DcfGrads> {
    let y = basis_response(x, layer)?;
    dcf_backward_cached(x, &y, layer, grad_out)
}

/// Backward pass given the Ψ-step response from the forward pass.
pub fn dcf_backward_cached(x: &Tensor, response: &Tensor, layer: &DcfLayer, grad_out: &Tensor) -> Result<DcfGrads> {
    let g = layer.geometry(x)?;
    let k = layer.count();
    let feat = layer.in_channels * k;
    if grad_out.shape() != [x.batch(), layer.out_channels, g.out_h, g.out_w] {
        return Err(DcfError::shape("dcf upstream gradient shape"));
    }
    if response.shape() != [x.batch(), feat, g.out_h, g.out_w] {
        return Err(DcfError::shape("dcf basis response shape"));
    }
    let mut gc = vec![0.0; layer.coeffs.len()];
    let mut gb = vec![0.0; layer.out_channels];
    let mut gx = Tensor::zeros(x.shape());
    let mut gy = vec![0.0; g.out_plane()];
    for n in 0..x.batch() {
        for oc in 0..layer.out_channels {
            let go = grad_out.channel(n, oc);
            gb[oc] += go.iter().sum::<f64>();
            for f in 0..feat {
                gc[oc * feat + f] += go.iter().zip(response.channel(n, f)).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for f in 0..feat {
            gy.fill(0.0);
            for oc in 0..layer.out_channels {
                let a = layer.coeffs[oc * feat + f];
                if a == 0.0 {
                    continue;
                }
                for (d, v) in gy.iter_mut().zip(grad_out.channel(n, oc)) {
                    *d += a * v;
                }
            }
            let (ic, b) = (f / k, f % k);
            correlate_transpose_add(&gy, layer.basis.sample(b), gx.channel_mut(n, ic), &g);
        }
    }
    Ok(DcfGrads {
        coeffs: gc,
        bias: gb,
        input: gx,
    })
}

/// Dense `M x M' x L x L` filters of a decomposed layer.
pub fn reconstruct_filters(layer: &DcfLayer) -> Vec<f64> {
    reconstruct(&layer.coeffs, &layer.basis)
}

/// Expands consecutive `K`-coefficient groups into `L x L` filters.
pub fn reconstruct(coeffs: &[f64], basis: &BasisSet) -> Vec<f64> {
    let k = basis.count();
    let n = basis.size() * basis.size();
    let mut out = vec![0.0; coeffs.len() / k * n];
    for (a, w) in coeffs.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (b, &c) in a.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (d, s) in w.iter_mut().zip(basis.sample(b)) {
                *d += c * s;
            }
        }
    }
    out
}

/// Least-squares coefficients and relative residuals, one per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub coeffs: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl Decomposition {
    pub fn mean_residual(&self) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }
}

/// Pixels the fit is measured on: the unit disk, or the whole patch for the
/// pixel-impulse basis (which is not a disk-supported family).
pub fn fit_domain(basis: &BasisSet) -> Vec<bool> {
    match basis.kind() {
        BasisKind::Delta => vec![true; basis.size() * basis.size()],
        _ => disk_mask(basis.size()),
    }
}

/// Projects a stack of `L x L` filters onto the span of `basis`.
///
/// Solves the normal equations of the fit over [`fit_domain`] by Cholesky,
/// falling back to an eigen pseudo-inverse when the Gram matrix is
/// ill-conditioned.
pub fn decompose_filters(dense: &[f64], basis: &BasisSet) -> Result<Decomposition> {
    let size = basis.size();
    let n = size * size;
    let k = basis.count();
    if dense.len() % n != 0 {
        return Err(DcfError::shape(format!(
            "{} filter values are not a multiple of the {size}x{size} patch",
            dense.len()
        )));
    }
    let mask = fit_domain(basis);
    let area = pixel_area(size);
    let masked: Vec<Vec<f64>> = (0..k)
        .map(|b| {
            basis
                .sample(b)
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect()
        })
        .collect();
    let gram = DMatrix::from_fn(k, k, |i, j| area * dot(&masked[i], &masked[j]));
    let solver = GramSolver::new(gram);

    let filters = dense.len() / n;
    let mut coeffs = Vec::with_capacity(filters * k);
    let mut residuals = Vec::with_capacity(filters);
    for w in dense.chunks_exact(n) {
        let w: Vec<f64> = w.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let rhs = DVector::from_iterator(k, masked.iter().map(|s| area * dot(s, &w)));
        let a = solver.solve(&rhs);
        let mut err = w.clone();
        for (s, &c) in masked.iter().zip(a.iter()) {
            for (e, v) in err.iter_mut().zip(s) {
                *e -= c * v;
            }
        }
        let norm = dot(&w, &w).sqrt();
        residuals.push(if norm == 0.0 { 0.0 } else { dot(&err, &err).sqrt() / norm });
        coeffs.extend(a.iter());
    }
    Ok(Decomposition { coeffs, residuals })
}

enum GramSolver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Pinv(DMatrix<f64>),
}

impl GramSolver {
    fn new(gram: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if max > 0.0 && min * PINV_CONDITION >= max {
            if let Some(c) = gram.cholesky() {
                return GramSolver::Cholesky(c);
            }
        }
        let cutoff = max / PINV_CONDITION;
        let inv = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|&v| if v.abs() > cutoff && v != 0.0 { 1.0 / v } else { 0.0 }),
        );
        let q = &eig.eigenvectors;
        GramSolver::Pinv(q * DMatrix::from_diagonal(&inv) * q.transpose())
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            GramSolver::Cholesky(c) => c.solve(rhs),
            GramSolver::Pinv(p) => p * rhs,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One convolutional layer of an architecture, for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Spatial side `W` of the layer's (square) output grid.
    pub spatial: usize,
}

impl ConvShape {
    /// `L²·M'·M + M`.
    pub fn dense_params(&self) -> u64 {
        let (l, mi, mo) = (self.kernel as u64, self.in_channels as u64, self.out_channels as u64);
        l * l * mi * mo + mo
    }

    /// `K·M'·M + M`.
    pub fn dcf_params(&self, k: usize) -> u64 {
        let (mi, mo) = (self.in_channels as u64, self.out_channels as u64);
        k as u64 * mi * mo + mo
    }

    /// `M' W² · M (1 + 2L²)`.
    pub fn dense_flops(&self) -> u64 {
        let (l, mi, mo, w) = (
            self.kernel as u64,
            self.in_channels as u64,
            self.out_channels as u64,
            self.spatial as u64,
        );
        mi * w * w * mo * (1 + 2 * l * l)
    }

    /// `M' W² · 2K (L² + M)`.
    pub fn dcf_flops(&self, k: usize) -> u64 {
        let (l, mi, mo, w) = (
            self.kernel as u64,
            self.in_channels as u64,
            self.out_channels as u64,
            self.spatial as u64,
        );
        mi * w * w * 2 * k as u64 * (l * l + mo)
    }

    /// One flop per output activation.
    pub fn relu_flops(&self) -> u64 {
        let w = self.spatial as u64;
        self.out_channels as u64 * w * w
    }
}

/// The two convolutional layers of Conv-2 on 28x28 input.
pub fn conv2_shapes() -> [ConvShape; 2] {
    [
        ConvShape {
            in_channels: 1,
            out_channels: 16,
            kernel: 5,
            spatial: 28,
        },
        ConvShape {
            in_channels: 16,
            out_channels: 64,
            kernel: 5,
            spatial: 14,
        },
    ]
}

/// Per-layer and total parameters of the conv layers; `k = None` means dense.
pub fn param_count(shapes: &[ConvShape], k: Option<usize>) -> (Vec<u64>, u64) {
    let per: Vec<u64> = shapes
        .iter()
        .map(|s| match k {
            Some(k) => s.dcf_params(k),
            None => s.dense_params(),
        })
        .collect();
    let total = per.iter().sum();
    (per, total)
}

/// Per-layer and total conv flops including ReLU; `k = None` means dense.
pub fn flop_count(shapes: &[ConvShape], k: Option<usize>) -> (Vec<u64>, u64) {
    let per: Vec<u64> = shapes
        .iter()
        .map(|s| {
            let conv = match k {
                Some(k) => s.dcf_flops(k),
                None => s.dense_flops(),
            };
            conv + s.relu_flops()
        })
        .collect();
    let total = per.iter().sum();
    (per, total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub k: usize,
    pub dense_params: u64,
    pub dcf_params: u64,
    pub dense_flops: u64,
    pub dcf_flops: u64,
    pub reduction_params: f64,
    pub reduction_flops: f64,
    /// Relative fit error per `(λ, λ')`, one vector per layer.
    pub residuals: Vec<Vec<f64>>,
}

impl CompressionReport {
    pub fn new(shapes: &[ConvShape], k: usize, residuals: Vec<Vec<f64>>) -> Self {
        let (_, dense_params) = param_count(shapes, None);
        let (_, dcf_params) = param_count(shapes, Some(k));
        let (_, dense_flops) = flop_count(shapes, None);
        let (_, dcf_flops) = flop_count(shapes, Some(k));
        CompressionReport {
            k,
            dense_params,
            dcf_params,
            dense_flops,
            dcf_flops,
            reduction_params: dcf_params as f64 / dense_params as f64,
            reduction_flops: dcf_flops as f64 / dense_flops as f64,
            residuals,
        }
    }
}

/// Conv layer shapes of `net` for an `h x w` input. Non-square grids are
/// accounted by their height.
pub fn network_conv_shapes(net: &Network, h: usize, w: usize) -> Result<Vec<ConvShape>> {
    let (mut h, mut w) = (h, w);
    let mut shapes = Vec::new();
    for layer in &net.layers {
        let (in_c, out_c, k, stride, pad) = match layer {
            Layer::Conv(c) => (c.in_channels, c.out_channels, c.kernel, c.stride, c.padding),
            Layer::Dcf(d) => (d.in_channels, d.out_channels, d.kernel(), d.stride, d.padding),
            Layer::MaxPool(p) => {
                (h, w) = p.output_hw(h, w)?;
                continue;
            }
            Layer::Linear(_) => break,
            _ => continue,
        };
        h = output_size(h, k, stride, pad)?;
        w = output_size(w, k, stride, pad)?;
        shapes.push(ConvShape {
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            spatial: h,
        });
    }
    Ok(shapes)
}

/// Replaces every conv layer with its projection onto `bases[l]` (the last
/// basis is reused when there are fewer bases than layers). Decomposed
/// layers are reconstructed first.
pub fn decompose_network(net: &Network, bases: &[Arc<BasisSet>]) -> Result<(Network, Vec<Decomposition>)> {
    if bases.is_empty() {
        return Err(DcfError::invalid("no basis given"));
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut fits = Vec::new();
    for layer in &net.layers {
        let (dense, bias, in_c, out_c, stride, pad) = match layer {
            Layer::Conv(c) => (c.weights.clone(), &c.bias, c.in_channels, c.out_channels, c.stride, c.padding),
            Layer::Dcf(d) => (reconstruct_filters(d), &d.bias, d.in_channels, d.out_channels, d.stride, d.padding),
            other => {
                layers.push(other.clone());
                continue;
            }
        };
        let basis = bases[fits.len().min(bases.len() - 1)].clone();
        let k = match layer {
            Layer::Conv(c) => c.kernel,
            Layer::Dcf(d) => d.kernel(),
            _ => unreachable!(),
        };
        if basis.size() != k {
            return Err(DcfError::shape(format!(
                "conv layer {} has {k}x{k} filters but the basis is {}x{}",
                fits.len() + 1,
                basis.size(),
                basis.size()
            )));
        }
        let fit = decompose_filters(&dense, &basis)?;
        let mut out = DcfLayer::zeros(basis, in_c, out_c, stride, pad);
        out.coeffs = fit.coeffs.clone();
        out.bias = bias.clone();
        layers.push(Layer::Dcf(out));
        fits.push(fit);
    }
    Ok((Network::new(layers), fits))
}
