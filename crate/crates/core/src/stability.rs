//! Filter-integral constants, smooth deformations, and empirical checks of
//! the deformation-stability bounds for a stack of convolutional blocks.
//!
//! Units. Filters are measured on the unit disk: a pixel filter `W` of side
//! `L` is read as `w(u) = (L/2)^2 W(u)` with pixel area `(2/L)^2`, so
//! `‖w‖_1 = Σ|W|`. Stored DCF coefficients `c` map to normalised
//! coefficients `a = (L/2)^2 c`. Displacements `|τ|_∞` are measured in units
//! of the first layer's patch radius, and a layer whose patch radius is
//! `2^j` of those units has its gradient constant scaled by `2^{-j}`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bases::{fb_norm_unchecked, pixel_coords, BasisKind};
use crate::dcf::{dcf_forward, DcfLayer};
use crate::error::{DcfError, Result};
use crate::nn::{conv2d_forward, maxpool, relu, ConvSpec, Layer, MaxPool, Network};
use crate::tensor::Tensor;

/// Grid estimate of `|∇τ|_∞` must stay below this before any check runs.
pub const GRAD_TAU_LIMIT: f64 = 0.19;
/// Side of the dense grid used for analytic suprema of a field.
pub const SUP_GRID: usize = 257;

/// `(1/M Σ_λ 1/P Σ_u x²)^{1/2}`, averaged over the batch as well.
pub fn signal_norm(x: &Tensor) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// `(‖w‖_1, ‖|v| |∇w|‖_1, ‖∇w‖_1)` of one `L x L` pixel filter on the unit disk.
///
/// Gradients are central differences with zero extension past the patch.
pub fn filter_integrals(filter: &[f64], size: usize) -> (f64, f64, f64) {
    let h = 2.0 / size as f64;
    let area = h * h;
    let scale = (size as f64 / 2.0).powi(2);
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= size as isize || j >= size as isize {
            0.0
        } else {
            scale * filter[i as usize * size + j as usize]
        }
    };
    let (mut l1, mut rad, mut grad) = (0.0, 0.0, 0.0);
    for i in 0..size {
        for j in 0..size {
            let (ii, jj) = (i as isize, j as isize);
            l1 += at(ii, jj).abs();
            let g1 = (at(ii + 1, jj) - at(ii - 1, jj)) / (2.0 * h);
            let g2 = (at(ii, jj + 1) - at(ii, jj - 1)) / (2.0 * h);
            let g = g1.hypot(g2);
            let (u1, u2) = pixel_coords(size, i, j);
            grad += g;
            rad += u1.hypot(u2) * g;
        }
    }
    (l1 * area, rad * area, grad * area)
}

/// `max(sup_λ Σ_λ' v[λ,λ'], sup_λ' (M'/M) Σ_λ v[λ,λ'])` for `v` laid out `M x M'`.
pub fn mixed_norm(values: &[f64], out_channels: usize, in_channels: usize) -> f64 {
    let mut best = 0.0f64;
    for o in 0..out_channels {
        best = best.max(values[o * in_channels..(o + 1) * in_channels].iter().sum());
    }
    let ratio = in_channels as f64 / out_channels as f64;
    for i in 0..in_channels {
        let s: f64 = (0..out_channels).map(|o| values[o * in_channels + i]).sum();
        best = best.max(ratio * s);
    }
    best
}

/// Filter constants `B, C, D` of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConstants {
    pub b: f64,
    pub c: f64,
    /// Includes the `2^{-j}` scale factor.
    pub d: f64,
}

/// `B, C, D` of a dense filter bank `M x M' x L x L` at scale exponent `j`.
pub fn bank_constants(weights: &[f64], out_channels: usize, in_channels: usize, size: usize, j: f64) -> LayerConstants {
    let n = size * size;
    let mut l1 = Vec::with_capacity(out_channels * in_channels);
    let mut rad = Vec::with_capacity(out_channels * in_channels);
    let mut grad = Vec::with_capacity(out_channels * in_channels);
    for f in weights.chunks_exact(n) {
        let (a, b, c) = filter_integrals(f, size);
        l1.push(a);
        rad.push(b);
        grad.push(c);
    }
    LayerConstants {
        b: mixed_norm(&l1, out_channels, in_channels),
        c: mixed_norm(&rad, out_channels, in_channels),
        d: 2f64.powf(-j) * mixed_norm(&grad, out_channels, in_channels),
    }
}

pub fn layer_constants(filter: &BlockFilter, j: f64) -> LayerConstants {
    let conv = filter.to_conv();
    bank_constants(&conv.weights, conv.out_channels, conv.in_channels, conv.kernel, j)
}

/// `A = π max(sup_λ Σ_λ' ‖a‖_FB, sup_λ' (M'/M) Σ_λ ‖a‖_FB)` with `a = (L/2)^2 c`.
pub fn fb_layer_constant(layer: &DcfLayer) -> Result<f64> {
    if layer.basis.kind() != BasisKind::FourierBessel {
        return Err(DcfError::Unsupported(format!(
            "the FB constant of a {} basis",
            layer.basis.kind().name()
        )));
    }
    layer.validate()?;
    let scale = (layer.kernel() as f64 / 2.0).powi(2);
    let modes = layer.basis.modes();
    let norms: Vec<f64> = layer
        .coeffs
        .chunks_exact(layer.count())
        .map(|c| scale * fb_norm_unchecked(c, modes))
        .collect();
    Ok(PI * mixed_norm(&norms, layer.out_channels, layer.in_channels))
}

/// Filters of one convolutional block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockFilter {
    Dense(ConvSpec),
    Dcf(DcfLayer),
}

impl BlockFilter {
    pub fn to_conv(&self) -> ConvSpec {
        match self {
            BlockFilter::Dense(c) => c.clone(),
            BlockFilter::Dcf(d) => d.to_conv(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            BlockFilter::Dense(c) => conv2d_forward(x, c),
            BlockFilter::Dcf(d) => dcf_forward(x, d),
        }
    }

    fn scale_out(&mut self, s: &[f64], shift: &[f64]) {
        let (weights, bias, per) = match self {
            BlockFilter::Dense(c) => {
                let per = c.in_channels * c.kernel * c.kernel;
                (&mut c.weights, &mut c.bias, per)
            }
            BlockFilter::Dcf(d) => {
                let per = d.in_channels * d.count();
                (&mut d.coeffs, &mut d.bias, per)
            }
        };
        for (o, chunk) in weights.chunks_exact_mut(per).enumerate() {
            chunk.iter_mut().for_each(|w| *w *= s[o]);
            bias[o] = bias[o] * s[o] + shift[o];
        }
    }

    fn stride(&self) -> usize {
        match self {
            BlockFilter::Dense(c) => c.stride,
            BlockFilter::Dcf(d) => d.stride,
        }
    }

    fn padding(&self) -> usize {
        match self {
            BlockFilter::Dense(c) => c.padding,
            BlockFilter::Dcf(d) => d.padding,
        }
    }

    fn kernel(&self) -> usize {
        match self {
            BlockFilter::Dense(c) => c.kernel,
            BlockFilter::Dcf(d) => d.kernel(),
        }
    }
}

/// Convolution (batch norm folded in), ReLU, then optional pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub filter: BlockFilter,
    pub pool: Option<MaxPool>,
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = relu(&self.filter.forward(x)?);
        match self.pool {
            Some(p) => Ok(maxpool(&y, p)?.0),
            None => Ok(y),
        }
    }

    /// The block without pooling: exactly the layer map of the theory.
    pub fn conv_relu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&self.filter.forward(x)?))
    }
}

/// Position of a layer's pixel grid inside the input image.
///
/// Layer pixel `p` sits at input-pixel coordinate `offset + stride * p`
/// along each axis; each layer pixel owns a cell of side `stride`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub offset: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Grid {
    pub fn input(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            stride: 1.0,
            offset: 0.0,
            image_height: height,
            image_width: width,
        }
    }

    /// Normalised image coordinates of layer pixel `(i, j)`.
    pub fn coords(&self, i: f64, j: f64) -> (f64, f64) {
        let (h, w) = (self.image_height as f64, self.image_width as f64);
        let p1 = self.offset + self.stride * i;
        let p2 = self.offset + self.stride * j;
        ((p1 - (h - 1.0) / 2.0) / (h / 2.0), (p2 - (w - 1.0) / 2.0) / (w / 2.0))
    }

    fn after(&self, kernel: usize, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Grid {
        let centre = (kernel as f64 - 1.0) / 2.0 - pad as f64;
        Grid {
            height: out_h,
            width: out_w,
            stride: self.stride * stride as f64,
            offset: self.offset + self.stride * centre,
            ..*self
        }
    }
}

/// Conv blocks extracted from a network, in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlock>,
}

impl ConvStack {
    /// Takes the leading `conv|dcf [bn] relu [maxpool]` blocks, folding each
    /// batch norm's running statistics into the filters.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut i = 0;
        let layers = &net.layers;
        while i < layers.len() {
            let mut filter = match &layers[i] {
                Layer::Conv(c) => BlockFilter::Dense(c.clone()),
                Layer::Dcf(d) => BlockFilter::Dcf(d.clone()),
                Layer::Linear(_) => break,
                other => {
                    return Err(DcfError::invalid(format!(
                        "layer {i} ({}) does not start a conv block",
                        other.name()
                    )))
                }
            };
            i += 1;
            if let Some(Layer::BatchNorm(bn)) = layers.get(i) {
                let (s, shift) = bn.affine();
                filter.scale_out(&s, &shift);
                i += 1;
            }
            if !matches!(layers.get(i), Some(Layer::Relu)) {
                return Err(DcfError::invalid(format!("conv block ending at layer {i} lacks a ReLU")));
            }
            i += 1;
            let pool = match layers.get(i) {
                Some(Layer::MaxPool(p)) => {
                    i += 1;
                    Some(*p)
                }
                _ => None,
            };
            blocks.push(ConvBlock { filter, pool });
        }
        if blocks.is_empty() {
            return Err(DcfError::invalid("network has no convolutional blocks"));
        }
        Ok(ConvStack { blocks })
    }

    pub fn without_pools(&self) -> ConvStack {
        ConvStack {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    filter: b.filter.clone(),
                    pool: None,
                })
                .collect(),
        }
    }

    pub fn has_pools(&self) -> bool {
        self.blocks.iter().any(|b| b.pool.is_some())
    }

    /// `x^{(0)}, x^{(1)}, …, x^{(L)}`.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![x.clone()];
        for b in &self.blocks {
            let next = b.forward(out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_all(x)?.pop().unwrap())
    }

    /// Grid of every activation `x^{(0)}, …, x^{(L)}` for an `h x w` input.
    pub fn grids(&self, h: usize, w: usize) -> Result<Vec<Grid>> {
        let mut grids = vec![Grid::input(h, w)];
        for b in &self.blocks {
            let g = *grids.last().unwrap();
            let (k, s, p) = (b.filter.kernel(), b.filter.stride(), b.filter.padding());
            let oh = crate::nn::output_size(g.height, k, s, p)?;
            let ow = crate::nn::output_size(g.width, k, s, p)?;
            let mut next = g.after(k, s, p, oh, ow);
            if let Some(pool) = b.pool {
                let (ph, pw) = pool.output_hw(oh, ow)?;
                next = next.after(pool.window, pool.stride, pool.padding, ph, pw);
            }
            grids.push(next);
        }
        Ok(grids)
    }

    /// Scale exponent `j_l = log2(r_l / r_0)` of each block, where `r_l` is
    /// the block's patch radius in input pixels.
    pub fn scale_exponents(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let grids = self.grids(h, w)?;
        let radius = |l: usize| self.blocks[l].filter.kernel() as f64 / 2.0 * grids[l].stride;
        let r0 = radius(0);
        Ok((0..self.blocks.len()).map(|l| (radius(l) / r0).log2()).collect())
    }

    /// First block's patch radius in input pixels.
    pub fn base_radius(&self) -> f64 {
        self.blocks[0].filter.kernel() as f64 / 2.0
    }

    pub fn fb_constants(&self) -> Result<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| match &b.filter {
                BlockFilter::Dcf(d) => fb_layer_constant(d),
                BlockFilter::Dense(_) => Err(DcfError::Unsupported("the FB constant of a dense layer".into())),
            })
            .collect()
    }
}

/// Divides every block's coefficients and bias by `max(1, A_l)`; returns the
/// rescaled stack and the factors.
pub fn rescale_to_admissible(stack: &ConvStack) -> Result<(ConvStack, Vec<f64>)> {
    let constants = stack.fb_constants()?;
    let mut out = stack.clone();
    let mut factors = Vec::with_capacity(constants.len());
    for (block, a) in out.blocks.iter_mut().zip(constants) {
        // A rescaled layer sits at A = 1 up to rounding; leave it alone.
        let f = if a <= 1.0 + 1e-12 { 1.0 } else { a };
        if let BlockFilter::Dcf(d) = &mut block.filter {
            d.coeffs.iter_mut().for_each(|c| *c /= f);
            d.bias.iter_mut().for_each(|c| *c /= f);
        }
        factors.push(f);
    }
    Ok((out, factors))
}

/// `amp · sin(f1 u1 + p1) · sin(f2 u2 + p2)` added to one displacement component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTerm {
    pub component: usize,
    pub amp: f64,
    pub freq: [f64; 2],
    pub phase: [f64; 2],
}

/// Smooth displacement field on normalised image coordinates `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeformationField {
    pub terms: Vec<SineTerm>,
}

impl DeformationField {
    pub fn zero() -> Self {
        DeformationField { terms: Vec::new() }
    }

    /// Constant displacement.
    pub fn shift(t1: f64, t2: f64) -> Self {
        let flat = |component, amp| SineTerm {
            component,
            amp,
            freq: [0.0, 0.0],
            phase: [PI / 2.0, PI / 2.0],
        };
        DeformationField {
            terms: vec![flat(0, t1), flat(1, t2)],
        }
    }

    /// `ε (sin π u2, sin π u1)`.
    pub fn sine_shear(eps: f64) -> Self {
        DeformationField {
            terms: vec![
                SineTerm {
                    component: 0,
                    amp: eps,
                    freq: [0.0, PI],
                    phase: [PI / 2.0, 0.0],
                },
                SineTerm {
                    component: 1,
                    amp: eps,
                    freq: [PI, 0.0],
                    phase: [0.0, PI / 2.0],
                },
            ],
        }
    }

    /// Random field vanishing on the boundary of `[-1, 1]^2`, scaled so the
    /// analytic `|∇τ|_∞` equals `amplitude`.
    pub fn random_boundary_vanishing(rng: &mut impl Rng, terms_per_component: usize, amplitude: f64) -> Self {
        let mut terms = Vec::new();
        for component in 0..2 {
            for _ in 0..terms_per_component {
                let k1 = rng.random_range(1..=2) as f64;
                let k2 = rng.random_range(1..=2) as f64;
                terms.push(SineTerm {
                    component,
                    amp: rng.random_range(-1.0..1.0),
                    freq: [k1 * PI / 2.0, k2 * PI / 2.0],
                    phase: [k1 * PI / 2.0, k2 * PI / 2.0],
                });
            }
        }
        let mut field = DeformationField { terms };
        let g = field.sup_grad();
        if g > 0.0 {
            field = field.scaled(amplitude / g);
        }
        field
    }

    pub fn scaled(&self, s: f64) -> Self {
        DeformationField {
            terms: self.terms.iter().map(|t| SineTerm { amp: t.amp * s, ..*t }).collect(),
        }
    }

    pub fn eval(&self, u1: f64, u2: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for t in &self.terms {
            out[t.component] += t.amp * (t.freq[0] * u1 + t.phase[0]).sin() * (t.freq[1] * u2 + t.phase[1]).sin();
        }
        out
    }

    /// `J[i][k] = ∂τ_i / ∂u_k`.
    pub fn jacobian(&self, u1: f64, u2: f64) -> [[f64; 2]; 2] {
        let mut j = [[0.0; 2]; 2];
        for t in &self.terms {
            let (a1, a2) = (t.freq[0] * u1 + t.phase[0], t.freq[1] * u2 + t.phase[1]);
            j[t.component][0] += t.amp * t.freq[0] * a1.cos() * a2.sin();
            j[t.component][1] += t.amp * a1.sin() * t.freq[1] * a2.cos();
        }
        j
    }

    /// `sup |τ|` over a dense grid of `[-1, 1]^2`, in normalised units.
    pub fn sup_tau(&self) -> f64 {
        dense_sup(|u1, u2| {
            let t = self.eval(u1, u2);
            t[0].hypot(t[1])
        })
    }

    /// `sup ‖∇τ‖` (operator norm) over a dense grid of `[-1, 1]^2`.
    pub fn sup_grad(&self) -> f64 {
        dense_sup(|u1, u2| operator_norm(self.jacobian(u1, u2)))
    }

    /// Displacements at the pixel centres of `grid`, `H x W x 2`.
    pub fn sample(&self, grid: &Grid) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(grid.height * grid.width);
        for i in 0..grid.height {
            for j in 0..grid.width {
                let (u1, u2) = grid.coords(i as f64, j as f64);
                out.push(self.eval(u1, u2));
            }
        }
        out
    }

    /// `|∇τ|_∞` from central differences of the samples on `grid` (one-sided
    /// at the edges).
    pub fn grid_sup_grad(&self, grid: &Grid) -> f64 {
        let (h, w) = (grid.height, grid.width);
        if h < 2 || w < 2 {
            return 0.0;
        }
        let tau = self.sample(grid);
        let step1 = grid.stride / (grid.image_height as f64 / 2.0);
        let step2 = grid.stride / (grid.image_width as f64 / 2.0);
        let mut best = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let mut jac = [[0.0; 2]; 2];
                for c in 0..2 {
                    jac[c][0] = (tau[i1 * w + j][c] - tau[i0 * w + j][c]) / ((i1 - i0) as f64 * step1);
                    jac[c][1] = (tau[i * w + j1][c] - tau[i * w + j0][c]) / ((j1 - j0) as f64 * step2);
                }
                best = best.max(operator_norm(jac));
            }
        }
        best
    }

    /// Summary used by the bounds, with `|τ|_∞` converted to units of
    /// `radius` input pixels.
    pub fn stats(&self, grid: &Grid, radius: f64) -> FieldStats {
        let half = grid.image_height.max(grid.image_width) as f64 / 2.0;
        FieldStats {
            sup_tau: self.sup_tau() * half / radius,
            sup_grad: self.sup_grad(),
            sup_grad_grid: self.grid_sup_grad(grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldStats {
    /// `|τ|_∞` in patch-radius units.
    pub sup_tau: f64,
    /// Analytic `|∇τ|_∞` on a dense grid.
    pub sup_grad: f64,
    /// Central-difference estimate on the sampling grid.
    pub sup_grad_grid: f64,
}

fn dense_sup(f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..SUP_GRID {
        let u1 = -1.0 + 2.0 * i as f64 / (SUP_GRID - 1) as f64;
        for j in 0..SUP_GRID {
            let u2 = -1.0 + 2.0 * j as f64 / (SUP_GRID - 1) as f64;
            best = best.max(f(u1, u2));
        }
    }
    best
}

/// Largest singular value of a 2x2 matrix.
pub fn operator_norm(m: [[f64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = m;
    let s = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
    ((s + disc) / 2.0).sqrt()
}

/// `D_τ x` on the input grid; rejects fields with grid `|∇τ|_∞ ≥ 0.19`.
pub fn apply_deformation(x: &Tensor, field: &DeformationField) -> Result<Tensor> {
    let grid = Grid::input(x.height(), x.width());
    let g = field.grid_sup_grad(&grid);
    if g >= GRAD_TAU_LIMIT {
        return Err(DcfError::Admissibility(format!(
            "grid estimate of |∇τ|_∞ is {g:.4}, limit {GRAD_TAU_LIMIT}"
        )));
    }
    apply_deformation_on(x, field, &grid)
}

/// `D_τ x (u) = x(u - τ(u))` on an arbitrary layer grid, by bilinear
/// interpolation. Inside the outermost half cell the edge value is held;
/// points outside the grid's cells read zero.
pub fn apply_deformation_on(x: &Tensor, field: &DeformationField, grid: &Grid) -> Result<Tensor> {
    if x.height() != grid.height || x.width() != grid.width {
        return Err(DcfError::shape(format!(
            "field grid {}x{} vs signal {}x{}",
            grid.height,
            grid.width,
            x.height(),
            x.width()
        )));
    }
    let (h, w) = (grid.height, grid.width);
    let to_layer1 = grid.image_height as f64 / 2.0 / grid.stride;
    let to_layer2 = grid.image_width as f64 / 2.0 / grid.stride;
    // Per output pixel: four source indices and weights, or nothing.
    let mut taps: Vec<Option<([usize; 4], [f64; 4])>> = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u1, u2) = grid.coords(i as f64, j as f64);
            let t = field.eval(u1, u2);
            let q1 = i as f64 - t[0] * to_layer1;
            let q2 = j as f64 - t[1] * to_layer2;
            taps.push(bilinear_taps(q1, q2, h, w));
        }
    }
    let mut out = Tensor::zeros(x.shape());
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for (d, tap) in dst.iter_mut().zip(&taps) {
                if let Some((idx, wts)) = tap {
                    *d = (0..4).map(|k| wts[k] * src[idx[k]]).sum();
                }
            }
        }
    }
    Ok(out)
}

fn bilinear_taps(q1: f64, q2: f64, h: usize, w: usize) -> Option<([usize; 4], [f64; 4])> {
    if !(-0.5..=h as f64 - 0.5).contains(&q1) || !(-0.5..=w as f64 - 0.5).contains(&q2) {
        return None;
    }
    let q1 = q1.clamp(0.0, (h - 1) as f64);
    let q2 = q2.clamp(0.0, (w - 1) as f64);
    let (i0, j0) = (q1.floor() as usize, q2.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
    let (t, s) = (q1 - i0 as f64, q2 - j0 as f64);
    Some((
        [i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1],
        [(1.0 - t) * (1.0 - s), (1.0 - t) * s, t * (1.0 - s), t * s],
    ))
}

/// Per-layer quantities of one stability run.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub j: f64,
    pub constants: LayerConstants,
    /// FB constant `A_l`, when the layer is FB-decomposed.
    pub a: Option<f64>,
    /// `‖D_τ x^{(l)}[x^{(l-1)}] - x^{(l)}[D_τ x^{(l-1)}]‖`.
    pub commutator: f64,
    /// `4 (B_l + C_l) |∇τ|_∞ ‖x_c^{(l-1)}‖`.
    pub commutator_bound: f64,
    /// `‖D_τ x^{(l)} - x^{(l)}‖`.
    pub shift: f64,
    /// `2 |τ|_∞ D_l ‖x_c^{(l-1)}‖`.
    pub shift_bound: f64,
    pub centered_in: f64,
    pub centered_out: f64,
}

impl LayerCheck {
    pub fn commutator_ok(&self) -> bool {
        self.commutator <= self.commutator_bound
    }

    pub fn shift_ok(&self) -> bool {
        self.shift <= self.shift_bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub field: FieldStats,
    pub j_last: f64,
    pub input_norm: f64,
    pub layers: Vec<LayerCheck>,
    pub empirical_commutator: f64,
    /// `8 L |∇τ|_∞ ‖x‖`.
    pub bound_commutator: f64,
    pub empirical_total: f64,
    /// `(8 L |∇τ|_∞ + 2 · 2^{-j_L} |τ|_∞) ‖x‖`.
    pub bound_total: f64,
    /// True when the stack pools, which the theory does not cover.
    pub extrapolated: bool,
}

impl StabilityReport {
    pub fn commutator_ok(&self) -> bool {
        self.empirical_commutator <= self.bound_commutator
    }

    pub fn total_ok(&self) -> bool {
        self.empirical_total <= self.bound_total
    }

    pub fn satisfied(&self) -> bool {
        self.commutator_ok() && self.total_ok() && self.layers.iter().all(|l| l.commutator_ok() && l.shift_ok())
    }

    pub fn commutator_ratio(&self) -> f64 {
        ratio(self.empirical_commutator, self.bound_commutator)
    }

    pub fn total_ratio(&self) -> f64 {
        ratio(self.empirical_total, self.bound_total)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Runs every check for one single-sample input and one field.
pub fn verify_stability(stack: &ConvStack, x: &Tensor, field: &DeformationField) -> Result<StabilityReport> {
    if x.batch() != 1 {
        return Err(DcfError::shape("stability checks take one sample at a time"));
    }
    let grids = stack.grids(x.height(), x.width())?;
    let stats = field.stats(&grids[0], stack.base_radius());
    if stats.sup_grad_grid >= GRAD_TAU_LIMIT || stats.sup_grad >= 0.2 {
        return Err(DcfError::Admissibility(format!(
            "|∇τ|_∞ = {:.4} (grid {:.4}); need grid < {GRAD_TAU_LIMIT} and analytic < 0.2",
            stats.sup_grad, stats.sup_grad_grid
        )));
    }
    let js = stack.scale_exponents(x.height(), x.width())?;
    let fb = stack.fb_constants().ok();

    let acts = stack.forward_all(x)?;
    let zeros = stack.forward_all(&Tensor::zeros(x.shape()))?;
    let deformed_in = apply_deformation_on(x, field, &grids[0])?;
    let deformed_acts = stack.forward_all(&deformed_in)?;

    let (grad, tau) = (stats.sup_grad, stats.sup_tau);
    let mut layers = Vec::with_capacity(stack.blocks.len());
    for (l, block) in stack.blocks.iter().enumerate() {
        let constants = layer_constants(&block.filter, js[l]);
        let centered_in = signal_norm(&acts[l].sub(&zeros[l])?);
        let centered_out = signal_norm(&acts[l + 1].sub(&zeros[l + 1])?);
        let out_deformed = apply_deformation_on(&acts[l + 1], field, &grids[l + 1])?;
        let in_deformed = apply_deformation_on(&acts[l], field, &grids[l])?;
        let commutator = signal_norm(&out_deformed.sub(&block.forward(&in_deformed)?)?);
        let shift = signal_norm(&out_deformed.sub(&acts[l + 1])?);
        layers.push(LayerCheck {
            j: js[l],
            constants,
            a: fb.as_ref().map(|v| v[l]),
            commutator,
            commutator_bound: 4.0 * (constants.b + constants.c) * grad * centered_in,
            shift,
            shift_bound: 2.0 * tau * constants.d * centered_in,
            centered_in,
            centered_out,
        });
    }
    let depth = stack.blocks.len() as f64;
    let last = acts.last().unwrap();
    let input_norm = signal_norm(x);
    let j_last = *js.last().unwrap();
    let out_deformed = apply_deformation_on(last, field, grids.last().unwrap())?;
    Ok(StabilityReport {
        field: stats,
        j_last,
        input_norm,
        layers,
        empirical_commutator: signal_norm(&out_deformed.sub(deformed_acts.last().unwrap())?),
        bound_commutator: 8.0 * depth * grad * input_norm,
        empirical_total: signal_norm(&last.sub(deformed_acts.last().unwrap())?),
        bound_total: (8.0 * depth * grad + 2.0 * 2f64.powf(-j_last) * tau) * input_norm,
        extrapolated: stack.has_pools(),
    })
}

/// `count` boundary-vanishing fields with `|∇τ|_∞` drawn uniformly from
/// `[lo, hi]`, deterministic in `seed`.
pub fn field_battery(count: usize, lo: f64, hi: f64, seed: u64) -> Vec<DeformationField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let amp = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            DeformationField::random_boundary_vanishing(&mut rng, 2, amp)
        })
        .collect()
}

/// One battery item: `(input index, field index, report)`.
pub type BatteryRow = (usize, usize, StabilityReport);

/// Runs every (input, field) pair on up to `threads` workers; rows come back
/// in input-major order regardless of scheduling.
pub fn run_battery(
    stack: &ConvStack,
    inputs: &[Tensor],
    fields: &[DeformationField],
    threads: usize,
) -> Result<Vec<BatteryRow>> {
    let jobs: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|i| (0..fields.len()).map(move |f| (i, f)))
        .collect();
    let threads = threads.max(1).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<BatteryRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&(i, f)| Ok((i, f, verify_stability(stack, &inputs[i], &fields[f])?)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("battery worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(jobs.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Formats with 12 significant digits.
pub fn fmt12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.11e}")
}

/// CSV with one row per battery item.
pub fn battery_csv(rows: &[BatteryRow]) -> String {
    let mut out = String::new();
    let depth = rows.first().map(|r| r.2.layers.len()).unwrap_or(0);
    out.push_str("input,field,grad_tau,grad_tau_grid,tau_sup,j_L,input_norm");
    for l in 1..=depth {
        let _ = write!(
            out,
            ",B{l},C{l},D{l},A{l},commutator{l},commutator_bound{l},commutator_ratio{l},shift{l},shift_bound{l},shift_ratio{l},centered_in{l},centered_out{l}"
        );
    }
    out.push_str(
        ",empirical_commutator,bound_commutator,ratio_commutator,empirical_total,bound_total,ratio_total,extrapolated,satisfied\n",
    );
    for (i, f, r) in rows {
        let _ = write!(
            out,
            "{i},{f},{},{},{},{},{}",
            fmt12(r.field.sup_grad),
            fmt12(r.field.sup_grad_grid),
            fmt12(r.field.sup_tau),
            fmt12(r.j_last),
            fmt12(r.input_norm)
        );
        for l in &r.layers {
            let a = l.a.map(fmt12).unwrap_or_default();
            let _ = write!(
                out,
                ",{},{},{},{a},{},{},{},{},{},{},{},{}",
                fmt12(l.constants.b),
                fmt12(l.constants.c),
                fmt12(l.constants.d),
                fmt12(l.commutator),
                fmt12(l.commutator_bound),
                fmt12(ratio(l.commutator, l.commutator_bound)),
                fmt12(l.shift),
                fmt12(l.shift_bound),
                fmt12(ratio(l.shift, l.shift_bound)),
                fmt12(l.centered_in),
                fmt12(l.centered_out)
            );
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{}",
            fmt12(r.empirical_commutator),
            fmt12(r.bound_commutator),
            fmt12(r.commutator_ratio()),
            fmt12(r.empirical_total),
            fmt12(r.bound_total),
            fmt12(r.total_ratio()),
            r.extrapolated,
            r.satisfied()
        );
    }
    out
}

/// Largest `‖f(x1) - f(x2)‖ / ‖x1 - x2‖` over `pairs` random input pairs
/// with entries in `[-1, 1]`.
pub fn expansion_ratio(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    shape: [usize; 4],
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let b = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let num = signal_norm(&f(&a)?.sub(&f(&b)?)?);
        let den = signal_norm(&a.sub(&b)?);
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(worst)
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::{sample_fb_basis, BasisSet};
    use crate::nn::{conv2, Mode};
    use std::sync::Arc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_dcf(rng: &mut ChaCha8Rng, basis: Arc<BasisSet>, mi: usize, mo: usize) -> DcfLayer {
        let mut d = DcfLayer::zeros(basis, mi, mo, 1, 2);
        d.coeffs = (0..d.coeffs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        d.bias = (0..mo).map(|_| rng.random_range(-0.5..0.5)).collect();
        d
    }

    #[test]
    fn signal_norm_examples() {
        assert_eq!(signal_norm(&Tensor::filled([1, 1, 5, 7], 1.0)), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [1, 3, 4, 6]);
        assert!((signal_norm(&x.scale(-2.5)) - 2.5 * signal_norm(&x)).abs() < 1e-12);
        let mut acc = 0.0;
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..6 {
                    s += x.get(0, c, i, j).powi(2);
                }
            }
            acc += s / 24.0;
        }
        assert!((signal_norm(&x) - (acc / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unit_l1_filter_has_b_one_and_constants_are_homogeneous() {
        let basis = sample_fb_basis(1, 9).unwrap();
        let mass: f64 = basis.sample(0).iter().map(|v| v.abs()).sum();
        let w: Vec<f64> = basis.sample(0).iter().map(|v| v / mass).collect();
        let k = bank_constants(&w, 1, 1, 9, 0.0);
        assert!((k.b - 1.0).abs() < 1e-12);
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let k2 = bank_constants(&w2, 1, 1, 9, 0.0);
        assert!((k2.b - 2.0 * k.b).abs() < 1e-12);
        assert!((k2.c - 2.0 * k.c).abs() < 1e-12);
        assert!((k2.d - 2.0 * k.d).abs() < 1e-12);
        assert!((bank_constants(&w, 1, 1, 9, 1.0).d - k.d / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mixed_norm_uses_channel_ratio() {
        // M = 1 output, M' = 2 inputs.
        assert_eq!(mixed_norm(&[1.0, 3.0], 1, 2), 6.0);
        assert_eq!(mixed_norm(&[1.0, 3.0], 2, 1), 3.0);
    }

    #[test]
    fn fb_constant_examples() {
        let basis = Arc::new(sample_fb_basis(4, 5).unwrap());
        let mut d = DcfLayer::zeros(basis.clone(), 1, 1, 1, 2);
        assert_eq!(fb_layer_constant(&d).unwrap(), 0.0);
        d.coeffs[0] = 1.0 / 6.25;
        let a = fb_layer_constant(&d).unwrap();
        assert!((a - PI * 2.404825557695773).abs() < 1e-9);
        assert!((a - PI * 5.78f64.sqrt()).abs() < 1e-3 * a);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = rand_dcf(&mut rng, basis, 3, 2);
        let mut s = r.clone();
        s.coeffs.iter_mut().for_each(|c| *c *= -3.0);
        assert!((fb_layer_constant(&s).unwrap() - 3.0 * fb_layer_constant(&r).unwrap()).abs() < 1e-12);
        let random = Arc::new(crate::bases::sample_random_basis(3, 5, 1).unwrap());
        assert!(matches!(
            fb_layer_constant(&DcfLayer::zeros(random, 1, 1, 1, 2)),
            Err(DcfError::Unsupported(_))
        ));
    }

    #[test]
    fn b_and_c_bounded_by_fb_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, l) in [(3, 5), (8, 7), (14, 11)] {
            let basis = Arc::new(sample_fb_basis(k, l).unwrap());
            let d = rand_dcf(&mut rng, basis, 3, 4);
            let a = fb_layer_constant(&d).unwrap();
            let c = layer_constants(&BlockFilter::Dcf(d), 0.0);
            assert!(c.b <= 1.05 * a && c.c <= 1.05 * a, "K={k} L={l}: {c:?} vs {a}");
        }
    }

    fn fb_conv2_stack(seed: u64) -> ConvStack {
        let b = Arc::new(sample_fb_basis(3, 5).unwrap());
        let net = conv2(Some(&[b.clone(), b]), seed).unwrap();
        ConvStack::from_network(&net).unwrap()
    }

    #[test]
    fn stack_extraction_folds_batch_norm() {
        let b = Arc::new(sample_fb_basis(3, 5).unwrap());
        let mut net = conv2(Some(&[b.clone(), b]), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for layer in &mut net.layers {
            if let Layer::BatchNorm(bn) = layer {
                for c in 0..bn.channels() {
                    bn.gamma[c] = rng.random_range(0.5..1.5);
                    bn.beta[c] = rng.random_range(-0.5..0.5);
                    bn.running_mean[c] = rng.random_range(-0.5..0.5);
                    bn.running_var[c] = rng.random_range(0.5..2.0);
                }
            }
        }
        let stack = ConvStack::from_network(&net).unwrap();
        assert_eq!(stack.blocks.len(), 2);
        let x = rand_tensor(&mut rng, [1, 1, 28, 28]);
        let mut cur = x.clone();
        for layer in &net.layers[..8] {
            cur = Network::new(vec![layer.clone()]).forward(&cur, Mode::Eval).unwrap();
        }
        assert!(stack.forward(&x).unwrap().max_abs_diff(&cur).unwrap() < 1e-10);
        let grids = stack.grids(28, 28).unwrap();
        assert_eq!((grids[1].height, grids[1].stride, grids[1].offset), (14, 2.0, 0.0));
        assert_eq!((grids[2].height, grids[2].stride, grids[2].offset), (7, 4.0, 0.0));
        assert_eq!(stack.scale_exponents(28, 28).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn rescaling_reaches_admissibility() {
        let stack = fb_conv2_stack(7);
        let (scaled, factors) = rescale_to_admissible(&stack).unwrap();
        for (a, f) in scaled.fb_constants().unwrap().iter().zip(&factors) {
            assert!(*a <= 1.0 + 1e-12);
            assert!(*f >= 1.0);
        }
        let (again, ones) = rescale_to_admissible(&scaled).unwrap();
        assert_eq!(again, scaled);
        assert!(ones.iter().all(|&f| f == 1.0));

        let basis = Arc::new(sample_fb_basis(3, 5).unwrap());
        let mut d = DcfLayer::zeros(basis, 1, 1, 1, 2);
        d.coeffs[0] = 2.0 / 6.25 / 2.404825557695773;
        let single = ConvStack {
            blocks: vec![ConvBlock {
                filter: BlockFilter::Dcf(d),
                pool: None,
            }],
        };
        assert!((single.fb_constants().unwrap()[0] - 2.0 * PI).abs() < 1e-12);
        let (s, f) = rescale_to_admissible(&single).unwrap();
        assert!((f[0] - 2.0 * PI).abs() < 1e-12);
        assert!((s.fb_constants().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_integer_shift_deformations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, [1, 2, 10, 12]);
        assert_eq!(apply_deformation(&x, &DeformationField::zero()).unwrap(), x);
        // Two pixels down, one pixel left, in normalised units.
        let field = DeformationField::shift(2.0 / 5.0, -1.0 / 6.0);
        let y = apply_deformation(&x, &field).unwrap();
        for c in 0..2 {
            for i in 2..10 {
                for j in 0..11 {
                    assert!((y.get(0, c, i, j) - x.get(0, c, i - 2, j + 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deformed_ramp_matches_analytic_composition() {
        let eps = 0.05;
        let field = DeformationField::sine_shear(eps);
        let g = field.sup_grad();
        assert!((g - eps * PI).abs() < 1e-3 && g < 0.2);
        let n = 32;
        let ramp = |u1: f64, u2: f64| 0.3 + 0.7 * u1 - 0.4 * u2;
        let grid = Grid::input(n, n);
        let mut x = Tensor::zeros([1, 1, n, n]);
        for i in 0..n {
            for j in 0..n {
                let (u1, u2) = grid.coords(i as f64, j as f64);
                x.set(0, 0, i, j, ramp(u1, u2));
            }
        }
        let y = apply_deformation(&x, &field).unwrap();
        let margin = 3;
        for i in margin..n - margin {
            for j in margin..n - margin {
                let (u1, u2) = grid.coords(i as f64, j as f64);
                let t = field.eval(u1, u2);
                assert!((y.get(0, 0, i, j) - ramp(u1 - t[0], u2 - t[1])).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn inadmissible_field_is_rejected() {
        let x = Tensor::zeros([1, 1, 16, 16]);
        assert!(matches!(
            apply_deformation(&x, &DeformationField::sine_shear(0.1)),
            Err(DcfError::Admissibility(_))
        ));
    }

    #[test]
    fn operator_norm_matches_svd() {
        let m = [[1.0, 2.0], [3.0, 4.0]];
        let svd = nalgebra::Matrix2::<f64>::new(1.0, 2.0, 3.0, 4.0).singular_values();
        assert!((operator_norm(m) - svd[0].max(svd[1])).abs() < 1e-12);
        assert!((operator_norm([[0.0, -2.0], [0.5, 0.0]]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn battery_fields_vanish_on_the_boundary() {
        for f in field_battery(5, 0.05, 0.15, 3) {
            let g = f.sup_grad();
            assert!((0.05 - 1e-12..=0.15 + 1e-12).contains(&g));
            for t in [-1.0, -0.3, 0.4, 1.0] {
                for (u1, u2) in [(-1.0, t), (1.0, t), (t, -1.0), (t, 1.0)] {
                    let v = f.eval(u1, u2);
                    assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_field_gives_zero_deviation() {
        let stack = rescale_to_admissible(&fb_conv2_stack(9)).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, [1, 1, 28, 28]);
        let r = verify_stability(&stack, &x, &DeformationField::zero()).unwrap();
        assert_eq!(r.empirical_commutator, 0.0);
        assert_eq!(r.empirical_total, 0.0);
        assert!(r.bound_total >= 0.0 && r.satisfied());
        assert!(r.extrapolated);
    }

    #[test]
    fn rescaled_conv_relu_layers_are_non_expansive() {
        let stack = rescale_to_admissible(&fb_conv2_stack(11)).unwrap().0;
        let shapes = [[1, 1, 28, 28], [1, 16, 14, 14]];
        for (block, shape) in stack.blocks.iter().zip(shapes) {
            let worst = expansion_ratio(|x| block.conv_relu(x), shape, 20, 12).unwrap();
            assert!(worst <= 1.0 + 1e-9, "{worst}");
        }
    }

    #[test]
    fn battery_is_ordered_and_thread_independent() {
        let stack = rescale_to_admissible(&fb_conv2_stack(13)).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, [1, 1, 28, 28])).collect();
        let fields = field_battery(2, 0.05, 0.1, 1);
        let one = run_battery(&stack, &inputs, &fields, 1).unwrap();
        let four = run_battery(&stack, &inputs, &fields, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(battery_csv(&one), battery_csv(&four));
        let order: Vec<(usize, usize)> = one.iter().map(|r| (r.0, r.1)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }
}
