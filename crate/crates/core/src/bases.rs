//! Fixed filter bases sampled on an `L x L` pixel patch.
//!
//! Pixel `(i, j)` sits at normalised coordinates
//! `u = ((i - (L-1)/2) / (L/2), (j - (L-1)/2) / (L/2))`, so the unit disk is
//! inscribed in the patch and corner pixels fall outside it. Discrete inner
//! products use the matching pixel area `(2/L)^2`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::bessel::{self, MAX_ORDER, MAX_ZERO_INDEX};
use crate::codec::{put_f64s, put_u32, ByteReader};
use crate::error::{DcfError, Result};

const MAGIC: &[u8; 4] = b"DCFB";
const VERSION: u16 = 1;
const MU_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Cosine,
    Sine,
}

/// One real Fourier-Bessel mode `J_m(R_{m,q} r) {cos, sin}(m θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FBMode {
    /// 1-based position in the eigenvalue ordering.
    pub k: usize,
    pub m: usize,
    pub q: usize,
    pub parity: Parity,
    /// Dirichlet eigenvalue, always `root * root`.
    pub mu: f64,
    pub root: f64,
}

impl FBMode {
    fn new(k: usize, m: usize, q: usize, parity: Parity, root: f64) -> Self {
        FBMode {
            k,
            m,
            q,
            parity,
            mu: root * root,
            root,
        }
    }

    /// Normalising constant giving squared `L^2(D)` norm `π`.
    pub fn norm_constant(&self) -> f64 {
        let edge = bessel::jn(self.m + 1, self.root).abs();
        if self.m == 0 {
            1.0 / edge
        } else {
            2f64.sqrt() / edge
        }
    }

    /// Continuum value at normalised coordinates; zero outside the unit disk.
    pub fn eval(&self, u1: f64, u2: f64) -> f64 {
        self.eval_scaled(self.norm_constant(), u1, u2)
    }

    fn eval_scaled(&self, c: f64, u1: f64, u2: f64) -> f64 {
        let r2 = u1 * u1 + u2 * u2;
        if r2 > 1.0 {
            return 0.0;
        }
        let r = r2.sqrt();
        let radial = c * bessel::jn(self.m, self.root * r);
        if self.m == 0 {
            return radial;
        }
        let theta = u2.atan2(u1);
        let angle = self.m as f64 * theta;
        match self.parity {
            Parity::Cosine => radial * angle.cos(),
            Parity::Sine => radial * angle.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    FourierBessel,
    Random,
    Pca,
    Delta,
}

impl BasisKind {
    pub fn code(self) -> u8 {
        match self {
            BasisKind::FourierBessel => 0,
            BasisKind::Random => 1,
            BasisKind::Pca => 2,
            BasisKind::Delta => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => BasisKind::FourierBessel,
            1 => BasisKind::Random,
            2 => BasisKind::Pca,
            3 => BasisKind::Delta,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisKind::FourierBessel => "fb",
            BasisKind::Random => "random",
            BasisKind::Pca => "pca",
            BasisKind::Delta => "delta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fb" | "fourier_bessel" => BasisKind::FourierBessel,
            "random" | "rb" => BasisKind::Random,
            "pca" => BasisKind::Pca,
            "delta" => BasisKind::Delta,
            _ => return None,
        })
    }
}

/// `K` sampled basis filters on an `L x L` grid. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    kind: BasisKind,
    count: usize,
    size: usize,
    samples: Vec<f64>,
    modes: Vec<FBMode>,
    gram: Vec<f64>,
    seed: Option<u64>,
}

impl BasisSet {
    fn build(
        kind: BasisKind,
        count: usize,
        size: usize,
        samples: Vec<f64>,
        modes: Vec<FBMode>,
        seed: Option<u64>,
    ) -> Self {
        let gram = gram_matrix(&samples, count, size);
        BasisSet {
            kind,
            count,
            size,
            samples,
            modes,
            gram,
            seed,
        }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of basis filters `K`.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Patch side length `L`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.samples[k * n..(k + 1) * n]
    }

    /// Fourier-Bessel modes; empty for the other kinds.
    pub fn modes(&self) -> &[FBMode] {
        &self.modes
    }

    /// `K x K` row-major Gram matrix under the `(2/L)^2` pixel measure.
    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.mu).collect()
    }

    /// Serialises to the `DCFB` binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(23 + self.samples.len() * 8 + self.modes.len() * 17);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        put_u32(&mut out, self.count);
        put_u32(&mut out, self.size);
        out.extend_from_slice(&self.seed.unwrap_or(0).to_le_bytes());
        put_f64s(&mut out, &self.samples);
        if self.kind == BasisKind::FourierBessel {
            for mode in &self.modes {
                put_u32(&mut out, mode.m);
                put_u32(&mut out, mode.q);
                out.push(match mode.parity {
                    Parity::Cosine => 0,
                    Parity::Sine => 1,
                });
                out.extend_from_slice(&mode.mu.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.bytes(4)? != MAGIC {
            return Err(DcfError::format(0, "bad magic, expected DCFB"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(DcfError::format(4, format!("unsupported version {version}")));
        }
        let kind_at = r.offset();
        let kind = BasisKind::from_code(r.u8()?)
            .ok_or_else(|| DcfError::format(kind_at, "unknown basis kind"))?;
        let count = r.usize32()?;
        let size = r.usize32()?;
        let seed = r.u64()?;
        if count == 0 || size == 0 {
            return Err(DcfError::format(r.offset(), "empty basis"));
        }
        let samples = r.f64s(count * size * size)?;
        let mut modes = Vec::new();
        if kind == BasisKind::FourierBessel {
            for k in 1..=count {
                let at = r.offset();
                let m = r.usize32()?;
                let q = r.usize32()?;
                let parity = match r.u8()? {
                    0 => Parity::Cosine,
                    1 => Parity::Sine,
                    p => return Err(DcfError::format(at + 8, format!("bad parity {p}"))),
                };
                let mu = f64::from_le_bytes(r.bytes(8)?.try_into().unwrap());
                if parity == Parity::Sine && m == 0 {
                    return Err(DcfError::format(at, "sine mode with m = 0"));
                }
                let root = bessel::bessel_root(m, q)
                    .map_err(|e| DcfError::format(at, e.to_string()))?;
                let mode = FBMode::new(k, m, q, parity, root);
                if (mode.mu - mu).abs() > 1e-9 * mu.max(1.0) {
                    return Err(DcfError::format(
                        at + 9,
                        format!("eigenvalue {mu} inconsistent with (m={m}, q={q})"),
                    ));
                }
                modes.push(mode);
            }
        }
        r.expect_end()?;
        let seed = (kind == BasisKind::Random).then_some(seed);
        Ok(BasisSet::build(kind, count, size, samples, modes, seed))
    }

    /// SHA-256 of the serialised form; identifies a basis by content.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Area of one pixel in normalised disk coordinates.
pub fn pixel_area(size: usize) -> f64 {
    let h = 2.0 / size as f64;
    h * h
}

/// Normalised coordinates of pixel `(i, j)` on an `L x L` patch.
pub fn pixel_coords(size: usize, i: usize, j: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let s = size as f64 / 2.0;
    ((i as f64 - c) / s, (j as f64 - c) / s)
}

/// Row-major mask of pixels whose centre lies inside the closed unit disk.
pub fn disk_mask(size: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (u1, u2) = pixel_coords(size, i, j);
            mask.push(u1 * u1 + u2 * u2 <= 1.0);
        }
    }
    mask
}

fn gram_matrix(samples: &[f64], count: usize, size: usize) -> Vec<f64> {
    let n = size * size;
    let area = pixel_area(size);
    let mut g = vec![0.0; count * count];
    for a in 0..count {
        let sa = &samples[a * n..(a + 1) * n];
        for b in a..count {
            let sb = &samples[b * n..(b + 1) * n];
            let v = area * sa.iter().zip(sb).map(|(x, y)| x * y).sum::<f64>();
            g[a * count + b] = v;
            g[b * count + a] = v;
        }
    }
    g
}

fn cmp_pairs(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    let (ma, qa, ra) = *a;
    let (mb, qb, rb) = *b;
    let (mua, mub) = (ra * ra, rb * rb);
    if (mua - mub).abs() < MU_TIE {
        (ma, qa).cmp(&(mb, qb))
    } else {
        mua.total_cmp(&mub)
    }
}

/// The first `K` real Fourier-Bessel modes in order of increasing eigenvalue.
///
/// Each `m = 0` pair contributes a single cosine mode; every `m >= 1` pair
/// contributes a cosine mode followed by a sine mode.
pub fn fb_mode_order(count: usize) -> Result<Vec<FBMode>> {
    if count == 0 {
        return Err(DcfError::invalid("basis count K must be at least 1"));
    }
    // Every zero of J_m exceeds m, so a root bound below MAX_ORDER + 1 sees
    // all orders that could contribute.
    let ceiling = (MAX_ORDER + 1) as f64;
    let mut bound = 10.0f64;
    loop {
        let mut pairs = Vec::new();
        for m in 0..=MAX_ORDER {
            let mut any = false;
            for q in 1..=MAX_ZERO_INDEX {
                let r = bessel::bessel_root(m, q)?;
                if r > bound {
                    break;
                }
                any = true;
                pairs.push((m, q, r));
            }
            if !any {
                break;
            }
        }
        let available: usize = pairs.iter().map(|p| if p.0 == 0 { 1 } else { 2 }).sum();
        if available >= count {
            pairs.sort_by(cmp_pairs);
            let mut modes = Vec::with_capacity(count + 1);
            for (m, q, r) in pairs {
                modes.push(FBMode::new(modes.len() + 1, m, q, Parity::Cosine, r));
                if m > 0 {
                    modes.push(FBMode::new(modes.len() + 1, m, q, Parity::Sine, r));
                }
                if modes.len() >= count {
                    break;
                }
            }
            modes.truncate(count);
            return Ok(modes);
        }
        if bound >= ceiling {
            return Err(DcfError::UnsupportedOrder {
                order: MAX_ORDER + 1,
                ceiling: MAX_ORDER,
            });
        }
        bound = (bound * 1.5).min(ceiling);
    }
}

/// Samples the first `K` Fourier-Bessel modes on an `L x L` patch.
pub fn sample_fb_basis(count: usize, size: usize) -> Result<BasisSet> {
    check_dims(count, size)?;
    let modes = fb_mode_order(count)?;
    let n = size * size;
    let mut samples = vec![0.0; count * n];
    for (mode, out) in modes.iter().zip(samples.chunks_exact_mut(n)) {
        let c = mode.norm_constant();
        for i in 0..size {
            for j in 0..size {
                let (u1, u2) = pixel_coords(size, i, j);
                out[i * size + j] = mode.eval_scaled(c, u1, u2);
            }
        }
    }
    Ok(BasisSet::build(
        BasisKind::FourierBessel,
        count,
        size,
        samples,
        modes,
        None,
    ))
}

/// Gaussian random filters masked to the disk, each with squared norm `π`.
pub fn sample_random_basis(count: usize, size: usize, seed: u64) -> Result<BasisSet> {
    check_dims(count, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = disk_mask(size);
    let n = size * size;
    let mut samples = Vec::with_capacity(count * n);
    for _ in 0..count {
        let mut filter: Vec<f64> = mask
            .iter()
            .map(|&inside| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if inside {
                    z
                } else {
                    0.0
                }
            })
            .collect();
        normalize_to_pi(&mut filter, size);
        samples.extend(filter);
    }
    Ok(BasisSet::build(
        BasisKind::Random,
        count,
        size,
        samples,
        Vec::new(),
        Some(seed),
    ))
}

/// Leading `K` principal directions of `N` flattened `L x L` filters.
///
/// Uses the uncentred `L^2 x L^2` second-moment matrix, so the directions are
/// the top right singular vectors of the `N x L^2` data matrix. Each output
/// has squared norm `π` and its first non-negligible entry positive.
pub fn sample_pca_basis(filters: &[f64], size: usize, count: usize) -> Result<BasisSet> {
    if size < 1 {
        return Err(DcfError::invalid("patch size must be positive"));
    }
    let n = size * size;
    if filters.len() % n != 0 {
        return Err(DcfError::shape(format!(
            "filter payload of {} values is not a multiple of {n}",
            filters.len()
        )));
    }
    let available = filters.len() / n;
    if count == 0 {
        return Err(DcfError::invalid("basis count K must be at least 1"));
    }
    if available < count {
        return Err(DcfError::InsufficientSamples {
            needed: count,
            got: available,
        });
    }
    if count > n {
        return Err(DcfError::invalid(format!(
            "K = {count} exceeds the {n} pixels of an {size}x{size} patch"
        )));
    }
    let data = DMatrix::from_row_slice(available, n, filters);
    let second_moment = data.transpose() * &data;
    let eig = SymmetricEigen::new(second_moment);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut samples = Vec::with_capacity(count * n);
    for &idx in order.iter().take(count) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        normalize_to_pi(&mut v, size);
        samples.extend(v);
    }
    Ok(BasisSet::build(
        BasisKind::Pca,
        count,
        size,
        samples,
        Vec::new(),
        None,
    ))
}

/// The `L^2` unit pixel impulses in raster order.
///
/// Impulses are left at unit height (not rescaled to norm `π`) so that a
/// decomposed layer over this basis is exactly the dense layer.
pub fn sample_delta_basis(size: usize) -> Result<BasisSet> {
    check_dims(1, size)?;
    let n = size * size;
    let mut samples = vec![0.0; n * n];
    for k in 0..n {
        samples[k * n + k] = 1.0;
    }
    Ok(BasisSet::build(
        BasisKind::Delta,
        n,
        size,
        samples,
        Vec::new(),
        None,
    ))
}

/// `(Σ_k μ_k a_k²)^{1/2}`.
pub fn fb_norm(coeffs: &[f64], modes: &[FBMode]) -> Result<f64> {
    if coeffs.len() != modes.len() {
        return Err(DcfError::shape(format!(
            "{} coefficients for {} modes",
            coeffs.len(),
            modes.len()
        )));
    }
    Ok(fb_norm_unchecked(coeffs, modes))
}

pub(crate) fn fb_norm_unchecked(coeffs: &[f64], modes: &[FBMode]) -> f64 {
    coeffs
        .iter()
        .zip(modes)
        .map(|(a, m)| m.mu * a * a)
        .sum::<f64>()
        .sqrt()
}

fn check_dims(count: usize, size: usize) -> Result<()> {
    if count == 0 {
        return Err(DcfError::invalid("basis count K must be at least 1"));
    }
    if size < 3 {
        return Err(DcfError::invalid(format!(
            "patch size L must be at least 3, got {size}"
        )));
    }
    Ok(())
}

fn normalize_to_pi(filter: &mut [f64], size: usize) {
    let sq = pixel_area(size) * filter.iter().map(|x| x * x).sum::<f64>();
    if sq > 0.0 {
        let s = (PI / sq).sqrt();
        filter.iter_mut().for_each(|x| *x *= s);
    }
}
