//! `DCFN` binary model format.
//!
//! All integers little-endian.
//!
//! ```text
//! "DCFN"  u16 version = 1  u32 layer_count
//! layer_count records, each starting with a u8 type:
//!   1 conv     u32 M' M L stride pad, f64[M M' L L] weights, f64[M] bias
//!   2 dcf      u32 M' M K L stride pad, [u8; 32] basis sha256,
//!              f64[M M' K] coeffs, f64[M] bias
//!   3 bn       u32 C, f64[C] gamma, beta, running_mean, running_var
//!   4 relu
//!   5 maxpool  u32 window stride pad
//!   6 fc       u32 in out, f64[out in] weights, f64[out] bias
//! u32 basis_count, then per basis: [u8; 32] sha256, u64 len, DCFB bytes
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::bases::BasisSet;
use crate::codec::{put_f64s, put_u32, ByteReader};
use crate::dcf::DcfLayer;
use crate::error::{DcfError, Result};
use crate::nn::{BatchNorm, ConvSpec, Layer, Linear, MaxPool, Network};

const MAGIC: &[u8; 4] = b"DCFN";
const VERSION: u16 = 1;

pub fn model_to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.layers.len());
    let mut bases: Vec<([u8; 32], Arc<BasisSet>)> = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                out.push(1);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put_u32(&mut out, v);
                }
                put_f64s(&mut out, &c.weights);
                put_f64s(&mut out, &c.bias);
            }
            Layer::Dcf(d) => {
                out.push(2);
                for v in [d.in_channels, d.out_channels, d.count(), d.kernel(), d.stride, d.padding] {
                    put_u32(&mut out, v);
                }
                let hash = d.basis.content_hash();
                if !bases.iter().any(|(h, _)| *h == hash) {
                    bases.push((hash, d.basis.clone()));
                }
                out.extend_from_slice(&hash);
                put_f64s(&mut out, &d.coeffs);
                put_f64s(&mut out, &d.bias);
            }
            Layer::BatchNorm(b) => {
                out.push(3);
                put_u32(&mut out, b.channels());
                for v in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                    put_f64s(&mut out, v);
                }
            }
            Layer::Relu => out.push(4),
            Layer::MaxPool(p) => {
                out.push(5);
                for v in [p.window, p.stride, p.padding] {
                    put_u32(&mut out, v);
                }
            }
            Layer::Linear(l) => {
                out.push(6);
                put_u32(&mut out, l.in_features);
                put_u32(&mut out, l.out_features);
                put_f64s(&mut out, &l.weights);
                put_f64s(&mut out, &l.bias);
            }
        }
    }
    put_u32(&mut out, bases.len());
    for (hash, basis) in bases {
        out.extend_from_slice(&hash);
        let bytes = basis.to_bytes();
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

enum Pending {
    Ready(Layer),
    Dcf {
        in_c: usize,
        out_c: usize,
        count: usize,
        size: usize,
        stride: usize,
        padding: usize,
        hash: [u8; 32],
        coeffs: Vec<f64>,
        bias: Vec<f64>,
        offset: usize,
    },
}

pub fn model_from_bytes(buf: &[u8]) -> Result<Network> {
    let mut r = ByteReader::new(buf);
    if r.bytes(4)? != MAGIC {
        return Err(DcfError::format(0, "not a DCFN model (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DcfError::format(4, format!("unsupported DCFN version {version}")));
    }
    let count = r.usize32()?;
    let mut pending = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let kind = r.u8()?;
        pending.push(match kind {
            1 => {
                let (mi, mo, l, s, p) = (r.usize32()?, r.usize32()?, r.usize32()?, r.usize32()?, r.usize32()?);
                let weights = r.f64s(mo * mi * l * l)?;
                let bias = r.f64s(mo)?;
                let spec = ConvSpec::new(mi, mo, l, s, p, weights, bias).map_err(|e| DcfError::format(at, e.to_string()))?;
                Pending::Ready(Layer::Conv(spec))
            }
            2 => {
                let (in_c, out_c, count, size) = (r.usize32()?, r.usize32()?, r.usize32()?, r.usize32()?);
                let (stride, padding) = (r.usize32()?, r.usize32()?);
                let hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
                let coeffs = r.f64s(out_c * in_c * count)?;
                let bias = r.f64s(out_c)?;
                Pending::Dcf {
                    in_c,
                    out_c,
                    count,
                    size,
                    stride,
                    padding,
                    hash,
                    coeffs,
                    bias,
                    offset: at,
                }
            }
            3 => {
                let c = r.usize32()?;
                Pending::Ready(Layer::BatchNorm(BatchNorm {
                    gamma: r.f64s(c)?,
                    beta: r.f64s(c)?,
                    running_mean: r.f64s(c)?,
                    running_var: r.f64s(c)?,
                }))
            }
            4 => Pending::Ready(Layer::Relu),
            5 => {
                let pool = MaxPool {
                    window: r.usize32()?,
                    stride: r.usize32()?,
                    padding: r.usize32()?,
                };
                if pool.window == 0 || pool.stride == 0 || pool.padding >= pool.window {
                    return Err(DcfError::format(at, "invalid pooling parameters"));
                }
                Pending::Ready(Layer::MaxPool(pool))
            }
            6 => {
                let (fin, fout) = (r.usize32()?, r.usize32()?);
                Pending::Ready(Layer::Linear(Linear {
                    in_features: fin,
                    out_features: fout,
                    weights: r.f64s(fin * fout)?,
                    bias: r.f64s(fout)?,
                }))
            }
            other => return Err(DcfError::format(at, format!("unknown layer type {other}"))),
        });
    }
    let nb = r.usize32()?;
    let mut bases: HashMap<[u8; 32], Arc<BasisSet>> = HashMap::new();
    for _ in 0..nb {
        let at = r.offset();
        let hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| DcfError::format(at + 32, "basis length overflows"))?;
        let body_at = r.offset();
        let basis = BasisSet::from_bytes(r.bytes(len)?).map_err(|e| match e {
            DcfError::Format { offset, message } => DcfError::format(body_at + offset, message),
            other => other,
        })?;
        if basis.content_hash() != hash {
            return Err(DcfError::format(at, "embedded basis does not match its hash"));
        }
        bases.insert(hash, Arc::new(basis));
    }
    r.expect_end()?;

    let mut layers = Vec::with_capacity(pending.len());
    for p in pending {
        layers.push(match p {
            Pending::Ready(l) => l,
            Pending::Dcf {
                in_c,
                out_c,
                count,
                size,
                stride,
                padding,
                hash,
                coeffs,
                bias,
                offset,
            } => {
                let basis = bases
                    .get(&hash)
                    .ok_or_else(|| DcfError::format(offset, "dcf layer references a missing basis"))?
                    .clone();
                if basis.count() != count || basis.size() != size {
                    return Err(DcfError::format(offset, "dcf layer disagrees with its basis dimensions"));
                }
                let layer = DcfLayer {
                    basis,
                    in_channels: in_c,
                    out_channels: out_c,
                    coeffs,
                    bias,
                    stride,
                    padding,
                };
                layer.validate().map_err(|e| DcfError::format(offset, e.to_string()))?;
                Layer::Dcf(layer)
            }
        });
    }
    Ok(Network::new(layers))
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, model_to_bytes(net))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::{sample_fb_basis, sample_random_basis};
    use crate::nn::conv2;

    fn perturbed(seed: u64, bases: Option<&crate::nn::Conv2Bases>) -> Network {
        let mut net = conv2(bases, seed).unwrap();
        for layer in &mut net.layers {
            if let Layer::BatchNorm(b) = layer {
                b.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.3);
                b.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + 0.01 * i as f64);
            }
        }
        net
    }

    fn bits(net: &Network) -> Vec<Vec<u64>> {
        net.params().iter().map(|(p, _)| p.iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let fb = Arc::new(sample_fb_basis(3, 5).unwrap());
        let rb = Arc::new(sample_random_basis(4, 5, 9).unwrap());
        for net in [perturbed(1, None), perturbed(2, Some(&[fb.clone(), fb])), perturbed(3, Some(&[rb.clone(), rb]))] {
            let bytes = model_to_bytes(&net);
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(back, net);
            assert_eq!(bits(&back), bits(&net));
            assert_eq!(model_to_bytes(&back), bytes);
        }
    }

    #[test]
    fn shared_basis_is_stored_once() {
        let fb = Arc::new(sample_fb_basis(3, 5).unwrap());
        let net = conv2(Some(&[fb.clone(), fb.clone()]), 4).unwrap();
        let bytes = model_to_bytes(&net);
        let back = model_from_bytes(&bytes).unwrap();
        let ptrs: Vec<_> = back
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dcf(d) => Some(Arc::as_ptr(&d.basis)),
                _ => None,
            })
            .collect();
        assert_eq!(ptrs.len(), 2);
        assert_eq!(ptrs[0], ptrs[1]);
    }

    #[test]
    fn corrupt_models_are_rejected() {
        let fb = Arc::new(sample_fb_basis(3, 5).unwrap());
        let bytes = model_to_bytes(&conv2(Some(&[fb.clone(), fb]), 5).unwrap());
        assert!(matches!(model_from_bytes(b"DCFX"), Err(DcfError::Format { offset: 0, .. })));
        assert!(model_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
        let mut bad_type = bytes.clone();
        bad_type[10] = 99;
        assert!(matches!(model_from_bytes(&bad_type), Err(DcfError::Format { offset: 10, .. })));
        // Flip one byte inside the embedded basis samples.
        let mut tampered = bytes.clone();
        let n = tampered.len();
        tampered[n - 100] ^= 1;
        assert!(model_from_bytes(&tampered).is_err());
    }
}
