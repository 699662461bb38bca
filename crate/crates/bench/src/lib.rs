//! Fixtures shared by the benchmarks in `benches/`.

use dcf_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1]`; no RNG state needed.
pub fn fill(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let h = (i ^ salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn tensor(shape: [usize; 4], salt: u64) -> Tensor {
    Tensor::from_vec(shape, fill(shape.iter().product(), salt)).unwrap()
}
