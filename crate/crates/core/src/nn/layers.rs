//! Pointwise, pooling, normalisation and fully-connected layers.

use crate::error::{DcfError, Result};
use crate::tensor::Tensor;

use super::conv::output_size;

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.check_same(grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    /// The `mp3x3` block: 3x3 window, stride 2, padding 1.
    pub const MP3X3: MaxPool = MaxPool {
        window: 3,
        stride: 2,
        padding: 1,
    };

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(DcfError::invalid("pool window and stride must be positive"));
        }
        if self.padding >= self.window {
            return Err(DcfError::invalid("pool padding must be smaller than the window"));
        }
        Ok((
            output_size(h, self.window, self.stride, self.padding)?,
            output_size(w, self.window, self.stride, self.padding)?,
        ))
    }

    /// Input-pixel position of the centre of output cell `p` along one axis.
    pub fn center(&self, p: usize) -> f64 {
        (p * self.stride) as f64 - self.padding as f64 + (self.window as f64 - 1.0) / 2.0
    }
}

/// Forward pass; also returns, per output, the flat input index of its maximum.
pub fn maxpool(x: &Tensor, pool: MaxPool) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = pool.output_hw(h, w)?;
    let mut out = Tensor::zeros([x.batch(), x.channels(), oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let plane = x.channel(n, c);
            let base = (n * x.channels() + c) * h * w;
            let dst = out.channel_mut(n, c);
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for vy in 0..pool.window {
                        let iy = (py * pool.stride + vy) as isize - pool.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for vx in 0..pool.window {
                            let ix = (px * pool.stride + vx) as isize - pool.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane[i] > best || best_i == usize::MAX {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[py * ow + px] = best;
                    argmax.push(base + best_i);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(DcfError::shape("pool upstream gradient shape"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Per-channel batch normalisation with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Eval-mode map as `scale * x + shift` per channel.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + Self::EPS).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(&self.running_mean)
            .zip(&self.beta)
            .map(|((s, m), b)| b - s * m)
            .collect();
        (scale, shift)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(DcfError::shape(format!(
                "batch-norm over {} channels got {}",
                self.channels(),
                x.channels()
            )));
        }
        if x.batch() == 0 {
            return Err(DcfError::invalid("empty batch"));
        }
        Ok(())
    }
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

pub fn batchnorm(x: &Tensor, bn: &BatchNorm, train: bool) -> Result<(Tensor, BatchNormCache)> {
    bn.check(x)?;
    let c = bn.channels();
    let count = (x.batch() * x.plane()) as f64;
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for n in 0..x.batch() {
            for ch in 0..c {
                mean[ch] += x.channel(n, ch).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..x.batch() {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += x.channel(n, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BatchNorm::EPS).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for n in 0..x.batch() {
        for ch in 0..c {
            let src = x.channel(n, ch);
            let (m, s) = (mean[ch], inv_std[ch]);
            let xn = normalized.channel_mut(n, ch);
            for (d, v) in xn.iter_mut().zip(src) {
                *d = (v - m) * s;
            }
            let (g, b) = (bn.gamma[ch], bn.beta[ch]);
            let dst = out.channel_mut(n, ch);
            for (d, v) in dst.iter_mut().zip(normalized.channel(n, ch)) {
                *d = g * v + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    ))
}

/// Returns `(grad_gamma, grad_beta, grad_input)`.
pub fn batchnorm_backward(
    bn: &BatchNorm,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    cache.normalized.check_same(grad_out)?;
    let c = bn.channels();
    let count = (grad_out.batch() * grad_out.plane()) as f64;
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for n in 0..grad_out.batch() {
        for ch in 0..c {
            let g = grad_out.channel(n, ch);
            gb[ch] += g.iter().sum::<f64>();
            gg[ch] += g
                .iter()
                .zip(cache.normalized.channel(n, ch))
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for n in 0..grad_out.batch() {
        for ch in 0..c {
            let k = bn.gamma[ch] * cache.inv_std[ch];
            let g = grad_out.channel(n, ch);
            let xn = cache.normalized.channel(n, ch);
            let dst = gx.channel_mut(n, ch);
            if cache.train {
                let (sum_g, sum_gx) = (gb[ch] / count, gg[ch] / count);
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xn) {
                    *d = k * (gv - sum_g - xv * sum_gx);
                }
            } else {
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d = k * gv;
                }
            }
        }
    }
    Ok((gg, gb, gx))
}

/// Folds a batch's statistics into the running averages.
pub fn update_running_stats(bn: &mut BatchNorm, cache: &BatchNormCache, count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    let mom = BatchNorm::MOMENTUM;
    for ch in 0..bn.channels() {
        bn.running_mean[ch] = (1.0 - mom) * bn.running_mean[ch] + mom * cache.batch_mean[ch];
        bn.running_var[ch] = (1.0 - mom) * bn.running_var[ch] + mom * cache.batch_var[ch] * unbias;
    }
}

/// Fully-connected layer over the flattened `(C, H, W)` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out x in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weights: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let feat = x.channels() * x.plane();
        if feat != self.in_features {
            return Err(DcfError::shape(format!(
                "fc expects {} features, got {feat}",
                self.in_features
            )));
        }
        if self.weights.len() != self.in_features * self.out_features || self.bias.len() != self.out_features {
            return Err(DcfError::shape("fc parameter sizes"));
        }
        Ok(())
    }
}

/// Output has shape `(N, out, 1, 1)`.
pub fn fc(x: &Tensor, layer: &Linear) -> Result<Tensor> {
    layer.check(x)?;
    let mut out = Tensor::zeros([x.batch(), layer.out_features, 1, 1]);
    for n in 0..x.batch() {
        let xs = x.sample(n);
        for o in 0..layer.out_features {
            let row = &layer.weights[o * layer.in_features..(o + 1) * layer.in_features];
            let v = layer.bias[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            out.set(n, o, 0, 0, v);
        }
    }
    Ok(out)
}

/// Returns `(grad_weights, grad_bias, grad_input)`.
pub fn fc_backward(x: &Tensor, layer: &Linear, grad_out: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    layer.check(x)?;
    if grad_out.shape() != [x.batch(), layer.out_features, 1, 1] {
        return Err(DcfError::shape("fc upstream gradient shape"));
    }
    let fin = layer.in_features;
    let mut gw = vec![0.0; layer.weights.len()];
    let mut gb = vec![0.0; layer.out_features];
    let mut gx = Tensor::zeros(x.shape());
    for n in 0..x.batch() {
        let xs = x.sample(n);
        let go = grad_out.sample(n);
        let start = n * fin;
        for (o, &g) in go.iter().enumerate() {
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            let grow = &mut gw[o * fin..(o + 1) * fin];
            for (d, v) in grow.iter_mut().zip(xs) {
                *d += g * v;
            }
            let row = &layer.weights[o * fin..(o + 1) * fin];
            let gxs = &mut gx.data_mut()[start..start + fin];
            for (d, w) in gxs.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
    Ok((gw, gb, gx))
}

/// Mean softmax cross-entropy over the batch and the class probabilities.
pub fn softmax_xent(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    if n == 0 {
        return Err(DcfError::invalid("empty batch"));
    }
    if labels.len() != n {
        return Err(DcfError::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let classes = logits.channels() * logits.plane();
    let mut probs = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(DcfError::invalid(format!("label {label} outside {classes} classes")));
        }
        let z = logits.sample(i);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let log_sum = sum.ln() + zmax;
        loss += log_sum - z[label as usize];
        let start = i * classes;
        for (k, v) in z.iter().enumerate() {
            probs.data_mut()[start + k] = (v - log_sum).exp();
        }
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean loss with respect to the logits.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[u8]) -> Tensor {
    let n = probs.batch();
    let classes = probs.channels() * probs.plane();
    let mut g = probs.scale(1.0 / n as f64);
    for (i, &label) in labels.iter().enumerate() {
        g.data_mut()[i * classes + label as usize] -= 1.0 / n as f64;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_is_non_expansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = rand_tensor(&mut rng, [1, 2, 4, 4]);
            let b = rand_tensor(&mut rng, [1, 2, 4, 4]);
            let before: f64 = a.sub(&b).unwrap().data().iter().map(|v| v * v).sum();
            let after: f64 = relu(&a).sub(&relu(&b)).unwrap().data().iter().map(|v| v * v).sum();
            assert!(after <= before);
        }
    }

    #[test]
    fn maxpool_matches_window_scan_on_ramp() {
        let data: Vec<f64> = (0..49).map(|v| ((v * 17) % 23) as f64).collect();
        let x = Tensor::from_vec([1, 1, 7, 7], data).unwrap();
        let pool = MaxPool {
            window: 3,
            stride: 2,
            padding: 0,
        };
        let (y, _) = maxpool(&x, pool).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        for py in 0..3 {
            for px in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for vy in 0..3 {
                    for vx in 0..3 {
                        m = m.max(x.get(0, 0, 2 * py + vy, 2 * px + vx));
                    }
                }
                assert_eq!(y.get(0, 0, py, px), m);
            }
        }
        let (y, _) = maxpool(&x, MaxPool::MP3X3).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        let (y28, _) = maxpool(&Tensor::zeros([1, 1, 28, 28]), MaxPool::MP3X3).unwrap();
        assert_eq!(y28.shape(), [1, 1, 14, 14]);
    }

    #[test]
    fn uniform_logits_give_log_ten() {
        let logits = Tensor::filled([3, 10, 1, 1], 0.7);
        let (loss, probs) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|p| (p - 0.1).abs() < 1e-12));
        assert!(softmax_xent(&Tensor::zeros([0, 10, 1, 1]), &[]).is_err());
        assert!(softmax_xent(&logits, &[0, 1, 10]).is_err());
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, [4, 2, 3, 3]).scale(5.0);
        let bn = BatchNorm::new(2);
        let (y, _) = batchnorm(&x, &bn, true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.channel(n, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    fn check_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "i={i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, [3, 2, 2, 3]);
        let mut bn = BatchNorm::new(2);
        bn.gamma = vec![1.3, -0.4];
        bn.beta = vec![0.2, 0.5];
        bn.running_mean = vec![0.1, -0.2];
        bn.running_var = vec![0.8, 1.7];
        let probe = rand_tensor(&mut rng, x.shape());
        for train in [true, false] {
            let f = |t: &Tensor| dot(&batchnorm(t, &bn, train).unwrap().0, &probe);
            let (_, cache) = batchnorm(&x, &bn, train).unwrap();
            let (gg, gb, gx) = batchnorm_backward(&bn, &cache, &probe).unwrap();
            check_grad(&f, &x, &gx);
            let h = 1e-5;
            for ch in 0..2 {
                let mut a = bn.clone();
                a.gamma[ch] += h;
                let mut b = bn.clone();
                b.gamma[ch] -= h;
                let fd = (dot(&batchnorm(&x, &a, train).unwrap().0, &probe)
                    - dot(&batchnorm(&x, &b, train).unwrap().0, &probe))
                    / (2.0 * h);
                assert!((fd - gg[ch]).abs() < 1e-6);
                let mut a = bn.clone();
                a.beta[ch] += h;
                let mut b = bn.clone();
                b.beta[ch] -= h;
                let fd = (dot(&batchnorm(&x, &a, train).unwrap().0, &probe)
                    - dot(&batchnorm(&x, &b, train).unwrap().0, &probe))
                    / (2.0 * h);
                assert!((fd - gb[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pool_fc_and_xent_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, [2, 2, 5, 5]);
        let (y, arg) = maxpool(&x, MaxPool::MP3X3).unwrap();
        let probe = rand_tensor(&mut rng, y.shape());
        let gx = maxpool_backward(x.shape(), &arg, &probe).unwrap();
        check_grad(&|t| dot(&maxpool(t, MaxPool::MP3X3).unwrap().0, &probe), &x, &gx);

        let mut lin = Linear::zeros(50, 4);
        lin.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        lin.bias.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let probe = rand_tensor(&mut rng, [2, 4, 1, 1]);
        let (gw, _, gx) = fc_backward(&x, &lin, &probe).unwrap();
        check_grad(&|t| dot(&fc(t, &lin).unwrap(), &probe), &x, &gx);
        let h = 1e-5;
        for i in [0, 17, 199] {
            let mut a = lin.clone();
            a.weights[i] += h;
            let mut b = lin.clone();
            b.weights[i] -= h;
            let fd = (dot(&fc(&x, &a).unwrap(), &probe) - dot(&fc(&x, &b).unwrap(), &probe)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
        }

        let logits = rand_tensor(&mut rng, [3, 10, 1, 1]);
        let labels = [2u8, 7, 0];
        let (_, probs) = softmax_xent(&logits, &labels).unwrap();
        let g = softmax_xent_backward(&probs, &labels);
        check_grad(&|t| softmax_xent(t, &labels).unwrap().0, &logits, &g);
    }
}
