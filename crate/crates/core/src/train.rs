//! Conv-2 training loop and evaluation.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::bases::{sample_delta_basis, sample_fb_basis, sample_pca_basis, sample_random_basis, BasisKind, BasisSet};
use crate::config::{Architecture, ExperimentConfig};
use crate::data::{batch_iterator, Dataset};
use crate::error::{DcfError, Result};
use crate::model_io::load_model;
use crate::nn::{conv2, softmax_xent, Conv2Bases, Layer, Mode, Network, Sgd, TrainConfig, CONV2_KERNEL};
use crate::stability::fmt12;

/// Samples per forward pass during evaluation. Fixed so that summation
/// order, and therefore every printed digit, is independent of threading.
pub const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_err,test_loss,test_err";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            fmt12(m.lr),
            fmt12(m.train_loss),
            fmt12(m.train_err),
            fmt12(m.test_loss),
            fmt12(m.test_err)
        );
    }
    s
}

/// Mean loss and error rate in eval mode, fanned out over `threads` workers.
pub fn evaluate(net: &Network, data: &Dataset, threads: usize) -> Result<(f64, f64)> {
    let n = data.len();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let eval_chunk = |idx: &[usize]| -> Result<(f64, usize)> {
        let (x, y) = data.batch(idx);
        let logits = net.forward(&x, Mode::Eval)?;
        let (loss, _) = softmax_xent(&logits, &y)?;
        let wrong = (0..logits.batch())
            .filter(|&i| crate::nn::argmax(logits.sample(i)) != y[i] as usize)
            .count();
        Ok((loss * idx.len() as f64, wrong))
    };
    let results = parallel_map(&chunks, threads, |c| eval_chunk(c));
    let (mut loss, mut wrong) = (0.0, 0);
    for r in results {
        let (l, w) = r?;
        loss += l;
        wrong += w;
    }
    Ok((loss / n as f64, wrong as f64 / n as f64))
}

/// Order-preserving map over a thread pool of at most `threads` workers.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| {
                let f = &f;
                s.spawn(move || chunk.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

/// One SGD epoch over `data`; returns mean training loss and error measured
/// on the training-mode forward passes.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    data: &Dataset,
    epoch: usize,
) -> Result<(f64, f64)> {
    let batches = batch_iterator(data.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
    let (mut loss, mut wrong, mut seen) = (0.0, 0usize, 0usize);
    for idx in &batches {
        let (x, y) = data.batch(idx);
        let (l, grads, pass) = net.loss_and_grad(&x, &y, Mode::Train)?;
        if !l.is_finite() {
            return Err(DcfError::invalid(format!("training diverged at epoch {epoch}")));
        }
        let out = pass.output();
        wrong += (0..out.batch())
            .filter(|&i| crate::nn::argmax(out.sample(i)) != y[i] as usize)
            .count();
        loss += l * idx.len() as f64;
        seen += idx.len();
        net.update_running_stats(&pass);
        opt.step(net, &grads.params, cfg, epoch)?;
    }
    Ok((loss / seen as f64, wrong as f64 / seen as f64))
}

/// Runs `cfg.epochs` epochs, evaluating on `test` after each one.
pub fn train_network(
    net: &mut Network,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    threads: usize,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut opt = Sgd::new(net);
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (train_loss, train_err) = train_epoch(net, &mut opt, cfg, train, epoch)?;
        let (test_loss, test_err) = evaluate(net, test, threads)?;
        let m = EpochMetrics {
            epoch,
            lr: cfg.lr(epoch),
            train_loss,
            train_err,
            test_loss,
            test_err,
        };
        progress(&m);
        rows.push(m);
    }
    Ok(rows)
}

/// Conv filter banks of a network, one flat `M x M' x L x L` array per
/// convolutional layer. Decomposed layers are reconstructed.
pub fn conv_filters(net: &Network) -> Vec<Vec<f64>> {
    net.layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c.weights.clone()),
            Layer::Dcf(d) => Some(crate::dcf::reconstruct_filters(d)),
            _ => None,
        })
        .collect()
}

/// Builds the two per-layer bases called for by `cfg`.
///
/// PCA bases come from the filters of `cfg.pca_model` when given, otherwise
/// from a dense Conv-2 trained for `pca_epochs` on the first `pca_subset`
/// training samples.
pub fn build_bases(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Conv2Bases> {
    let l = CONV2_KERNEL;
    let one = |b: BasisSet| {
        let b = Arc::new(b);
        [b.clone(), b]
    };
    Ok(match cfg.basis {
        BasisKind::FourierBessel => one(sample_fb_basis(cfg.k, l)?),
        BasisKind::Delta => one(sample_delta_basis(l)?),
        BasisKind::Random => [
            Arc::new(sample_random_basis(cfg.k, l, cfg.train.seed)?),
            Arc::new(sample_random_basis(cfg.k, l, cfg.train.seed.wrapping_add(1))?),
        ],
        BasisKind::Pca => {
            let source = match &cfg.pca_model {
                Some(p) => load_model(p)?,
                None => {
                    let mut net = conv2(None, cfg.train.seed)?;
                    let pre = TrainConfig {
                        epochs: cfg.pca_epochs.max(1),
                        ..cfg.train.clone()
                    };
                    let subset = train.subset(cfg.pca_subset.max(pre.batch_size));
                    train_network(&mut net, &pre, &subset, &test.subset(EVAL_CHUNK), 1, |_| {})?;
                    net
                }
            };
            let filters = conv_filters(&source);
            if filters.len() != 2 {
                return Err(DcfError::invalid("PCA source model must have two conv layers"));
            }
            [
                Arc::new(sample_pca_basis(&filters[0], l, cfg.k)?),
                Arc::new(sample_pca_basis(&filters[1], l, cfg.k)?),
            ]
        }
    })
}

/// Builds Conv-2 per `cfg` and trains it.
pub fn train(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    threads: usize,
    progress: impl FnMut(&EpochMetrics),
) -> Result<(Network, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let train = match cfg.subset_size {
        Some(n) => train.subset(n),
        None => train.clone(),
    };
    let mut net = match cfg.architecture {
        Architecture::Conv2Dense => conv2(None, cfg.train.seed)?,
        Architecture::Conv2Dcf => conv2(Some(&build_bases(cfg, &train, test)?), cfg.train.seed)?,
    };
    let rows = train_network(&mut net, &cfg.train, &train, test, threads, progress)?;
    Ok((net, rows))
}
