use std::collections::HashSet;
use std::sync::Arc;

use dcf_core::bases::{sample_fb_basis, sample_random_basis, BasisKind};
use dcf_core::config::{Architecture, ExperimentConfig};
use dcf_core::data::{batch_iterator, parse_idx, IdxArray};
use dcf_core::dcf::{dcf_forward, decompose_filters, reconstruct};
use dcf_core::model_io::{model_from_bytes, model_to_bytes};
use dcf_core::nn::conv::conv2d_forward;
use dcf_core::nn::layers::{maxpool, relu, MaxPool};
use dcf_core::nn::conv2;
use dcf_core::stability::{apply_deformation, DeformationField};
use dcf_core::{DcfLayer, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 4], vals: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vals.iter().cycle().take(n).copied().collect()).unwrap()
}

fn l2(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sup(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trips(dims in prop::collection::vec(1usize..6, 1..4), salt in any::<u8>()) {
        let n: usize = dims.iter().product();
        let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect();
        let a = IdxArray::new(dims, data).unwrap();
        prop_assert_eq!(parse_idx(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn batches_are_a_deterministic_partial_permutation(
        len in 1usize..300, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..20,
    ) {
        prop_assume!(bs <= len);
        let b = batch_iterator(len, bs, seed, epoch).unwrap();
        prop_assert_eq!(&b, &batch_iterator(len, bs, seed, epoch).unwrap());
        prop_assert_eq!(b.len(), len / bs);
        prop_assert!(b.iter().all(|x| x.len() == bs));
        let seen: HashSet<usize> = b.iter().flatten().copied().collect();
        prop_assert_eq!(seen.len(), (len / bs) * bs);
        prop_assert!(seen.iter().all(|&i| i < len));
    }

    #[test]
    fn dcf_matches_its_dense_equivalent(
        k in 1usize..10, cin in 1usize..3, cout in 1usize..3, stride in 1usize..3,
        vals in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let basis = Arc::new(sample_fb_basis(k, 5).unwrap());
        let mut layer = DcfLayer::zeros(basis, cin, cout, stride, 2);
        layer.coeffs = vals.iter().cycle().take(layer.coeffs.len()).copied().collect();
        layer.bias = vals[..cout].to_vec();
        let x = tensor([2, cin, 9, 8], &vals[3..]);
        let a = dcf_forward(&x, &layer).unwrap();
        let b = conv2d_forward(&x, &layer.to_conv()).unwrap();
        prop_assert!(sup(&a, &b) < 1e-12, "{}", sup(&a, &b));
    }

    #[test]
    fn dcf_is_linear_in_the_input(
        alpha in -3.0f64..3.0,
        u in prop::collection::vec(-1.0f64..1.0, 13),
        v in prop::collection::vec(-1.0f64..1.0, 11),
    ) {
        let basis = Arc::new(sample_random_basis(4, 5, 3).unwrap());
        let mut layer = DcfLayer::zeros(basis, 2, 3, 1, 2);
        layer.coeffs = u.iter().cycle().take(layer.coeffs.len()).copied().collect();
        let (x, y) = (tensor([1, 2, 7, 7], &u), tensor([1, 2, 7, 7], &v));
        let mix = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(a, b)| a + alpha * b).collect(),
        ).unwrap();
        let (fx, fy, fm) = (
            dcf_forward(&x, &layer).unwrap(),
            dcf_forward(&y, &layer).unwrap(),
            dcf_forward(&mix, &layer).unwrap(),
        );
        let want = Tensor::from_vec(
            fx.shape(),
            fx.data().iter().zip(fy.data()).map(|(a, b)| a + alpha * b).collect(),
        ).unwrap();
        prop_assert!(sup(&fm, &want) < 1e-12);
    }

    #[test]
    fn decomposing_a_reconstruction_recovers_it(
        k in 1usize..15, coeffs in prop::collection::vec(-2.0f64..2.0, 14),
    ) {
        let basis = sample_fb_basis(k, 5).unwrap();
        let c = &coeffs[..k];
        let d = decompose_filters(&reconstruct(c, &basis), &basis).unwrap();
        for (got, want) in d.coeffs.iter().zip(c) {
            prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        prop_assert!(d.residuals[0] < 1e-9);
    }

    #[test]
    fn relu_and_maxpool_do_not_expand(
        u in prop::collection::vec(-1.0f64..1.0, 23),
        v in prop::collection::vec(-1.0f64..1.0, 29),
    ) {
        let (x, y) = (tensor([1, 2, 9, 7], &u), tensor([1, 2, 9, 7], &v));
        prop_assert!(l2(&relu(&x), &relu(&y)) <= l2(&x, &y) + 1e-15);
        let (px, _) = maxpool(&x, MaxPool::MP3X3).unwrap();
        let (py, _) = maxpool(&y, MaxPool::MP3X3).unwrap();
        prop_assert!(sup(&px, &py) <= sup(&x, &y) + 1e-15);
    }

    #[test]
    fn zero_deformation_is_the_identity(u in prop::collection::vec(-1.0f64..1.0, 17)) {
        let x = tensor([1, 1, 11, 11], &u);
        let y = apply_deformation(&x, &DeformationField::zero()).unwrap();
        prop_assert!(sup(&x, &y) < 1e-12);
    }

    #[test]
    fn config_text_round_trips(
        basis in prop::sample::select(vec![BasisKind::FourierBessel, BasisKind::Random, BasisKind::Pca]),
        k in 1usize..17, lr in 1e-4f64..1.0, ratio in 0.01f64..1.0, momentum in 0.0f64..0.99,
        wd in 0.0f64..1e-2, batch in 1usize..500, epochs in 1usize..50, seed in any::<u64>(),
        subset in prop::option::of(1usize..60_000), dense in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig {
            architecture: if dense { Architecture::Conv2Dense } else { Architecture::Conv2Dcf },
            basis,
            k,
            subset_size: subset,
            ..ExperimentConfig::default()
        };
        cfg.train.lr_start = lr;
        cfg.train.lr_end = lr * ratio;
        cfg.train.momentum = momentum;
        cfg.train.weight_decay = wd;
        cfg.train.batch_size = batch;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn models_round_trip_bit_exactly(seed in any::<u64>(), with_fb in any::<bool>(), k in 1usize..10) {
        let fb = Arc::new(sample_fb_basis(k, 5).unwrap());
        let bases = [fb.clone(), fb];
        let mut net = conv2(with_fb.then_some(&bases), seed).unwrap();
        for (p, _) in net.params_mut() {
            for (i, v) in p.iter_mut().enumerate() {
                *v += (i as f64 * 0.37 + seed as f64).sin() * 1e-3;
            }
        }
        let back = model_from_bytes(&model_to_bytes(&net)).unwrap();
        prop_assert_eq!(model_to_bytes(&back), model_to_bytes(&net));
        prop_assert_eq!(back, net);
    }
}
