use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scalemix::multiscale::{
    decompose, downsample, init_pdm_params, pdm_stack_eval, MultiScaleSet, PdmConfig,
};
use scalemix::ntk::{ntk_distance, ntk_matrix, spearman, LinearProbe, NtkMatrix};
use scalemix::{ParamStore, Pooling, Tensor};

fn series(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn pooling() -> impl Strategy<Value = Pooling> {
    prop::sample::select(Pooling::ALL.to_vec())
}

fn kernel(values: Vec<f64>, n: usize) -> NtkMatrix {
    NtkMatrix {
        values: Tensor::new(vec![n, n], values).unwrap(),
        sample_ids: (0..n).map(|i| format!("s{i}")).collect(),
        tau: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_lengths_follow_ceiling(len in 1usize..300, tau in 0usize..6, cols in 1usize..4, p in pooling()) {
        let x = Tensor::zeros(&[len, cols]);
        let result = downsample(&x, tau, p);
        prop_assert_eq!(result.is_ok(), len >= 1 << tau);
        let Ok(set) = result else { return Ok(()); };
        prop_assert_eq!(set.scales().len(), tau + 1);
        for (i, s) in set.scales().iter().enumerate() {
            prop_assert_eq!(s.shape(), &[len.div_ceil(1 << i), cols][..]);
        }
    }

    #[test]
    fn decomposition_reconstructs(x in (8usize..80, 1usize..4).prop_flat_map(|(r, c)| series(r, c)),
                                  half in 1usize..12) {
        let k = 2 * half + 1;
        let d = decompose(&x, k).unwrap();
        let back = d.seasonal.add(&d.trend).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn avg_pooling_keeps_the_mean(tau in 0usize..5, blocks in 1usize..6,
                                  seed in any::<u64>()) {
        let len = blocks << tau;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[len, 3], 10.0, &mut rng);
        let set = downsample(&x, tau, Pooling::Avg).unwrap();
        for s in set.scales() {
            for c in 0..3 {
                let orig: f64 = (0..len).map(|t| x.at(t, c)).sum::<f64>() / len as f64;
                let mean: f64 = (0..s.rows()).map(|t| s.at(t, c)).sum::<f64>() / s.rows() as f64;
                prop_assert!((orig - mean).abs() <= 1e-12, "{orig} vs {mean}");
            }
        }
    }

    #[test]
    fn every_pooling_keeps_constants(len in 4usize..100, tau in 0usize..3, v in -5.0f64..5.0, p in pooling()) {
        let x = Tensor::full(&[len, 2], v);
        let set = downsample(&x, tau, p).unwrap();
        for (i, s) in set.scales().iter().enumerate() {
            // L2 pooling returns a magnitude.
            let want = if p == Pooling::L2 && i > 0 { v.abs() } else { v };
            prop_assert!(s.data().iter().all(|&y| (y - want).abs() <= 1e-12 * want.abs().max(1.0)));
        }
    }

    #[test]
    fn zero_pdm_is_identity(len in 8usize..40, tau in 1usize..3, layers in 1usize..3, seed in any::<u64>()) {
        let cfg = PdmConfig { layers, d_model: 4, d_ff: 6, moving_avg: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[len, 4], 3.0, &mut rng);
        let set = downsample(&x, tau, Pooling::Avg).unwrap();
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let names: Vec<(String, Vec<usize>)> =
            store.trainable().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        for (n, shape) in names {
            store.set_trainable(&n, Tensor::zeros(&shape)).unwrap();
        }
        let out = pdm_stack_eval(&store, &cfg, &set).unwrap();
        prop_assert_eq!(out, set);
    }

    #[test]
    fn pdm_preserves_shapes(len in 8usize..40, tau in 0usize..3, seed in any::<u64>()) {
        let cfg = PdmConfig { layers: 2, d_model: 4, d_ff: 5, moving_avg: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = downsample(&Tensor::uniform(&[len, 4], 1.0, &mut rng), tau, Pooling::Max).unwrap();
        let mut store = ParamStore::new();
        init_pdm_params(&mut store, &cfg, &set.lengths(), &mut rng).unwrap();
        let out: MultiScaleSet = pdm_stack_eval(&store, &cfg, &set).unwrap();
        prop_assert_eq!(out.lengths(), set.lengths());
    }

    #[test]
    fn probe_kernel_is_gram(n in 2usize..6, dim in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = LinearProbe::new(Tensor::uniform(&[dim], 1.0, &mut rng)).unwrap();
        let xs: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[dim], 2.0, &mut rng)).collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let k = ntk_matrix(&probe, &xs, &ids, 0, u64::MAX).unwrap();
        for a in 0..n {
            for b in 0..n {
                let gram: f64 = xs[a].data().iter().zip(xs[b].data()).map(|(p, q)| p * q).sum();
                prop_assert!((k.values.at(a, b) - gram).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(k.max_asymmetry(), 0.0);
        prop_assert!(k.is_psd());
    }

    #[test]
    fn distance_is_a_metric(a in prop::collection::vec(-5.0f64..5.0, 9),
                            b in prop::collection::vec(-5.0f64..5.0, 9),
                            c in prop::collection::vec(-5.0f64..5.0, 9)) {
        let (a, b, c) = (kernel(a, 3), kernel(b, 3), kernel(c, 3));
        prop_assert_eq!(ntk_distance(&a, &a).unwrap(), 0.0);
        let ab = ntk_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, ntk_distance(&b, &a).unwrap());
        let ac = ntk_distance(&a, &c).unwrap();
        let cb = ntk_distance(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn spearman_is_bounded_and_sign_flips(x in prop::collection::vec(-10.0f64..10.0, 3..12)) {
        let t: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
        if let Some(r) = spearman(&t, &x) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let s = spearman(&t, &neg).unwrap();
            prop_assert!((r + s).abs() <= 1e-12);
        }
    }
}
