mod common;

use abra_core::data::{decode, encode_plt1, encode_sidecar, generate, PlateSampler, PlateSpec, Split};
use abra_core::losses::js_divergence;
use abra_core::nn::{Backbone, BackboneConfig, BnMode, Checkpoint};
use abra_core::rng::substream;
use abra_core::stats::{adain_renormalize, batch_channel_stats, bn_transform, AffineParams, BatchStats};
use abra_core::train::{gaussian_kl, WarmupSchedule};
use abra_core::{Graph, Tensor};
use proptest::prelude::*;

use common::simplex;

fn small_spec(plates: usize, per_plate: usize, classes: usize) -> PlateSpec {
    PlateSpec {
        images_per_plate: per_plate,
        num_classes: classes,
        channels: 2,
        image_size: 4,
        ..PlateSpec::with_split(plates, 0, 1)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cosines_ignore_positive_row_scaling(seed in 0u64..1000, row in 0usize..4, factor in 0.01f64..100.0) {
        let mut rng = substream(seed, "cos");
        let e = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let mut scaled = e.clone();
        for v in &mut scaled.data_mut()[row * 6..(row + 1) * 6] {
            *v *= factor;
        }
        let mut g = Graph::new();
        let (a, b, wv) = (g.constant(e), g.constant(scaled), g.constant(w));
        let ca = g.cosine_rows(a, wv).unwrap();
        let cb = g.cosine_rows(b, wv).unwrap();
        for (x, y) in g.value(ca).data().iter().zip(g.value(cb).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn standardized_features_have_zero_mean_unit_variance(seed in 0u64..1000, std in 4.0f64..20.0, shift in -10.0f64..10.0) {
        let mut rng = substream(seed, "bn");
        let x = Tensor::randn(vec![5, 3, 4, 4], std, &mut rng).map(|v| v + shift);
        let stats = batch_channel_stats(&x).unwrap();
        let y = bn_transform(&x, &stats, &AffineParams::identity(3), 1e-5).unwrap();
        let out = batch_channel_stats(&y).unwrap();
        for c in 0..3 {
            prop_assert!(out.mu[c].abs() <= 1e-6);
            prop_assert!((out.sigma2[c] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn adain_with_zero_deltas_is_identity(seed in 0u64..1000, std in 0.01f64..10.0) {
        let mut rng = substream(seed, "adain");
        let x = Tensor::randn(vec![3, 2, 4, 4], std, &mut rng);
        let z = Tensor::zeros(vec![3, 2]);
        let y = adain_renormalize(&x, &z, &z).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_shift_returns_input_bitwise(seed in 0u64..1000) {
        let mut rng = substream(seed, "shift");
        let x = Tensor::randn(vec![3, 2, 3, 3], 3.0, &mut rng);
        let mu = Tensor::randn(vec![2], 1.0, &mut rng);
        let sigma = Tensor::uniform(vec![2], 0.1, 3.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (m, s) = (g.constant(mu), g.constant(sigma));
        let z1 = g.constant(Tensor::zeros(vec![2]));
        let z2 = g.constant(Tensor::zeros(vec![2]));
        let y = g.stat_shift(xv, m, s, z1, z2).unwrap();
        prop_assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn reversed_and_direct_gradients_cancel(seed in 0u64..1000) {
        let mut rng = substream(seed, "grl");
        let x = Tensor::randn(vec![7], 1.0, &mut rng);
        let w = Tensor::randn(vec![7], 1.0, &mut rng);
        let grad_of = |reverse: bool| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let h = if reverse { g.reverse_grad(xv) } else { xv };
            let sq = g.mul(h, h).unwrap();
            let y = g.mul(sq, wv).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            g.grad(xv).unwrap().clone()
        };
        let (a, b) = (grad_of(true), grad_of(false));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(p + q, 0.0);
        }
    }

    #[test]
    fn js_is_bounded_and_symmetric(seed in 0u64..1000, n in 1usize..6, k in 2usize..8) {
        let mut rng = substream(seed, "js");
        let p = simplex(n, k, &mut rng);
        let q = simplex(n, k, &mut rng);
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert!(pq >= 0.0 && pq <= std::f64::consts::LN_2);
        prop_assert_eq!(pq.to_bits(), qp.to_bits());
        prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, spread in 0.1f64..200.0) {
        let mut rng = substream(seed, "softmax");
        let z = Tensor::randn(vec![4, 6], spread, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let p = g.softmax(zv).unwrap();
        for row in g.value(p).data().chunks(6) {
            prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gaussian_kl_is_non_negative(seed in 0u64..1000) {
        let mut rng = substream(seed, "kl");
        let s = BatchStats {
            mu: Tensor::randn(vec![5], 2.0, &mut rng).into_data(),
            sigma2: Tensor::uniform(vec![5], 0.0, 4.0, &mut rng).into_data(),
        };
        let t = BatchStats {
            mu: Tensor::randn(vec![5], 2.0, &mut rng).into_data(),
            sigma2: Tensor::uniform(vec![5], 0.0, 4.0, &mut rng).into_data(),
        };
        prop_assert!(gaussian_kl(&s, &t) >= 0.0);
        prop_assert_eq!(gaussian_kl(&s, &s), 0.0);
    }

    #[test]
    fn warmup_rises_linearly_to_the_peak(peak in 1e-5f64..1.0, warmup in 0usize..50, it in 0usize..100) {
        let s = WarmupSchedule { peak, warmup };
        let lr = s.at(it);
        prop_assert!(lr > 0.0 && lr <= peak);
        prop_assert!(s.at(it + 1) >= lr);
        if it >= warmup {
            prop_assert_eq!(lr, peak);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn plates_are_balanced_and_disjoint(seed in 0u64..10_000, plates in 2usize..6, per_class in 1usize..5, classes in 2usize..5) {
        let spec = small_spec(plates, per_class * classes, classes);
        let ds = generate(&spec, seed).unwrap();
        let train = ds.plate_indices(Split::Train);
        let test = ds.plate_indices(Split::Test);
        for t in &train {
            prop_assert!(!test.contains(t));
            prop_assert!(ds.plates[*t].plate_id != ds.plates[test[0]].plate_id);
        }
        for plate in &ds.plates {
            let mut hist = vec![0usize; classes];
            for &y in &plate.labels {
                hist[y] += 1;
            }
            prop_assert!(hist.iter().all(|&h| h == per_class));
        }
    }

    #[test]
    fn sampler_batches_stay_on_one_plate(seed in 0u64..10_000, batch in 2usize..9) {
        let spec = small_spec(4, 12, 3);
        let ds = generate(&spec, 7).unwrap();
        let plates = ds.plate_indices(Split::Train);
        let sampler = PlateSampler::new(&ds, &plates, batch).unwrap();
        let mut rng = substream(seed, "sampler");
        let batches = sampler.epoch(&mut rng);
        prop_assert_eq!(batches.len(), sampler.batches_per_epoch());
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            prop_assert!(plates.contains(&b.plate));
            prop_assert!(b.indices.len() >= 2 && b.indices.len() <= batch);
            for &i in &b.indices {
                prop_assert!(i < ds.plates[b.plate].len());
                prop_assert!(seen.insert((b.plate, i)));
            }
        }
    }

    #[test]
    fn plate_files_round_trip_exactly(seed in 0u64..10_000) {
        let ds = generate(&small_spec(3, 6, 3), seed).unwrap();
        let back = decode(&encode_plt1(&ds), &encode_sidecar(&ds).unwrap()).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_plt1(&back), encode_plt1(&ds));
    }

    #[test]
    fn checkpoints_round_trip_predictions(seed in 0u64..10_000) {
        let mut rng = substream(seed, "init");
        let model = Backbone::new(BackboneConfig::desk(2, 3), &mut rng).unwrap();
        let mut bytes = Vec::new();
        Checkpoint::from_model(&model, &[]).write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap().to_model().unwrap();
        let x = Tensor::randn(vec![3, 2, 8, 8], 1.0, &mut rng);
        let (a, _) = model.predict(&x, BnMode::Running).unwrap();
        let (b, _) = back.predict(&x, BnMode::Running).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
