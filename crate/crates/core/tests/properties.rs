use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splitq_core::calibrate::{calibrate, objective_gradient_shifted, CalibConfig};
use splitq_core::io::{decode, encode, Tensor};
use splitq_core::mocd::percentile_rank;
use splitq_core::quantizer::{compute_params, fake_quantize, quantize};
use splitq_core::tensor::{merge_columns, split_columns};
use splitq_core::transform::{apply_inv_left, apply_right};
use splitq_core::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn batch(tokens: usize, dim: usize, seed: u64) -> ActivationBatch {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tags: Vec<ModalityTag> = (0..tokens)
        .map(|_| {
            if r.random::<bool>() {
                ModalityTag::Text
            } else {
                ModalityTag::Vision
            }
        })
        .collect();
    // Both modalities present.
    tags[0] = ModalityTag::Text;
    tags[tokens - 1] = ModalityTag::Vision;
    ActivationBatch::new(gaussian(tokens, dim, seed), tags).unwrap()
}

/// Random partition with at most `dim / 4` channels in each outlier set.
fn random_partition(dim: usize, seed: u64) -> ChannelPartition {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let mut order: Vec<usize> = (0..dim).collect();
    for i in (1..dim).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let kt = r.random_range(0..=dim / 4);
    let kv = r.random_range(0..=dim / 4);
    let mut text = order[..kt].to_vec();
    let mut vision = order[kt..kt + kv].to_vec();
    let mut main = order[kt + kv..].to_vec();
    text.sort_unstable();
    vision.sort_unstable();
    main.sort_unstable();
    ChannelPartition::new(dim, main, text, vision).unwrap()
}

fn identity_specs(layer: SplitQLayer) -> SplitQLayer {
    layer
        .with_specs(
            QuantSpec::identity(Granularity::PerToken),
            QuantSpec::identity(Granularity::PerChannel),
        )
        .unwrap()
}

fn layer_cfg(bits: u8, cws: bool, mac: bool) -> LayerConfig {
    LayerConfig {
        cws,
        mac,
        rank_cws: 0.2,
        rank_mac: 0.3,
        ..LayerConfig::bits(bits, bits).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_merge_is_identity(dim in 4usize..24, tokens in 1usize..8, seed: u64) {
        let x = gaussian(tokens, dim, seed);
        let p = random_partition(dim, seed);
        let (m, t, v) = split_columns(&x, &p).unwrap();
        prop_assert_eq!(merge_columns((&m, &t, &v), &p).unwrap(), x);
    }

    #[test]
    fn dump_round_trip(rows in 0usize..6, cols in 0usize..6, seed: u64) {
        let m = gaussian(rows, cols, seed);
        let t = Tensor::Matrix(m);
        prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        if rows > 0 {
            let b = Tensor::Batch(batch(rows.max(2), cols, seed));
            prop_assert_eq!(decode(&encode(&b)).unwrap(), b);
        }
    }

    #[test]
    fn transpose_reverses_products(seed: u64, n in 1usize..8, k in 1usize..8, m in 1usize..8) {
        let a = gaussian(n, k, seed);
        let b = gaussian(k, m, seed.wrapping_add(1));
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn fixed_params_quantization_is_idempotent(
        seed: u64, bits in 2u8..=8, symmetric: bool, g in 0usize..3,
    ) {
        let gran = [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerToken][g];
        let spec = QuantSpec::new(bits, symmetric, gran).unwrap();
        let x = gaussian(5, 7, seed).scale(3.0);
        let params = compute_params(&x, &spec);
        let once = fake_quantize(&x, &params, &spec).unwrap();
        let twice = fake_quantize(&once, &params, &spec).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn recomputed_params_quantization_is_nearly_idempotent(seed: u64, bits in 2u8..=8) {
        let spec = QuantSpec::activation(bits).unwrap();
        let once = quantize(&gaussian(4, 9, seed), &spec);
        let twice = quantize(&once, &spec);
        prop_assert!(twice.sub(&once).unwrap().max_abs() <= 1e-12 * once.max_abs().max(1.0));
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step(seed: u64, bits in 2u8..=8, symmetric: bool) {
        let spec = QuantSpec::new(bits, symmetric, Granularity::PerTensor).unwrap();
        let x = gaussian(6, 6, seed);
        let params = compute_params(&x, &spec);
        let q = fake_quantize(&x, &params, &spec).unwrap();
        let s = params.scales()[0];
        for (a, b) in x.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn quantization_error_shrinks_with_bits(seed: u64) {
        let x = gaussian(16, 16, seed);
        let mut last = f64::INFINITY;
        for bits in 2..=10 {
            let e = quantize(&x, &QuantSpec::activation(bits).unwrap()).sub(&x).unwrap().mean_square();
            prop_assert!(e <= last, "{} bits: {} > {}", bits, e, last);
            last = e;
        }
    }

    #[test]
    fn transforms_preserve_the_product(seed: u64, dim in 1usize..=64, dense: bool) {
        let x = gaussian(5, dim, seed);
        let w = gaussian(dim, 4, seed.wrapping_add(1));
        let t = if dense {
            let g = gaussian(dim, dim, seed.wrapping_add(2)).scale(0.3 / (dim as f64).sqrt());
            Transform::dense(Matrix::identity(dim).add(&g).unwrap()).unwrap()
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Transform::diagonal((0..dim).map(|_| r.random_range(0.1..10.0)).collect()).unwrap()
        };
        let y = apply_right(&x, &t).unwrap().matmul(&apply_inv_left(&w, &t).unwrap()).unwrap();
        let r = x.matmul(&w).unwrap();
        prop_assert!(y.relative_error(&r).unwrap() <= 1e-8);
    }

    #[test]
    fn partitions_are_valid_and_deterministic(
        seed: u64, dim in 2usize..48, tokens in 2usize..24,
        rv in 0.0f64..0.25, rt in 0.0f64..0.25, k in 1usize..5,
    ) {
        let b = batch(tokens, dim, seed);
        let cfg = MocdConfig { ratio_vision: rv, ratio_text: rt, clusters_k: k, ..MocdConfig::default() };
        let p = build_partition(&b, &cfg).unwrap();
        let (kv, kt) = cfg.outlier_counts(dim);
        prop_assert_eq!(p.vision().len(), kv);
        prop_assert_eq!(p.text().len(), kt);
        let mut all: Vec<usize> = p.main().iter().chain(p.text()).chain(p.vision()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..dim).collect::<Vec<_>>());
        prop_assert_eq!(build_partition(&b, &cfg).unwrap(), p);
    }

    #[test]
    fn percentile_ranks_lie_in_unit_interval(seed: u64, dim in 1usize..20, tokens in 2usize..10) {
        let b = batch(tokens, dim, seed);
        let cands: Vec<usize> = (0..dim).collect();
        let r = percentile_rank(&b, &cands).unwrap();
        prop_assert!(r.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jaccard_is_a_similarity(a in proptest::collection::btree_set(0usize..20, 0..8),
                               b in proptest::collection::btree_set(0usize..20, 0..8)) {
        let (a, b): (Vec<usize>, Vec<usize>) = (a.into_iter().collect(), b.into_iter().collect());
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }

    #[test]
    fn truncation_error_falls_with_rank(seed: u64, rows in 2usize..12, cols in 2usize..12) {
        let w = gaussian(rows, cols, seed);
        let p = rows.min(cols);
        let mut last = f64::INFINITY;
        for r in 1..=p {
            let f = truncated_svd(&w, r).unwrap();
            let e = f.reconstruct().sub(&w).unwrap().frobenius_norm();
            prop_assert!(e <= last + 1e-12);
            last = e;
            let utu = f.u.transpose().matmul(&f.u).unwrap();
            prop_assert!(utu.sub(&Matrix::identity(r)).unwrap().max_abs() <= 1e-10);
        }
        prop_assert!(last <= 1e-8 * w.frobenius_norm().max(1.0));
    }

    #[test]
    fn unplanted_vision_channels_stay_below_planted(seed: u64, scale in 10.0f64..200.0, tokens in 32usize..96) {
        let cfg = SynthConfig {
            tokens_text: 8,
            tokens_vision: tokens,
            vision_outlier_channels: vec![3, 40],
            text_outlier_channels: vec![9],
            vision_outlier_scale: scale,
            seed,
            ..SynthConfig::default()
        };
        let b = generate(&cfg).unwrap();
        let score = splitq_core::mocd::vision_score(&b).unwrap();
        let planted = score[3].min(score[40]);
        let others = (0..64).filter(|c| *c != 3 && *c != 40).fold(0.0f64, |m, c| m.max(score[c]));
        prop_assert!(others < planted);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_mode_forward_matches_reference(
        seed: u64, dim in 4usize..24, tokens in 2usize..12, cws: bool, mac: bool,
    ) {
        let b = batch(tokens, dim, seed);
        let w = gaussian(dim, 5, seed.wrapping_add(7));
        let layer = SplitQLayer::build(&w, &b, random_partition(dim, seed), &layer_cfg(4, cws, mac)).unwrap();
        let y = identity_specs(layer).forward(&b).unwrap();
        let r = forward_reference(&w, &b).unwrap();
        prop_assert!(y.relative_error(&r).unwrap() <= 1e-8);
    }

    #[test]
    fn compensation_only_touches_text_rows(seed: u64, dim in 4usize..24, tokens in 2usize..12, bits in 2u8..=6) {
        let b = batch(tokens, dim, seed);
        let w = gaussian(dim, 5, seed.wrapping_add(7));
        let layer = SplitQLayer::build(&w, &b, random_partition(dim, seed), &layer_cfg(bits, true, true)).unwrap();
        let on = layer.forward(&b).unwrap();
        let off = layer.with_toggles(true, false).unwrap().forward(&b).unwrap();
        for i in b.rows_with(ModalityTag::Vision) {
            prop_assert_eq!(on.row(i), off.row(i));
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs(seed: u64, dim in 4usize..16, tokens in 2usize..10) {
        let b = batch(tokens, dim, seed);
        let w = gaussian(dim, 5, seed.wrapping_add(7));
        let layer = SplitQLayer::build(&w, &b, random_partition(dim, seed), &layer_cfg(3, true, true)).unwrap();
        let perm: Vec<usize> = (0..tokens).rev().collect();
        let y = layer.forward(&b).unwrap();
        let yp = layer.forward(&b.select_tokens(&perm).unwrap()).unwrap();
        prop_assert_eq!(yp, y.select_rows(&perm));
    }

    #[test]
    fn empty_outlier_paths_add_nothing(seed: u64, dim in 2usize..16, tokens in 1usize..8, bits in 2u8..=8) {
        let b = batch(tokens.max(2), dim, seed);
        let w = gaussian(dim, 4, seed.wrapping_add(3));
        let cfg = layer_cfg(bits, false, false);
        let layer = SplitQLayer::build(&w, &b, ChannelPartition::trivial(dim), &cfg).unwrap();
        let [p_main, _, _] = layer.transforms();
        let main_only = quantize(&apply_right(b.data(), p_main).unwrap(), &cfg.act_spec)
            .matmul(&quantize(&apply_inv_left(&w, p_main).unwrap(), &cfg.weight_spec))
            .unwrap();
        prop_assert_eq!(layer.forward(&b).unwrap(), main_only);
    }

    #[test]
    fn synthesis_is_deterministic(seed: u64) {
        let cfg = SynthConfig { tokens_text: 4, tokens_vision: 4, dim: 16, seed, ..SynthConfig::default() };
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn calibration_never_reports_worse_than_start(seed: u64, bits in 3u8..=5) {
        let b = generate(&SynthConfig { tokens_text: 16, tokens_vision: 16, dim: 16,
            vision_outlier_channels: vec![1], text_outlier_channels: vec![4], seed,
            ..SynthConfig::default() }).unwrap();
        let w = generate_weight(&WeightConfig { d_in: 16, d_out: 8, seed, ..WeightConfig::default() }).unwrap();
        let p = build_partition(&b, &MocdConfig { ratio_text: 0.07, ratio_vision: 0.07, ..MocdConfig::default() }).unwrap();
        let layer = SplitQLayer::build(&w, &b, p, &layer_cfg(bits, true, true)).unwrap();
        let cfg = CalibConfig { steps: 15, ..CalibConfig::default() };
        let (best, trace) = calibrate(&layer, &b, &cfg).unwrap();
        prop_assert!(trace.best_loss <= trace.initial_loss());
        let fresh = best.forward(&b).unwrap().sub(&forward_reference(&w, &b).unwrap()).unwrap().mean_square();
        prop_assert_eq!(fresh, trace.best_loss);
    }

    #[test]
    fn straight_through_gradient_matches_rounding_free_gradient(seed: u64) {
        let b = batch(10, 12, seed);
        let w = gaussian(12, 6, seed.wrapping_add(1));
        let layer = SplitQLayer::build(&w, &b, random_partition(12, seed), &layer_cfg(16, true, true)).unwrap();
        let delta = gaussian(10, 6, seed.wrapping_add(2)).scale(0.1);
        let cfg = CalibConfig::default();
        let (_, ste) = objective_gradient_shifted(&layer, &b, &cfg, &Ste, &delta).unwrap();
        let exact = identity_specs(layer);
        let (_, id) = objective_gradient_shifted(&exact, &b, &cfg, &Ste, &delta).unwrap();
        for (a, e) in ste.iter().zip(&id) {
            prop_assert!((a - e).abs() <= 1e-6, "{} vs {}", a, e);
        }
    }
}
