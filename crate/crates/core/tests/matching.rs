use mutatt_core::language::encode_expression;
use mutatt_core::matching::{overall_score, prepare_region, score_regions};
use mutatt_core::params::Module;
use mutatt_core::reference::reference_score;
use mutatt_core::verify::{random_ablation, random_ids, random_params, random_region, small_config};
use mutatt_core::visual::{assemble_module_visuals, encode_context_offsets, encode_location, BBox, ImageSize};
use mutatt_core::{Ablation, Graph, Guidance, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_weights_sum_to_one_and_cosines_are_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = small_config();
        let params = random_params(config, seed).unwrap();
        let regions: Vec<_> = (0..3).map(|_| random_region(&mut rng, config.visual_dim, 5)).collect();
        let ids = random_ids(&mut rng, config.vocab_size, 5);
        let ranked = score_regions(&params, &regions, &ids, &Ablation::uniform(Guidance::Mutual), true).unwrap();
        for detail in &ranked.details {
            for m in &detail.modules {
                prop_assert!((-1.0..=1.0).contains(&m.vl_score));
                if let Some(w) = &m.word_weights {
                    prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
                if let Some(a) = &m.visual_attention {
                    prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(a.data().iter().all(|x| *x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn location_code_is_scale_invariant(
        x in 0.0f64..100.0, y in 0.0f64..100.0, w in 1.0f64..50.0, h in 1.0f64..50.0,
        k in prop_oneof![Just(0.5), Just(2.0), Just(8.0)],
    ) {
        let image = ImageSize::new(200.0, 160.0);
        let b = BBox::new(x, y, x + w, y + h);
        let scaled = BBox::new(k * x, k * y, k * (x + w), k * (y + h));
        let a = encode_location(&b, image).unwrap();
        let c = encode_location(&scaled, ImageSize::new(k * 200.0, k * 160.0)).unwrap();
        prop_assert_eq!(a, c);
    }

    #[test]
    fn self_offset_is_zero(x in 0.0f64..100.0, y in 0.0f64..100.0, w in 1.0f64..50.0, h in 1.0f64..50.0) {
        let b = BBox::new(x, y, x + w, y + h);
        let ctx = encode_context_offsets(&b, &[b], ImageSize::new(200.0, 200.0)).unwrap();
        prop_assert_eq!(&ctx.offsets.row(0)[..4], &[0.0; 4]);
    }
}

#[test]
fn pooled_features_are_masked_means_of_projected_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = small_config();
    let params = random_params(config, 3).unwrap();
    for _ in 0..20 {
        let region = random_region(&mut rng, config.visual_dim, 5);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let v = assemble_module_visuals(&mut g, &b, &region).unwrap();
        for m in Module::ALL {
            let f = v.get(m);
            let rows = g.value(f.features);
            let live: Vec<usize> = (0..f.mask.len()).filter(|&i| f.mask[i]).collect();
            let pooled = g.value(f.pooled).data();
            for k in 0..config.embed_dim {
                let mean = if live.is_empty() {
                    0.0
                } else {
                    live.iter().map(|&i| rows.row(i)[k]).sum::<f64>() / live.len() as f64
                };
                assert!((pooled[k] - mean).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn rescaled_features_with_compensating_projections_score_bitwise_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = small_config();
    let dv = config.visual_dim;
    let params = random_params(config, 9).unwrap();
    let regions: Vec<_> = (0..4).map(|_| random_region(&mut rng, dv, 5)).collect();
    let ids = random_ids(&mut rng, config.vocab_size, 5);
    // Scaling by 4 and 1/4 is exact in binary floating point.
    let mut scaled_params = params.clone();
    for m in ["subj", "rel"] {
        let w = scaled_params.get_mut(&format!("visual.{m}.w")).unwrap();
        w.data_mut()[..dv * config.embed_dim].iter_mut().for_each(|x| *x *= 0.25);
    }
    let scaled_regions: Vec<_> = regions
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.grid.data_mut().iter_mut().for_each(|x| *x *= 4.0);
            for c in &mut r.context {
                c.feature.iter_mut().for_each(|x| *x *= 4.0);
            }
            r
        })
        .collect();
    for mode in [Guidance::None, Guidance::VisualToLanguage, Guidance::Mutual] {
        let a = score_regions(&params, &regions, &ids, &Ablation::uniform(mode), false).unwrap();
        let b = score_regions(&scaled_params, &scaled_regions, &ids, &Ablation::uniform(mode), false).unwrap();
        assert_eq!(bits(&Tensor::vector(a.scores)), bits(&Tensor::vector(b.scores)));
    }
}

/// The location module attends over a single element, so its attention
/// softmax is constant and `loc.attn.*` is the one exception.
#[test]
fn every_parameter_tensor_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = small_config();
    let params = random_params(config, 21).unwrap();
    let mut region = random_region(&mut rng, config.visual_dim, 5);
    while region.context.is_empty() {
        region = random_region(&mut rng, config.visual_dim, 5);
    }
    let ids = [3, 7, 1, 5];
    let ablation = Ablation::uniform(Guidance::Mutual);
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let e = encode_expression(&mut g, &b, &ids).unwrap();
    let r = prepare_region(&mut g, &b, &region, &ablation).unwrap();
    let s = overall_score(&mut g, &b, &r, &e, &ablation).unwrap();
    g.backward(s.total).unwrap();
    for (i, &v) in b.vars().iter().enumerate() {
        let grad = g.grad(v);
        let name = params.set().name(i);
        if name.starts_with("loc.attn.") {
            assert!(grad.data().iter().all(|x| *x == 0.0), "{name}");
        } else {
            assert!(grad.data().iter().any(|x| *x != 0.0), "{name} has no gradient");
        }
    }
}

#[test]
fn straight_line_oracle_agrees_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let config = small_config();
    for i in 0..100 {
        let params = random_params(config, 500 + i).unwrap();
        let region = random_region(&mut rng, config.visual_dim, 5);
        let ids = random_ids(&mut rng, config.vocab_size, 6);
        let ablation = random_ablation(&mut rng);
        let pipeline = score_regions(&params, std::slice::from_ref(&region), &ids, &ablation, true).unwrap();
        let oracle = reference_score(&params, &region, &ids, &ablation).unwrap();
        assert!((pipeline.scores[0] - oracle.total).abs() <= 1e-10, "instance {i}");
        let detail = &pipeline.details[0];
        for m in 0..3 {
            assert!((detail.module_weights.data()[m] - oracle.module_weights[m]).abs() <= 1e-12);
            let attention = &pipeline.encoding.word_attention[m];
            for (a, b) in attention.data().iter().zip(&oracle.word_attention[m]) {
                assert!((a - b).abs() <= 1e-12);
            }
            let (p, o) = (&detail.modules[m], &oracle.modules[m]);
            assert!((p.combined - o.combined).abs() <= 1e-10);
            assert_eq!(p.word_weights.is_some(), o.word_weights.is_some());
            if let (Some(a), Some(b)) = (&p.visual_attention, &o.visual_attention) {
                for (x, y) in a.data().iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
