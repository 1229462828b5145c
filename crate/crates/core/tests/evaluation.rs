use mutatt_core::data::{same_category_context, Dataset, RegionSet};
use mutatt_core::evaluation::{evaluate_det, evaluate_gt};
use mutatt_core::language::encode_tokens;
use mutatt_core::matching::score_regions;
use mutatt_core::synth::{generate_synthetic, SynthSpec};
use mutatt_core::{Ablation, Guidance, ModelConfig, ModelParams};
use proptest::prelude::*;

fn fixture(seed: u64) -> (Dataset, ModelParams) {
    let (ds, _) = generate_synthetic(&SynthSpec {
        num_images: 12,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = ModelConfig {
        embed_dim: 12,
        hidden_dim: 8,
        visual_dim: ds.visual_dim,
        vocab_size: ds.vocab.size(),
    };
    let mut params = ModelParams::init(config, seed).unwrap();
    // Unit-scale embeddings so scores differ between regions.
    for (i, v) in params.get_mut("embedding").unwrap().data_mut().iter_mut().enumerate().skip(12) {
        *v = ((i * 7919 % 997) as f64 / 498.5 - 1.0) * 1.5;
    }
    (ds, params)
}

/// Reorders image 0's annotated regions by `perm` (new position i holds old
/// region `perm[i]`), remapping context indices and targets.
fn permute_image(ds: &Dataset, perm: &[usize]) -> Dataset {
    let mut images = ds.images.clone();
    let old = images[0].regions.clone();
    let inverse: Vec<usize> = {
        let mut inv = vec![0; perm.len()];
        for (new, &o) in perm.iter().enumerate() {
            inv[o] = new;
        }
        inv
    };
    images[0].regions = perm
        .iter()
        .map(|&o| {
            let mut r = old[o].clone();
            r.context = r.context.iter().map(|&c| inverse[c]).collect();
            r
        })
        .collect();
    let id = images[0].id;
    let expressions = ds
        .expressions
        .iter()
        .cloned()
        .map(|mut e| {
            if e.image_id == id {
                e.target = inverse[e.target];
            }
            e
        })
        .collect();
    Dataset::new(ds.visual_dim, ds.vocab.clone(), images, expressions).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gt_correctness_is_invariant_to_region_order(
        seed in 0u64..1000,
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (ds, params) = fixture(seed);
        let ablation = Ablation::uniform(Guidance::Mutual);
        let a = evaluate_gt(&ds, &params, &ablation).unwrap();
        let b = evaluate_gt(&permute_image(&ds, &perm), &params, &ablation).unwrap();
        let correct = |r: &mutatt_core::evaluation::EvalReport| r.records.iter().map(|x| x.correct).collect::<Vec<_>>();
        prop_assert_eq!(correct(&a), correct(&b));
        prop_assert_eq!(a.overall, b.overall);
    }
}

/// A region of a fresh category has an empty context and leaves every other
/// region's context, and so its score, untouched.
#[test]
fn a_lower_scoring_region_never_changes_the_prediction() {
    let (ds, params) = fixture(8);
    let ablation = Ablation::uniform(Guidance::Mutual);
    let before = evaluate_gt(&ds, &params, &ablation).unwrap();
    let fresh = ds.images[0].regions.iter().map(|r| r.category).max().unwrap() + 1;
    let n = ds.images[0].regions.len();
    for donor in 0..n {
        let mut images = ds.images.clone();
        let mut extra = images[0].regions[donor].clone();
        extra.category = fresh;
        extra.grid.data_mut().iter_mut().for_each(|x| *x = -*x);
        images[0].regions.push(extra);
        same_category_context(&mut images[0].regions);
        let grown = Dataset::new(ds.visual_dim, ds.vocab.clone(), images, ds.expressions.clone()).unwrap();
        let feats = grown.images[0].all_region_features(RegionSet::Annotated);
        let after = evaluate_gt(&grown, &params, &ablation).unwrap();
        for (i, e) in ds.expressions.iter().enumerate().filter(|(_, e)| e.image_id == ds.images[0].id) {
            let ids = encode_tokens(&e.tokens, &ds.vocab).unwrap();
            let scores = score_regions(&params, &feats, &ids, &ablation, false).unwrap().scores;
            let old = before.records[i].predicted.unwrap();
            if scores[n] < scores[old] {
                assert_eq!(after.records[i].predicted, Some(old));
                assert_eq!(after.records[i].correct, before.records[i].correct);
            }
        }
    }
}

#[test]
fn det_equals_gt_when_detections_are_the_annotations() {
    let (ds, params) = fixture(3);
    let mut images = ds.images.clone();
    for im in &mut images {
        im.detections = im.regions.clone();
    }
    let ds = Dataset::new(ds.visual_dim, ds.vocab.clone(), images, ds.expressions.clone()).unwrap();
    let ablation = Ablation::uniform(Guidance::VisualToLanguage);
    let gt = evaluate_gt(&ds, &params, &ablation).unwrap();
    let det = evaluate_det(&ds, &params, &ablation).unwrap();
    assert_eq!(gt.overall.correct, det.overall.correct);
    assert!(det.overall.accuracy <= 1.0);
    for (a, b) in gt.records.iter().zip(&det.records) {
        assert_eq!(a.predicted, b.predicted);
        assert_eq!(b.iou, Some(if b.correct { 1.0 } else { b.iou.unwrap() }));
    }
}

#[test]
fn images_without_detections_are_flagged_and_counted_wrong() {
    let (ds, params) = fixture(5);
    assert!(ds.has_detections());
    let mut images = ds.images.clone();
    images[0].detections.clear();
    let ds = Dataset::new(ds.visual_dim, ds.vocab.clone(), images, ds.expressions.clone()).unwrap();
    let report = evaluate_det(&ds, &params, &Ablation::uniform(Guidance::Mutual)).unwrap();
    let id = ds.images[0].id;
    for r in report.records.iter().filter(|r| r.image_id == id) {
        assert!(!r.correct);
        assert!(r.error.as_deref().unwrap().contains("no det regions"));
    }
}

#[test]
fn det_without_any_detections_is_a_configuration_error() {
    let (ds, params) = fixture(6);
    let mut images = ds.images.clone();
    images.iter_mut().for_each(|im| im.detections.clear());
    let ds = Dataset::new(ds.visual_dim, ds.vocab.clone(), images, ds.expressions.clone()).unwrap();
    let err = evaluate_det(&ds, &params, &Ablation::uniform(Guidance::Mutual)).unwrap_err();
    assert!(matches!(err, mutatt_core::Error::Config(_)));
}

#[test]
fn reports_are_identical_across_runs() {
    let (ds, params) = fixture(11);
    let ablation = Ablation::uniform(Guidance::Mutual);
    let a = evaluate_gt(&ds, &params, &ablation).unwrap();
    let b = evaluate_gt(&ds, &params, &ablation).unwrap();
    assert_eq!(a.records_jsonl().unwrap(), b.records_jsonl().unwrap());
    assert!(a.summary_table().contains("train"));
}
