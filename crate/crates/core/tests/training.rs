use mutatt_core::checkpoint::Checkpoint;
use mutatt_core::data::Dataset;
use mutatt_core::synth::{generate_synthetic, SynthSpec};
use mutatt_core::training::{ranking_loss, ranking_loss_node, train, OptimizerState, StepStats, TrainConfig};
use mutatt_core::{Ablation, Graph, Guidance, ModelConfig, ModelParams, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn hinge_is_nonnegative_and_zero_exactly_when_margins_hold(
        pos in -1.0f64..1.0,
        ne in proptest::option::of(-1.0f64..1.0),
        nr in proptest::option::of(-1.0f64..1.0),
        k in 0.0f64..0.5,
    ) {
        let l = ranking_loss(pos, ne, nr, k);
        prop_assert!(l >= 0.0);
        let satisfied = [ne, nr].into_iter().flatten().all(|n| pos >= n + k);
        prop_assert_eq!(l == 0.0, satisfied);
    }

    #[test]
    fn positive_score_gradient_is_minus_the_active_hinge_count(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 0..3),
        k in 0.01f64..0.5,
    ) {
        // Keep every hinge away from its kink so central differences are exact in sign.
        prop_assume!(negs.iter().all(|n| (n - pos + k).abs() > 1e-3));
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(pos));
        let n: Vec<_> = negs.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let loss = ranking_loss_node(&mut g, p, &n, k).unwrap();
        g.backward(loss).unwrap();
        let active = negs.iter().filter(|&&x| x - pos + k > 0.0).count() as f64;
        prop_assert_eq!(g.grad(p).item(), -active);
        let h = 1e-5;
        let value = |s: f64| negs.iter().map(|&x| (x - s + k).max(0.0)).sum::<f64>();
        let fd = (value(pos + h) - value(pos - h)) / (2.0 * h);
        prop_assert!((fd + active).abs() < 1e-8, "fd {fd} active {active}");
    }
}

fn dataset(seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec {
        num_images: 120,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .0
}

fn small_model(ds: &Dataset, seed: u64) -> ModelParams {
    let config = ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        visual_dim: ds.visual_dim,
        vocab_size: ds.vocab.size(),
    };
    ModelParams::init(config, seed).unwrap()
}

fn run(ds: &Dataset, config: &TrainConfig) -> (ModelParams, OptimizerState, Vec<StepStats>) {
    let mut params = small_model(ds, config.seed);
    let mut opt = OptimizerState::new(params.set());
    let mut log = Vec::new();
    train(ds, &mut params, &mut opt, config, |s, _, _| {
        log.push(s.clone());
        Ok(())
    })
    .unwrap();
    (params, opt, log)
}

fn bytes(params: &ModelParams, opt: &OptimizerState) -> Vec<u8> {
    Checkpoint::new(params.clone(), opt.clone(), "{}".into()).to_bytes().unwrap()
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = dataset(1);
    let config = TrainConfig {
        max_iterations: 30,
        seed: 9,
        ..TrainConfig::default()
    };
    let (pa, oa, la) = run(&ds, &config);
    let (pb, ob, lb) = run(&ds, &config);
    assert_eq!(bytes(&pa, &oa), bytes(&pb, &ob));
    let losses = |l: &[StepStats]| l.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let ds = dataset(2);
    let full = TrainConfig {
        max_iterations: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let (pa, oa, _) = run(&ds, &full);

    let half = TrainConfig {
        max_iterations: 17,
        ..full.clone()
    };
    let (p, o, _) = run(&ds, &half);
    let restored = Checkpoint::from_bytes(&bytes(&p, &o)).unwrap();
    let (mut params, mut opt) = (restored.params, restored.optimizer);
    assert_eq!(opt.step, 17);
    train(&ds, &mut params, &mut opt, &full, |_, _, _| Ok(())).unwrap();
    assert_eq!(bytes(&pa, &oa), bytes(&params, &opt));
}

#[test]
fn loss_falls_by_a_factor_of_five_within_a_thousand_iterations() {
    let ds = dataset(4);
    for seed in [1, 2, 3] {
        let config = TrainConfig {
            max_iterations: 1000,
            seed,
            ablation: Ablation::uniform(Guidance::Mutual),
            ..TrainConfig::default()
        };
        let (_, _, log) = run(&ds, &config);
        let mean = |r: std::ops::Range<usize>| log[r.clone()].iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
        let (early, late) = (mean(0..100), mean(900..1000));
        assert!(late < 0.2 * early, "seed {seed}: early {early} late {late}");
    }
}
