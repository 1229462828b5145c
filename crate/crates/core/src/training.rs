//! Ranking-loss training with Adam.
//!
//! Each instance contributes `[k − F(R_i,E_i) + F(R_i,E_j)]_+` with `E_j`
//! the expression of another batch instance, and `[k − F(R_i,E_i) +
//! F(R_j,E_i)]_+` with `R_j` another region of the same image. Batches and
//! negatives are drawn from a per-step RNG stream derived from the seed, so a
//! run resumed from a checkpoint follows the uninterrupted trajectory.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RegionSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::{encode_expression, encode_tokens};
use crate::matching::{overall_score, prepare_region, Ablation};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::{ParamSet, Tensor};
use crate::visual::RegionFeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub margin: f64,
    pub max_iterations: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 15,
            learning_rate: 4e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 8000,
            margin: 0.1,
            max_iterations: 2000,
            seed: 0,
            ablation: Ablation::default(),
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.lr_decay_factor > 1.0) {
            return fail("lr_decay_factor must exceed 1");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be positive");
        }
        if !(self.margin >= 0.0) {
            return fail("margin must be nonnegative");
        }
        if !(self.clip_norm >= 0.0) {
            return fail("clip_norm must be nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return fail("Adam coefficients out of range");
        }
        Ok(())
    }

    /// `lr / decay_factor^floor(step / decay_every)` for zero-based `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate / self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
    }
}

/// `[k − pos + neg_expr]_+ + [k − pos + neg_region]_+`; absent negatives
/// contribute nothing.
pub fn ranking_loss(pos: f64, neg_expr: Option<f64>, neg_region: Option<f64>, k: f64) -> f64 {
    [neg_expr, neg_region]
        .into_iter()
        .flatten()
        .map(|n| (n - pos + k).max(0.0))
        .sum()
}

/// Graph form of [`ranking_loss`].
pub fn ranking_loss_node(g: &mut Graph, pos: Var, negatives: &[Var], k: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(negatives.len());
    for &n in negatives {
        let d = g.sub(n, pos)?;
        let d = g.add_scalar(d, k);
        terms.push(g.relu(d));
    }
    match terms.len() {
        0 => Ok(g.constant(Tensor::scalar(0.0))),
        _ => {
            let stacked = g.concat(&terms)?;
            Ok(g.sum(stacked))
        }
    }
}

/// Negatives for one instance: a batch position and a region index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Negatives {
    /// Position in the batch of the instance lending its expression.
    pub expression: Option<usize>,
    /// Non-target region of the instance's image.
    pub region: Option<usize>,
}

/// Uniform negatives for batch position `position`.
pub fn sample_negatives(dataset: &Dataset, batch: &[usize], position: usize, rng: &mut impl Rng) -> Negatives {
    let expression = (batch.len() >= 2).then(|| {
        let j = rng.random_range(0..batch.len() - 1);
        if j >= position {
            j + 1
        } else {
            j
        }
    });
    let e = &dataset.expressions[batch[position]];
    let n = dataset.image_of(e).regions.len();
    let region = (n >= 2).then(|| {
        let j = rng.random_range(0..n - 1);
        if j >= e.target {
            j + 1
        } else {
            j
        }
    });
    Negatives { expression, region }
}

/// One instance ready for scoring.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub expression_id: usize,
    pub token_ids: Vec<usize>,
    pub target: RegionFeatures,
    pub negatives: Negatives,
    /// Features of the negative region, when one was sampled.
    pub negative_region: Option<RegionFeatures>,
}

/// Graph handles for one instance's scores and hinge sum.
#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub positive: Var,
    pub negative_expression: Option<Var>,
    pub negative_region: Option<Var>,
    pub loss: Var,
}

/// Builds the summed ranking loss of a batch on `g`.
pub fn batch_loss(
    g: &mut Graph,
    params: &BoundParams,
    batch: &[TrainingInstance],
    ablation: &Ablation,
    margin: f64,
) -> Result<(Var, Vec<InstanceLoss>)> {
    let mut encoded = Vec::with_capacity(batch.len());
    for inst in batch {
        encoded.push(encode_expression(g, params, &inst.token_ids)?);
    }
    let mut per_instance = Vec::with_capacity(batch.len());
    for (i, inst) in batch.iter().enumerate() {
        let target = prepare_region(g, params, &inst.target, ablation)?;
        let positive = overall_score(g, params, &target, &encoded[i], ablation)?.total;
        let negative_expression = match inst.negatives.expression {
            Some(j) => Some(overall_score(g, params, &target, &encoded[j], ablation)?.total),
            None => None,
        };
        let negative_region = match &inst.negative_region {
            Some(r) => {
                let prepared = prepare_region(g, params, r, ablation)?;
                Some(overall_score(g, params, &prepared, &encoded[i], ablation)?.total)
            }
            None => None,
        };
        let negatives: Vec<Var> = [negative_expression, negative_region].into_iter().flatten().collect();
        let loss = ranking_loss_node(g, positive, &negatives, margin)?;
        per_instance.push(InstanceLoss {
            positive,
            negative_expression,
            negative_region,
            loss,
        });
    }
    let losses: Vec<Var> = per_instance.iter().map(|l| l.loss).collect();
    let stacked = g.concat(&losses)?;
    Ok((g.sum(stacked), per_instance))
}

/// Resolves batch indices into scoring inputs, sampling negatives in batch
/// order.
pub fn build_instances(dataset: &Dataset, batch: &[usize], rng: &mut impl Rng) -> Result<Vec<TrainingInstance>> {
    batch
        .iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let e = &dataset.expressions[idx];
            let image = dataset.image_of(e);
            let negatives = sample_negatives(dataset, batch, pos, rng);
            Ok(TrainingInstance {
                expression_id: e.id,
                token_ids: encode_tokens(&e.tokens, &dataset.vocab)?,
                target: image.region_features(RegionSet::Annotated, e.target),
                negatives,
                negative_region: negatives
                    .region
                    .map(|r| image.region_features(RegionSet::Annotated, r)),
            })
        })
        .collect()
}

/// Adam moments and update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (p, g) in grads.iter().enumerate() {
            let m = self.m.tensor_mut(p).data_mut();
            let v = self.v.tensor_mut(p).data_mut();
            let w = params.tensor_mut(p).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    /// Zero-based index of the update just applied.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub active_hinges: usize,
    pub hinges: usize,
    /// Instances whose image had a single region.
    pub skipped_region_negatives: usize,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl StepStats {
    pub fn active_fraction(&self) -> f64 {
        if self.hinges == 0 {
            0.0
        } else {
            self.active_hinges as f64 / self.hinges as f64
        }
    }
}

/// RNG for update `step`: stream `step` of the seed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// `size` distinct entries of `pool`, or all of them if fewer.
pub fn sample_batch(pool: &[usize], size: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample(rng, pool.len(), size.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(
    dataset: &Dataset,
    batch: &[usize],
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let instances = build_instances(dataset, batch, rng)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let (loss, per_instance) = batch_loss(&mut g, &bound, &instances, &config.ablation, config.margin)?;

    let mut active = 0;
    let mut hinges = 0;
    let mut skipped = 0;
    for (inst, l) in instances.iter().zip(&per_instance) {
        let value = g.scalar(l.loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of expression {} is {value} (positive score {})",
                inst.expression_id,
                g.scalar(l.positive)
            )));
        }
        let pos = g.scalar(l.positive);
        for n in [l.negative_expression, l.negative_region].into_iter().flatten() {
            hinges += 1;
            if g.scalar(n) - pos + config.margin > 0.0 {
                active += 1;
            }
        }
        if l.negative_region.is_none() {
            skipped += 1;
        }
    }

    g.backward(loss)?;
    let mut grads: Vec<Tensor> = bound.vars().iter().map(|&v| g.grad(v)).collect();
    let grad_norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {}", optimizer.step)));
    }
    if config.clip_norm > 0.0 && grad_norm > config.clip_norm {
        let s = config.clip_norm / grad_norm;
        grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
    }

    let step = optimizer.step;
    let lr = config.learning_rate_at(step);
    optimizer.apply(params.set_mut(), &grads, lr, config);
    Ok(StepStats {
        step,
        lr,
        loss: g.scalar(loss),
        active_hinges: active,
        hinges,
        skipped_region_negatives: skipped,
        grad_norm,
    })
}

/// Runs updates from `optimizer.step` up to `config.max_iterations` on the
/// training split, calling `on_step` after each.
pub fn train<F>(
    dataset: &Dataset,
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepStats, &ModelParams, &OptimizerState) -> Result<()>,
{
    config.validate()?;
    let pool = dataset.instances(|s| s == "train");
    if pool.is_empty() {
        return Err(Error::Config("dataset has no training instances".into()));
    }
    while optimizer.step < config.max_iterations {
        let mut rng = step_rng(config.seed, optimizer.step);
        let batch = sample_batch(&pool, config.batch_size, &mut rng);
        let stats = train_step(dataset, &batch, params, optimizer, config, &mut rng)?;
        on_step(&stats, params, optimizer)?;
    }
    Ok(())
}
