//! Model dimensions and the trainable parameter set.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamSet, Tensor};

/// Subject features come from a 7x7 grid.
pub const GRID_SLOTS: usize = 49;
/// At most five same-category neighbours provide relationship context.
pub const CONTEXT_SLOTS: usize = 5;
/// Width of one location or offset encoding.
pub const LOCATION_DIM: usize = 5;
/// Location module input: own location plus the flattened offset block.
pub const LOCATION_INPUT: usize = LOCATION_DIM + CONTEXT_SLOTS * LOCATION_DIM;

/// The three matching channels, in the fixed `(subj, loc, rel)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    #[serde(rename = "subj")]
    Subject,
    #[serde(rename = "loc")]
    Location,
    #[serde(rename = "rel")]
    Relationship,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Subject, Module::Location, Module::Relationship];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::Subject => "subj",
            Module::Location => "loc",
            Module::Relationship => "rel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "subj" | "subject" => Some(Module::Subject),
            "loc" | "location" => Some(Module::Location),
            "rel" | "relationship" => Some(Module::Relationship),
            _ => None,
        }
    }

    /// Number of visual elements the module attends over.
    pub fn slots(self) -> usize {
        match self {
            Module::Subject => GRID_SLOTS,
            Module::Location => 1,
            Module::Relationship => CONTEXT_SLOTS,
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Common embedding dimension shared by words and projected visuals.
    pub embed_dim: usize,
    /// Hidden width of the attention layer and of the matching MLP.
    pub hidden_dim: usize,
    /// Raw visual feature dimension of the dataset.
    pub visual_dim: usize,
    /// Embedding table rows, including the two reserved ids.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
            visual_dim: 32,
            vocab_size: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary must include the two reserved ids".into()));
        }
        Ok(())
    }

    /// Input width of each module's visual projection.
    pub fn visual_input(&self, module: Module) -> usize {
        match module {
            Module::Subject => self.visual_dim,
            Module::Location => LOCATION_INPUT,
            Module::Relationship => self.visual_dim + LOCATION_DIM,
        }
    }
}

/// Positions of each named tensor inside the [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub embedding: usize,
    pub query: [usize; 3],
    pub weights_w: usize,
    pub weights_b: usize,
    pub proj_w: [usize; 3],
    pub proj_b: [usize; 3],
    pub attn_w1: [usize; 3],
    pub attn_b: [usize; 3],
    pub attn_w2: [usize; 3],
    pub mlp_w1: [usize; 3],
    pub mlp_b1: [usize; 3],
    pub mlp_w2: [usize; 3],
    pub mlp_b2: [usize; 3],
}

enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Embedding,
}

/// Name, shape and initializer of every parameter, in storage order.
fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, ParamIds) {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut entries = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        entries.push((name, shape, init));
        entries.len() - 1
    };
    let embedding = push("embedding".into(), vec![cfg.vocab_size, d], Init::Embedding);
    let query = Module::ALL.map(|m| push(format!("lang.query.{m}"), vec![2 * d, 1], Init::FanIn(2 * d)));
    let weights_w = push("lang.weights.w".into(), vec![3 * d, 3], Init::FanIn(3 * d));
    let weights_b = push("lang.weights.b".into(), vec![3], Init::FanIn(3 * d));
    let mut proj_w = [0; 3];
    let mut proj_b = [0; 3];
    for m in Module::ALL {
        let fan_in = cfg.visual_input(m);
        proj_w[m.index()] = push(format!("visual.{m}.w"), vec![fan_in, d], Init::FanIn(fan_in));
        proj_b[m.index()] = push(format!("visual.{m}.b"), vec![d], Init::FanIn(fan_in));
    }
    let mut ids = ParamIds {
        embedding,
        query,
        weights_w,
        weights_b,
        proj_w,
        proj_b,
        attn_w1: [0; 3],
        attn_b: [0; 3],
        attn_w2: [0; 3],
        mlp_w1: [0; 3],
        mlp_b1: [0; 3],
        mlp_w2: [0; 3],
        mlp_b2: [0; 3],
    };
    for m in Module::ALL {
        let i = m.index();
        ids.attn_w1[i] = push(format!("{m}.attn.w1"), vec![2 * d, h], Init::FanIn(2 * d));
        ids.attn_b[i] = push(format!("{m}.attn.b"), vec![h], Init::FanIn(2 * d));
        ids.attn_w2[i] = push(format!("{m}.attn.w2"), vec![h, 1], Init::FanIn(h));
        ids.mlp_w1[i] = push(format!("{m}.mlp.w1"), vec![2 * d, h], Init::FanIn(2 * d));
        ids.mlp_b1[i] = push(format!("{m}.mlp.b1"), vec![h], Init::FanIn(2 * d));
        ids.mlp_w2[i] = push(format!("{m}.mlp.w2"), vec![h, 1], Init::FanIn(h));
        ids.mlp_b2[i] = push(format!("{m}.mlp.b2"), vec![1], Init::FanIn(h));
    }
    (entries, ids)
}

/// All trainable tensors of the matching model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    set: ParamSet,
    ids: ParamIds,
}

impl ModelParams {
    /// Randomly initialized parameters; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let (entries, ids) = layout(&config);
        let mut set = ParamSet::new();
        for (name, shape, init) in entries {
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = match init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            };
            if name == "embedding" {
                data[..config.embed_dim].fill(0.0);
            }
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, set, ids })
    }

    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (entries, ids) = layout(&config);
        let mut set = ParamSet::new();
        for (name, shape, _) in entries {
            set.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { config, set, ids })
    }

    /// Wraps an existing set after checking names and shapes.
    pub fn from_set(config: ModelConfig, set: ParamSet) -> Result<Self> {
        let expected = Self::zeros(config)?;
        if expected.set.len() != set.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameter tensors, found {}",
                expected.set.len(),
                set.len()
            )));
        }
        for ((en, et), (n, t)) in expected.set.iter().zip(set.iter()) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {n} {:?} does not match expected {en} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self {
            config,
            set,
            ids: expected.ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn into_set(self) -> ParamSet {
        self.set
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.set.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.set.get_mut(name)
    }

    /// Places every parameter on `graph`, as variables when `trainable`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .set
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    graph.variable(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            ids: self.ids,
            vars,
            config: self.config,
        }
    }

    /// Handles for parameters that were placed on a graph by other means.
    pub fn bound_from(&self, vars: &[Var]) -> BoundParams {
        assert_eq!(vars.len(), self.set.len(), "one var per parameter tensor");
        BoundParams {
            ids: self.ids,
            vars: vars.to_vec(),
            config: self.config,
        }
    }
}

/// Graph handles for every parameter.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: ParamIds,
    vars: Vec<Var>,
    config: ModelConfig,
}

impl BoundParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn embedding(&self) -> Var {
        self.vars[self.ids.embedding]
    }

    pub fn query(&self, m: Module) -> Var {
        self.vars[self.ids.query[m.index()]]
    }

    pub fn weights_w(&self) -> Var {
        self.vars[self.ids.weights_w]
    }

    pub fn weights_b(&self) -> Var {
        self.vars[self.ids.weights_b]
    }

    pub fn proj_w(&self, m: Module) -> Var {
        self.vars[self.ids.proj_w[m.index()]]
    }

    pub fn proj_b(&self, m: Module) -> Var {
        self.vars[self.ids.proj_b[m.index()]]
    }

    pub fn attn_w1(&self, m: Module) -> Var {
        self.vars[self.ids.attn_w1[m.index()]]
    }

    pub fn attn_b(&self, m: Module) -> Var {
        self.vars[self.ids.attn_b[m.index()]]
    }

    pub fn attn_w2(&self, m: Module) -> Var {
        self.vars[self.ids.attn_w2[m.index()]]
    }

    pub fn mlp_w1(&self, m: Module) -> Var {
        self.vars[self.ids.mlp_w1[m.index()]]
    }

    pub fn mlp_b1(&self, m: Module) -> Var {
        self.vars[self.ids.mlp_b1[m.index()]]
    }

    pub fn mlp_w2(&self, m: Module) -> Var {
        self.vars[self.ids.mlp_w2[m.index()]]
    }

    pub fn mlp_b2(&self, m: Module) -> Var {
        self.vars[self.ids.mlp_b2[m.index()]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            visual_dim: 2,
            vocab_size: 6,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(small(), 7).unwrap();
        let b = ModelParams::init(small(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(small(), 8).unwrap();
        assert_ne!(a, c);
        let w = a.get("subj.attn.w1").unwrap();
        assert_eq!(w.shape(), &[8, 3]);
        let bound = 1.0 / 8f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("embedding").unwrap().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_set_checks_layout() {
        let p = ModelParams::init(small(), 1).unwrap();
        assert!(ModelParams::from_set(small(), p.set().clone()).is_ok());
        let mut bad = small();
        bad.embed_dim = 5;
        assert!(ModelParams::from_set(bad, p.set().clone()).is_err());
    }

    #[test]
    fn module_parsing() {
        assert_eq!(Module::parse("SUBJ"), Some(Module::Subject));
        assert_eq!(Module::parse("relationship"), Some(Module::Relationship));
        assert_eq!(Module::parse("x"), None);
        assert_eq!(Module::ALL.map(Module::slots), [49, 1, 5]);
    }
}
