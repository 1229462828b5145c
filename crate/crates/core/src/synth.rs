//! Synthetic grounding task with a planted vision-language mapping.
//!
//! Every region carries one value per attribute factor. Factor 0 is the
//! category (its word is the noun); the remaining factors are modifiers such
//! as colour. Each value owns a random prototype vector, and a region's
//! attribute vector is the sum of its prototypes. The subject grid tiles that
//! vector over all 49 slots and adds independent gaussian noise per entry.
//!
//! An expression reads `<modifiers> <noun> <location> near <context>`, where
//! the location word is the dominant direction of the box centre from the
//! image centre and the context word is the first modifier of the nearest
//! same-category neighbour (or `nothing`). Expressions are unique within
//! their image, so the targets are identifiable from the ledger alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{same_category_context, Dataset, Expression, Image, Region};
use crate::error::{Error, Result};
use crate::language::Vocabulary;
use crate::params::GRID_SLOTS;
use crate::tensor::Tensor;
use crate::visual::{order_neighbors, BBox, ImageSize};

pub const NO_CONTEXT: &str = "nothing";
pub const RELATION_WORD: &str = "near";
const MAX_ATTEMPTS: usize = 1000;

const NOUNS: [&str; 12] = [
    "ball", "cup", "box", "lamp", "book", "vase", "chair", "bowl", "shoe", "clock", "plant", "bottle",
];
const COLORS: [&str; 12] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "pink", "brown", "gray", "teal",
];
const MATERIALS: [&str; 8] = ["wooden", "metal", "glass", "plastic", "paper", "stone", "woolen", "leather"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub regions_per_image: usize,
    /// Attribute words across all factors, split evenly between them.
    pub vocab_size: usize,
    pub num_attribute_factors: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub visual_dim: usize,
    /// Distinct categories drawn per image; at least one category repeats
    /// whenever this is below `regions_per_image`.
    pub categories_per_image: usize,
    /// Probability that an image's last region copies the attributes and
    /// location word of its first, leaving the context word to tell them
    /// apart.
    pub twin_probability: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_images: 500,
            regions_per_image: 4,
            vocab_size: 16,
            num_attribute_factors: 2,
            noise_std: 0.1,
            seed: 0,
            visual_dim: 32,
            categories_per_image: 2,
            twin_probability: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn values_per_factor(&self) -> usize {
        self.vocab_size / self.num_attribute_factors.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_images == 0 {
            return fail("num_images must be positive".into());
        }
        if self.regions_per_image < 2 {
            return fail(format!("regions_per_image must be at least 2, got {}", self.regions_per_image));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and nonnegative, got {}", self.noise_std));
        }
        if self.num_attribute_factors == 0 || self.num_attribute_factors > 3 {
            return fail(format!(
                "num_attribute_factors must be 1, 2 or 3, got {}",
                self.num_attribute_factors
            ));
        }
        if self.values_per_factor() < 2 {
            return fail(format!(
                "vocab_size {} leaves fewer than 2 words per factor",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.twin_probability) {
            return fail(format!("twin_probability must lie in [0, 1], got {}", self.twin_probability));
        }
        if self.visual_dim == 0 {
            return fail("visual_dim must be positive".into());
        }
        if self.categories_per_image == 0 || self.categories_per_image > self.values_per_factor() {
            return fail(format!(
                "categories_per_image must lie in 1..={}",
                self.values_per_factor()
            ));
        }
        Ok(())
    }
}

/// Word for value `v` of factor `f`.
pub fn factor_word(f: usize, v: usize) -> String {
    let list: &[&str] = match f {
        0 => &NOUNS,
        1 => &COLORS,
        _ => &MATERIALS,
    };
    match list.get(v) {
        Some(w) => (*w).to_string(),
        None => format!("{}{}", list[0], v),
    }
}

/// Dominant direction of the box centre from the image centre.
pub fn location_word(bbox: &BBox, image: ImageSize) -> &'static str {
    let (cx, cy) = bbox.center();
    let dx = cx / image.width - 0.5;
    let dy = cy / image.height - 0.5;
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "top"
    } else {
        "bottom"
    }
}

/// Planted truth for one annotated region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRegion {
    pub attributes: Vec<usize>,
    pub location: String,
    /// Index of the nearest same-category region, if any.
    pub nearest: Option<usize>,
    pub context: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub factor_words: Vec<Vec<String>>,
    /// `[factor][value]` prototype vectors of length `d_v`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// `[image][region]`, images in dataset order.
    pub regions: Vec<Vec<LedgerRegion>>,
}

impl Ledger {
    pub fn attribute_vector(&self, attributes: &[usize]) -> Vec<f64> {
        let dv = self.prototypes[0][0].len();
        let mut out = vec![0.0; dv];
        for (f, &v) in attributes.iter().enumerate() {
            out.iter_mut().zip(&self.prototypes[f][v]).for_each(|(o, p)| *o += p);
        }
        out
    }

    /// All attribute combinations in lexicographic order.
    fn combinations(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for words in &self.factor_words {
            out = out
                .into_iter()
                .flat_map(|c| {
                    (0..words.len()).map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out
    }
}

fn describe(
    factor_words: &[Vec<String>],
    attributes: &[Vec<usize>],
    boxes: &[BBox],
    image: ImageSize,
    i: usize,
) -> LedgerRegion {
    let same: Vec<usize> = (0..boxes.len())
        .filter(|&j| j != i && attributes[j][0] == attributes[i][0])
        .collect();
    let candidates: Vec<BBox> = same.iter().map(|&j| boxes[j]).collect();
    let nearest = order_neighbors(&boxes[i], &candidates).first().map(|&k| same[k]);
    let context = match nearest {
        Some(j) if factor_words.len() > 1 => factor_words[1][attributes[j][1]].clone(),
        Some(j) => factor_words[0][attributes[j][0]].clone(),
        None => NO_CONTEXT.to_string(),
    };
    let location = location_word(&boxes[i], image).to_string();
    let mut tokens: Vec<String> = (1..factor_words.len())
        .map(|f| factor_words[f][attributes[i][f]].clone())
        .collect();
    tokens.push(factor_words[0][attributes[i][0]].clone());
    tokens.push(location.clone());
    tokens.push(RELATION_WORD.to_string());
    tokens.push(context.clone());
    LedgerRegion {
        attributes: attributes[i].clone(),
        location,
        nearest,
        context,
        tokens,
    }
}

fn random_box(rng: &mut ChaCha8Rng, image: ImageSize) -> BBox {
    let w = rng.random_range(0.15..0.35) * image.width;
    let h = rng.random_range(0.15..0.35) * image.height;
    let x = rng.random_range(0.0..image.width - w);
    let y = rng.random_range(0.0..image.height - h);
    BBox::new(x, y, x + w, y + h)
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, image: ImageSize) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut j = |v: f64, s: f64| v + rng.random_range(-0.08..0.08) * s;
    BBox::new(j(b.x_tl, w), j(b.y_tl, h), j(b.x_br, w), j(b.y_br, h)).clamped(image)
}

fn noisy_grid(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Tensor {
    let mut data = Vec::with_capacity(GRID_SLOTS * base.len());
    for _ in 0..GRID_SLOTS {
        for &b in base {
            let e: f64 = StandardNormal.sample(rng);
            data.push(b + noise * e);
        }
    }
    Tensor::matrix(GRID_SLOTS, base.len(), data)
}

/// Split of image `i` out of `n`: the first 80% train, then 10% val, 10% test.
pub fn split_of(i: usize, n: usize) -> &'static str {
    if i * 10 < n * 8 {
        "train"
    } else if i * 10 < n * 9 {
        "val"
    } else {
        "test"
    }
}

/// Pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Ledger)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per = spec.values_per_factor();
    let factor_words: Vec<Vec<String>> = (0..spec.num_attribute_factors)
        .map(|f| (0..per).map(|v| factor_word(f, v)).collect())
        .collect();
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.num_attribute_factors)
        .map(|_| {
            (0..per)
                .map(|_| (0..spec.visual_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mut ledger = Ledger {
        factor_words,
        prototypes,
        regions: Vec::with_capacity(spec.num_images),
    };

    let mut images = Vec::with_capacity(spec.num_images);
    let mut expressions = Vec::new();
    for id in 0..spec.num_images {
        let size = ImageSize::new(
            rng.random_range(400.0..800.0f64).round(),
            rng.random_range(300.0..600.0f64).round(),
        );
        let (attributes, boxes, described) = (0..MAX_ATTEMPTS)
            .find_map(|_| {
                let mut cats: Vec<usize> = (0..per).collect();
                cats.shuffle(&mut rng);
                cats.truncate(spec.categories_per_image);
                let mut attributes: Vec<Vec<usize>> = (0..spec.regions_per_image)
                    .map(|_| {
                        let mut a = vec![cats[rng.random_range(0..cats.len())]];
                        a.extend((1..spec.num_attribute_factors).map(|_| rng.random_range(0..per)));
                        a
                    })
                    .collect();
                let twin = rng.random_bool(spec.twin_probability);
                if twin {
                    let first = attributes[0].clone();
                    *attributes.last_mut().expect("at least two regions") = first;
                }
                let boxes: Vec<BBox> = (0..spec.regions_per_image).map(|_| random_box(&mut rng, size)).collect();
                let described: Vec<LedgerRegion> = (0..boxes.len())
                    .map(|i| describe(&ledger.factor_words, &attributes, &boxes, size, i))
                    .collect();
                let unique = (0..described.len())
                    .all(|i| (0..i).all(|j| described[i].tokens != described[j].tokens));
                let twins_share_location =
                    !twin || described[0].location == described[described.len() - 1].location;
                let unique = unique && twins_share_location;
                unique.then_some((attributes, boxes, described))
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "could not draw {MAX_ATTEMPTS} images with distinguishable expressions; enlarge the vocabulary"
                ))
            })?;

        let mut regions: Vec<Region> = attributes
            .iter()
            .zip(&boxes)
            .map(|(a, b)| Region {
                bbox: *b,
                category: a[0],
                grid: noisy_grid(&mut rng, &ledger.attribute_vector(a), spec.noise_std),
                context: Vec::new(),
            })
            .collect();
        same_category_context(&mut regions);
        let mut detections: Vec<Region> = attributes
            .iter()
            .zip(&boxes)
            .map(|(a, b)| Region {
                bbox: jittered(&mut rng, b, size),
                category: a[0],
                grid: noisy_grid(&mut rng, &ledger.attribute_vector(a), spec.noise_std),
                context: Vec::new(),
            })
            .collect();
        same_category_context(&mut detections);

        for (target, d) in described.iter().enumerate() {
            expressions.push(Expression {
                id: expressions.len(),
                image_id: id,
                target,
                tokens: d.tokens.clone(),
                split: split_of(id, spec.num_images).to_string(),
            });
        }
        ledger.regions.push(described);
        images.push(Image {
            id,
            size,
            regions,
            detections,
        });
    }

    let vocab = Vocabulary::build(
        expressions
            .iter()
            .filter(|e| e.split == "train")
            .map(|e| e.tokens.as_slice()),
    );
    let dataset = Dataset::new(spec.visual_dim, vocab, images, expressions)?;
    Ok((dataset, ledger))
}

/// Picks the region whose planted description equals the expression; uses the
/// ledger only.
pub fn ledger_match(ledger: &Ledger, dataset: &Dataset, expr: &Expression) -> Option<usize> {
    let image = dataset.images.iter().position(|im| im.id == expr.image_id)?;
    ledger.regions[image].iter().position(|r| r.tokens == expr.tokens)
}

/// Nearest-centroid decoder: recovers every region's attributes from its
/// pooled grid, rebuilds the descriptions from decoded attributes and boxes,
/// and returns the region sharing the most tokens with the expression (ties
/// to the lowest index).
pub fn centroid_oracle(ledger: &Ledger, dataset: &Dataset, expr: &Expression) -> Option<usize> {
    let image = dataset.image(expr.image_id)?;
    let combos = ledger.combinations();
    let centroids: Vec<Vec<f64>> = combos.iter().map(|c| ledger.attribute_vector(c)).collect();
    let decoded: Vec<Vec<usize>> = image
        .regions
        .iter()
        .map(|r| {
            let x = r.pooled_feature();
            let best = centroids
                .iter()
                .map(|c| c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one combination");
            combos[best].clone()
        })
        .collect();
    let boxes: Vec<BBox> = image.regions.iter().map(|r| r.bbox).collect();
    let mut best: Option<(usize, usize)> = None;
    for i in 0..boxes.len() {
        let d = describe(&ledger.factor_words, &decoded, &boxes, image.size, i);
        let hits = d.tokens.iter().zip(&expr.tokens).filter(|(a, b)| a == b).count();
        if best.is_none_or(|(_, h)| hits > h) {
            best = Some((i, hits));
        }
    }
    best.map(|(i, _)| i)
}

/// Fraction of `instances` the oracle identifies.
pub fn oracle_accuracy(
    ledger: &Ledger,
    dataset: &Dataset,
    instances: &[usize],
    oracle: fn(&Ledger, &Dataset, &Expression) -> Option<usize>,
) -> f64 {
    let hits = instances
        .iter()
        .filter(|&&i| {
            let e = &dataset.expressions[i];
            oracle(ledger, dataset, e) == Some(e.target)
        })
        .count();
    hits as f64 / instances.len().max(1) as f64
}
