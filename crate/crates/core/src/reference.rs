//! Straight-line re-implementation of the scoring pipeline for verification.
//!
//! Nothing here touches the graph or the pipeline's helpers: parameters are
//! read by name and every step is written out with plain loops, so agreement
//! with [`crate::matching`] is meaningful evidence that both are right.

use crate::error::{Error, Result};
use crate::matching::{Ablation, Guidance};
use crate::params::{ModelParams, Module};
use crate::visual::{BBox, RegionFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceModule {
    pub vl: f64,
    pub lv: f64,
    pub combined: f64,
    pub word_weights: Option<Vec<f64>>,
    pub visual_attention: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceScore {
    pub total: f64,
    pub module_weights: [f64; 3],
    pub word_attention: [Vec<f64>; 3],
    pub modules: [ReferenceModule; 3],
}

fn param<'a>(p: &'a ModelParams, name: &str) -> Result<&'a [f64]> {
    p.get(name)
        .map(|t| t.data())
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

fn softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for i in 0..x.len() {
        if mask[i] && x[i] > m {
            m = x[i];
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            out[i] = (x[i] - m).exp();
            z += out[i];
        }
    }
    for v in &mut out {
        *v /= z;
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        ab / (na * nb)
    }
}

/// `x · W + b` for `W` stored row-major as `[x.len() x out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for i in 0..x.len() {
        for j in 0..out {
            y[j] += x[i] * w[i * out + j];
        }
    }
    if let Some(b) = b {
        for j in 0..out {
            y[j] += b[j];
        }
    }
    y
}

fn weighted_sum(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for k in 0..out.len() {
            out[k] += w * r[k];
        }
    }
    out
}

fn masked_mean(rows: &[Vec<f64>], mask: &[bool], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut count = 0.0;
    for (r, &m) in rows.iter().zip(mask) {
        if m {
            count += 1.0;
            for k in 0..dim {
                out[k] += r[k];
            }
        }
    }
    if count > 0.0 {
        for v in &mut out {
            *v /= count;
        }
    }
    out
}

fn mlp(p: &ModelParams, m: Module, q: &[f64], v: &[f64], hidden: usize) -> Result<f64> {
    let mut joint = q.to_vec();
    joint.extend_from_slice(v);
    let mut h = affine(&joint, param(p, &format!("{m}.mlp.w1"))?, Some(param(p, &format!("{m}.mlp.b1"))?), hidden);
    for x in &mut h {
        *x = x.max(0.0);
    }
    let out = affine(&h, param(p, &format!("{m}.mlp.w2"))?, Some(param(p, &format!("{m}.mlp.b2"))?), 1);
    Ok(out[0])
}

fn centre(b: &BBox) -> (f64, f64) {
    (0.5 * (b.x_tl + b.x_br), 0.5 * (b.y_tl + b.y_br))
}

/// Computes the overall matching score of one region for one id sequence.
pub fn reference_score(
    params: &ModelParams,
    region: &RegionFeatures,
    ids: &[usize],
    ablation: &Ablation,
) -> Result<ReferenceScore> {
    let cfg = params.config();
    let (d, hdim) = (cfg.embed_dim, cfg.hidden_dim);
    let table = param(params, "embedding")?;

    // Words and padding.
    let t_len = ids.len();
    let mask: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
    let mut words = Vec::with_capacity(t_len);
    for &id in ids {
        if id >= cfg.vocab_size {
            return Err(Error::Index { index: id, bound: cfg.vocab_size });
        }
        if id == 0 {
            words.push(vec![0.0; d]);
        } else {
            words.push(table[id * d..(id + 1) * d].to_vec());
        }
    }
    let live: Vec<usize> = (0..t_len).filter(|&t| mask[t]).collect();
    if live.is_empty() {
        return Err(Error::EmptyExpression);
    }

    // Word attention and phrase embeddings.
    let mut lambda: [Vec<f64>; 3] = Default::default();
    let mut phrase: [Vec<f64>; 3] = Default::default();
    for m in Module::ALL {
        let q = param(params, &format!("lang.query.{m}"))?;
        let mut logits = vec![0.0; t_len];
        for t in 0..t_len {
            let mut s = 0.0;
            for k in 0..d {
                let pair = (k / 2) as f64;
                let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
                let code = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                s += words[t][k] * q[k] + code * q[d + k];
            }
            logits[t] = s;
        }
        let l = softmax(&logits, &mask);
        phrase[m.index()] = weighted_sum(&l, &words);
        lambda[m.index()] = l;
    }

    // Module weights from [first ; last ; mean].
    let mut summary = words[live[0]].clone();
    summary.extend_from_slice(&words[*live.last().unwrap()]);
    summary.extend(masked_mean(&words, &mask, d));
    let logits = affine(&summary, param(params, "lang.weights.w")?, Some(param(params, "lang.weights.b")?), 3);
    let omega = softmax(&logits, &[true; 3]);

    // Geometry.
    let (img_w, img_h) = (region.image.width, region.image.height);
    let b = &region.bbox;
    let (bw, bh) = (b.x_br - b.x_tl, b.y_br - b.y_tl);
    let loc = [b.x_tl / img_w, b.y_tl / img_h, b.x_br / img_w, b.y_br / img_h, bw * bh / (img_w * img_h)];
    let (cx, cy) = centre(b);
    let mut order: Vec<(f64, usize)> = region
        .context
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (nx, ny) = centre(&c.bbox);
            (((nx - cx).powi(2) + (ny - cy).powi(2)).sqrt(), j)
        })
        .collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    order.truncate(5);
    let mut offsets = vec![[0.0; 5]; 5];
    let mut ctx_mask = [false; 5];
    for (slot, &(_, j)) in order.iter().enumerate() {
        let n = &region.context[j].bbox;
        offsets[slot] = [
            (n.x_tl - b.x_tl) / bw,
            (n.y_tl - b.y_tl) / bh,
            (n.x_br - b.x_br) / bw,
            (n.y_br - b.y_br) / bh,
            (n.x_br - n.x_tl) * (n.y_br - n.y_tl) / (img_w * img_h),
        ];
        ctx_mask[slot] = true;
    }

    // Projected visual sets.
    let pw = |m: Module| param(params, &format!("visual.{m}.w"));
    let pb = |m: Module| param(params, &format!("visual.{m}.b"));
    let subj_rows: Vec<Vec<f64>> = (0..49)
        .map(|i| Ok(affine(region.grid.row(i), pw(Module::Subject)?, Some(pb(Module::Subject)?), d)))
        .collect::<Result<_>>()?;
    let mut loc_in = loc.to_vec();
    for row in &offsets {
        loc_in.extend_from_slice(row);
    }
    let loc_rows = vec![affine(&loc_in, pw(Module::Location)?, Some(pb(Module::Location)?), d)];
    let mut rel_rows = Vec::with_capacity(5);
    for slot in 0..5 {
        if ctx_mask[slot] {
            let j = order[slot].1;
            let mut x = region.context[j].feature.clone();
            x.extend_from_slice(&offsets[slot]);
            rel_rows.push(affine(&x, pw(Module::Relationship)?, Some(pb(Module::Relationship)?), d));
        } else {
            rel_rows.push(vec![0.0; d]);
        }
    }
    let sets: [(Vec<Vec<f64>>, Vec<bool>); 3] = [
        (subj_rows, vec![true; 49]),
        (loc_rows, vec![true]),
        (rel_rows, ctx_mask.to_vec()),
    ];

    let mut modules = Vec::with_capacity(3);
    for m in Module::ALL {
        let (rows, vmask) = &sets[m.index()];
        let pooled = masked_mean(rows, vmask, d);
        let q = &phrase[m.index()];
        let has_elements = vmask.iter().any(|&x| x);
        let mode = ablation.get(m);

        let (vl, word_weights) = if mode == Guidance::None {
            (cosine(&pooled, q), None)
        } else {
            let mut logits = vec![0.0; t_len];
            for t in 0..t_len {
                logits[t] = lambda[m.index()][t] * cosine(&pooled, &words[t]);
            }
            let w = softmax(&logits, &mask);
            let q_bar = weighted_sum(&w, &words);
            (cosine(&pooled, &q_bar), Some(w))
        };

        let (v_bar, visual_attention) = if mode == Guidance::Mutual && has_elements {
            let w1 = param(params, &format!("{m}.attn.w1"))?;
            let b1 = param(params, &format!("{m}.attn.b"))?;
            let w2 = param(params, &format!("{m}.attn.w2"))?;
            let mut logits = vec![0.0; rows.len()];
            for (n, row) in rows.iter().enumerate() {
                let mut joint = row.clone();
                joint.extend_from_slice(q);
                let h: Vec<f64> = affine(&joint, w1, Some(b1), hdim).into_iter().map(f64::tanh).collect();
                logits[n] = affine(&h, w2, None, 1)[0];
            }
            let a = softmax(&logits, vmask);
            (weighted_sum(&a, rows), Some(a))
        } else {
            (pooled.clone(), None)
        };
        let lv = mlp(params, m, q, &v_bar, hdim)?;
        modules.push(ReferenceModule {
            vl,
            lv,
            combined: vl + lv,
            word_weights,
            visual_attention,
        });
    }

    let total = omega[0] * modules[0].combined + omega[1] * modules[1].combined + omega[2] * modules[2].combined;
    Ok(ReferenceScore {
        total,
        module_weights: [omega[0], omega[1], omega[2]],
        word_attention: lambda,
        modules: modules.try_into().expect("three modules"),
    })
}
