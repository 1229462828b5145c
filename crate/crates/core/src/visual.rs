//! Region geometry and the per-module visual sets.
//!
//! Subject: the 49 grid rows, each projected to the common dimension.
//! Location: one row, the projection of the region's own location encoding
//! concatenated with the offsets of up to five same-category neighbours.
//! Relationship: up to five rows, each the projection of a neighbour's pooled
//! feature concatenated with its offset encoding. Padded slots are masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, Module, CONTEXT_SLOTS, GRID_SLOTS, LOCATION_DIM, LOCATION_INPUT};
use crate::tensor::Tensor;

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl BBox {
    pub const fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Self {
        Self { x_tl, y_tl, x_br, y_br }
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_tl + self.x_br) / 2.0, (self.y_tl + self.y_br) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
            .iter()
            .all(|v| v.is_finite())
            && self.x_br >= self.x_tl
            && self.y_br >= self.y_tl
    }

    pub fn clamped(&self, image: ImageSize) -> Self {
        let cx = |v: f64| v.clamp(0.0, image.width);
        let cy = |v: f64| v.clamp(0.0, image.height);
        Self::new(cx(self.x_tl), cy(self.y_tl), cx(self.x_br), cy(self.y_br))
    }

    fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_tl, self.y_tl, self.x_br, self.y_br)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    fn check(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::DegenerateImage {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// One same-category neighbour: its pooled raw feature and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextRecord {
    pub feature: Vec<f64>,
    pub bbox: BBox,
    pub category: usize,
}

/// Raw inputs for one candidate region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub bbox: BBox,
    pub category: usize,
    /// `49 x d_v` subject grid.
    pub grid: Tensor,
    /// At most five neighbours, any order.
    pub context: Vec<ContextRecord>,
    pub image: ImageSize,
}

impl RegionFeatures {
    pub fn visual_dim(&self) -> usize {
        self.grid.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.image.check()?;
        if !self.bbox.is_valid() {
            return Err(Error::InvalidBox(self.bbox.to_string()));
        }
        if self.grid.shape().len() != 2 || self.grid.rows() != GRID_SLOTS {
            return Err(Error::Shape {
                op: "subject grid",
                left: vec![GRID_SLOTS, self.visual_dim()],
                right: self.grid.shape().to_vec(),
            });
        }
        if self.context.len() > CONTEXT_SLOTS {
            return Err(Error::Shape {
                op: "context",
                left: vec![CONTEXT_SLOTS],
                right: vec![self.context.len()],
            });
        }
        for c in &self.context {
            if c.feature.len() != self.visual_dim() {
                return Err(Error::Shape {
                    op: "context feature",
                    left: vec![self.visual_dim()],
                    right: vec![c.feature.len()],
                });
            }
        }
        Ok(())
    }
}

/// `[x_tl/W, y_tl/H, x_br/W, y_br/H, w*h/(W*H)]`.
pub fn encode_location(bbox: &BBox, image: ImageSize) -> Result<[f64; LOCATION_DIM]> {
    image.check()?;
    if !bbox.is_valid() {
        return Err(Error::InvalidBox(bbox.to_string()));
    }
    let (w, h) = (image.width, image.height);
    Ok([
        bbox.x_tl / w,
        bbox.y_tl / h,
        bbox.x_br / w,
        bbox.y_br / h,
        bbox.area() / (w * h),
    ])
}

/// Indices of `neighbors` by ascending centre distance to `reference`, ties by
/// index, truncated to the context size.
pub fn order_neighbors(reference: &BBox, neighbors: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| {
        reference
            .center_distance(&neighbors[a])
            .total_cmp(&reference.center_distance(&neighbors[b]))
    });
    order.truncate(CONTEXT_SLOTS);
    order
}

/// Offset encodings of up to five neighbours of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextOffsets {
    /// `5 x 5`; row `j` is the j-th nearest neighbour, zero when padded.
    pub offsets: Tensor,
    pub mask: Vec<bool>,
    /// Neighbour index (into the input list) behind each live row.
    pub order: Vec<usize>,
}

/// Row `j` is `[dx_tl/w_i, dy_tl/h_i, dx_br/w_i, dy_br/h_i, w_j*h_j/(W*H)]`
/// for the j-th nearest neighbour, where each delta is neighbour minus
/// reference.
pub fn encode_context_offsets(reference: &BBox, neighbors: &[BBox], image: ImageSize) -> Result<ContextOffsets> {
    image.check()?;
    let (w, h) = (reference.width(), reference.height());
    if !reference.is_valid() || !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidBox(format!(
            "context reference {reference} needs positive width and height"
        )));
    }
    let order = order_neighbors(reference, neighbors);
    let mut offsets = Tensor::zeros(&[CONTEXT_SLOTS, LOCATION_DIM]);
    let mut mask = vec![false; CONTEXT_SLOTS];
    for (slot, &j) in order.iter().enumerate() {
        let n = &neighbors[j];
        let row = &mut offsets.data_mut()[slot * LOCATION_DIM..(slot + 1) * LOCATION_DIM];
        row[0] = (n.x_tl - reference.x_tl) / w;
        row[1] = (n.y_tl - reference.y_tl) / h;
        row[2] = (n.x_br - reference.x_br) / w;
        row[3] = (n.y_br - reference.y_br) / h;
        row[4] = n.area() / (image.width * image.height);
        mask[slot] = true;
    }
    Ok(ContextOffsets { offsets, mask, order })
}

/// One module's projected visual set.
#[derive(Clone, Debug)]
pub struct ModuleFeatures {
    /// `N_m x d`.
    pub features: Var,
    pub mask: Vec<bool>,
    /// Masked mean of `features`; a zero constant when every slot is masked.
    pub pooled: Var,
}

impl ModuleFeatures {
    pub fn has_elements(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Clone, Debug)]
pub struct ModuleVisuals {
    pub modules: [ModuleFeatures; 3],
}

impl ModuleVisuals {
    pub fn get(&self, m: Module) -> &ModuleFeatures {
        &self.modules[m.index()]
    }
}

fn project(g: &mut Graph, params: &BoundParams, module: Module, input: Tensor) -> Result<Var> {
    let x = g.constant(input);
    let y = g.matmul(x, params.proj_w(module))?;
    g.add_row(y, params.proj_b(module))
}

fn pooled(g: &mut Graph, features: Var, mask: &[bool], dim: usize) -> Result<Var> {
    if mask.iter().any(|&m| m) {
        g.mean_rows(features, mask)
    } else {
        Ok(g.constant(Tensor::zeros(&[dim])))
    }
}

/// Builds the three module visual sets for one region.
pub fn assemble_module_visuals(g: &mut Graph, params: &BoundParams, region: &RegionFeatures) -> Result<ModuleVisuals> {
    region.validate()?;
    let d = params.config().embed_dim;
    let dv = region.visual_dim();

    let subj = project(g, params, Module::Subject, region.grid.clone())?;
    let subj_mask = vec![true; GRID_SLOTS];
    let subj_pooled = pooled(g, subj, &subj_mask, d)?;

    let boxes: Vec<BBox> = region.context.iter().map(|c| c.bbox).collect();
    let ctx = encode_context_offsets(&region.bbox, &boxes, region.image)?;
    let mut loc_input = encode_location(&region.bbox, region.image)?.to_vec();
    loc_input.extend_from_slice(ctx.offsets.data());
    let loc = project(g, params, Module::Location, Tensor::matrix(1, LOCATION_INPUT, loc_input))?;
    let loc_mask = vec![true];
    let loc_pooled = pooled(g, loc, &loc_mask, d)?;

    let width = dv + LOCATION_DIM;
    let mut rel_input = vec![0.0; CONTEXT_SLOTS * width];
    for (slot, &j) in ctx.order.iter().enumerate() {
        let row = &mut rel_input[slot * width..(slot + 1) * width];
        row[..dv].copy_from_slice(&region.context[j].feature);
        row[dv..].copy_from_slice(ctx.offsets.row(slot));
    }
    let rel = project(g, params, Module::Relationship, Tensor::matrix(CONTEXT_SLOTS, width, rel_input))?;
    let rel = g.mask_rows(rel, &ctx.mask)?;
    let rel_pooled = pooled(g, rel, &ctx.mask, d)?;

    Ok(ModuleVisuals {
        modules: [
            ModuleFeatures {
                features: subj,
                mask: subj_mask,
                pooled: subj_pooled,
            },
            ModuleFeatures {
                features: loc,
                mask: loc_mask,
                pooled: loc_pooled,
            },
            ModuleFeatures {
                features: rel,
                mask: ctx.mask,
                pooled: rel_pooled,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelConfig, ModelParams};

    const IMG: ImageSize = ImageSize {
        width: 100.0,
        height: 100.0,
    };

    #[test]
    fn location_examples() {
        let l = encode_location(&BBox::new(0.0, 0.0, 50.0, 50.0), IMG).unwrap();
        assert_eq!(l, [0.0, 0.0, 0.5, 0.5, 0.25]);
        let l = encode_location(&BBox::new(0.0, 0.0, 100.0, 100.0), IMG).unwrap();
        assert_eq!(l, [0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = encode_location(&BBox::new(10.0, 10.0, 10.0, 10.0), IMG).unwrap();
        assert_eq!(l, [0.1, 0.1, 0.1, 0.1, 0.0]);
        assert!(matches!(
            encode_location(&BBox::new(0.0, 0.0, 1.0, 1.0), ImageSize::new(0.0, 10.0)),
            Err(Error::DegenerateImage { .. })
        ));
    }

    #[test]
    fn context_offsets_examples() {
        let b = BBox::new(10.0, 20.0, 30.0, 60.0);
        let c = encode_context_offsets(&b, &[b], IMG).unwrap();
        assert_eq!(c.offsets.row(0), &[0.0, 0.0, 0.0, 0.0, 800.0 / 10000.0]);
        assert_eq!(c.mask, vec![true, false, false, false, false]);

        let c = encode_context_offsets(&b, &[], IMG).unwrap();
        assert!(c.offsets.data().iter().all(|&v| v == 0.0));
        assert!(c.mask.iter().all(|&m| !m));

        let zero = BBox::new(5.0, 5.0, 5.0, 9.0);
        assert!(matches!(
            encode_context_offsets(&zero, &[b], IMG),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn context_offsets_two_neighbours() {
        // Reference w=20, h=40. Far neighbour listed first; the near one
        // must land in row 0.
        let b = BBox::new(10.0, 20.0, 30.0, 60.0);
        let far = BBox::new(80.0, 80.0, 90.0, 100.0);
        let near = BBox::new(20.0, 20.0, 40.0, 50.0);
        let c = encode_context_offsets(&b, &[far, near], IMG).unwrap();
        assert_eq!(c.order, vec![1, 0]);
        assert_eq!(c.offsets.row(0), &[10.0 / 20.0, 0.0, 10.0 / 20.0, -10.0 / 40.0, 600.0 / 10000.0]);
        assert_eq!(c.offsets.row(1), &[70.0 / 20.0, 60.0 / 40.0, 60.0 / 20.0, 40.0 / 40.0, 200.0 / 10000.0]);
        for r in 2..5 {
            assert!(c.offsets.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(c.mask, vec![true, true, false, false, false]);
    }

    #[test]
    fn neighbour_ties_break_by_index_and_truncate() {
        let b = BBox::new(40.0, 40.0, 60.0, 60.0);
        let same = BBox::new(60.0, 40.0, 80.0, 60.0);
        let boxes = vec![same; 7];
        assert_eq!(order_neighbors(&b, &boxes), vec![0, 1, 2, 3, 4]);
    }

    fn region(context: usize, dv: usize) -> RegionFeatures {
        let grid = Tensor::matrix(GRID_SLOTS, dv, (0..GRID_SLOTS * dv).map(|i| (i % 7) as f64 * 0.1).collect());
        let context = (0..context)
            .map(|j| ContextRecord {
                feature: (0..dv).map(|k| (j + k) as f64 * 0.2 - 0.3).collect(),
                bbox: BBox::new(10.0 * j as f64, 5.0, 10.0 * j as f64 + 8.0, 20.0),
                category: 1,
            })
            .collect();
        RegionFeatures {
            bbox: BBox::new(30.0, 30.0, 50.0, 70.0),
            category: 1,
            grid,
            context,
            image: IMG,
        }
    }

    fn params(dv: usize) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                embed_dim: 4,
                hidden_dim: 3,
                visual_dim: dv,
                vocab_size: 4,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn pooled_location_equals_its_row() {
        let p = params(3);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = assemble_module_visuals(&mut g, &b, &region(2, 3)).unwrap();
        let loc = v.get(Module::Location);
        assert_eq!(g.value(loc.features).data(), g.value(loc.pooled).data());
    }

    #[test]
    fn masked_relationship_slots_are_excluded() {
        let p = params(3);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = assemble_module_visuals(&mut g, &b, &region(2, 3)).unwrap();
        let rel = v.get(Module::Relationship);
        assert_eq!(rel.mask, vec![true, true, false, false, false]);
        let f = g.value(rel.features);
        for r in 2..5 {
            assert!(f.row(r).iter().all(|&x| x == 0.0));
        }
        let pooled = g.value(rel.pooled).data();
        for k in 0..4 {
            let expected = (f.row(0)[k] + f.row(1)[k]) / 2.0;
            assert!((pooled[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_subject_rows_pool_to_any_row() {
        let p = params(2);
        let mut r = region(0, 2);
        r.grid = Tensor::matrix(GRID_SLOTS, 2, [0.4, -1.1].repeat(GRID_SLOTS));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = assemble_module_visuals(&mut g, &b, &r).unwrap();
        let s = v.get(Module::Subject);
        let row0 = g.value(s.features).row(0).to_vec();
        for (a, b) in g.value(s.pooled).data().iter().zip(&row0) {
            assert!((a - b).abs() < 1e-12);
        }
        let rel = v.get(Module::Relationship);
        assert!(!rel.has_elements());
        assert!(g.value(rel.pooled).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_dimension_mismatch_is_a_shape_error() {
        let p = params(3);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        assert!(matches!(
            assemble_module_visuals(&mut g, &b, &region(1, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut r = region(0, 2);
        r.grid = Tensor::zeros(&[48, 2]);
        assert!(r.validate().is_err());
    }
}
