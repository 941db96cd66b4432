//! Voxel-grid pooling: cell assignment, max pooling, contact-aware
//! part-guided pooling (CPPool), unpooling and skip fusion.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::types::{PartLabelSpace, Point3, BACKGROUND_CLASS, NUM_CLASSES};

/// Assignment of fine points to coarse grid cells, kept by the encoder so the
/// decoder can unpool without recomputing neighbourhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMapping {
    cell_of_point: Vec<usize>,
    points_of_cell: Vec<Vec<usize>>,
    cell_centroids: Vec<Point3>,
}

impl PoolMapping {
    /// Builds a mapping from a dense cell index per point. Centroids are the
    /// means of member coordinates.
    pub fn from_assignment(cell_of_point: Vec<usize>, points: &[Point3]) -> Result<Self> {
        if cell_of_point.len() != points.len() {
            return Err(Error::shape(
                "pool mapping",
                format!("{} assignments for {} points", cell_of_point.len(), points.len()),
            ));
        }
        let ncells = cell_of_point.iter().map(|&c| c + 1).max().unwrap_or(0);
        let mut points_of_cell = vec![Vec::new(); ncells];
        for (i, &c) in cell_of_point.iter().enumerate() {
            points_of_cell[c].push(i);
        }
        if let Some(j) = points_of_cell.iter().position(|m| m.is_empty()) {
            return Err(Error::Degenerate(format!("cell {j} has no points")));
        }
        let cell_centroids = points_of_cell
            .iter()
            .map(|members| {
                let mut c = [0.0; 3];
                for &i in members {
                    for k in 0..3 {
                        c[k] += points[i][k];
                    }
                }
                c.map(|v| v / members.len() as f64)
            })
            .collect();
        Ok(PoolMapping {
            cell_of_point,
            points_of_cell,
            cell_centroids,
        })
    }

    pub fn cell_of_point(&self) -> &[usize] {
        &self.cell_of_point
    }

    pub fn points_of_cell(&self) -> &[Vec<usize>] {
        &self.points_of_cell
    }

    pub fn cell_centroids(&self) -> &[Point3] {
        &self.cell_centroids
    }

    pub fn num_points(&self) -> usize {
        self.cell_of_point.len()
    }

    pub fn num_cells(&self) -> usize {
        self.points_of_cell.len()
    }

    /// Renumbers cells so that new cell `j` is old cell `order[j]`.
    pub fn reorder_cells(&self, order: &[usize]) -> Result<PoolMapping> {
        let inv = crate::serialize::invert_permutation(order)?;
        if order.len() != self.num_cells() {
            return Err(Error::shape("reorder_cells", "order length differs from cell count"));
        }
        Ok(PoolMapping {
            cell_of_point: self.cell_of_point.iter().map(|&c| inv[c]).collect(),
            points_of_cell: order.iter().map(|&j| self.points_of_cell[j].clone()).collect(),
            cell_centroids: order.iter().map(|&j| self.cell_centroids[j]).collect(),
        })
    }

    /// Checks that both directions of the mapping agree.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_points()];
        for (j, members) in self.points_of_cell.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Degenerate(format!("cell {j} has no points")));
            }
            for &i in members {
                if i >= seen.len() || seen[i] || self.cell_of_point[i] != j {
                    return Err(Error::invalid(format!("point {i} inconsistent in cell {j}")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("some point belongs to no cell"));
        }
        Ok(())
    }
}

/// Assigns each point to the voxel `floor(coord / grid_size)`; voxels get
/// dense ids in order of first appearance.
pub fn assign_cells(points: &[Point3], grid_size: f64) -> Result<PoolMapping> {
    if !(grid_size > 0.0) {
        return Err(Error::invalid(format!("grid size {grid_size} must be > 0")));
    }
    let mut ids: HashMap<[i64; 3], usize> = HashMap::new();
    let mut cell_of_point = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        let key = p.map(|v| (v / grid_size).floor() as i64);
        let next = ids.len();
        cell_of_point.push(*ids.entry(key).or_insert(next));
    }
    PoolMapping::from_assignment(cell_of_point, points)
}

/// Channel-wise maximum over each cell's members.
pub fn max_pool(g: &mut Graph, feats: Var, m: &PoolMapping) -> Result<Var> {
    if g.shape(feats).first() != Some(&m.num_points()) {
        return Err(Error::shape(
            "max_pool",
            format!("{:?} features for {} points", g.shape(feats), m.num_points()),
        ));
    }
    g.segment_max(feats, &m.cell_of_point, m.num_cells())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CPPoolConfig {
    pub temperature: f64,
    pub lambda_part: f64,
    pub lambda_contact: f64,
    pub part_weights: Vec<f64>,
    pub log_epsilon: f64,
}

/// 4.0 for hand and foot classes, 1.0 for other body parts and the object,
/// 0.5 for background.
pub fn default_part_weights() -> Vec<f64> {
    (0..NUM_CLASSES as u8)
        .map(|c| {
            if c == BACKGROUND_CLASS {
                0.5
            } else if PartLabelSpace::is_interacting(c) {
                4.0
            } else {
                1.0
            }
        })
        .collect()
}

impl Default for CPPoolConfig {
    fn default() -> Self {
        CPPoolConfig {
            temperature: 1.0,
            lambda_part: 1.0,
            lambda_contact: 1.0,
            part_weights: default_part_weights(),
            log_epsilon: 1e-8,
        }
    }
}

impl CPPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("CPPool temperature must be > 0"));
        }
        if self.part_weights.len() != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "part_weights needs {NUM_CLASSES} entries, got {}",
                self.part_weights.len()
            )));
        }
        if self.part_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("part_weights must be positive"));
        }
        if !(self.log_epsilon > 0.0) {
            return Err(Error::invalid("log_epsilon must be > 0"));
        }
        Ok(())
    }
}

/// The three point-wise predictors used inside CPPool.
#[derive(Clone, Debug)]
pub struct CppoolHeads {
    pub part: Mlp,
    pub contact: Mlp,
    pub importance: Mlp,
}

impl CppoolHeads {
    /// Heads for features of width `width`. The importance head sees point,
    /// global and keypoint features concatenated along channels.
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(CppoolHeads {
            part: Mlp::new(store, &format!("{name}.part"), width, width, NUM_CLASSES, rng)?,
            contact: Mlp::new(store, &format!("{name}.contact"), width, width, 1, rng)?,
            importance: Mlp::new(store, &format!("{name}.importance"), 3 * width, width, 1, rng)?,
        })
    }
}

/// Per-point pooling signals. Every field is an `[N, 1]` column except
/// `part_logits` (`[N, 26]`).
#[derive(Clone, Copy, Debug)]
pub struct PoolLogits {
    pub part_logits: Var,
    pub contact_logits: Var,
    pub importance: Var,
    pub part_score: Var,
    pub contact_score: Var,
    pub combined: Var,
}

fn ensure_finite(g: &Graph, v: Var, head: &str) -> Result<()> {
    if !g.value(v).is_finite() {
        return Err(Error::NonFinite(format!("{head} head output")));
    }
    Ok(())
}

/// `combined = imp / T + λ_part·log(max(s_part, ε)) + λ_contact·log(max(s_contact, ε))`
/// with `s_part = softmax(part(F))·w_part` and `s_contact = sigmoid(contact(F))`.
pub fn cppool_logits(
    g: &mut Graph,
    point_feats: Var,
    global_feat: Var,
    keypoint_feat: Var,
    heads: &CppoolHeads,
    cfg: &CPPoolConfig,
) -> Result<PoolLogits> {
    cfg.validate()?;
    let n = g.shape(point_feats)[0];
    let part_logits = heads.part.forward(g, point_feats)?;
    ensure_finite(g, part_logits, "part")?;
    let contact_logits = heads.contact.forward(g, point_feats)?;
    ensure_finite(g, contact_logits, "contact")?;

    let probs = g.softmax(part_logits, 1)?;
    let w = g.constant(Tensor::new(vec![NUM_CLASSES, 1], cfg.part_weights.clone())?);
    let part_score = g.matmul(probs, w)?;
    let contact_score = g.sigmoid(contact_logits);

    let rows = vec![0; n];
    let gb = g.gather(global_feat, &rows)?;
    let kb = g.gather(keypoint_feat, &rows)?;
    let fused = g.concat(&[point_feats, gb, kb], 1)?;
    let importance = heads.importance.forward(g, fused)?;
    ensure_finite(g, importance, "importance")?;

    let imp_t = g.scale(importance, 1.0 / cfg.temperature);
    let sp = g.clamp_min(part_score, cfg.log_epsilon);
    let lp = g.log(sp);
    let lp = g.scale(lp, cfg.lambda_part);
    let sc = g.clamp_min(contact_score, cfg.log_epsilon);
    let lc = g.log(sc);
    let lc = g.scale(lc, cfg.lambda_contact);
    let combined = g.add(imp_t, lp)?;
    let combined = g.add(combined, lc)?;
    Ok(PoolLogits {
        part_logits,
        contact_logits,
        importance,
        part_score,
        contact_score,
        combined,
    })
}

/// Softmax of the combined logits within each cell.
pub fn cppool_weights(g: &mut Graph, combined: Var, m: &PoolMapping) -> Result<Var> {
    if g.value(combined).len() != m.num_points() {
        return Err(Error::shape(
            "cppool_weights",
            format!("{:?} logits for {} points", g.shape(combined), m.num_points()),
        ));
    }
    if m.points_of_cell.iter().any(|c| c.is_empty()) {
        return Err(Error::Degenerate("empty pooling cell".into()));
    }
    g.segment_softmax(combined, &m.cell_of_point, m.num_cells())
}

/// `H_j = Σ_{n ∈ cell(j)} w_n · proj(F_n)`.
pub fn cppool_aggregate<P>(
    g: &mut Graph,
    feats: Var,
    weights: Var,
    m: &PoolMapping,
    proj: P,
) -> Result<Var>
where
    P: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let projected = proj(g, feats)?;
    let s = g.shape(projected);
    if s.len() != 2 || s[0] != m.num_points() || g.value(weights).len() != m.num_points() {
        return Err(Error::shape(
            "cppool_aggregate",
            format!(
                "features {:?}, weights {:?}, {} points",
                s,
                g.shape(weights),
                m.num_points()
            ),
        ));
    }
    let c = s[1];
    let w = g.reshape(weights, &[m.num_points(), 1])?;
    let w = g.expand_cols(w, c)?;
    let weighted = g.mul(projected, w)?;
    g.segment_sum(weighted, &m.cell_of_point, m.num_cells())
}

/// Copies each cell's feature back to its member points, restoring the fine
/// row count and order.
pub fn unpool(g: &mut Graph, coarse: Var, m: &PoolMapping) -> Result<Var> {
    if g.shape(coarse).first() != Some(&m.num_cells()) {
        return Err(Error::shape(
            "unpool",
            format!("{:?} rows for {} cells", g.shape(coarse), m.num_cells()),
        ));
    }
    g.gather(coarse, &m.cell_of_point)
}

/// Feature fusion of two already projected branches: elementwise sum.
pub fn skip_fuse(g: &mut Graph, decoder: Var, encoder: Var) -> Result<Var> {
    if g.shape(decoder) != g.shape(encoder) {
        return Err(Error::shape(
            "skip_fuse",
            format!("{:?} vs {:?}", g.shape(decoder), g.shape(encoder)),
        ));
    }
    g.add(decoder, encoder)
}

/// Labels for pooled points: majority part class (ties to the smaller
/// class index) and contact if any member is in contact.
pub fn pool_labels(part: &[u8], contact: &[bool], m: &PoolMapping) -> Result<(Vec<u8>, Vec<bool>)> {
    if part.len() != m.num_points() || contact.len() != m.num_points() {
        return Err(Error::shape(
            "pool_labels",
            format!("{} labels for {} points", part.len(), m.num_points()),
        ));
    }
    let mut parts = Vec::with_capacity(m.num_cells());
    let mut contacts = Vec::with_capacity(m.num_cells());
    for members in &m.points_of_cell {
        let mut counts = [0usize; NUM_CLASSES];
        for &i in members {
            counts[part[i] as usize] += 1;
        }
        let best = (0..NUM_CLASSES)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        parts.push(best as u8);
        contacts.push(members.iter().any(|&i| contact[i]));
    }
    Ok((parts, contacts))
}
