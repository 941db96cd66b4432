//! Human–object contact labels at vertex, face, point and keypoint level.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mesh::{add, dot, scale, sub, Aabb, PartVertexMap, TriangleMesh};
use crate::error::{Error, Result};
use crate::types::{KeypointProfile, LabeledPointCloud, MeshKind, Point3, BACKGROUND_CLASS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactConfig {
    /// A vertex is in contact when its distance to the other surface is
    /// strictly below this many metres.
    pub threshold: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig { threshold: 0.05 }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::invalid("contact threshold must be > 0"));
        }
        Ok(())
    }
}

/// Closest point to `p` on triangle `abc` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return add(a, &scale(&ab, d1 / (d1 - d3)));
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return add(a, &scale(&ac, d2 / (d2 - d6)));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let bc = sub(c, b);
        return add(b, &scale(&bc, (d4 - d3) / ((d4 - d3) + (d5 - d6))));
    }
    let denom = 1.0 / (va + vb + vc);
    add(a, &add(&scale(&ab, vb * denom), &scale(&ac, vc * denom)))
}

pub fn point_triangle_distance_sq(p: &Point3, tri: &[Point3; 3]) -> f64 {
    let q = closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]);
    let d = sub(p, &q);
    dot(&d, &d)
}

/// Surface distance queries with box culling over runs of faces.
pub struct SurfaceIndex<'m> {
    mesh: &'m TriangleMesh,
    chunks: Vec<(Aabb, std::ops::Range<usize>)>,
}

impl<'m> SurfaceIndex<'m> {
    pub fn new(mesh: &'m TriangleMesh) -> Self {
        let chunks = (0..mesh.faces.len())
            .step_by(32)
            .map(|s| {
                let r = s..(s + 32).min(mesh.faces.len());
                let mut b = Aabb::empty();
                for f in r.clone() {
                    for v in mesh.triangle(f) {
                        b.extend(&v);
                    }
                }
                (b, r)
            })
            .collect();
        SurfaceIndex { mesh, chunks }
    }

    /// Squared distance from `p` to the nearest face.
    pub fn distance_sq(&self, p: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        for (b, r) in &self.chunks {
            let lb = b.distance(p);
            if lb * lb > best {
                continue;
            }
            for f in r.clone() {
                best = best.min(point_triangle_distance_sq(p, &self.mesh.triangle(f)));
            }
        }
        best
    }

    /// Whether some face lies strictly closer than `threshold`.
    pub fn within(&self, p: &Point3, threshold: f64) -> bool {
        let t2 = threshold * threshold;
        self.chunks.iter().any(|(b, r)| {
            b.distance(p) < threshold && r.clone().any(|f| point_triangle_distance_sq(p, &self.mesh.triangle(f)) < t2)
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactLabels {
    pub human_vertex: Vec<bool>,
    pub object_vertex: Vec<bool>,
    pub human_face: Vec<bool>,
    pub object_face: Vec<bool>,
}

impl ContactLabels {
    /// Labels for a scene without an object: nothing is in contact.
    pub fn none(human: &TriangleMesh) -> Self {
        ContactLabels {
            human_vertex: vec![false; human.vertices.len()],
            object_vertex: Vec::new(),
            human_face: vec![false; human.faces.len()],
            object_face: Vec::new(),
        }
    }

    pub fn face(&self, mesh: MeshKind) -> &[bool] {
        match mesh {
            MeshKind::Human => &self.human_face,
            MeshKind::Object => &self.object_face,
        }
    }
}

/// A face is flagged when any of its vertices is.
pub fn face_flags(mesh: &TriangleMesh, vertex: &[bool]) -> Vec<bool> {
    mesh.faces.iter().map(|f| f.iter().any(|&v| vertex[v as usize])).collect()
}

/// Flags each mesh's vertices by distance to the other mesh's surface.
pub fn contact_labels(human: &TriangleMesh, object: &TriangleMesh, cfg: &ContactConfig) -> Result<ContactLabels> {
    cfg.validate()?;
    let near = |src: &TriangleMesh, dst: &TriangleMesh| -> Vec<bool> {
        let index = SurfaceIndex::new(dst);
        src.vertices.par_iter().map(|v| index.within(v, cfg.threshold)).collect()
    };
    let human_vertex = near(human, object);
    let object_vertex = near(object, human);
    Ok(ContactLabels {
        human_face: face_flags(human, &human_vertex),
        object_face: face_flags(object, &object_vertex),
        human_vertex,
        object_vertex,
    })
}

/// Copies face contact flags onto the points sampled from those faces.
pub fn propagate_contact(points: &LabeledPointCloud, labels: &ContactLabels) -> Result<LabeledPointCloud> {
    let mut out = points.clone();
    for i in 0..points.len() {
        if points.part[i] == BACKGROUND_CLASS {
            out.contact[i] = false;
            continue;
        }
        let id = points.face_id[i].ok_or_else(|| Error::Missing(format!("face provenance for point {i}")))?;
        out.contact[i] = *labels
            .face(id.mesh)
            .get(id.index as usize)
            .ok_or_else(|| Error::invalid(format!("point {i} references face {} outside the mesh", id.index)))?;
    }
    Ok(out)
}

/// Per-keypoint contact: any flagged vertex among the keypoint's parts, or
/// any flagged object vertex for the object keypoint.
pub fn keypoint_contact(labels: &ContactLabels, parts: &PartVertexMap, profile: KeypointProfile) -> Vec<bool> {
    let obj = profile.object_index();
    (0..profile.num_keypoints())
        .map(|k| {
            if Some(k) == obj {
                return labels.object_vertex.iter().any(|&f| f);
            }
            let verts: Vec<u32> = profile
                .keypoint_parts(k)
                .iter()
                .filter_map(|p| parts.get(p))
                .flatten()
                .copied()
                .collect();
            if verts.is_empty() {
                log::warn!("keypoint {} has no associated vertices", profile.names()[k]);
                return false;
            }
            verts.iter().any(|&v| labels.human_vertex.get(v as usize).copied().unwrap_or(false))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroVelocityConfig {
    /// Metres per second.
    pub threshold: f64,
    /// Frames per window, at least 2.
    pub window: usize,
}

impl Default for ZeroVelocityConfig {
    fn default() -> Self {
        ZeroVelocityConfig {
            threshold: 0.15,
            window: 3,
        }
    }
}

/// Contact wherever a keypoint's mean speed over a `window`-frame span is
/// below the threshold. The span is centred on the frame and shifted inward
/// at the sequence ends so it always covers `window` frames.
pub fn zero_velocity_contact(traj: &[Vec<Point3>], dt: f64, cfg: &ZeroVelocityConfig) -> Result<Vec<Vec<bool>>> {
    let t = traj.len();
    if t < 2 {
        return Err(Error::invalid("zero-velocity contact needs at least 2 frames"));
    }
    if cfg.window < 2 {
        return Err(Error::invalid("window must cover at least 2 frames"));
    }
    if cfg.window > t {
        return Err(Error::invalid(format!("window {} exceeds sequence length {t}", cfg.window)));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be > 0"));
    }
    let nk = traj[0].len();
    if traj.iter().any(|f| f.len() != nk) {
        return Err(Error::shape("zero_velocity_contact", "frames disagree on keypoint count"));
    }
    let speed: Vec<Vec<f64>> = traj
        .windows(2)
        .map(|w| (0..nk).map(|k| crate::types::distance(&w[0][k], &w[1][k]) / dt).collect())
        .collect();
    let w = cfg.window;
    Ok((0..t)
        .map(|f| {
            let hi = (f.saturating_sub((w - 1) / 2) + w - 1).min(t - 1);
            let lo = hi + 1 - w;
            (0..nk)
                .map(|k| {
                    let mean = (lo..hi).map(|i| speed[i][k]).sum::<f64>() / (w - 1) as f64;
                    mean < cfg.threshold
                })
                .collect()
        })
        .collect())
}

/// Vertex indices per part, from a mesh whose faces carry part labels.
/// A vertex belongs to every part of its incident faces.
pub fn part_vertex_map_from_faces(mesh: &TriangleMesh) -> PartVertexMap {
    let mut sets: BTreeMap<u8, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for (f, tri) in mesh.faces.iter().enumerate() {
        sets.entry(mesh.face_part[f]).or_default().extend(tri.iter().copied());
    }
    sets.into_iter().map(|(p, s)| (p, s.into_iter().collect())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floor_tri() -> TriangleMesh {
        TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            vec![24],
        )
        .unwrap()
    }

    #[test]
    fn closest_point_regions() {
        let t = floor_tri().triangle(0);
        let d = |p: Point3| point_triangle_distance_sq(&p, &t).sqrt();
        assert!((d([0.25, 0.25, 0.3]) - 0.3).abs() < 1e-12);
        assert!((d([-1.0, -1.0, 0.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert!((d([0.5, -2.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((d([1.0, 1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((d([3.0, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn propagation_requires_provenance() {
        use crate::types::{FaceId, PointCloud};
        let labels = ContactLabels {
            human_vertex: vec![true; 3],
            object_vertex: vec![],
            human_face: vec![true],
            object_face: vec![],
        };
        let mut pc = LabeledPointCloud::unlabeled(PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap());
        pc.part[0] = 20;
        assert!(propagate_contact(&pc, &labels).is_err());
        pc.face_id[0] = Some(FaceId {
            mesh: MeshKind::Human,
            index: 0,
        });
        let out = propagate_contact(&pc, &labels).unwrap();
        assert_eq!(out.contact, vec![true, false]);
    }

    #[test]
    fn zero_velocity_windows() {
        let still: Vec<Vec<Point3>> = vec![vec![[1.0, 2.0, 0.0]]; 5];
        let c = zero_velocity_contact(&still, 0.1, &ZeroVelocityConfig::default()).unwrap();
        assert!(c.iter().all(|f| f[0]));
        let moving: Vec<Vec<Point3>> = (0..6).map(|i| vec![[0.1 * i as f64, 0.0, 0.0]]).collect();
        let cfg = ZeroVelocityConfig {
            threshold: 0.1,
            window: 3,
        };
        let c = zero_velocity_contact(&moving, 0.1, &cfg).unwrap();
        assert!(c.iter().all(|f| !f[0]));
        assert!(zero_velocity_contact(&moving[..2], 0.1, &cfg).is_err());
        assert!(zero_velocity_contact(&moving[..1], 0.1, &ZeroVelocityConfig { window: 2, ..cfg }).is_err());
    }
}
