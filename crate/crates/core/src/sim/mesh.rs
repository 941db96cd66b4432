//! Labelled triangle meshes and their text formats: ASCII OBJ for geometry,
//! a face-label sidecar (one class index per line) and a part→vertex
//! sidecar (`<class> <vertex> <vertex> ...` per line).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::types::{Point3, OBJECT_CLASS};

/// Vertex indices of every body part, keyed by part class.
pub type PartVertexMap = BTreeMap<u8, Vec<u32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[u32; 3]>,
    pub face_part: Vec<u8>,
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.extend(p);
        }
        b
    }

    pub fn extend(&mut self, p: &Point3) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: [0, 1, 2].map(|k| self.min[k].min(o.min[k])),
            max: [0, 1, 2].map(|k| self.max[k].max(o.max[k])),
        }
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min.map(|v| v - margin),
            max: self.max.map(|v| v + margin),
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: &Point3) -> f64 {
        (0..3)
            .map(|k| {
                let d = (self.min[k] - p[k]).max(p[k] - self.max[k]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Entry parameter of the ray `o + t d` into the box within
    /// `[0, t_max]`, if it hits.
    pub fn ray_entry(&self, o: &Point3, d: &Point3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let inv = 1.0 / d[k];
            let mut a = (self.min[k] - o[k]) * inv;
            let mut b = (self.max[k] - o[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            // NaN from 0 * inf means the ray lies in the slab boundary;
            // treat it as inside.
            if !a.is_nan() {
                t0 = t0.max(a);
            }
            if !b.is_nan() {
                t1 = t1.min(b);
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>, face_part: Vec<u8>) -> Result<Self> {
        let m = TriangleMesh {
            vertices,
            faces,
            face_part,
        };
        m.validate()?;
        Ok(m)
    }

    /// Index bounds, label count and range, finite vertices, and non-zero
    /// face areas.
    pub fn validate(&self) -> Result<()> {
        if self.face_part.len() != self.faces.len() {
            return Err(Error::invalid(format!(
                "{} face labels for {} faces",
                self.face_part.len(),
                self.faces.len()
            )));
        }
        if let Some(i) = self.vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("mesh vertex {i}")));
        }
        let nv = self.vertices.len() as u32;
        for (f, tri) in self.faces.iter().enumerate() {
            if tri.iter().any(|&i| i >= nv) {
                return Err(Error::invalid(format!("face {f} references a missing vertex")));
            }
            if self.face_area(f) <= 1e-14 {
                return Err(Error::Degenerate(format!("face {f} has zero area")));
            }
            if self.face_part[f] > OBJECT_CLASS {
                return Err(Error::invalid(format!("face {f} has label {}", self.face_part[f])));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        let u = sub(&b, &a);
        let v = sub(&c, &a);
        0.5 * norm(&cross(&u, &v))
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::of_points(&self.vertices)
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for (f, tri) in self.faces.iter().enumerate() {
            for &v in tri {
                out[v as usize].push(f as u32);
            }
        }
        out
    }

    /// Appends `other`, offsetting its vertex indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|t| t.map(|i| i + off)));
        self.face_part.extend_from_slice(&other.face_part);
    }

    pub fn write_obj<W: Write>(&self, mut w: W) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated, texture
    /// and normal indices (`a/b/c`) are ignored. Labels come from a
    /// sidecar, so every face starts as `default_part`.
    pub fn read_obj<R: BufRead>(r: R, default_part: u8) -> Result<TriangleMesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("OBJ line {}: {e}", ln + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Format(format!("OBJ line {}: vertex needs 3 coordinates", ln + 1)));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            let i: i64 = first
                                .parse()
                                .map_err(|e| Error::Format(format!("OBJ line {}: {e}", ln + 1)))?;
                            let i = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            u32::try_from(i).map_err(|_| Error::Format(format!("OBJ line {}: bad index", ln + 1)))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::Format(format!("OBJ line {}: face needs 3 vertices", ln + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let n = faces.len();
        TriangleMesh::new(vertices, faces, vec![default_part; n])
    }

    pub fn write_face_labels<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.face_part {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read_face_labels<R: BufRead>(&mut self, r: R) -> Result<()> {
        let mut labels = Vec::with_capacity(self.faces.len());
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            labels.push(
                t.parse::<u8>()
                    .map_err(|e| Error::Format(format!("face label line {}: {e}", ln + 1)))?,
            );
        }
        if labels.len() != self.faces.len() {
            return Err(Error::Format(format!(
                "{} face labels for {} faces",
                labels.len(),
                self.faces.len()
            )));
        }
        self.face_part = labels;
        self.validate()
    }
}

pub fn write_part_vertex_map<W: Write>(map: &PartVertexMap, mut w: W) -> Result<()> {
    for (part, verts) in map {
        write!(w, "{part}")?;
        for v in verts {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_part_vertex_map<R: BufRead>(r: R) -> Result<PartVertexMap> {
    let mut map = PartVertexMap::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let Some(head) = it.next() else { continue };
        let bad = |e: std::num::ParseIntError| Error::Format(format!("part map line {}: {e}", ln + 1));
        let part: u8 = head.parse().map_err(bad)?;
        let verts = it.map(|s| s.parse::<u32>().map_err(bad)).collect::<Result<Vec<_>>>()?;
        map.entry(part).or_default().extend(verts);
    }
    Ok(map)
}

pub(crate) fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalized(a: &Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> TriangleMesh {
        TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![20, 22],
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_bad_meshes() {
        assert!(TriangleMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 2]], vec![0]).is_err());
        assert!(TriangleMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[0, 1, 2]], vec![0]).is_err());
        let mut m = quad();
        m.face_part[0] = 25;
        assert!(m.validate().is_err());
    }

    #[test]
    fn obj_and_sidecars_roundtrip() {
        let m = quad();
        let mut obj = Vec::new();
        m.write_obj(&mut obj).unwrap();
        let mut labels = Vec::new();
        m.write_face_labels(&mut labels).unwrap();
        let mut back = TriangleMesh::read_obj(obj.as_slice(), 0).unwrap();
        back.read_face_labels(labels.as_slice()).unwrap();
        assert_eq!(back, m);

        let polygon = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let p = TriangleMesh::read_obj(polygon.as_bytes(), 24).unwrap();
        assert_eq!(p.faces, vec![[0, 1, 2], [0, 2, 3]]);

        let mut map = PartVertexMap::new();
        map.insert(20, vec![0, 1, 2]);
        map.insert(22, vec![3]);
        let mut buf = Vec::new();
        write_part_vertex_map(&map, &mut buf).unwrap();
        assert_eq!(read_part_vertex_map(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn aabb_ray_entry_and_distance() {
        let b = Aabb {
            min: [1.0, -1.0, -1.0],
            max: [2.0, 1.0, 1.0],
        };
        assert_eq!(b.ray_entry(&[0.0; 3], &[1.0, 0.0, 0.0], 10.0), Some(1.0));
        assert_eq!(b.ray_entry(&[0.0; 3], &[-1.0, 0.0, 0.0], 10.0), None);
        assert_eq!(b.ray_entry(&[0.0; 3], &[1.0, 0.0, 0.0], 0.5), None);
        assert_eq!(b.distance(&[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(b.distance(&[1.5, 0.0, 0.0]), 0.0);
    }
}
