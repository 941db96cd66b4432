//! Ray casting against human/object meshes and infinite planes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mesh::{add, cross, dot, norm, scale, sub, Aabb, TriangleMesh};
use crate::error::{Error, Result};
use crate::types::{FaceId, LabeledPointCloud, MeshKind, Point3, PointCloud, BACKGROUND_CLASS, OBJECT_CLASS};

/// Parallel-ray rejection threshold and minimum hit distance.
pub const RAY_EPS: f64 = 1e-12;

/// Faces per culling bucket.
const CHUNK: usize = 32;

/// Inclusive angular sweep in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl AngleRange {
    pub fn degrees(min: f64, max: f64, step: f64) -> Self {
        AngleRange {
            min: min.to_radians(),
            max: max.to_radians(),
            step: step.to_radians(),
        }
    }

    pub fn count(&self) -> usize {
        ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn angle(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid(format!("{what} step must be > 0")));
        }
        if !(self.max >= self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::invalid(format!("{what} range is empty")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub origin: Point3,
    pub azimuth: AngleRange,
    pub elevation: AngleRange,
    pub max_range: f64,
    /// Standard deviation of Gaussian range noise along each ray.
    pub range_noise_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            origin: [0.0, 0.0, 1.0],
            azimuth: AngleRange::degrees(-60.0, 60.0, 0.2),
            elevation: AngleRange::degrees(-25.0, 5.0, 0.33),
            max_range: 30.0,
            range_noise_sigma: 0.0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        self.azimuth.validate("azimuth")?;
        self.elevation.validate("elevation")?;
        if !(self.max_range > 0.0) {
            return Err(Error::invalid("max_range must be > 0"));
        }
        if !(self.range_noise_sigma >= 0.0) {
            return Err(Error::invalid("range_noise_sigma must be >= 0"));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sensor origin".into()));
        }
        Ok(())
    }

    pub fn num_rays(&self) -> usize {
        self.azimuth.count() * self.elevation.count()
    }

    /// Unit direction of ray `i`; azimuth-major order.
    pub fn direction(&self, i: usize) -> Point3 {
        let ne = self.elevation.count();
        let az = self.azimuth.angle(i / ne);
        let el = self.elevation.angle(i % ne);
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Point3,
    pub normal: Point3,
}

impl Plane {
    pub fn ground(z: f64) -> Self {
        Plane {
            point: [0.0, 0.0, z],
            normal: [0.0, 0.0, 1.0],
        }
    }

    pub fn intersect(&self, o: &Point3, d: &Point3, t_max: f64) -> Option<f64> {
        let denom = dot(&self.normal, d);
        if denom.abs() < RAY_EPS {
            return None;
        }
        let t = dot(&self.normal, &sub(&self.point, o)) / denom;
        (t > RAY_EPS && t <= t_max).then_some(t)
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        dot(&self.normal, &sub(p, &self.point))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub human: TriangleMesh,
    pub object: Option<TriangleMesh>,
    pub planes: Vec<Plane>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.human.validate()?;
        if let Some(o) = &self.object {
            o.validate()?;
        }
        for (i, p) in self.planes.iter().enumerate() {
            if (norm(&p.normal) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("plane {i} normal is not unit length")));
            }
        }
        Ok(())
    }

    pub fn mesh(&self, kind: MeshKind) -> Option<&TriangleMesh> {
        match kind {
            MeshKind::Human => Some(&self.human),
            MeshKind::Object => self.object.as_ref(),
        }
    }
}

/// What a ray struck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Face(FaceId),
    Plane(usize),
}

impl Primitive {
    /// Total order used to break exact distance ties: human faces, then
    /// object faces, then planes, each by index.
    pub fn rank(&self) -> (u8, usize) {
        match *self {
            Primitive::Face(FaceId { mesh: MeshKind::Human, index }) => (0, index as usize),
            Primitive::Face(FaceId { mesh: MeshKind::Object, index }) => (1, index as usize),
            Primitive::Plane(i) => (2, i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: Primitive,
}

impl Hit {
    fn closer_than(&self, other: &Option<Hit>) -> bool {
        match other {
            None => true,
            Some(b) => self.t < b.t || (self.t == b.t && self.primitive.rank() < b.primitive.rank()),
        }
    }
}

/// Möller–Trumbore intersection. Returns `(t, u, v)` with the hit at
/// `(1-u-v) a + u b + v c`.
pub fn ray_triangle(o: &Point3, d: &Point3, tri: &[Point3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = sub(&tri[1], &tri[0]);
    let e2 = sub(&tri[2], &tri[0]);
    let p = cross(d, &e2);
    let det = dot(&e1, &p);
    if det.abs() < RAY_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(o, &tri[0]);
    let u = dot(&s, &p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(&s, &e1);
    let v = dot(d, &q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(&e2, &q) * inv;
    (t > RAY_EPS).then_some((t, u, v))
}

struct Chunk {
    mesh: MeshKind,
    faces: Vec<u32>,
    bounds: Aabb,
}

/// Nearest-hit queries over an immutable scene. Faces are bucketed by part
/// label and split into small runs, each with a bounding box for culling.
pub struct Tracer<'s> {
    scene: &'s Scene,
    chunks: Vec<Chunk>,
}

impl<'s> Tracer<'s> {
    pub fn new(scene: &'s Scene) -> Self {
        let mut chunks = Vec::new();
        for kind in [MeshKind::Human, MeshKind::Object] {
            let Some(mesh) = scene.mesh(kind) else { continue };
            let mut by_part: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
            for (f, &p) in mesh.face_part.iter().enumerate() {
                by_part.entry(p).or_default().push(f as u32);
            }
            for faces in by_part.values() {
                for run in faces.chunks(CHUNK) {
                    let mut bounds = Aabb::empty();
                    for &f in run {
                        for v in mesh.triangle(f as usize) {
                            bounds.extend(&v);
                        }
                    }
                    chunks.push(Chunk {
                        mesh: kind,
                        faces: run.to_vec(),
                        bounds,
                    });
                }
            }
        }
        Tracer { scene, chunks }
    }

    pub fn first_hit(&self, o: &Point3, d: &Point3, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, plane) in self.scene.planes.iter().enumerate() {
            if let Some(t) = plane.intersect(o, d, t_max) {
                let h = Hit {
                    t,
                    primitive: Primitive::Plane(i),
                };
                if h.closer_than(&best) {
                    best = Some(h);
                }
            }
        }
        let mut order: Vec<(f64, usize)> = self
            .chunks
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.bounds.ray_entry(o, d, t_max).map(|t| (t, i)))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (entry, ci) in order {
            if best.is_some_and(|b| entry > b.t) {
                break;
            }
            let chunk = &self.chunks[ci];
            let mesh = self.scene.mesh(chunk.mesh).expect("chunk mesh exists");
            for &f in &chunk.faces {
                if let Some((t, _, _)) = ray_triangle(o, d, &mesh.triangle(f as usize)) {
                    if t > t_max {
                        continue;
                    }
                    let h = Hit {
                        t,
                        primitive: Primitive::Face(FaceId {
                            mesh: chunk.mesh,
                            index: f,
                        }),
                    };
                    if h.closer_than(&best) {
                        best = Some(h);
                    }
                }
            }
        }
        best
    }
}

/// A returned point together with the ray that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayReturn {
    pub ray: usize,
    pub hit: Hit,
    pub point: Point3,
}

/// Traces every sensor ray, in ray order. Range noise, when enabled, is
/// drawn from a per-ray stream derived from `seed`.
pub fn trace(scene: &Scene, sensor: &SensorModel, seed: u64) -> Result<Vec<RayReturn>> {
    scene.validate()?;
    sensor.validate()?;
    let tracer = Tracer::new(scene);
    let noise = (sensor.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, sensor.range_noise_sigma).expect("sigma validated"));
    let out = (0..sensor.num_rays())
        .into_par_iter()
        .filter_map(|ray| {
            let d = sensor.direction(ray);
            let hit = tracer.first_hit(&sensor.origin, &d, sensor.max_range)?;
            let mut range = hit.t;
            if let Some(n) = &noise {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ray as u64);
                range += n.sample(&mut rng);
            }
            Some(RayReturn {
                ray,
                hit,
                point: add(&sensor.origin, &scale(&d, range)),
            })
        })
        .collect();
    Ok(out)
}

/// Simulated scan with part labels and face provenance; contact is left
/// false for a later labelling pass.
pub fn cast_rays(scene: &Scene, sensor: &SensorModel, seed: u64) -> Result<LabeledPointCloud> {
    let returns = trace(scene, sensor, seed)?;
    let mut coords = Vec::with_capacity(returns.len());
    let mut part = Vec::with_capacity(returns.len());
    let mut face_id = Vec::with_capacity(returns.len());
    for r in &returns {
        coords.push(r.point);
        match r.hit.primitive {
            Primitive::Face(id) => {
                part.push(match id.mesh {
                    MeshKind::Human => scene.human.face_part[id.index as usize],
                    MeshKind::Object => OBJECT_CLASS,
                });
                face_id.push(Some(id));
            }
            Primitive::Plane(_) => {
                part.push(BACKGROUND_CLASS);
                face_id.push(None);
            }
        }
    }
    let n = coords.len();
    Ok(LabeledPointCloud {
        cloud: PointCloud::new(coords)?,
        part,
        contact: vec![false; n],
        face_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facing_triangle(x: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![[x, -1.0, 0.0], [x, 1.0, 0.0], [x, 0.0, 2.0]],
            vec![[0, 1, 2]],
            vec![3],
        )
        .unwrap()
    }

    #[test]
    fn hit_through_centroid_matches_plane_solution() {
        let tri = facing_triangle(5.0).triangle(0);
        let c = [5.0, 0.0, 2.0 / 3.0];
        let o = [0.0, 0.0, 1.0];
        let d = super::super::mesh::normalized(&sub(&c, &o));
        let (t, u, v) = ray_triangle(&o, &d, &tri).unwrap();
        // Plane x = 5: t = 5 / d_x.
        assert!((t - 5.0 / d[0]).abs() < 1e-12);
        assert!((u - 1.0 / 3.0).abs() < 1e-12 && (v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn misses_and_nearest_plane() {
        let scene = Scene {
            human: facing_triangle(5.0),
            object: None,
            planes: vec![Plane {
                point: [3.0, 0.0, 0.0],
                normal: [-1.0, 0.0, 0.0],
            }],
        };
        let tracer = Tracer::new(&scene);
        let o = [0.0, 0.0, 0.5];
        let h = tracer.first_hit(&o, &[1.0, 0.0, 0.0], 30.0).unwrap();
        assert_eq!(h.primitive, Primitive::Plane(0));
        assert!((h.t - 3.0).abs() < 1e-12);
        assert!(tracer.first_hit(&o, &[-1.0, 0.0, 0.0], 30.0).is_none());

        let no_wall = Scene {
            planes: vec![],
            ..scene
        };
        let tracer = Tracer::new(&no_wall);
        let h = tracer.first_hit(&o, &[1.0, 0.0, 0.0], 30.0).unwrap();
        assert_eq!(h.primitive, Primitive::Face(FaceId { mesh: MeshKind::Human, index: 0 }));
        assert!(tracer.first_hit(&o, &[1.0, 0.0, 0.0], 4.0).is_none());
    }

    #[test]
    fn sensor_grid_and_labels() {
        let s = SensorModel::default();
        assert_eq!(s.azimuth.count(), 601);
        assert_eq!(s.elevation.count(), 91);
        let d = s.direction(0);
        assert!((norm(&d) - 1.0).abs() < 1e-12);

        let scene = Scene {
            human: facing_triangle(6.0),
            object: None,
            planes: vec![Plane::ground(0.0)],
        };
        let cloud = cast_rays(&scene, &s, 0).unwrap();
        assert!(cloud.part.contains(&3) && cloud.part.contains(&BACKGROUND_CLASS));
        for i in 0..cloud.len() {
            assert_eq!(cloud.face_id[i].is_some(), cloud.part[i] == 3);
        }
        assert_eq!(cloud, cast_rays(&scene, &s, 0).unwrap());
    }

    #[test]
    fn range_noise_is_seeded() {
        let scene = Scene {
            human: facing_triangle(6.0),
            object: None,
            planes: vec![],
        };
        let s = SensorModel {
            range_noise_sigma: 0.01,
            azimuth: AngleRange::degrees(-2.0, 2.0, 0.5),
            elevation: AngleRange::degrees(-2.0, 2.0, 0.5),
            ..SensorModel::default()
        };
        let a = cast_rays(&scene, &s, 1).unwrap();
        assert_eq!(a, cast_rays(&scene, &s, 1).unwrap());
        assert_ne!(a, cast_rays(&scene, &s, 2).unwrap());
        assert!(a.cloud.coords().iter().any(|p| (p[0] - 6.0).abs() > 1e-6));
    }
}
