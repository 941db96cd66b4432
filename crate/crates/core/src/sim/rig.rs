//! Procedural stand-in for a body model: a capsule-limbed human with the 24
//! standard part labels, plus a box object the right hand rests on.
//!
//! Body frame: x forward, y to the body's left, z up, feet on z = 0.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::contact::part_vertex_map_from_faces;
use super::mesh::{add, cross, dot, norm, normalized, scale, sub, Aabb, PartVertexMap, TriangleMesh};
use super::raycast::{Plane, Scene};
use crate::error::{Error, Result};
use crate::types::{KeypointProfile, KeypointSet, Point3, OBJECT_CLASS};

/// Joint angles in radians. Index 0 is the left side, 1 the right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pose {
    /// Arm elevation away from the torso in the frontal plane; π/2 is a
    /// horizontal T-pose arm.
    pub arm_abduction: [f64; 2],
    /// Forward swing of the upper arm.
    pub arm_flexion: [f64; 2],
    pub elbow_flexion: [f64; 2],
    /// Forward swing of the thigh.
    pub hip_flexion: [f64; 2],
    pub knee_flexion: [f64; 2],
}

impl Default for Pose {
    /// Relaxed left arm; right arm reaching forward and down.
    fn default() -> Self {
        Pose {
            arm_abduction: [0.25, 0.2],
            arm_flexion: [0.1, 0.8],
            elbow_flexion: [0.3, 0.4],
            hip_flexion: [0.0, 0.0],
            knee_flexion: [0.0, 0.0],
        }
    }
}

impl Pose {
    pub fn t_pose() -> Self {
        Pose {
            arm_abduction: [FRAC_PI_2; 2],
            arm_flexion: [0.0; 2],
            elbow_flexion: [0.0; 2],
            hip_flexion: [0.0; 2],
            knee_flexion: [0.0; 2],
        }
    }

    /// A walking pose at gait `phase` (radians); the right arm keeps its
    /// reach so the hand stays on the object.
    pub fn walking(phase: f64) -> Self {
        let swing = 0.35 * phase.sin();
        Pose {
            hip_flexion: [swing, -swing],
            knee_flexion: [0.3 * (0.5 + 0.5 * phase.cos()), 0.3 * (0.5 - 0.5 * phase.cos())],
            arm_flexion: [-0.6 * swing, 0.8],
            ..Pose::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limits: [(&str, &[f64; 2], f64, f64); 5] = [
            ("arm_abduction", &self.arm_abduction, 0.0, PI),
            ("arm_flexion", &self.arm_flexion, -PI / 3.0, PI),
            ("elbow_flexion", &self.elbow_flexion, 0.0, 2.6),
            ("hip_flexion", &self.hip_flexion, -0.6, 2.1),
            ("knee_flexion", &self.knee_flexion, 0.0, 2.6),
        ];
        for (name, v, lo, hi) in limits {
            for (side, a) in v.iter().enumerate() {
                if !a.is_finite() || *a < lo || *a > hi {
                    return Err(Error::invalid(format!(
                        "{name}[{side}] = {a} outside joint limits [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub pose: Pose,
    /// Pelvis ground position in world coordinates.
    pub position: [f64; 2],
    /// Rotation of the body frame about world z; π faces a sensor at the
    /// origin.
    pub yaw: f64,
    pub with_object: bool,
    /// Box footprint (x, y) in metres.
    pub object_footprint: [f64; 2],
    /// Vertical gap between the right hand's underside and the box top.
    pub hand_gap: f64,
    /// Capsule tessellation: points around and rings per cap.
    pub segments: usize,
    pub cap_rings: usize,
    /// Box subdivisions per edge.
    pub box_subdivisions: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            pose: Pose::default(),
            position: [7.0, 0.0],
            yaw: PI,
            with_object: true,
            object_footprint: [0.3, 0.3],
            hand_gap: 0.02,
            segments: 12,
            cap_rings: 3,
            box_subdivisions: 6,
        }
    }
}

/// Generated scene with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TestScene {
    pub scene: Scene,
    /// SMPL15 joints plus the object centre; contact flags are unset.
    pub keypoints: KeypointSet,
    pub part_vertices: PartVertexMap,
    pub profile: KeypointProfile,
}

struct Joints {
    pelvis: Point3,
    hip: [Point3; 2],
    knee: [Point3; 2],
    ankle: [Point3; 2],
    foot: [Point3; 2],
    toe: [Point3; 2],
    spine: [Point3; 3],
    neck: Point3,
    head: Point3,
    collar: [Point3; 2],
    shoulder: [Point3; 2],
    elbow: [Point3; 2],
    wrist: [Point3; 2],
    palm: [Point3; 2],
    fingertip: [Point3; 2],
}

const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.25;
const PALM: f64 = 0.08;
const FINGERS: f64 = 0.07;
const THIGH: f64 = 0.42;
const SHIN: f64 = 0.40;

fn forward_kinematics(p: &Pose) -> Joints {
    let side = [1.0, -1.0];
    let pelvis = [0.0, 0.0, 0.95];
    let hip = side.map(|s| [0.0, 0.09 * s, 0.90]);
    let mut knee = [[0.0; 3]; 2];
    let mut ankle = [[0.0; 3]; 2];
    let mut foot = [[0.0; 3]; 2];
    let mut toe = [[0.0; 3]; 2];
    let mut shoulder = [[0.0; 3]; 2];
    let mut elbow = [[0.0; 3]; 2];
    let mut wrist = [[0.0; 3]; 2];
    let mut palm = [[0.0; 3]; 2];
    let mut fingertip = [[0.0; 3]; 2];
    let collar = side.map(|s| [0.0, 0.04 * s, 1.42]);
    for i in 0..2 {
        let h = p.hip_flexion[i];
        let k = h - p.knee_flexion[i];
        knee[i] = add(&hip[i], &scale(&[h.sin(), 0.0, -h.cos()], THIGH));
        ankle[i] = add(&knee[i], &scale(&[k.sin(), 0.0, -k.cos()], SHIN));
        foot[i] = add(&ankle[i], &[0.10, 0.0, -0.03]);
        toe[i] = add(&foot[i], &[0.06, 0.0, -0.005]);

        shoulder[i] = [0.0, 0.18 * side[i], 1.42];
        let a = p.arm_abduction[i];
        let f = p.arm_flexion[i];
        let d0 = [0.0, a.sin() * side[i], -a.cos()];
        let upper = [d0[0] * f.cos() - d0[2] * f.sin(), d0[1], d0[0] * f.sin() + d0[2] * f.cos()];
        // Elbow bends toward the body's front, or upward when the upper
        // arm already points forward.
        let fwd = [1.0, 0.0, 0.0];
        let mut perp = sub(&fwd, &scale(&upper, dot(&fwd, &upper)));
        if norm(&perp) < 1e-6 {
            perp = [0.0, 0.0, 1.0];
        }
        let perp = normalized(&perp);
        let e = p.elbow_flexion[i];
        let lower = add(&scale(&upper, e.cos()), &scale(&perp, e.sin()));
        elbow[i] = add(&shoulder[i], &scale(&upper, UPPER_ARM));
        wrist[i] = add(&elbow[i], &scale(&lower, FOREARM));
        palm[i] = add(&wrist[i], &scale(&lower, PALM));
        fingertip[i] = add(&palm[i], &scale(&lower, FINGERS));
    }
    Joints {
        pelvis,
        hip,
        knee,
        ankle,
        foot,
        toe,
        spine: [[0.0, 0.0, 1.07], [0.0, 0.0, 1.19], [0.0, 0.0, 1.31]],
        neck: [0.0, 0.0, 1.50],
        head: [0.0, 0.0, 1.64],
        collar,
        shoulder,
        elbow,
        wrist,
        palm,
        fingertip,
    }
}

/// Closed capsule around segment `ab`.
pub fn capsule(a: &Point3, b: &Point3, radius: f64, part: u8, segments: usize, cap_rings: usize) -> Result<TriangleMesh> {
    let axis = sub(b, a);
    let len = norm(&axis);
    if len < 1e-6 || radius <= 0.0 || segments < 3 || cap_rings < 1 {
        return Err(Error::invalid("capsule needs positive length, radius and tessellation"));
    }
    let u = scale(&axis, 1.0 / len);
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalized(&cross(&u, &helper));
    let e2 = cross(&u, &e1);

    let mut rings: Vec<(Point3, f64)> = Vec::new();
    for i in 1..=cap_rings {
        rings.push((*a, -FRAC_PI_2 + i as f64 * FRAC_PI_2 / cap_rings as f64));
    }
    for i in 0..cap_rings {
        rings.push((*b, i as f64 * FRAC_PI_2 / cap_rings as f64));
    }
    let mut vertices = vec![sub(a, &scale(&u, radius))];
    for (c, phi) in &rings {
        for s in 0..segments {
            let th = 2.0 * PI * s as f64 / segments as f64;
            let radial = add(&scale(&e1, th.cos()), &scale(&e2, th.sin()));
            let dir = add(&scale(&radial, phi.cos()), &scale(&u, phi.sin()));
            vertices.push(add(c, &scale(&dir, radius)));
        }
    }
    vertices.push(add(b, &scale(&u, radius)));

    let seg = segments as u32;
    let ring = |r: usize, s: u32| 1 + r as u32 * seg + s % seg;
    let mut faces = Vec::new();
    for s in 0..seg {
        faces.push([0, ring(0, s + 1), ring(0, s)]);
    }
    for r in 0..rings.len() - 1 {
        for s in 0..seg {
            faces.push([ring(r, s), ring(r, s + 1), ring(r + 1, s + 1)]);
            faces.push([ring(r, s), ring(r + 1, s + 1), ring(r + 1, s)]);
        }
    }
    let top = vertices.len() as u32 - 1;
    let last = rings.len() - 1;
    for s in 0..seg {
        faces.push([top, ring(last, s), ring(last, s + 1)]);
    }
    let n = faces.len();
    TriangleMesh::new(vertices, faces, vec![part; n])
}

/// Axis-aligned box with each face split into `n × n` quads.
pub fn subdivided_box(min: Point3, max: Point3, n: usize, part: u8) -> Result<TriangleMesh> {
    if n == 0 || (0..3).any(|k| max[k] - min[k] <= 1e-9) {
        return Err(Error::invalid("box needs positive extent and subdivisions"));
    }
    let mut mesh = TriangleMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        face_part: Vec::new(),
    };
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [min[axis], max[axis]] {
            let base = mesh.vertices.len() as u32;
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = side;
                    p[u] = min[u] + (max[u] - min[u]) * i as f64 / n as f64;
                    p[v] = min[v] + (max[v] - min[v]) * j as f64 / n as f64;
                    mesh.vertices.push(p);
                }
            }
            let id = |i: usize, j: usize| base + (i * (n + 1) + j) as u32;
            for i in 0..n {
                for j in 0..n {
                    mesh.faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                    mesh.faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                    mesh.face_part.extend([part, part]);
                }
            }
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

fn to_world(p: &Point3, params: &SceneParams) -> Point3 {
    let (s, c) = params.yaw.sin_cos();
    [
        c * p[0] - s * p[1] + params.position[0],
        s * p[0] + c * p[1] + params.position[1],
        p[2],
    ]
}

/// Builds the human (and optionally the box) for `params`.
pub fn make_test_scene(params: &SceneParams) -> Result<TestScene> {
    params.pose.validate()?;
    if params.hand_gap < 0.0 || params.object_footprint.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("object footprint must be positive and hand_gap non-negative"));
    }
    let j = forward_kinematics(&params.pose);
    let (seg, cap) = (params.segments, params.cap_rings);
    let mut limbs: Vec<(Point3, Point3, f64, u8)> = vec![
        ([0.0, 0.07, 0.93], [0.0, -0.07, 0.93], 0.11, 0),
        (j.pelvis, j.spine[0], 0.12, 3),
        (j.spine[0], j.spine[1], 0.13, 6),
        (j.spine[1], j.spine[2], 0.14, 9),
        ([0.0, 0.0, 1.40], j.neck, 0.05, 12),
        ([0.0, 0.0, 1.60], [0.0, 0.0, 1.70], 0.10, 15),
    ];
    for i in 0..2 {
        let l = i as u8;
        limbs.extend([
            (j.hip[i], j.knee[i], 0.07, 1 + l),
            (j.knee[i], j.ankle[i], 0.05, 4 + l),
            (j.ankle[i], j.foot[i], 0.04, 7 + l),
            (j.foot[i], j.toe[i], 0.035, 10 + l),
            (j.collar[i], j.shoulder[i], 0.06, 13 + l),
            (j.shoulder[i], j.elbow[i], 0.045, 16 + l),
            (j.elbow[i], j.wrist[i], 0.037, 18 + l),
            (j.wrist[i], j.palm[i], 0.03, 20 + l),
            (j.palm[i], j.fingertip[i], 0.02, 22 + l),
        ]);
    }
    let mut human = TriangleMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        face_part: Vec::new(),
    };
    for (a, b, r, part) in &limbs {
        human.append(&capsule(&to_world(a, params), &to_world(b, params), *r, *part, seg, cap)?);
    }
    human.validate()?;

    let object = if params.with_object {
        let hand: Vec<Point3> = human
            .faces
            .iter()
            .zip(&human.face_part)
            .filter(|(_, &p)| p == 21 || p == 23)
            .flat_map(|(f, _)| f.map(|v| human.vertices[v as usize]))
            .collect();
        let bottom = hand.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let centre = Aabb::of_points(&hand);
        let top = bottom - params.hand_gap;
        if top < 0.05 {
            return Err(Error::invalid(format!("right hand is too low ({bottom:.3} m) to rest on the box")));
        }
        let cx = 0.5 * (centre.min[0] + centre.max[0]);
        let cy = 0.5 * (centre.min[1] + centre.max[1]);
        let [hx, hy] = params.object_footprint.map(|v| 0.5 * v);
        Some(subdivided_box(
            [cx - hx, cy - hy, 0.0],
            [cx + hx, cy + hy, top],
            params.box_subdivisions,
            OBJECT_CLASS,
        )?)
    } else {
        None
    };

    let profile = KeypointProfile::Smpl15Obj;
    let mut coords = vec![
        j.pelvis, j.hip[0], j.hip[1], j.knee[0], j.knee[1], j.ankle[0], j.ankle[1], j.neck, j.head,
        j.shoulder[0], j.shoulder[1], j.elbow[0], j.elbow[1], j.wrist[0], j.wrist[1],
    ]
    .iter()
    .map(|p| to_world(p, params))
    .collect::<Vec<_>>();
    let (obj_coord, obj_valid) = match &object {
        Some(o) => {
            let b = o.aabb();
            ([0, 1, 2].map(|k| 0.5 * (b.min[k] + b.max[k])), true)
        }
        None => (to_world(&j.pelvis, params), false),
    };
    coords.push(obj_coord);
    let mut valid = vec![true; coords.len()];
    valid[15] = obj_valid;
    let n = coords.len();
    let keypoints = KeypointSet::new(coords, valid, vec![false; n])?;
    debug_assert_eq!(n, profile.num_keypoints());

    Ok(TestScene {
        part_vertices: part_vertex_map_from_faces(&human),
        scene: Scene {
            human,
            object,
            planes: vec![Plane::ground(0.0)],
        },
        keypoints,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_is_closed_and_round() {
        let c = capsule(&[0.0; 3], &[0.0, 0.0, 1.0], 0.1, 3, 12, 3).unwrap();
        let mut edges = std::collections::HashMap::new();
        for f in &c.faces {
            for k in 0..3 {
                let (a, b) = (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]));
                *edges.entry((a, b)).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&n| n == 2));
        for v in &c.vertices {
            let z = v[2].clamp(0.0, 1.0);
            let r = ((v[0]).powi(2) + v[1].powi(2) + (v[2] - z).powi(2)).sqrt();
            assert!((r - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_limits_are_enforced() {
        let mut p = Pose::default();
        p.knee_flexion[0] = -0.5;
        assert!(make_test_scene(&SceneParams { pose: p, ..SceneParams::default() }).is_err());
    }

    #[test]
    fn labels_and_keypoints() {
        let t = make_test_scene(&SceneParams::default()).unwrap();
        assert!(t.scene.human.face_part.iter().all(|&p| p < 24));
        let parts: std::collections::BTreeSet<u8> = t.scene.human.face_part.iter().copied().collect();
        assert_eq!(parts.len(), 24);
        assert!(t.scene.object.as_ref().unwrap().face_part.iter().all(|&p| p == OBJECT_CLASS));
        assert_eq!(t.keypoints.len(), 16);
        assert!(t.keypoints.valid.iter().all(|&v| v));
        let feet_bottom = t.scene.human.vertices.iter().map(|v| v[2]).fold(f64::INFINITY, f64::min);
        assert!(feet_bottom.abs() < 0.02, "{feet_bottom}");
    }
}
