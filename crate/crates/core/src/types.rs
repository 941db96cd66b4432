//! Domain types shared across the pipeline: clouds, labels, keypoints,
//! skeletons and grid settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub const NUM_BODY_PARTS: usize = 24;
pub const OBJECT_CLASS: u8 = 24;
pub const BACKGROUND_CLASS: u8 = 25;
pub const NUM_CLASSES: usize = 26;

/// Body-part names in class-index order; they follow the 24-joint kinematic
/// tree (part `j` is the region driven by joint `j`).
pub const PART_NAMES: [&str; NUM_CLASSES] = [
    "pelvis",
    "left_upper_leg",
    "right_upper_leg",
    "spine_lower",
    "left_lower_leg",
    "right_lower_leg",
    "spine_middle",
    "left_foot",
    "right_foot",
    "spine_upper",
    "left_toes",
    "right_toes",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_upper_arm",
    "right_upper_arm",
    "left_forearm",
    "right_forearm",
    "left_hand",
    "right_hand",
    "left_fingers",
    "right_fingers",
    "object",
    "background",
];

/// Hand and foot classes: the frequently interacting regions.
pub const HAND_PARTS: [u8; 4] = [20, 21, 22, 23];
pub const FOOT_PARTS: [u8; 4] = [7, 8, 10, 11];

/// The fixed 26-class label space: 24 body parts, one object class and one
/// background class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartLabelSpace;

impl PartLabelSpace {
    pub const NUM_BODY_PARTS: usize = NUM_BODY_PARTS;
    pub const OBJECT: u8 = OBJECT_CLASS;
    pub const BACKGROUND: u8 = BACKGROUND_CLASS;
    pub const NUM_CLASSES: usize = NUM_CLASSES;

    pub fn is_human(class: u8) -> bool {
        (class as usize) < NUM_BODY_PARTS
    }

    pub fn is_interacting(class: u8) -> bool {
        HAND_PARTS.contains(&class) || FOOT_PARTS.contains(&class)
    }

    pub fn name(class: u8) -> Option<&'static str> {
        PART_NAMES.get(class as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        Self::with_intensity(coords, None)
    }

    pub fn with_intensity(coords: Vec<Point3>, intensity: Option<Vec<f64>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Degenerate("point cloud has no points".into()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        if let Some(int) = &intensity {
            if int.len() != coords.len() {
                return Err(Error::shape(
                    "point cloud",
                    format!("{} intensities for {} points", int.len(), coords.len()),
                ));
            }
        }
        Ok(PointCloud { coords, intensity })
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.coords)
    }

    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        let coords = idx.iter().map(|&i| self.coords[i]).collect();
        let intensity = self
            .intensity
            .as_ref()
            .map(|v| idx.iter().map(|&i| v[i]).collect());
        PointCloud::with_intensity(coords, intensity)
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeshKind {
    Human,
    Object,
}

/// The mesh face a simulated point was sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FaceId {
    pub mesh: MeshKind,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointCloud {
    pub cloud: PointCloud,
    pub part: Vec<u8>,
    pub contact: Vec<bool>,
    pub face_id: Vec<Option<FaceId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    LengthMismatch,
    PartRange,
    BackgroundContact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub point: Option<usize>,
    pub rule: Rule,
}

impl LabeledPointCloud {
    /// A cloud with every point labelled background and no contact.
    pub fn unlabeled(cloud: PointCloud) -> Self {
        let n = cloud.len();
        LabeledPointCloud {
            cloud,
            part: vec![BACKGROUND_CLASS; n],
            contact: vec![false; n],
            face_id: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Lists every broken invariant; empty when the cloud is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let n = self.cloud.len();
        let mut out = Vec::new();
        if self.part.len() != n || self.contact.len() != n || self.face_id.len() != n {
            out.push(Violation {
                point: None,
                rule: Rule::LengthMismatch,
            });
            return out;
        }
        for i in 0..n {
            if self.part[i] as usize >= NUM_CLASSES {
                out.push(Violation {
                    point: Some(i),
                    rule: Rule::PartRange,
                });
            }
            if self.part[i] == BACKGROUND_CLASS && self.contact[i] {
                out.push(Violation {
                    point: Some(i),
                    rule: Rule::BackgroundContact,
                });
            }
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> Result<LabeledPointCloud> {
        Ok(LabeledPointCloud {
            cloud: self.cloud.select(idx)?,
            part: idx.iter().map(|&i| self.part[i]).collect(),
            contact: idx.iter().map(|&i| self.contact[i]).collect(),
            face_id: idx.iter().map(|&i| self.face_id[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<Point3>,
    pub valid: Vec<bool>,
    pub contact: Vec<bool>,
}

impl KeypointSet {
    pub fn new(coords: Vec<Point3>, valid: Vec<bool>, contact: Vec<bool>) -> Result<Self> {
        let n = coords.len();
        if valid.len() != n || contact.len() != n {
            return Err(Error::shape(
                "keypoints",
                format!("{} coords, {} valid, {} contact", n, valid.len(), contact.len()),
            ));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && coords[i].iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("keypoint {i}")));
        }
        Ok(KeypointSet {
            coords,
            valid,
            contact,
        })
    }

    /// All keypoints valid, none in contact.
    pub fn from_coords(coords: Vec<Point3>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, vec![true; n], vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Named keypoint conventions. Indices are always resolved through a
/// profile, never assumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeypointProfile {
    Smpl15,
    Smpl15Obj,
    Waymo14,
}

const SMPL15_NAMES: [&str; 15] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "neck",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

const SMPL15_OBJ_NAMES: [&str; 16] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "neck",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "object",
];

const WAYMO14_NAMES: [&str; 14] = [
    "nose",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const SMPL_BONES: [(&str, &str); 14] = [
    ("pelvis", "left_hip"),
    ("pelvis", "right_hip"),
    ("left_hip", "left_knee"),
    ("right_hip", "right_knee"),
    ("left_knee", "left_ankle"),
    ("right_knee", "right_ankle"),
    ("pelvis", "neck"),
    ("neck", "head"),
    ("neck", "left_shoulder"),
    ("neck", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("right_shoulder", "right_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_elbow", "right_wrist"),
];

const WAYMO_BONES: [(&str, &str); 14] = [
    ("head", "nose"),
    ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("right_shoulder", "right_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_elbow", "right_wrist"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_hip", "right_hip"),
    ("left_hip", "left_knee"),
    ("right_hip", "right_knee"),
    ("left_knee", "left_ankle"),
    ("right_knee", "right_ankle"),
    ("head", "left_shoulder"),
];

impl KeypointProfile {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            KeypointProfile::Smpl15 => &SMPL15_NAMES,
            KeypointProfile::Smpl15Obj => &SMPL15_OBJ_NAMES,
            KeypointProfile::Waymo14 => &WAYMO14_NAMES,
        }
    }

    pub fn num_keypoints(self) -> usize {
        self.names().len()
    }

    pub fn index_of(self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| *n == name)
    }

    pub fn skeleton(self) -> Skeleton {
        let bones: &[(&str, &str)] = match self {
            KeypointProfile::Smpl15 | KeypointProfile::Smpl15Obj => &SMPL_BONES,
            KeypointProfile::Waymo14 => &WAYMO_BONES,
        };
        let edges = bones
            .iter()
            .map(|(a, b)| (self.index_of(a).unwrap(), self.index_of(b).unwrap()))
            .collect();
        Skeleton::new(edges, self.num_keypoints()).expect("built-in skeletons are valid")
    }

    /// Body-part classes whose mesh vertices decide a keypoint's contact
    /// state. The object keypoint has none (it uses the object mesh).
    pub fn keypoint_parts(self, k: usize) -> &'static [u8] {
        match self.names().get(k).copied() {
            Some("pelvis") => &[0],
            Some("left_hip") => &[1],
            Some("right_hip") => &[2],
            Some("left_knee") => &[4],
            Some("right_knee") => &[5],
            Some("left_ankle") => &[7, 10],
            Some("right_ankle") => &[8, 11],
            Some("neck") => &[12],
            Some("head") | Some("nose") => &[15],
            Some("left_shoulder") => &[16],
            Some("right_shoulder") => &[17],
            Some("left_elbow") => &[18],
            Some("right_elbow") => &[19],
            Some("left_wrist") => &[20, 22],
            Some("right_wrist") => &[21, 23],
            _ => &[],
        }
    }

    pub fn object_index(self) -> Option<usize> {
        self.index_of("object")
    }

    /// Keypoints on hands and feet, the interaction-prone joints.
    pub fn interacting_joints(self) -> Vec<usize> {
        ["left_wrist", "right_wrist", "left_ankle", "right_ankle"]
            .iter()
            .filter_map(|n| self.index_of(n))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    edges: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn new(edges: Vec<(usize, usize)>, num_keypoints: usize) -> Result<Self> {
        for &(a, b) in &edges {
            if a >= num_keypoints || b >= num_keypoints {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) out of range for {num_keypoints} keypoints"
                )));
            }
            if a == b {
                return Err(Error::invalid(format!("self edge at keypoint {a}")));
            }
        }
        Ok(Skeleton { edges })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Drops every edge that touches an invalid keypoint.
    pub fn restricted_to(&self, valid: &[bool]) -> Skeleton {
        Skeleton {
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|&(a, b)| valid.get(a) == Some(&true) && valid.get(b) == Some(&true))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub base_grid_size: f64,
    pub stage_multiplier: f64,
    pub num_stages: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            base_grid_size: 0.01,
            stage_multiplier: 2.0,
            num_stages: 2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_grid_size > 0.0) {
            return Err(Error::invalid("base_grid_size must be > 0"));
        }
        if !(self.stage_multiplier > 1.0) {
            return Err(Error::invalid("stage_multiplier must be > 1"));
        }
        Ok(())
    }

    /// Cell edge length used when pooling into stage `stage` (1-based).
    pub fn grid_size(&self, stage: usize) -> f64 {
        self.base_grid_size * self.stage_multiplier.powi(stage as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<(LabeledPointCloud, KeypointSet)>,
    pub dt: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<(LabeledPointCloud, KeypointSet)>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be > 0"));
        }
        if let Some((_, first)) = frames.first() {
            let nk = first.len();
            if frames.iter().any(|(_, k)| k.len() != nk) {
                return Err(Error::invalid("frames disagree on keypoint count"));
            }
        }
        Ok(FrameSequence { frames, dt })
    }
}

/// Distance between the shoulder midpoint and the hip midpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorsoLength(pub f64);

impl TorsoLength {
    pub fn meters(self) -> f64 {
        self.0
    }

    pub fn is_degenerate(self) -> bool {
        self.0 <= 1e-12
    }
}

pub fn torso_length(k: &KeypointSet, profile: KeypointProfile) -> Result<TorsoLength> {
    let get = |name: &str| -> Result<Point3> {
        let i = profile
            .index_of(name)
            .ok_or_else(|| Error::Missing(format!("{name} keypoint in profile")))?;
        if !k.valid.get(i).copied().unwrap_or(false) {
            return Err(Error::Missing(format!("valid {name} keypoint")));
        }
        Ok(k.coords[i])
    };
    let (ls, rs) = (get("left_shoulder")?, get("right_shoulder")?);
    let (lh, rh) = (get("left_hip")?, get("right_hip")?);
    let mid = |a: Point3, b: Point3| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])];
    Ok(TorsoLength(distance(&mid(ls, rs), &mid(lh, rh))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torso_set(profile: KeypointProfile, ls: Point3, rs: Point3, lh: Point3, rh: Point3) -> KeypointSet {
        let mut coords = vec![[0.0; 3]; profile.num_keypoints()];
        coords[profile.index_of("left_shoulder").unwrap()] = ls;
        coords[profile.index_of("right_shoulder").unwrap()] = rs;
        coords[profile.index_of("left_hip").unwrap()] = lh;
        coords[profile.index_of("right_hip").unwrap()] = rh;
        KeypointSet::from_coords(coords).unwrap()
    }

    #[test]
    fn torso_length_of_simple_body() {
        let k = torso_set(
            KeypointProfile::Smpl15,
            [0.2, 0.0, 1.4],
            [-0.2, 0.0, 1.4],
            [0.1, 0.0, 0.9],
            [-0.1, 0.0, 0.9],
        );
        let t = torso_length(&k, KeypointProfile::Smpl15).unwrap();
        assert!((t.meters() - 0.5).abs() < 1e-12);
        assert!(!t.is_degenerate());
    }

    #[test]
    fn torso_length_degenerate_and_invariant() {
        let p = KeypointProfile::Waymo14;
        let k = KeypointSet::from_coords(vec![[1.0, 2.0, 3.0]; p.num_keypoints()]).unwrap();
        assert!(torso_length(&k, p).unwrap().is_degenerate());

        let base = torso_set(p, [0.3, 0.1, 1.5], [-0.2, 0.0, 1.4], [0.1, 0.2, 0.9], [-0.1, 0.0, 0.8]);
        let l0 = torso_length(&base, p).unwrap().meters();
        let shifted = KeypointSet::from_coords(
            base.coords.iter().map(|c| [c[0] + 5.0, c[1] - 2.0, c[2] + 0.5]).collect(),
        )
        .unwrap();
        assert!((torso_length(&shifted, p).unwrap().meters() - l0).abs() < 1e-12);
        let scaled =
            KeypointSet::from_coords(base.coords.iter().map(|c| c.map(|v| v * 3.0)).collect()).unwrap();
        assert!((torso_length(&scaled, p).unwrap().meters() - 3.0 * l0).abs() < 1e-12);
    }

    #[test]
    fn torso_length_requires_valid_joints() {
        let p = KeypointProfile::Smpl15;
        let mut k = KeypointSet::from_coords(vec![[0.0; 3]; 15]).unwrap();
        k.valid[p.index_of("left_hip").unwrap()] = false;
        assert!(matches!(torso_length(&k, p), Err(Error::Missing(_))));
    }

    fn small_cloud() -> LabeledPointCloud {
        let cloud = PointCloud::new((0..8).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let mut lc = LabeledPointCloud::unlabeled(cloud);
        lc.part = vec![0, 3, 20, 24, 25, 7, 24, 25];
        lc.contact = vec![false, false, true, true, false, false, false, false];
        lc
    }

    #[test]
    fn validate_reports_violations() {
        let lc = small_cloud();
        assert!(lc.validate().is_empty());
        assert_eq!(lc.validate(), lc.validate());

        let mut bad = lc.clone();
        bad.part[5] = 26;
        assert_eq!(
            bad.validate(),
            vec![Violation {
                point: Some(5),
                rule: Rule::PartRange
            }]
        );

        let mut bad = lc;
        bad.contact[4] = true;
        assert_eq!(
            bad.validate(),
            vec![Violation {
                point: Some(4),
                rule: Rule::BackgroundContact
            }]
        );
    }

    #[test]
    fn point_cloud_invariants() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn skeleton_removes_invalid_edges() {
        let p = KeypointProfile::Smpl15;
        let s = p.skeleton();
        assert_eq!(s.edges().len(), 14);
        let mut valid = vec![true; 15];
        valid[p.index_of("left_knee").unwrap()] = false;
        let r = s.restricted_to(&valid);
        assert_eq!(r.edges().len(), 12);
        assert!(Skeleton::new(vec![(1, 1)], 3).is_err());
        assert!(Skeleton::new(vec![(0, 3)], 3).is_err());
    }

    #[test]
    fn profiles_have_expected_sizes() {
        assert_eq!(KeypointProfile::Smpl15.num_keypoints(), 15);
        assert_eq!(KeypointProfile::Smpl15Obj.num_keypoints(), 16);
        assert_eq!(KeypointProfile::Waymo14.num_keypoints(), 14);
        assert_eq!(KeypointProfile::Smpl15Obj.object_index(), Some(15));
    }
}
