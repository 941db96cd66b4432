//! Synthetic LiDAR frames with part, contact and keypoint labels.

pub mod contact;
pub mod mesh;
pub mod raycast;
pub mod rig;

use rand::Rng;

pub use contact::{
    contact_labels, keypoint_contact, propagate_contact, zero_velocity_contact, ContactConfig, ContactLabels,
    ZeroVelocityConfig,
};
pub use mesh::{Aabb, PartVertexMap, TriangleMesh};
pub use raycast::{cast_rays, AngleRange, Plane, Scene, SensorModel};
pub use rig::{make_test_scene, Pose, SceneParams, TestScene};

use crate::error::{Error, Result};
use crate::types::{KeypointSet, LabeledPointCloud};

/// Removes the object with probability `p`. Always draws exactly one
/// Bernoulli sample so the stream stays aligned across scenes.
pub fn object_dropout<R: Rng + ?Sized>(scene: &Scene, p: f64, rng: &mut R) -> Result<(Scene, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    let removed = rng.random_bool(p);
    let mut out = scene.clone();
    if removed {
        out.object = None;
    }
    Ok((out, removed && scene.object.is_some()))
}

/// One labelled scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub cloud: LabeledPointCloud,
    pub keypoints: KeypointSet,
    pub contact: ContactLabels,
}

/// Casts the sensor over `test.scene` and fills point and keypoint contact.
/// Without an object every contact flag is false and the object keypoint is
/// marked invalid.
pub fn simulate_frame(test: &TestScene, sensor: &SensorModel, cfg: &ContactConfig, seed: u64) -> Result<SimFrame> {
    let scene = &test.scene;
    let labels = match &scene.object {
        Some(obj) => contact_labels(&scene.human, obj, cfg)?,
        None => ContactLabels::none(&scene.human),
    };
    let cloud = propagate_contact(&cast_rays(scene, sensor, seed)?, &labels)?;
    let mut keypoints = test.keypoints.clone();
    keypoints.contact = keypoint_contact(&labels, &test.part_vertices, test.profile);
    if scene.object.is_none() {
        if let Some(k) = test.profile.object_index() {
            keypoints.valid[k] = false;
        }
    }
    Ok(SimFrame {
        cloud,
        keypoints,
        contact: labels,
    })
}

/// Keeps the points inside `bounds`.
pub fn crop(cloud: &LabeledPointCloud, bounds: &Aabb) -> Result<LabeledPointCloud> {
    let idx: Vec<usize> = (0..cloud.len())
        .filter(|&i| bounds.contains(&cloud.cloud.coords()[i]))
        .collect();
    cloud.select(&idx)
}

/// Bounding box of the scene's meshes.
pub fn scene_bounds(scene: &Scene) -> Aabb {
    let b = scene.human.aabb();
    match &scene.object {
        Some(o) => b.union(&o.aabb()),
        None => b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_extremes() {
        let t = make_test_scene(&SceneParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(object_dropout(&t.scene, 0.0, &mut rng).unwrap().0.object.is_some());
            assert!(object_dropout(&t.scene, 1.0, &mut rng).unwrap().0.object.is_none());
        }
        assert!(object_dropout(&t.scene, 1.5, &mut rng).is_err());
    }

    #[test]
    fn simulated_frame_is_consistent() {
        let t = make_test_scene(&SceneParams::default()).unwrap();
        let f = simulate_frame(&t, &SensorModel::default(), &ContactConfig::default(), 0).unwrap();
        assert!(f.cloud.validate().is_empty());
        let human = f.cloud.part.iter().filter(|&&p| p < 24).count();
        assert!(human > 100, "{human} human points");
        assert!(f.cloud.part.contains(&24));
        assert!(f.cloud.contact.iter().any(|&c| c));
        let right_wrist = t.profile.index_of("right_wrist").unwrap();
        assert!(f.keypoints.contact[right_wrist]);
        assert!(f.keypoints.contact[15]);
        assert!(!f.keypoints.contact[t.profile.index_of("head").unwrap()]);

        let (scene, _) = object_dropout(&t.scene, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bare = TestScene { scene, ..t };
        let f = simulate_frame(&bare, &SensorModel::default(), &ContactConfig::default(), 0).unwrap();
        assert!(f.cloud.contact.iter().all(|&c| !c));
        assert!(f.keypoints.contact.iter().all(|&c| !c));
        assert!(!f.keypoints.valid[15]);
    }
}
