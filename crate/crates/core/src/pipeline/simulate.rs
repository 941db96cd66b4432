//! Seeded generation of labelled walking sequences.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::record::{Dataset, FrameRecord};
use crate::error::{Error, Result};
use crate::sim::{crop, make_test_scene, object_dropout, scene_bounds, simulate_frame, Pose, SceneParams};
use crate::types::{KeypointProfile, KeypointSet};

/// Reorders `k` from SMPL15_OBJ into `profile` by joint name.
fn convert_keypoints(k: &KeypointSet, profile: KeypointProfile) -> Result<KeypointSet> {
    let src = KeypointProfile::Smpl15Obj;
    let idx = profile
        .names()
        .iter()
        .map(|n| src.index_of(n).ok_or_else(|| Error::invalid(format!("joint {n} is not simulated"))))
        .collect::<Result<Vec<_>>>()?;
    KeypointSet::new(
        idx.iter().map(|&i| k.coords[i]).collect(),
        idx.iter().map(|&i| k.valid[i]).collect(),
        idx.iter().map(|&i| k.contact[i]).collect(),
    )
}

/// Frame `frame` of the sequence. Every frame draws from its own random
/// stream, so frames can be generated in any order.
pub fn simulate_record(cfg: &RunConfig, frame: usize) -> Result<FrameRecord> {
    let sim = &cfg.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(frame as u64);
    let jitter = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let phase = 2.0 * PI * frame as f64 * sim.dt / sim.gait_period;
    let params = SceneParams {
        pose: Pose::walking(phase),
        position: [sim.distance + jitter(&mut rng, sim.position_jitter), jitter(&mut rng, sim.position_jitter)],
        yaw: PI + jitter(&mut rng, sim.yaw_jitter),
        ..SceneParams::default()
    };
    let mut test = make_test_scene(&params)?;
    test.scene = object_dropout(&test.scene, sim.object_dropout, &mut rng)?.0;
    let out = simulate_frame(&test, &sim.sensor, &cfg.contact, rng.random())?;
    let bounds = scene_bounds(&test.scene).expanded(sim.crop_margin);
    let mut cloud = crop(&out.cloud, &bounds)?;
    if cloud.is_empty() {
        return Err(Error::Degenerate(format!("frame {frame}: no returns inside the crop")));
    }
    if cloud.len() > sim.points {
        let mut idx = sample(&mut rng, cloud.len(), sim.points).into_vec();
        idx.sort_unstable();
        cloud = cloud.select(&idx)?;
    }
    let keypoints = convert_keypoints(&out.keypoints, sim.profile)?;
    let index = u32::try_from(frame).map_err(|_| Error::invalid("frame index exceeds u32"))?;
    FrameRecord::from_frame(index, &cloud, &keypoints)
}

/// `frames` consecutive frames, generated in parallel.
pub fn simulate(cfg: &RunConfig, frames: usize) -> Result<Dataset> {
    if frames == 0 {
        return Err(Error::invalid("--frames must be > 0"));
    }
    cfg.validate()?;
    let records = (0..frames)
        .into_par_iter()
        .map(|f| simulate_record(cfg, f))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, cfg.sim.profile, cfg.sim.dt, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_bounded_labelled_and_order_free() {
        let cfg = RunConfig::default();
        let d = simulate(&cfg, 3).unwrap();
        assert_eq!(d.manifest.frames, 3);
        for (f, r) in d.records.iter().enumerate() {
            assert_eq!(r.frame_index as usize, f);
            assert!(r.num_points() <= 128 && r.num_points() > 0);
            assert_eq!(r.num_keypoints(), 16);
            assert!(r.part.iter().any(|&p| p < 24));
        }
        assert_eq!(simulate_record(&cfg, 2).unwrap(), d.records[2]);
        assert!(simulate(&cfg, 0).is_err());
    }

    #[test]
    fn smpl15_profile_drops_the_object() {
        let mut cfg = RunConfig::default();
        cfg.sim.profile = KeypointProfile::Smpl15;
        let r = simulate_record(&cfg, 0).unwrap();
        let full = simulate_record(&RunConfig::default(), 0).unwrap();
        assert_eq!(r.keypoints[..], full.keypoints[..15]);
    }
}
