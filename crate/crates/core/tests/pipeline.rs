use hoil_core::pipeline::{Dataset, DatasetMix, FrameRecord, RunConfig};
use hoil_core::types::KeypointProfile;
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = FrameRecord> {
    (0usize..40, 0usize..20).prop_flat_map(|(n, nk)| {
        (
            any::<u32>(),
            prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), n),
            prop::collection::vec(0u8..26, n),
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), nk),
            prop::collection::vec(0u8..2, nk),
            prop::collection::vec(0u8..2, nk),
        )
            .prop_map(|(frame_index, points, part, contact, keypoints, kp_valid, kp_contact)| FrameRecord {
                frame_index,
                points,
                part,
                contact,
                keypoints,
                kp_valid,
                kp_contact,
            })
    })
}

proptest! {
    #[test]
    fn frame_records_roundtrip_bytewise(r in record_strategy()) {
        let bytes = r.to_bytes().unwrap();
        let back = FrameRecord::read(&bytes[..]).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        // Any truncation is rejected.
        if !bytes.is_empty() {
            prop_assert!(FrameRecord::read(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}

#[test]
fn equal_ratios_split_draws_evenly() {
    let mix = DatasetMix::new(vec![30, 500], vec![1.0, 1.0]).unwrap();
    let mut counts = [0usize; 2];
    for block in 0..1250 {
        for (source, idx) in mix.block(7, block, 8) {
            counts[source] += 1;
            assert!(idx < [30, 500][source]);
        }
    }
    let share = counts[0] as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&share), "first source drew {share}");
}

#[test]
fn zero_ratio_sources_are_never_drawn() {
    let mix = DatasetMix::new(vec![10, 10, 10], vec![0.0, 2.0, 1.0]).unwrap();
    let draws: Vec<_> = (0..100).flat_map(|b| mix.block(1, b, 4)).collect();
    assert!(draws.iter().all(|&(s, _)| s != 0));
    let twos = draws.iter().filter(|d| d.0 == 1).count() as f64 / draws.len() as f64;
    assert!((0.6..0.73).contains(&twos), "{twos}");
}

#[test]
fn simulated_sequence_survives_save_and_load() {
    let mut cfg = RunConfig::default();
    cfg.sim.points = 32;
    let data = hoil_core::pipeline::simulate(&cfg, 2).unwrap();
    assert_eq!(data.profile(), KeypointProfile::Smpl15Obj);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.records, data.records);
    assert_eq!(back.manifest, data.manifest);
    assert!(data.records.iter().all(|r| r.num_points() <= 32 && r.num_keypoints() == 16));
}
