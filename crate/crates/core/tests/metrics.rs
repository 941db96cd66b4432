use hoil_core::metrics::{mpjpe, pck, per_joint_error, PoseEvalReport};
use hoil_core::types::{KeypointProfile, KeypointSet, Point3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: KeypointProfile = KeypointProfile::Smpl15;

/// Standing skeleton with a 0.5 m torso (shoulder mid z = 1.4, hip mid z = 0.9).
fn body() -> Vec<Point3> {
    let mut c = vec![[0.0, 0.0, 0.95]; 15];
    let set = |c: &mut Vec<Point3>, name: &str, p: Point3| c[P.index_of(name).unwrap()] = p;
    set(&mut c, "left_hip", [0.0, 0.1, 0.9]);
    set(&mut c, "right_hip", [0.0, -0.1, 0.9]);
    set(&mut c, "left_shoulder", [0.0, 0.2, 1.4]);
    set(&mut c, "right_shoulder", [0.0, -0.2, 1.4]);
    set(&mut c, "left_knee", [0.0, 0.1, 0.5]);
    set(&mut c, "right_knee", [0.0, -0.1, 0.5]);
    set(&mut c, "left_ankle", [0.0, 0.1, 0.1]);
    set(&mut c, "right_ankle", [0.0, -0.1, 0.1]);
    set(&mut c, "neck", [0.0, 0.0, 1.45]);
    set(&mut c, "head", [0.0, 0.0, 1.6]);
    set(&mut c, "left_elbow", [0.0, 0.45, 1.4]);
    set(&mut c, "right_elbow", [0.0, -0.45, 1.4]);
    set(&mut c, "left_wrist", [0.0, 0.7, 1.4]);
    set(&mut c, "right_wrist", [0.0, -0.7, 1.4]);
    c
}

fn gt() -> KeypointSet {
    KeypointSet::from_coords(body()).unwrap()
}

fn offset(k: &KeypointSet, d: Point3) -> KeypointSet {
    let mut o = k.clone();
    for p in &mut o.coords {
        *p = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
    }
    o
}

#[test]
fn pck_examples() {
    let g = gt();
    assert_eq!(pck(&[g.clone()], &[g.clone()], P, 0.3).unwrap(), 100.0);
    // Threshold 0.3 * 0.5 m = 0.15 m, hit exactly: excluded by the strict rule.
    let at = offset(&g, [0.15, 0.0, 0.0]);
    assert_eq!(pck(&[at], &[g.clone()], P, 0.3).unwrap(), 0.0);

    // Only shoulders and hips valid; three of the four predictions are close.
    let mut g4 = g.clone();
    let keep = ["left_hip", "right_hip", "left_shoulder", "right_shoulder"].map(|n| P.index_of(n).unwrap());
    g4.valid = (0..15).map(|k| keep.contains(&k)).collect();
    let mut p4 = g4.clone();
    p4.coords[keep[0]][0] += 0.5;
    assert_eq!(pck(&[p4], &[g4], P, 0.3).unwrap(), 75.0);
}

#[test]
fn degenerate_torso_frames_are_excluded() {
    let g = gt();
    let mut flat = g.clone();
    for n in ["left_hip", "right_hip", "left_shoulder", "right_shoulder"] {
        flat.coords[P.index_of(n).unwrap()] = [0.0, 0.0, 1.0];
    }
    let far = offset(&flat, [1.0, 0.0, 0.0]);
    let v = pck(&[g.clone(), far], &[g.clone(), flat.clone()], P, 0.3).unwrap();
    assert_eq!(v, 100.0);
    assert!(pck(&[flat.clone()], &[flat], P, 0.3).is_err());
}

#[test]
fn report_csv_layout() {
    let g = gt();
    let p = offset(&g, [0.01, 0.0, 0.0]);
    let r = PoseEvalReport::evaluate(&[p.clone(), p.clone(), p.clone()], &[g.clone(), g.clone(), g.clone()], P)
        .unwrap()
        .with_segmentation(
            &[p.clone(), p.clone(), p],
            &[g.clone(), g.clone(), g],
            &[vec![1, 2], vec![1, 1], vec![0, 0]],
            &[vec![1, 2], vec![1, 2], vec![1, 2]],
        )
        .unwrap();
    assert_eq!(r.seg_accuracy, Some(50.0));
    assert_eq!(r.seg_pose_r, None);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let keys: Vec<&str> = text.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["metric", "mpjpe_mm", "pck3", "pck5", "n_frames", "seg_accuracy", "seg_pose_r"]);
    assert!(text.contains("seg_pose_r,undefined"));
    let mut buf = Vec::new();
    r.write_per_joint_csv(P, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.lines().nth(14).unwrap().starts_with("13,left_wrist,"));
}

fn noisy(seed: u64) -> (Vec<KeypointSet>, Vec<KeypointSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<KeypointSet> = (0..4).map(|_| gt()).collect();
    let p = g
        .iter()
        .map(|k| {
            let mut o = k.clone();
            for c in &mut o.coords {
                for v in c.iter_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
            o.valid = (0..15).map(|_| rng.random_bool(0.9)).collect();
            o
        })
        .collect();
    (p, g)
}

proptest! {
    #[test]
    fn pck_is_monotone_and_mpjpe_symmetric(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (p, g) = noisy(seed);
        let mut last = 0.0;
        for f in [0.1, 0.2, 0.3, 0.5, 0.8] {
            let v = pck(&p, &g, P, f).unwrap();
            prop_assert!(v >= last && (0.0..=100.0).contains(&v));
            last = v;
        }
        let a = mpjpe(&p, &g).unwrap();
        prop_assert!((a - mpjpe(&g, &p).unwrap()).abs() < 1e-9);

        let mut order: Vec<usize> = (0..15).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..15).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permute = |ks: &[KeypointSet]| -> Vec<KeypointSet> {
            ks.iter()
                .map(|k| KeypointSet::new(
                    order.iter().map(|&i| k.coords[i]).collect(),
                    order.iter().map(|&i| k.valid[i]).collect(),
                    order.iter().map(|&i| k.contact[i]).collect(),
                ).unwrap())
                .collect()
        };
        prop_assert!((a - mpjpe(&permute(&p), &permute(&g)).unwrap()).abs() < 1e-9);
        let pj = per_joint_error(&p, &g).unwrap();
        let pjp = per_joint_error(&permute(&p), &permute(&g)).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(pjp[j].map(|v| (v * 1e6).round()), pj[i].map(|v| (v * 1e6).round()));
        }
    }
}
