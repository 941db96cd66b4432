mod common;

use common::oracles;
use hoil_core::losses::{
    balanced_bce, cross_entropy, heatmap_kl, hmlc, hoicl, limb_loss, supcon, tsc, tsc_targets, HOICLConfig,
    PairMask, PartHierarchy,
};
use hoil_core::tensor::gradcheck::{finite_difference_check, GradCheckConfig};
use hoil_core::tensor::{Graph, ParamStore, Tensor};
use hoil_core::types::{KeypointSet, Skeleton, NUM_CLASSES};
use hoil_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = oracles::dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.iter().flatten().copied().collect()).unwrap()
}

fn levels(h: &PartHierarchy) -> Vec<Vec<usize>> {
    (0..h.num_levels())
        .map(|l| (0..NUM_CLASSES as u8).map(|c| h.label(l, c)).collect())
        .collect()
}

/// Part labels drawn from a small palette that mixes hands, feet, other
/// body parts, object and background.
fn random_parts(rng: &mut ChaCha8Rng, m: usize) -> (Vec<u8>, Vec<bool>) {
    const PALETTE: [u8; 9] = [20, 22, 7, 11, 3, 16, 24, 24, 25];
    let parts: Vec<u8> = (0..m).map(|_| PALETTE[rng.random_range(0..PALETTE.len())]).collect();
    let contacts = parts.iter().map(|&p| p != 25 && rng.random_bool(0.4)).collect();
    (parts, contacts)
}

#[test]
fn contrastive_losses_match_brute_force() {
    let h = PartHierarchy::standard();
    let lv = levels(&h);
    let targets = tsc_targets(NUM_CLASSES, 8, 1).unwrap();
    let trow: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|r| targets.row(r).to_vec()).collect();
    let cfg = HOICLConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let m = rng.random_range(4..=32);
        let z = unit_rows(&mut rng, m, 8);
        let (parts, contacts) = random_parts(&mut rng, m);
        let labels: Vec<usize> = parts.iter().map(|&p| p as usize).collect();
        let tau = 0.07;

        let mut g = Graph::detached();
        let zv = g.constant(to_tensor(&z));
        if let Some(expect) = oracles::supcon(&z, &labels, tau) {
            let got = supcon(&mut g, zv, &PairMask::from_labels(&labels), tau).unwrap();
            worst = worst.max((g.value(got).data()[0] - expect).abs());
        }
        if let Some(expect) = oracles::hmlc(&z, &parts, &lv, tau) {
            let got = hmlc(&mut g, zv, &parts, &h, tau).unwrap();
            worst = worst.max((g.value(got).data()[0] - expect).abs());
        }
        let got = tsc(&mut g, zv, &parts, &targets, tau).unwrap();
        worst = worst.max((g.value(got).data()[0] - oracles::tsc(&z, &parts, &trow, tau)).abs());

        let terms = oracles::hoicl_terms(&z, &parts, &contacts, &lv, &trow, tau);
        let expect: f64 = [
            (cfg.lambda_hmlc, terms.hmlc),
            (cfg.lambda_tsc, terms.tsc),
            (cfg.lambda_fir, terms.fir),
            (cfg.lambda_hoc, terms.hoc),
        ]
        .iter()
        .filter_map(|(w, v)| v.map(|v| w * v))
        .sum();
        let out = hoicl(&mut g, zv, &parts, &contacts, &cfg, &h, &targets, &mut rng).unwrap();
        worst = worst.max((out.value(&g) - expect).abs());
        for (name, v) in [("fir", terms.fir), ("hoc", terms.hoc)] {
            assert_eq!(out.term(name).unwrap().skipped(), v.is_none(), "trial {trial} {name}");
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst}");
}

#[test]
fn supcon_depends_only_on_inner_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = unit_rows(&mut rng, 10, 3);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rotated: Vec<Vec<f64>> = z.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]).collect();
    let mut g = Graph::detached();
    let a = g.constant(to_tensor(&z));
    let b = g.constant(to_tensor(&rotated));
    let mask = PairMask::from_labels(&labels);
    let la = supcon(&mut g, a, &mask, 0.1).unwrap();
    let lb = supcon(&mut g, b, &mask, 0.1).unwrap();
    assert!((g.value(la).data()[0] - g.value(lb).data()[0]).abs() < 1e-9);
}

#[test]
fn tsc_is_invariant_to_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = unit_rows(&mut rng, 12, 6);
    let classes: Vec<u8> = (0..12).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
    let targets = tsc_targets(NUM_CLASSES, 6, 2).unwrap();
    let relabel = |c: u8| (c as usize * 7 + 3) % NUM_CLASSES;
    let mut permuted = vec![0.0; NUM_CLASSES * 6];
    for c in 0..NUM_CLASSES {
        let to = relabel(c as u8);
        permuted[to * 6..(to + 1) * 6].copy_from_slice(targets.row(c));
    }
    let permuted = Tensor::new(vec![NUM_CLASSES, 6], permuted).unwrap();
    let new_classes: Vec<u8> = classes.iter().map(|&c| relabel(c) as u8).collect();
    let mut g = Graph::detached();
    let zv = g.constant(to_tensor(&z));
    let a = tsc(&mut g, zv, &classes, &targets, 0.07).unwrap();
    let b = tsc(&mut g, zv, &new_classes, &permuted, 0.07).unwrap();
    assert!((g.value(a).data()[0] - g.value(b).data()[0]).abs() < 1e-12);
}

#[test]
fn hoicl_breakdown_and_reductions() {
    let h = PartHierarchy::standard();
    let targets = tsc_targets(NUM_CLASSES, 8, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = unit_rows(&mut rng, 32, 8);
    let (parts, contacts) = random_parts(&mut rng, 32);
    let mut g = Graph::detached();
    let zv = g.constant(to_tensor(&z));
    let cfg = HOICLConfig::default();
    let out = hoicl(&mut g, zv, &parts, &contacts, &cfg, &h, &targets, &mut rng).unwrap();
    let mut acc = 0.0;
    for t in &out.terms {
        if !t.skipped() {
            acc += t.contribution;
        }
    }
    assert_eq!(acc, out.value(&g));

    let global_only = HOICLConfig {
        lambda_fir: 0.0,
        lambda_hoc: 0.0,
        ..cfg.clone()
    };
    let a = hoicl(&mut g, zv, &parts, &contacts, &global_only, &h, &targets, &mut rng).unwrap();
    let global = a.term("hmlc").unwrap().contribution + a.term("tsc").unwrap().contribution;
    assert!((a.value(&g) - global).abs() < 1e-12);

    let no_object: Vec<u8> = parts.iter().map(|&p| if p == 24 { 25 } else { p }).collect();
    let no_contact: Vec<bool> = no_object.iter().zip(&contacts).map(|(&p, &c)| c && p != 25).collect();
    let b = hoicl(&mut g, zv, &no_object, &no_contact, &cfg, &h, &targets, &mut rng).unwrap();
    assert!(b.term("fir").unwrap().skipped());
    assert!(b.term("hoc").unwrap().skipped());
    assert!(!b.term("hmlc").unwrap().skipped());
    assert!(b.value(&g) > 0.0);
}

#[test]
fn hoicl_reports_fully_degenerate_batches() {
    let h = PartHierarchy::standard();
    let targets = tsc_targets(NUM_CLASSES, 4, 1).unwrap();
    let mut g = Graph::detached();
    let zv = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap());
    let cfg = HOICLConfig {
        lambda_tsc: 0.05,
        ..HOICLConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // A single point still supports the targeted term.
    let out = hoicl(&mut g, zv, &[3], &[false], &cfg, &h, &targets, &mut rng).unwrap();
    assert!(out.term("hmlc").unwrap().skipped());
    assert!(!out.term("tsc").unwrap().skipped());
    let empty = g.constant(Tensor::zeros(vec![0, 4]));
    assert!(matches!(
        hoicl(&mut g, empty, &[], &[], &cfg, &h, &targets, &mut rng),
        Err(Error::Degenerate(_)) | Err(Error::Shape { .. })
    ));
}

#[test]
fn losses_are_non_negative_and_limb_direction_bounded() {
    let h = PartHierarchy::standard();
    let targets = tsc_targets(NUM_CLASSES, 8, 1).unwrap();
    let skel = Skeleton::new(vec![(0, 1), (1, 2), (2, 3)], 4).unwrap();
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = unit_rows(&mut rng, 16, 8);
        let (parts, contacts) = random_parts(&mut rng, 16);
        let mut g = Graph::detached();
        let zv = g.constant(to_tensor(&z));
        let out = hoicl(&mut g, zv, &parts, &contacts, &HOICLConfig::default(), &h, &targets, &mut rng).unwrap();
        assert!(out.value(&g) >= 0.0);
        let logits = g.constant(Tensor::from_fn(16, 26, |_, _| rng.random_range(-3.0..3.0)));
        let ce = cross_entropy(&mut g, logits, &parts).unwrap();
        assert!(g.value(ce).data()[0] >= 0.0);
        let c = g.constant(Tensor::from_fn(16, 1, |_, _| rng.random_range(-3.0..3.0)));
        let b = balanced_bce(&mut g, c, &contacts).unwrap();
        assert!(g.value(b).data()[0] >= 0.0);

        let gt = KeypointSet::from_coords((0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        let pred = g.constant(Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)));
        let dir_only = limb_loss(&mut g, pred, &gt, &skel, 1.0, 0.0).unwrap();
        let d = g.value(dir_only).data()[0];
        assert!((0.0..=2.0).contains(&d), "direction term {d}");
    }
}

#[test]
fn loss_gradients_match_central_differences() {
    let h = PartHierarchy::standard();
    let targets = tsc_targets(NUM_CLASSES, 6, 1).unwrap();
    let skel = Skeleton::new(vec![(0, 1), (1, 2), (1, 3)], 4).unwrap();
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 12;
        let (parts, contacts) = random_parts(&mut rng, m);
        let raw = Tensor::from_fn(m, 6, |_, _| rng.sample(StandardNormal));
        let gt = KeypointSet::from_coords((0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        let mut store = ParamStore::new();
        let zid = store.add("z", raw).unwrap();
        let lid = store.add("logits", Tensor::from_fn(m, 26, |_, _| rng.random_range(-2.0..2.0))).unwrap();
        let cid = store.add("contact", Tensor::from_fn(m, 1, |_, _| rng.random_range(-2.0..2.0))).unwrap();
        let kid = store.add("keypoints", Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let hid = store.add("heatmap", Tensor::from_fn(12, 8, |_, _| rng.random_range(-2.0..2.0))).unwrap();
        let ht = Tensor::from_fn(12, 8, |r, b| ((r + b) % 5) as f64 / 16.0 + 0.0);
        let ht = {
            let mut d = ht.into_data();
            for r in 0..12 {
                let s: f64 = d[r * 8..(r + 1) * 8].iter().sum();
                d[r * 8..(r + 1) * 8].iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(vec![12, 8], d).unwrap()
        };
        let report = finite_difference_check(
            &mut store,
            |g| {
                let z = g.param(zid)?;
                let z = g.normalize_rows(z)?;
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let hl = hoicl(g, z, &parts, &contacts, &HOICLConfig::default(), &h, &targets, &mut r)?;
                let logits = g.param(lid)?;
                let ce = cross_entropy(g, logits, &parts)?;
                let c = g.param(cid)?;
                let bc = balanced_bce(g, c, &contacts)?;
                let k = g.param(kid)?;
                let limb = limb_loss(g, k, &gt, &skel, 1.0, 1.0)?;
                let hm = g.param(hid)?;
                let kl = heatmap_kl(g, hm, &ht, &(0..12).collect::<Vec<_>>())?;
                let mut total = hl.total;
                for v in [ce, bc, limb, kl] {
                    total = g.add(total, v)?;
                }
                Ok(total)
            },
            &cfg,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error());
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}
