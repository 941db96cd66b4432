//! Brute-force pairwise-sum reference implementations of the contrastive
//! losses, written directly from their definitions with plain loops.

#![allow(dead_code)]

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `None` when no anchor has a positive.
pub fn supcon(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let m = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for n in 0..m {
        let positives: Vec<usize> = (0..m).filter(|&j| j != n && labels[j] == labels[n]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for l in 0..m {
            if l != n {
                denom += (dot(&z[n], &z[l]) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &p in &positives {
            s += ((dot(&z[n], &z[p]) / tau).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

/// `levels[l][class]` maps a fine class to its label at level `l`.
pub fn hmlc(z: &[Vec<f64>], classes: &[u8], levels: &[Vec<usize>], tau: f64) -> Option<f64> {
    let mut total = None;
    for (depth, level) in levels.iter().enumerate() {
        let labels: Vec<usize> = classes.iter().map(|&c| level[c as usize]).collect();
        if let Some(v) = supcon(z, &labels, tau) {
            *total.get_or_insert(0.0) += v / 2f64.powi(depth as i32);
        }
    }
    total
}

pub fn tsc(z: &[Vec<f64>], classes: &[u8], targets: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (zn, &y) in z.iter().zip(classes) {
        let denom: f64 = targets.iter().map(|t| (dot(zn, t) / tau).exp()).sum();
        total += -((dot(zn, &targets[y as usize]) / tau).exp() / denom).ln();
    }
    total / z.len() as f64
}

pub struct HoiclTerms {
    pub hmlc: Option<f64>,
    pub tsc: Option<f64>,
    pub fir: Option<f64>,
    pub hoc: Option<f64>,
}

/// Unsubsampled HOICL terms; hands are classes 20..=23, feet 7, 8, 10, 11,
/// the object 24 and background 25.
pub fn hoicl_terms(
    z: &[Vec<f64>],
    parts: &[u8],
    contacts: &[bool],
    levels: &[Vec<usize>],
    targets: &[Vec<f64>],
    tau: f64,
) -> HoiclTerms {
    let fir_class = |p: u8| matches!(p, 7 | 8 | 10 | 11 | 20..=23);
    let pick = |f: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..z.len()).filter(|&i| f(i)).collect() };
    let fir = pick(&|i| fir_class(parts[i]));
    let obj = pick(&|i| parts[i] == 24);
    let hc = pick(&|i| parts[i] < 24 && contacts[i]);
    let oc = pick(&|i| parts[i] == 24 && contacts[i]);
    let pair_term = |a: &[usize], b: &[usize]| -> Option<f64> {
        if a.is_empty() || b.is_empty() {
            return None;
        }
        let rows: Vec<Vec<f64>> = a.iter().chain(b).map(|&i| z[i].clone()).collect();
        let labels: Vec<usize> = a.iter().map(|_| 0).chain(b.iter().map(|_| 1)).collect();
        supcon(&rows, &labels, tau)
    };
    HoiclTerms {
        hmlc: hmlc(z, parts, levels, tau),
        tsc: Some(tsc(z, parts, targets, tau)),
        fir: pair_term(&fir, &obj),
        hoc: pair_term(&hc, &oc),
    }
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn det3(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

pub enum Shape {
    Triangle([[f64; 3]; 3]),
    Plane { point: [f64; 3], normal: [f64; 3] },
}

/// Ray parameter of the hit with one primitive, solving
/// `o + t d = a + u (b - a) + v (c - a)` by Cramer's rule.
pub fn intersect(shape: &Shape, o: &[f64; 3], d: &[f64; 3]) -> Option<f64> {
    match shape {
        Shape::Triangle([a, b, c]) => {
            let e1 = sub3(b, a);
            let e2 = sub3(c, a);
            let nd = [-d[0], -d[1], -d[2]];
            let det = det3(&nd, &e1, &e2);
            if det.abs() < 1e-12 {
                return None;
            }
            let s = sub3(o, a);
            let t = det3(&s, &e1, &e2) / det;
            let u = det3(&nd, &s, &e2) / det;
            let v = det3(&nd, &e1, &s) / det;
            (u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 1e-12).then_some(t)
        }
        Shape::Plane { point, normal } => {
            let denom = dot(normal, d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = dot(normal, &sub3(point, o)) / denom;
            (t > 1e-12).then_some(t)
        }
    }
}

/// Index of the nearest primitive within `t_max`, testing every one;
/// exact ties go to the lower index.
pub fn first_hit(shapes: &[Shape], o: &[f64; 3], d: &[f64; 3], t_max: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in shapes.iter().enumerate() {
        if let Some(t) = intersect(s, o, d) {
            if t <= t_max && best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}
