//! Training objectives: cross-entropy basics, SupCon and its hierarchical
//! and targeted variants, the HOICL composite, CPPool auxiliary terms,
//! heatmap KL and the limb loss.

use log::{debug, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridpool::pool_labels;
use crate::model::{HeadOutputs, HeatmapAxis, Mode};
use crate::serialize::apply_permutation;
use crate::tensor::{Graph, Tensor, Var};
use crate::types::{KeypointSet, PartLabelSpace, Skeleton, BACKGROUND_CLASS, NUM_CLASSES, OBJECT_CLASS};

/// Diagonal logit used to exclude self-pairs; `exp` of it is exactly 0.
const SELF_LOGIT: f64 = -1e9;

// ---- bookkeeping ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: String,
    pub weight: f64,
    /// Unweighted value; `None` when skipped.
    pub value: Option<f64>,
    /// `weight * value` as added into the total; 0 when skipped.
    pub contribution: f64,
}

impl Term {
    pub fn skipped(&self) -> bool {
        self.value.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub terms: Vec<Term>,
    /// Finer-grained terms of composite entries (for example HOICL parts).
    pub details: Vec<Term>,
}

impl LossOutput {
    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.total).data()[0]
    }

    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().chain(&self.details).find(|t| t.name == name)
    }
}

/// Weighted sum of the present parts, added in list order.
fn combine(g: &mut Graph, parts: Vec<(&str, f64, Option<Var>)>) -> Result<(Var, Vec<Term>)> {
    let mut total = None;
    let mut terms = Vec::with_capacity(parts.len());
    for (name, weight, v) in parts {
        match v {
            Some(v) => {
                let s = g.scale(v, weight);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
                terms.push(Term {
                    name: name.to_string(),
                    weight,
                    value: Some(g.value(v).data()[0]),
                    contribution: g.value(s).data()[0],
                });
            }
            None => terms.push(Term {
                name: name.to_string(),
                weight,
                value: None,
                contribution: 0.0,
            }),
        }
    }
    let total = total.ok_or_else(|| Error::Degenerate("every loss term was skipped".into()))?;
    Ok((total, terms))
}

// ---- basic terms ---------------------------------------------------------

/// Mean cross-entropy of `[n, C]` logits against class indices.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[u8]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} targets", s, targets.len()),
        ));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(t) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::invalid(format!("target class {t} >= {c}")));
    }
    let onehot = Tensor::from_fn(n, c, |i, j| if targets[i] as usize == j { 1.0 } else { 0.0 });
    let lsm = g.log_softmax(logits, 1)?;
    let oh = g.constant(onehot);
    let picked = g.mul(lsm, oh)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Binary cross-entropy on logits with per-element weights normalised to
/// sum to one.
fn weighted_bce(g: &mut Graph, logits: Var, targets: &[bool], weights: &[f64]) -> Result<Var> {
    let n = targets.len();
    if g.value(logits).len() != n || n == 0 {
        return Err(Error::shape(
            "bce",
            format!("logits {:?} vs {} targets", g.shape(logits), n),
        ));
    }
    let shape = g.shape(logits).to_vec();
    let total: f64 = weights.iter().sum();
    let y = g.constant(Tensor::new(shape.clone(), targets.iter().map(|&t| f64::from(u8::from(t))).collect())?);
    let w = g.constant(Tensor::new(shape, weights.iter().map(|w| w / total).collect())?);
    let sp = g.softplus(logits);
    let yx = g.mul(logits, y)?;
    let b = g.sub(sp, yx)?;
    let wb = g.mul(b, w)?;
    Ok(g.sum(wb))
}

/// Plain mean binary cross-entropy on logits.
pub fn bce(g: &mut Graph, logits: Var, targets: &[bool]) -> Result<Var> {
    weighted_bce(g, logits, targets, &vec![1.0; targets.len()])
}

/// Class-balanced binary cross-entropy: each class gets total weight 1/2
/// (inverse-frequency weighting); with a single class present this is the
/// plain mean.
pub fn balanced_bce(g: &mut Graph, logits: Var, targets: &[bool]) -> Result<Var> {
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| {
            if pos == 0 || neg == 0 {
                1.0
            } else if t {
                0.5 / pos as f64
            } else {
                0.5 / neg as f64
            }
        })
        .collect();
    weighted_bce(g, logits, targets, &weights)
}

// ---- contrastive ---------------------------------------------------------

/// Symmetric boolean positive-pair matrix with a false diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMask {
    n: usize,
    bits: Vec<bool>,
}

impl PairMask {
    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let bits = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                i != j && labels[i] == labels[j]
            })
            .collect();
        PairMask { n, bits }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..n * n).map(|k| f(k / n, k % n)).collect();
        let m = PairMask { n, bits };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn positives(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) {
                return Err(Error::invalid(format!("pair mask has self-pair at {i}")));
            }
            for j in 0..i {
                if self.get(i, j) != self.get(j, i) {
                    return Err(Error::invalid(format!("pair mask asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Rows of the embedding matrix that take part in one contrastive term,
/// with their labels and positive pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: PairMask,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(rows: Vec<usize>, labels: Vec<usize>, temperature: f64) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::shape("contrastive batch", "rows and labels differ in length"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        let mask = PairMask::from_labels(&labels);
        Ok(ContrastiveBatch {
            rows,
            labels,
            mask,
            temperature,
        })
    }
}

/// Supervised contrastive loss over the rows of `z` (assumed unit norm),
/// averaged over anchors that have at least one positive.
pub fn supcon(g: &mut Graph, z: Var, mask: &PairMask, temperature: f64) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != mask.len() {
        return Err(Error::shape(
            "supcon",
            format!("embeddings {:?} vs mask of {}", s, mask.len()),
        ));
    }
    let m = s[0];
    if m < 2 {
        return Err(Error::Degenerate("supcon needs at least two rows".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let counts: Vec<usize> = (0..m).map(|i| mask.positives(i)).collect();
    let anchors = counts.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Err(Error::Degenerate("no anchor has a positive".into()));
    }
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let diag = g.constant(Tensor::from_fn(m, m, |i, j| if i == j { SELF_LOGIT } else { 0.0 }));
    let sim = g.add(sim, diag)?;
    let logp = g.log_softmax(sim, 1)?;
    let w = Tensor::from_fn(m, m, |i, j| {
        if mask.get(i, j) {
            1.0 / (counts[i] as f64 * anchors as f64)
        } else {
            0.0
        }
    });
    let w = g.constant(w);
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// SupCon over the batch's rows of `z`.
pub fn supcon_batch(g: &mut Graph, z: Var, batch: &ContrastiveBatch) -> Result<Var> {
    let sub = g.gather(z, &batch.rows)?;
    supcon(g, sub, &batch.mask, batch.temperature)
}

/// Point-index sets used by the HOI contrastive terms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexSets {
    pub fir: Vec<usize>,
    pub obj: Vec<usize>,
    pub human_contact: Vec<usize>,
    pub object_contact: Vec<usize>,
}

impl IndexSets {
    pub fn from_labels(parts: &[u8], contacts: &[bool]) -> Result<Self> {
        if parts.len() != contacts.len() {
            return Err(Error::shape("index sets", "part and contact lengths differ"));
        }
        let mut s = IndexSets::default();
        for (i, (&p, &c)) in parts.iter().zip(contacts).enumerate() {
            if PartLabelSpace::is_interacting(p) {
                s.fir.push(i);
            }
            if p == OBJECT_CLASS {
                s.obj.push(i);
                if c {
                    s.object_contact.push(i);
                }
            } else if PartLabelSpace::is_human(p) && c {
                s.human_contact.push(i);
            }
        }
        Ok(s)
    }
}

fn disjoint(a: &[usize], b: &[usize]) -> bool {
    let set: std::collections::HashSet<_> = a.iter().collect();
    !b.iter().any(|x| set.contains(x))
}

/// FIR points (label 0) followed by object points (label 1).
pub fn build_fir_mask(parts: &[u8], sets: &IndexSets, temperature: f64) -> Result<ContrastiveBatch> {
    if !disjoint(&sets.fir, &sets.obj) {
        return Err(Error::invalid("FIR and object index sets overlap"));
    }
    for &i in sets.fir.iter().chain(&sets.obj) {
        if i >= parts.len() {
            return Err(Error::invalid(format!("index {i} out of range")));
        }
    }
    let rows: Vec<usize> = sets.fir.iter().chain(&sets.obj).copied().collect();
    let labels = std::iter::repeat_n(0, sets.fir.len())
        .chain(std::iter::repeat_n(1, sets.obj.len()))
        .collect();
    ContrastiveBatch::new(rows, labels, temperature)
}

/// Human-contact points (label 0) followed by object-contact points (1).
pub fn build_hoc_mask(
    parts: &[u8],
    contacts: &[bool],
    sets: &IndexSets,
    temperature: f64,
) -> Result<ContrastiveBatch> {
    if !disjoint(&sets.human_contact, &sets.object_contact) {
        return Err(Error::invalid("human-contact and object-contact sets overlap"));
    }
    for &i in &sets.human_contact {
        if i >= parts.len() || !PartLabelSpace::is_human(parts[i]) || !contacts[i] {
            return Err(Error::invalid(format!("point {i} is not a human contact point")));
        }
    }
    for &i in &sets.object_contact {
        if i >= parts.len() || parts[i] != OBJECT_CLASS || !contacts[i] {
            return Err(Error::invalid(format!("point {i} is not an object contact point")));
        }
    }
    let rows: Vec<usize> = sets.human_contact.iter().chain(&sets.object_contact).copied().collect();
    let labels = std::iter::repeat_n(0, sets.human_contact.len())
        .chain(std::iter::repeat_n(1, sets.object_contact.len()))
        .collect();
    ContrastiveBatch::new(rows, labels, temperature)
}

/// Label maps from fine part classes to coarser groupings, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartHierarchy {
    levels: Vec<Vec<usize>>,
}

const MIDDLE_GROUPS: [usize; NUM_CLASSES] = [
    // head 0, torso 1, arm 2, hand 3, leg 4, foot 5, object 6, background 7
    1, 4, 4, 1, 4, 4, 1, 5, 5, 1, 5, 5, 0, 1, 1, 0, 2, 2, 2, 2, 3, 3, 3, 3, 6, 7,
];

impl PartHierarchy {
    pub fn new(levels: Vec<Vec<usize>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("hierarchy needs at least one level"));
        }
        if levels.iter().any(|l| l.len() != NUM_CLASSES) {
            return Err(Error::invalid(format!("every level must map {NUM_CLASSES} classes")));
        }
        for w in levels.windows(2) {
            let (coarse, fine) = (&w[0], &w[1]);
            for a in 0..NUM_CLASSES {
                for b in 0..NUM_CLASSES {
                    if fine[a] == fine[b] && coarse[a] != coarse[b] {
                        return Err(Error::invalid(format!(
                            "classes {a} and {b} share a fine label but not a coarse one"
                        )));
                    }
                }
            }
        }
        Ok(PartHierarchy { levels })
    }

    /// Human/object/background, then body regions, then the 26 classes.
    pub fn standard() -> Self {
        let coarse = (0..NUM_CLASSES as u8)
            .map(|c| match c {
                OBJECT_CLASS => 1,
                BACKGROUND_CLASS => 2,
                _ => 0,
            })
            .collect();
        let fine = (0..NUM_CLASSES).collect();
        PartHierarchy::new(vec![coarse, MIDDLE_GROUPS.to_vec(), fine]).expect("standard hierarchy is consistent")
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn label(&self, level: usize, class: u8) -> usize {
        self.levels[level][class as usize]
    }

    /// Level weight `1 / 2^depth` with depth 0 the coarsest level.
    pub fn weight(level: usize) -> f64 {
        0.5f64.powi(level as i32)
    }
}

/// Hierarchical multi-label contrastive loss: level-weighted SupCon where
/// positives share a label at that level. Levels without any positive pair
/// are skipped.
pub fn hmlc(
    g: &mut Graph,
    z: Var,
    classes: &[u8],
    hierarchy: &PartHierarchy,
    temperature: f64,
) -> Result<Var> {
    if classes.len() < 2 {
        return Err(Error::Degenerate("hmlc needs at least two rows".into()));
    }
    let mut total: Option<Var> = None;
    for level in 0..hierarchy.num_levels() {
        let labels: Vec<usize> = classes.iter().map(|&c| hierarchy.label(level, c)).collect();
        let mask = PairMask::from_labels(&labels);
        let l = match supcon(g, z, &mask, temperature) {
            Ok(l) => l,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let l = g.scale(l, PartHierarchy::weight(level));
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::Degenerate("no hierarchy level has a positive pair".into()))
}

/// Pulls each embedding toward its class target:
/// `mean_n −log softmax_c(z_n · t_c / τ)[y_n]`.
pub fn tsc(g: &mut Graph, z: Var, classes: &[u8], targets: &Tensor, temperature: f64) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != classes.len() || s[0] == 0 {
        return Err(Error::shape("tsc", format!("embeddings {:?} vs {} labels", s, classes.len())));
    }
    if targets.rank() != 2 || targets.cols() != s[1] {
        return Err(Error::shape(
            "tsc",
            format!("targets {:?} vs embedding width {}", targets.shape(), s[1]),
        ));
    }
    for r in 0..targets.rows() {
        let n: f64 = targets.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("target {r} has norm {n}, expected 1")));
        }
    }
    let t = g.constant(targets.clone());
    let tt = g.transpose(t)?;
    let logits = g.matmul(z, tt)?;
    let logits = g.scale(logits, 1.0 / temperature);
    cross_entropy(g, logits, classes)
}

/// `count` unit vectors in `dim` dimensions spread over the sphere by
/// minimising a smooth maximum of their pairwise inner products from a
/// seeded start.
pub fn tsc_targets(count: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if count == 0 || dim == 0 {
        return Err(Error::invalid("tsc targets need count > 0 and dim > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut t: Vec<Vec<f64>> = (0..count)
        .map(|_| unit((0..dim).map(|_| rng.sample::<f64, _>(normal)).collect()))
        .collect();
    let sharpness = 20.0;
    let lr = 0.05;
    for _ in 0..400 {
        let mut s = vec![0.0; count * count];
        let mut max = f64::NEG_INFINITY;
        for i in 0..count {
            for j in (i + 1)..count {
                let v = dot(&t[i], &t[j]) * sharpness;
                s[i * count + j] = v;
                max = max.max(v);
            }
        }
        if count < 2 {
            break;
        }
        let mut z = 0.0;
        for i in 0..count {
            for j in (i + 1)..count {
                let e = (s[i * count + j] - max).exp();
                s[i * count + j] = e;
                z += e;
            }
        }
        let mut grad = vec![vec![0.0; dim]; count];
        for i in 0..count {
            for j in (i + 1)..count {
                let w = s[i * count + j] / z;
                for k in 0..dim {
                    grad[i][k] += w * t[j][k];
                    grad[j][k] += w * t[i][k];
                }
            }
        }
        for (ti, gi) in t.iter_mut().zip(&grad) {
            let moved: Vec<f64> = ti.iter().zip(gi).map(|(a, b)| a - lr * b).collect();
            *ti = unit(moved);
        }
    }
    Tensor::new(vec![count, dim], t.into_iter().flatten().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-300);
    v.into_iter().map(|x| x / n).collect()
}

// ---- HOICL ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HOICLConfig {
    pub lambda_fir: f64,
    pub lambda_hoc: f64,
    pub lambda_hmlc: f64,
    pub lambda_tsc: f64,
    pub tau_fir: f64,
    pub tau_hoc: f64,
    pub tau_global: f64,
    pub sample_cap: usize,
}

impl Default for HOICLConfig {
    fn default() -> Self {
        HOICLConfig {
            lambda_fir: 1.0,
            lambda_hoc: 1.0,
            lambda_hmlc: 0.05,
            lambda_tsc: 0.05,
            tau_fir: 0.07,
            tau_hoc: 0.07,
            tau_global: 0.07,
            sample_cap: 128,
        }
    }
}

impl HOICLConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.tau_fir, self.tau_hoc, self.tau_global].iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("HOICL temperatures must be > 0"));
        }
        if self.sample_cap == 0 {
            return Err(Error::invalid("sample_cap must be > 0"));
        }
        Ok(())
    }
}

/// Uniform subsample without replacement down to `cap`, in ascending index
/// order.
pub fn subsample(indices: &[usize], cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, indices.len(), cap).into_iter().map(|k| indices[k]).collect();
    picked.sort_unstable();
    picked
}

fn skip_degenerate(r: Result<Var>, name: &str) -> Result<Option<Var>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(why)) => {
            debug!("{name} skipped: {why}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// `λ_hmlc·L_HMLC + λ_tsc·L_TSC + λ_fir·L_fir + λ_hoc·L_hoc`. Each category
/// is subsampled to `sample_cap` first; terms whose index sets are empty or
/// have no positive pairs are reported as skipped.
pub fn hoicl(
    g: &mut Graph,
    z: Var,
    parts: &[u8],
    contacts: &[bool],
    cfg: &HOICLConfig,
    hierarchy: &PartHierarchy,
    targets: &Tensor,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    cfg.validate()?;
    if g.shape(z).first() != Some(&parts.len()) {
        return Err(Error::shape(
            "hoicl",
            format!("embeddings {:?} vs {} labels", g.shape(z), parts.len()),
        ));
    }
    let sets = IndexSets::from_labels(parts, contacts)?;

    let mut global_rows = Vec::new();
    for class in 0..NUM_CLASSES as u8 {
        let members: Vec<usize> = (0..parts.len()).filter(|&i| parts[i] == class).collect();
        global_rows.extend(subsample(&members, cfg.sample_cap, rng));
    }
    global_rows.sort_unstable();
    let global_classes: Vec<u8> = global_rows.iter().map(|&i| parts[i]).collect();
    let zg = g.gather(z, &global_rows)?;
    let l_hmlc = skip_degenerate(hmlc(g, zg, &global_classes, hierarchy, cfg.tau_global), "hmlc")?;
    let l_tsc = skip_degenerate(tsc(g, zg, &global_classes, targets, cfg.tau_global), "tsc")?;

    let l_fir = if sets.fir.is_empty() || sets.obj.is_empty() {
        debug!("fir term skipped: no FIR or no object points");
        None
    } else {
        let sub = IndexSets {
            fir: subsample(&sets.fir, cfg.sample_cap, rng),
            obj: subsample(&sets.obj, cfg.sample_cap, rng),
            ..IndexSets::default()
        };
        let batch = build_fir_mask(parts, &sub, cfg.tau_fir)?;
        skip_degenerate(supcon_batch(g, z, &batch), "fir")?
    };

    let l_hoc = if sets.human_contact.is_empty() || sets.object_contact.is_empty() {
        debug!("hoc term skipped: no human-contact or no object-contact points");
        None
    } else {
        let sub = IndexSets {
            human_contact: subsample(&sets.human_contact, cfg.sample_cap, rng),
            object_contact: subsample(&sets.object_contact, cfg.sample_cap, rng),
            ..IndexSets::default()
        };
        let batch = build_hoc_mask(parts, contacts, &sub, cfg.tau_hoc)?;
        skip_degenerate(supcon_batch(g, z, &batch), "hoc")?
    };

    let (total, terms) = combine(
        g,
        vec![
            ("hmlc", cfg.lambda_hmlc, l_hmlc),
            ("tsc", cfg.lambda_tsc, l_tsc),
            ("fir", cfg.lambda_fir, l_fir),
            ("hoc", cfg.lambda_hoc, l_hoc),
        ],
    )?;
    Ok(LossOutput {
        total,
        terms,
        details: Vec::new(),
    })
}

// ---- frame-level objectives ----------------------------------------------

/// Ground truth for one frame, in the frame's point order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub part: Vec<u8>,
    pub contact: Vec<bool>,
    pub keypoints: KeypointSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainWeights {
    pub seg: f64,
    pub contact: f64,
    pub coord: f64,
    pub keypoint_contact: f64,
    pub hoicl: f64,
    pub cppool: f64,
}

impl Default for PretrainWeights {
    fn default() -> Self {
        PretrainWeights {
            seg: 1.0,
            contact: 1.0,
            coord: 0.5,
            keypoint_contact: 0.02,
            hoicl: 1.0,
            cppool: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneWeights {
    pub heatmap: f64,
    pub limb: f64,
    pub limb_direction: f64,
    pub limb_length: f64,
}

impl Default for FinetuneWeights {
    fn default() -> Self {
        FinetuneWeights {
            heatmap: 1.0,
            limb: 0.1,
            limb_direction: 1.0,
            limb_length: 1.0,
        }
    }
}

/// Everything the pretraining objective needs besides the network outputs.
#[derive(Clone, Debug)]
pub struct PretrainContext<'a> {
    pub weights: &'a PretrainWeights,
    pub hoicl: &'a HOICLConfig,
    pub hierarchy: &'a PartHierarchy,
    pub targets: &'a Tensor,
}

pub const PRETRAIN_TERMS: [&str; 6] = ["seg", "contact", "coord", "keypoint_contact", "hoicl", "cppool"];
pub const FINETUNE_TERMS: [&str; 2] = ["heatmap", "limb"];

fn missing(term: &str, what: impl std::fmt::Display) -> Error {
    Error::Missing(format!("{term}: {what}"))
}

/// Mean squared error over the coordinates of valid keypoints.
pub fn keypoint_mse(g: &mut Graph, pred: Var, gt: &KeypointSet) -> Result<Var> {
    let nk = gt.len();
    if g.shape(pred) != [nk, 3] {
        return Err(Error::shape("keypoint_mse", format!("{:?} vs {} keypoints", g.shape(pred), nk)));
    }
    let valid = gt.valid.iter().filter(|&&v| v).count();
    if valid == 0 {
        return Err(Error::Degenerate("no valid keypoints".into()));
    }
    let target = g.constant(Tensor::from_fn(nk, 3, |k, a| if gt.valid[k] { gt.coords[k][a] } else { 0.0 }));
    let mask = g.constant(Tensor::from_fn(nk, 3, |k, _| if gt.valid[k] { 1.0 } else { 0.0 }));
    let d = g.sub(pred, target)?;
    let d = g.mul(d, mask)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (3 * valid) as f64))
}

/// Labels at the input resolution of every pooling stage, in the model's
/// internal order.
pub fn stage_labels(
    out: &HeadOutputs,
    part: &[u8],
    contact: &[bool],
) -> Result<Vec<(Vec<u8>, Vec<bool>)>> {
    let trace = &out.trace;
    let mut cur = (
        apply_permutation(part, &trace.order)?,
        apply_permutation(contact, &trace.order)?,
    );
    let mut levels = Vec::with_capacity(trace.mappings.len());
    for m in &trace.mappings {
        let next = pool_labels(&cur.0, &cur.1, m)?;
        levels.push(cur);
        cur = next;
    }
    Ok(levels)
}

/// Sum over pooling stages of part cross-entropy plus contact BCE on the
/// CPPool auxiliary heads; `None` when the model does not use CPPool.
pub fn cppool_loss(g: &mut Graph, out: &HeadOutputs, part: &[u8], contact: &[bool]) -> Result<Option<Var>> {
    if out.trace.aux.is_empty() {
        return Ok(None);
    }
    let levels = stage_labels(out, part, contact)?;
    if levels.len() != out.trace.aux.len() {
        return Err(Error::invalid(format!(
            "{} auxiliary outputs for {} pooling stages",
            out.trace.aux.len(),
            levels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (aux, (p, c)) in out.trace.aux.iter().zip(&levels) {
        if g.shape(aux.part_logits)[0] != p.len() {
            return Err(Error::invalid("label propagation does not match stage resolution"));
        }
        let lp = cross_entropy(g, aux.part_logits, p)?;
        let lc = bce(g, aux.contact_logits, c)?;
        let l = g.add(lp, lc)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total)
}

pub fn pretrain_loss(
    g: &mut Graph,
    out: &HeadOutputs,
    labels: &FrameLabels,
    ctx: &PretrainContext,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    if out.mode != Mode::Pretrain {
        return Err(Error::invalid("pretrain_loss needs pretrain-mode outputs"));
    }
    let n = g.shape(out.seg)[0];
    if labels.part.len() != n {
        return Err(missing("seg", format!("{} part labels for {n} points", labels.part.len())));
    }
    if labels.contact.len() != n {
        return Err(missing("contact", format!("{} contact labels for {n} points", labels.contact.len())));
    }
    let nk = g.shape(out.keypoints)[0];
    if labels.keypoints.len() != nk {
        return Err(missing("coord", format!("{} keypoint labels for {nk} keypoints", labels.keypoints.len())));
    }
    let w = ctx.weights;
    let seg = cross_entropy(g, out.seg, &labels.part)?;
    let contact = balanced_bce(g, out.point_contact, &labels.contact)?;
    let coord = keypoint_mse(g, out.keypoints, &labels.keypoints)
        .map_err(|e| missing("coord", e))?;
    let valid: Vec<usize> = (0..nk).filter(|&k| labels.keypoints.valid[k]).collect();
    let kc_logits = g.gather(out.keypoint_contact, &valid)?;
    let kc_targets: Vec<bool> = valid.iter().map(|&k| labels.keypoints.contact[k]).collect();
    let kcontact = balanced_bce(g, kc_logits, &kc_targets)?;
    let h = hoicl(
        g,
        out.embeddings,
        &labels.part,
        &labels.contact,
        ctx.hoicl,
        ctx.hierarchy,
        ctx.targets,
        rng,
    )?;
    let cp = cppool_loss(g, out, &labels.part, &labels.contact)?;
    let (total, terms) = combine(
        g,
        vec![
            ("seg", w.seg, Some(seg)),
            ("contact", w.contact, Some(contact)),
            ("coord", w.coord, Some(coord)),
            ("keypoint_contact", w.keypoint_contact, Some(kcontact)),
            ("hoicl", w.hoicl, Some(h.total)),
            ("cppool", w.cppool, cp),
        ],
    )?;
    let details = h
        .terms
        .into_iter()
        .map(|t| Term {
            name: format!("hoicl.{}", t.name),
            ..t
        })
        .collect();
    Ok(LossOutput { total, terms, details })
}

/// Discretised Gaussian (σ = 1 bin) over the bins of each axis of each
/// keypoint. Rows of invalid keypoints are zero. Returns the `[N_k·3, bins]`
/// targets and the number of coordinates clamped to the edge bins.
pub fn heatmap_targets(axis: &HeatmapAxis, gt: &KeypointSet) -> (Tensor, usize) {
    let bins = axis.bins;
    let mut data = vec![0.0; gt.len() * 3 * bins];
    let mut clamped = 0;
    for k in 0..gt.len() {
        if !gt.valid[k] {
            continue;
        }
        for a in 0..3 {
            let mut mu = axis.bin_coordinate(a, gt.coords[k][a]);
            if !(0.0..=(bins - 1) as f64).contains(&mu) {
                warn!("keypoint {k} axis {a} outside heatmap range; clamped to edge bin");
                mu = mu.clamp(0.0, (bins - 1) as f64);
                clamped += 1;
            }
            let row = &mut data[(k * 3 + a) * bins..(k * 3 + a + 1) * bins];
            for (b, v) in row.iter_mut().enumerate() {
                let d = b as f64 - mu;
                *v = (-0.5 * d * d).exp();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    (Tensor::new(vec![gt.len() * 3, bins], data).expect("layout"), clamped)
}

/// Mean over the given rows of `KL(target ‖ softmax(logits))`.
pub fn heatmap_kl(g: &mut Graph, logits: Var, targets: &Tensor, rows: &[usize]) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::shape(
            "heatmap_kl",
            format!("logits {:?} vs targets {:?}", g.shape(logits), targets.shape()),
        ));
    }
    if rows.is_empty() {
        return Err(Error::Degenerate("no valid keypoint to supervise the heatmaps".into()));
    }
    let bins = targets.cols();
    let lsm = g.log_softmax(logits, 1)?;
    let lsm = g.gather(lsm, rows)?;
    let t: Vec<f64> = rows.iter().flat_map(|&r| targets.row(r).to_vec()).collect();
    let entropy: f64 = t.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum();
    let tv = g.constant(Tensor::new(vec![rows.len(), bins], t)?);
    let cross = g.mul(lsm, tv)?;
    let cross = g.sum(cross);
    let kl = g.scale(cross, -1.0);
    let kl = g.add_scalar(kl, entropy);
    Ok(g.scale(kl, 1.0 / rows.len() as f64))
}

/// `λ_dir·mean(1 − cos) + λ_len·mean(SmoothL1(‖B_pred‖ − ‖B_gt‖))` over
/// bones whose endpoints are both valid in `gt`. Zero-length ground-truth
/// bones only enter the length term.
pub fn limb_loss(
    g: &mut Graph,
    pred: Var,
    gt: &KeypointSet,
    skel: &Skeleton,
    lambda_dir: f64,
    lambda_len: f64,
) -> Result<Var> {
    const EPS: f64 = 1e-12;
    let nk = gt.len();
    if g.shape(pred) != [nk, 3] {
        return Err(Error::shape("limb_loss", format!("{:?} vs {} keypoints", g.shape(pred), nk)));
    }
    let bones = skel.restricted_to(&gt.valid);
    let edges = bones.edges();
    if edges.is_empty() {
        return Err(Error::Degenerate("no usable bone".into()));
    }
    let gt_bone = |&(a, b): &(usize, usize)| -> [f64; 3] {
        [0, 1, 2].map(|k| gt.coords[b][k] - gt.coords[a][k])
    };
    let gt_len: Vec<f64> = edges.iter().map(|e| {
        let v = gt_bone(e);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }).collect();

    let ia: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let ib: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let pa = g.gather(pred, &ia)?;
    let pb = g.gather(pred, &ib)?;
    let bp = g.sub(pb, pa)?;
    let sq = g.mul(bp, bp)?;
    let sq = g.sum_axis(sq, 1)?;
    let sq = g.add_scalar(sq, EPS);
    let len = g.sqrt(sq);

    let glen = g.constant(Tensor::vector(gt_len.clone()));
    let dl = g.sub(len, glen)?;
    let sl = g.smooth_l1(dl, 1.0);
    let len_term = g.mean_all(sl);

    let dir_rows: Vec<usize> = (0..edges.len()).filter(|&e| gt_len[e] > 0.0).collect();
    let total_len = g.scale(len_term, lambda_len);
    if dir_rows.is_empty() {
        return Ok(total_len);
    }
    let unit_gt: Vec<f64> = dir_rows
        .iter()
        .flat_map(|&e| gt_bone(&edges[e]).map(|v| v / gt_len[e]))
        .collect();
    let bpd = g.gather(bp, &dir_rows)?;
    let lend = g.gather(len, &dir_rows)?;
    let ug = g.constant(Tensor::new(vec![dir_rows.len(), 3], unit_gt)?);
    let dotp = g.mul(bpd, ug)?;
    let dotp = g.sum_axis(dotp, 1)?;
    let cos = g.div(dotp, lend)?;
    let one_minus = g.neg(cos);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let dir_term = g.mean_all(one_minus);
    let total_dir = g.scale(dir_term, lambda_dir);
    g.add(total_dir, total_len)
}

pub fn finetune_loss(
    g: &mut Graph,
    out: &HeadOutputs,
    gt: &KeypointSet,
    skel: &Skeleton,
    weights: &FinetuneWeights,
) -> Result<LossOutput> {
    let logits = out
        .heatmap_logits
        .ok_or_else(|| Error::invalid("finetune_loss needs finetune-mode outputs"))?;
    let nk = g.shape(out.keypoints)[0];
    if gt.len() != nk {
        return Err(missing("heatmap", format!("{} keypoint labels for {nk} keypoints", gt.len())));
    }
    let (targets, _) = heatmap_targets(&out.heatmap_axis, gt);
    let rows: Vec<usize> = (0..nk).filter(|&k| gt.valid[k]).flat_map(|k| [3 * k, 3 * k + 1, 3 * k + 2]).collect();
    let hm = heatmap_kl(g, logits, &targets, &rows)?;
    let limb = skip_degenerate(
        limb_loss(g, out.keypoints, gt, skel, weights.limb_direction, weights.limb_length),
        "limb",
    )?;
    let (total, terms) = combine(
        g,
        vec![("heatmap", weights.heatmap, Some(hm)), ("limb", weights.limb, limb)],
    )?;
    Ok(LossOutput {
        total,
        terms,
        details: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &mut Graph, r: &[&[f64]]) -> Var {
        g.constant(Tensor::from_rows(r).unwrap())
    }

    #[test]
    fn ce_gradient_on_zero_logits() {
        let mut g = Graph::detached();
        let x = g.input(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut g, x, &[0]).unwrap();
        let gr = g.backward(l).unwrap();
        let d = gr.of(x).unwrap();
        assert!((d[0] + 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        let mut g = Graph::detached();
        let z = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let l = supcon(&mut g, z, &PairMask::from_labels(&[0, 0]), 0.07).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn supcon_skips_lonely_anchors_and_rejects_degenerate() {
        let mut g = Graph::detached();
        let z = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let with_lonely = supcon(&mut g, z, &PairMask::from_labels(&[0, 0, 1]), 1.0).unwrap();
        // Each paired anchor: -log(e / (e + 1)); the lonely anchor adds nothing.
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(with_lonely).data()[0] - expect).abs() < 1e-12);
        assert!(matches!(
            supcon(&mut g, z, &PairMask::from_labels(&[0, 1, 2]), 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn fir_and_hoc_masks() {
        let parts = [20u8, 21, OBJECT_CLASS, OBJECT_CLASS, 3];
        let contacts = [true, false, true, false, false];
        let sets = IndexSets::from_labels(&parts, &contacts).unwrap();
        assert_eq!(sets.fir, vec![0, 1]);
        assert_eq!(sets.obj, vec![2, 3]);
        let b = build_fir_mask(&parts, &sets, 0.07).unwrap();
        assert!(b.mask.get(0, 1) && b.mask.get(2, 3));
        assert!(!b.mask.get(0, 2) && !b.mask.get(1, 3) && !b.mask.get(0, 0));

        let all_fir = IndexSets {
            fir: vec![0, 1],
            ..IndexSets::default()
        };
        let b = build_fir_mask(&parts, &all_fir, 0.07).unwrap();
        assert!(b.mask.get(0, 1) && b.mask.get(1, 0));

        let overlap = IndexSets {
            fir: vec![0, 2],
            obj: vec![2],
            ..IndexSets::default()
        };
        assert!(build_fir_mask(&parts, &overlap, 0.07).is_err());

        let h = build_hoc_mask(&parts, &contacts, &sets, 0.07).unwrap();
        assert_eq!(h.rows, vec![0, 2]);
        assert!(!h.mask.get(0, 1));
    }

    #[test]
    fn hierarchy_is_consistent_and_single_level_reduces() {
        let h = PartHierarchy::standard();
        assert_eq!(h.num_levels(), 3);
        assert_eq!(h.label(1, 20), h.label(1, 22));
        assert_ne!(h.label(1, 20), h.label(1, 7));
        let mut g = Graph::detached();
        let z = rows(&mut g, &[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0], &[-0.6, 0.8]]);
        let fine = PartHierarchy::new(vec![(0..NUM_CLASSES).collect()]).unwrap();
        let classes = [1u8, 1, 2, 2];
        let a = hmlc(&mut g, z, &classes, &fine, 0.5).unwrap();
        let b = supcon(&mut g, z, &PairMask::from_labels(&[1, 1, 2, 2]), 0.5).unwrap();
        assert_eq!(g.value(a).data()[0], g.value(b).data()[0]);
    }

    #[test]
    fn hmlc_prefers_orthogonal_classes() {
        let h = PartHierarchy::standard();
        let mut g = Graph::detached();
        let classes = [3u8, 3, OBJECT_CLASS, OBJECT_CLASS];
        let ortho = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let s = 0.5f64.sqrt();
        let mixed = rows(&mut g, &[&[1.0, 0.0], &[s, s], &[s, s], &[0.0, 1.0]]);
        let lo = hmlc(&mut g, ortho, &classes, &h, 0.1).unwrap();
        let hi = hmlc(&mut g, mixed, &classes, &h, 0.1).unwrap();
        assert!(g.value(lo).data()[0] < g.value(hi).data()[0]);

        let same = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let zero = hmlc(&mut g, same, &[5, 5], &h, 0.1).unwrap();
        assert!(g.value(zero).data()[0].abs() < 1e-12);
    }

    #[test]
    fn tsc_closed_forms() {
        let targets = Tensor::from_fn(26, 26, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut g = Graph::detached();
        let z = g.constant(Tensor::from_fn(1, 26, |_, j| if j == 4 { 1.0 } else { 0.0 }));
        let l = tsc(&mut g, z, &[4], &targets, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((g.value(l).data()[0] + (e / (e + 25.0)).ln()).abs() < 1e-12);

        let zero = g.constant(Tensor::zeros(vec![1, 26]));
        let l = tsc(&mut g, zero, &[0], &targets, 0.07).unwrap();
        assert!((g.value(l).data()[0] - 26f64.ln()).abs() < 1e-12);

        let bad = Tensor::full(vec![26, 26], 1.0);
        assert!(tsc(&mut g, z, &[4], &bad, 1.0).is_err());
    }

    #[test]
    fn tsc_targets_are_spread_unit_vectors() {
        let t = tsc_targets(26, 64, 0).unwrap();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..26 {
            let n: f64 = t.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                worst = worst.max(dot(t.row(i), t.row(j)));
            }
        }
        assert!(worst < 0.05, "max inner product {worst}");
        assert_eq!(t, tsc_targets(26, 64, 0).unwrap());
    }

    #[test]
    fn limb_loss_cases() {
        let gt = KeypointSet::from_coords(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 2.0, 0.0]]).unwrap();
        let skel = Skeleton::new(vec![(0, 1), (1, 2)], 3).unwrap();
        let mut g = Graph::detached();
        let same = g.constant(Tensor::from_fn(3, 3, |k, a| gt.coords[k][a]));
        let l = limb_loss(&mut g, same, &gt, &skel, 1.0, 1.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
        let moved = g.constant(Tensor::from_fn(3, 3, |k, a| gt.coords[k][a] + 0.3));
        let l = limb_loss(&mut g, moved, &gt, &skel, 1.0, 1.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);
        let doubled = g.constant(Tensor::from_fn(3, 3, |k, a| 2.0 * gt.coords[k][a]));
        let l = limb_loss(&mut g, doubled, &gt, &skel, 1.0, 1.0).unwrap();
        // bone lengths 1 and 2: SmoothL1(1) = 0.5, SmoothL1(2) = 1.5
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-9);

        let mut invalid = gt.clone();
        invalid.valid = vec![true, false, true];
        assert!(limb_loss(&mut g, same, &invalid, &skel, 1.0, 1.0).is_err());
    }

    #[test]
    fn heatmap_kl_cases() {
        let axis = HeatmapAxis {
            center: [0.0; 3],
            half_extent: 1.0,
            bins: 8,
        };
        let gt = KeypointSet::from_coords(vec![[0.1, -0.3, 0.7]]).unwrap();
        let (t, clamped) = heatmap_targets(&axis, &gt);
        assert_eq!(clamped, 0);
        let mut g = Graph::detached();
        let logits = g.constant(Tensor::new(vec![3, 8], t.data().iter().map(|p| p.ln()).collect()).unwrap());
        let l = heatmap_kl(&mut g, logits, &t, &[0, 1, 2]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        let one_hot = Tensor::from_fn(3, 8, |_, b| if b == 2 { 1.0 } else { 0.0 });
        let uniform = g.constant(Tensor::zeros(vec![3, 8]));
        let l = heatmap_kl(&mut g, uniform, &one_hot, &[0, 1, 2]).unwrap();
        assert!((g.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);
        assert!(heatmap_kl(&mut g, uniform, &one_hot, &[]).is_err());

        let far = KeypointSet::from_coords(vec![[5.0, 0.0, 0.0]]).unwrap();
        let (t, clamped) = heatmap_targets(&axis, &far);
        assert_eq!(clamped, 1);
        assert!(t.row(0)[7] > t.row(0)[0]);
    }

    #[test]
    fn balanced_bce_weights_classes_equally() {
        let mut g = Graph::detached();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 2.0]));
        let l = balanced_bce(&mut g, x, &[false, false, false, true]).unwrap();
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let expect = 0.5 * 2f64.ln() + 0.5 * (sp(2.0) - 2.0);
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }
}
