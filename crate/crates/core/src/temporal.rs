//! Trajectory refinement: Gaussian, Savitzky–Golay and One-Euro filters,
//! and CTRefine, a contact-conditioned temporal attention refiner.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mpjpe, pck};
use crate::nn::{sinusoidal_encoding, AdamW, CosineSchedule, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::types::{KeypointProfile, KeypointSet, Point3};

/// Keypoint positions over time, `T × N_k`.
pub type Trajectory = Vec<Vec<Point3>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneEuroConfig {
    /// Hz.
    pub min_cutoff: f64,
    pub beta: f64,
    /// Hz.
    pub d_cutoff: f64,
}

impl Default for OneEuroConfig {
    fn default() -> Self {
        OneEuroConfig {
            min_cutoff: 1.0,
            beta: 0.007,
            d_cutoff: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Frames.
    pub gaussian_sigma: f64,
    pub sg_window: usize,
    pub sg_order: usize,
    pub one_euro: OneEuroConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            gaussian_sigma: 1.5,
            sg_window: 7,
            sg_order: 2,
            one_euro: OneEuroConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::invalid("gaussian_sigma must be > 0"));
        }
        if self.sg_window % 2 == 0 || self.sg_window <= self.sg_order {
            return Err(Error::invalid("sg_window must be odd and larger than sg_order"));
        }
        let e = &self.one_euro;
        if !(e.min_cutoff > 0.0) || !(e.d_cutoff > 0.0) || !(e.beta >= 0.0) {
            return Err(Error::invalid("one-euro cutoffs must be > 0 and beta >= 0"));
        }
        Ok(())
    }
}

fn check_traj(traj: &Trajectory, min_len: usize, what: &'static str) -> Result<usize> {
    if traj.len() < min_len.max(1) {
        return Err(Error::invalid(format!(
            "{what} needs at least {} frames, got {}",
            min_len.max(1),
            traj.len()
        )));
    }
    let nk = traj[0].len();
    if traj.iter().any(|f| f.len() != nk) {
        return Err(Error::shape(what, "frames disagree on keypoint count"));
    }
    Ok(nk)
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Centered FIR filter with reflection padding.
fn convolve(traj: &Trajectory, kernel: &[f64]) -> Trajectory {
    let t = traj.len();
    let half = (kernel.len() / 2) as isize;
    (0..t)
        .map(|f| {
            (0..traj[0].len())
                .map(|k| {
                    let mut acc = [0.0; 3];
                    for (j, w) in kernel.iter().enumerate() {
                        let src = reflect(f as isize + j as isize - half, t);
                        for c in 0..3 {
                            acc[c] += w * traj[src][k][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Normalised Gaussian weights over `±ceil(3σ)` frames.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn gaussian_smooth(traj: &Trajectory, sigma: f64) -> Result<Trajectory> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be > 0"));
    }
    let kernel = gaussian_kernel(sigma);
    check_traj(traj, kernel.len() / 2 + 1, "gaussian_smooth")?;
    Ok(convolve(traj, &kernel))
}

/// Least-squares polynomial smoothing weights for the window centre.
pub fn savitzky_golay_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= order {
        return Err(Error::invalid("window must be odd and larger than order"));
    }
    let half = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - half).powi(j as i32));
    let ata = a.transpose() * &a;
    let inv = ata
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Savitzky-Golay system".into()))?;
    let proj = inv * a.transpose();
    Ok(proj.row(0).iter().copied().collect())
}

pub fn savitzky_golay(traj: &Trajectory, window: usize, order: usize) -> Result<Trajectory> {
    let c = savitzky_golay_coefficients(window, order)?;
    check_traj(traj, window, "savitzky_golay")?;
    Ok(convolve(traj, &c))
}

/// One-Euro filter per coordinate, warm-started at the first sample.
pub fn one_euro(traj: &Trajectory, dt: f64, cfg: &OneEuroConfig) -> Result<Trajectory> {
    let nk = check_traj(traj, 1, "one_euro")?;
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be > 0"));
    }
    let alpha = |cutoff: f64| 1.0 / (1.0 + 1.0 / (2.0 * PI * cutoff * dt));
    let a_d = alpha(cfg.d_cutoff);
    let mut out = vec![traj[0].clone()];
    let mut dx = vec![[0.0; 3]; nk];
    for f in 1..traj.len() {
        let prev = out[f - 1].clone();
        let mut cur = prev.clone();
        for k in 0..nk {
            for c in 0..3 {
                let raw = (traj[f][k][c] - prev[k][c]) / dt;
                dx[k][c] = a_d * raw + (1.0 - a_d) * dx[k][c];
                let a = alpha(cfg.min_cutoff + cfg.beta * dx[k][c].abs());
                cur[k][c] = a * traj[f][k][c] + (1.0 - a) * prev[k][c];
            }
        }
        out.push(cur);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CTRefineConfig {
    pub num_keypoints: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for CTRefineConfig {
    fn default() -> Self {
        CTRefineConfig {
            num_keypoints: 16,
            hidden: 64,
            heads: 4,
        }
    }
}

/// Temporal self-attention over each keypoint track, then cross-attention
/// into keypoint ⊕ contact tokens, added back onto the input keypoints
/// through a zero-initialised projection.
#[derive(Clone, Debug)]
pub struct CTRefine {
    pub config: CTRefineConfig,
    embed: Linear,
    joint: ParamId,
    self_ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    self_ln2: LayerNorm,
    self_mlp: Mlp,
    kv_embed: Linear,
    cross_ln_q: LayerNorm,
    cross_ln_kv: LayerNorm,
    cross_attn: MultiHeadAttention,
    pub out: Linear,
}

impl CTRefine {
    pub fn new(cfg: &CTRefineConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.hidden;
        if cfg.num_keypoints == 0 || h == 0 {
            return Err(Error::invalid("CTRefine needs keypoints and hidden width"));
        }
        let joint = store.add(
            "ctrefine.joint",
            Tensor::from_fn(cfg.num_keypoints, h, |_, _| rng.random_range(-0.1..0.1)),
        )?;
        Ok(CTRefine {
            config: *cfg,
            embed: Linear::new(store, "ctrefine.embed", 3, h, rng)?,
            joint,
            self_ln1: LayerNorm::new(store, "ctrefine.self.ln1", h)?,
            self_attn: MultiHeadAttention::new(store, "ctrefine.self.attn", h, h, h, cfg.heads, rng)?,
            self_ln2: LayerNorm::new(store, "ctrefine.self.ln2", h)?,
            self_mlp: Mlp::new(store, "ctrefine.self.mlp", h, h, h, rng)?,
            kv_embed: Linear::new(store, "ctrefine.kv_embed", 4, h, rng)?,
            cross_ln_q: LayerNorm::new(store, "ctrefine.cross.ln_q", h)?,
            cross_ln_kv: LayerNorm::new(store, "ctrefine.cross.ln_kv", h)?,
            cross_attn: MultiHeadAttention::new(store, "ctrefine.cross.attn", h, h, h, cfg.heads, rng)?,
            out: Linear::zeroed(store, "ctrefine.out", h, 3)?,
        })
    }

    /// Refined coordinates as a `[N_k·T, 3]` node, track-major.
    pub fn forward(&self, g: &mut Graph, seq: &Trajectory, contact: &[Vec<f64>]) -> Result<Var> {
        let nk = check_traj(seq, 1, "ctrefine")?;
        let t = seq.len();
        if nk != self.config.num_keypoints {
            return Err(Error::shape("ctrefine", format!("{nk} keypoints, model expects {}", self.config.num_keypoints)));
        }
        if contact.len() != t || contact.iter().any(|c| c.len() != nk) {
            return Err(Error::shape("ctrefine", "contact does not match the keypoint sequence"));
        }
        let n = (t * nk) as f64;
        let mut centre = [0.0; 3];
        for p in seq.iter().flatten() {
            for c in 0..3 {
                centre[c] += p[c] / n;
            }
        }
        let pos = g.constant(sinusoidal_encoding(t, self.config.hidden));
        let joint = g.param(self.joint)?;
        let mut tracks = Vec::with_capacity(nk);
        for k in 0..nk {
            let local = Tensor::from_fn(t, 3, |f, c| seq[f][k][c] - centre[c]);
            let kv_in = Tensor::from_fn(t, 4, |f, c| if c < 3 { local.get(f, c) } else { contact[f][k] });
            let x = g.constant(local.clone());
            let e = self.embed.forward(g, x)?;
            let e = g.add(e, pos)?;
            let jk = g.gather(joint, &vec![k; t])?;
            let e = g.add(e, jk)?;

            let a = self.self_ln1.forward(g, e)?;
            let a = self.self_attn.forward(g, a, a)?;
            let h = g.add(e, a)?;
            let m = self.self_ln2.forward(g, h)?;
            let m = self.self_mlp.forward(g, m)?;
            let h = g.add(h, m)?;

            let kv = g.constant(kv_in);
            let kv = self.kv_embed.forward(g, kv)?;
            let kv = g.add(kv, pos)?;
            let kv = self.cross_ln_kv.forward(g, kv)?;
            let q = self.cross_ln_q.forward(g, h)?;
            let c = self.cross_attn.forward(g, q, kv)?;
            let z = g.add(h, c)?;
            let delta = self.out.forward(g, z)?;
            let absolute = g.constant(Tensor::from_fn(t, 3, |f, c| seq[f][k][c]));
            tracks.push(g.add(absolute, delta)?);
        }
        if tracks.len() == 1 {
            Ok(tracks[0])
        } else {
            g.concat(&tracks, 0)
        }
    }

    pub fn refine(&self, store: &ParamStore, seq: &Trajectory, contact: &[Vec<f64>]) -> Result<Trajectory> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, seq, contact)?;
        let v = g.value(out);
        let t = seq.len();
        Ok((0..t)
            .map(|f| (0..seq[0].len()).map(|k| [0, 1, 2].map(|c| v.get(k * t + f, c))).collect())
            .collect())
    }
}

/// A synthetic walking sequence with pinned stance feet.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub gt: Trajectory,
    pub noisy: Trajectory,
    pub contact: Vec<Vec<bool>>,
    pub dt: f64,
}

impl SyntheticSequence {
    pub fn contact_f64(&self) -> Vec<Vec<f64>> {
        self.contact.iter().map(|f| f.iter().map(|&c| c as u8 as f64).collect()).collect()
    }

    pub fn keypoint_sets(&self, traj: &Trajectory) -> Result<Vec<KeypointSet>> {
        traj.iter()
            .zip(&self.contact)
            .map(|(c, k)| KeypointSet::new(c.clone(), vec![true; c.len()], k.clone()))
            .collect()
    }
}

/// Walking SMPL15+object keypoints at random speed, heading and cadence.
/// Each ankle stays fixed (and is flagged in contact) for 60% of its gait
/// cycle; `noise_sigma` metres of i.i.d. Gaussian noise give the noisy
/// copy.
pub fn synthetic_gait(seed: u64, frames: usize, dt: f64, noise_sigma: f64) -> Result<SyntheticSequence> {
    if frames < 2 || !(dt > 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::invalid("synthetic gait needs ≥2 frames, dt > 0 and sigma ≥ 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = rng.random_range(0.8..1.3);
    let period = rng.random_range(0.9..1.2);
    let heading: f64 = rng.random_range(0.0..2.0 * PI);
    let start = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let phase0 = rng.random_range(0.0..1.0);
    let stride = speed * period;
    const STANCE: f64 = 0.6;
    let (hs, hc) = heading.sin_cos();
    let world = |fwd: f64, lat: f64, z: f64| [start[0] + hc * fwd - hs * lat, start[1] + hs * fwd + hc * lat, z];

    let profile = KeypointProfile::Smpl15Obj;
    let idx = |n: &str| profile.index_of(n).expect("profile joint");
    let mut gt = Vec::with_capacity(frames);
    let mut contact = Vec::with_capacity(frames);
    for f in 0..frames {
        let time = f as f64 * dt;
        let mut foot = [(0.0, 0.0, false); 2];
        for (i, ft) in foot.iter_mut().enumerate() {
            let tau = time / period + 0.5 * i as f64 + phase0;
            let (n, ph) = (tau.floor(), tau.fract());
            let base = stride * (n - 0.5 * i as f64 - phase0);
            *ft = if ph < STANCE {
                (base, 0.08, true)
            } else {
                let u = (ph - STANCE) / (1.0 - STANCE);
                (base + stride * 0.5 * (1.0 - (PI * u).cos()), 0.08 + 0.08 * (PI * u).sin(), false)
            };
        }
        let pelvis_fwd = 0.5 * (foot[0].0 + foot[1].0) + 0.25 * stride;
        let swing = (2.0 * PI * (time / period + phase0)).sin();
        let mut k = vec![[0.0; 3]; profile.num_keypoints()];
        k[idx("pelvis")] = world(pelvis_fwd, 0.0, 0.95);
        k[idx("neck")] = world(pelvis_fwd, 0.0, 1.50);
        k[idx("head")] = world(pelvis_fwd, 0.0, 1.64);
        for (i, side) in [("left", 1.0), ("right", -1.0)] {
            let j = if side > 0.0 { 0 } else { 1 };
            let arm = 0.15 * swing * if j == 0 { 1.0 } else { -1.0 };
            k[idx(&format!("{i}_hip"))] = world(pelvis_fwd, 0.09 * side, 0.90);
            k[idx(&format!("{i}_ankle"))] = world(foot[j].0, 0.1 * side, foot[j].1);
            let knee_fwd = 0.5 * (pelvis_fwd + foot[j].0) + 0.04;
            k[idx(&format!("{i}_knee"))] = world(knee_fwd, 0.095 * side, 0.5 * (0.90 + foot[j].1) + 0.02);
            k[idx(&format!("{i}_shoulder"))] = world(pelvis_fwd, 0.18 * side, 1.42);
            k[idx(&format!("{i}_elbow"))] = world(pelvis_fwd + 0.5 * arm, 0.2 * side, 1.15);
            k[idx(&format!("{i}_wrist"))] = world(pelvis_fwd + arm, 0.22 * side, 0.90);
        }
        k[idx("object")] = world(0.0, 0.8, 0.5);
        let mut c = vec![false; profile.num_keypoints()];
        c[idx("left_ankle")] = foot[0].2;
        c[idx("right_ankle")] = foot[1].2;
        gt.push(k);
        contact.push(c);
    }
    let noisy = if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).expect("sigma checked");
        gt.iter()
            .map(|fr| fr.iter().map(|p| p.map(|v| v + n.sample(&mut rng))).collect())
            .collect()
    } else {
        gt.clone()
    };
    Ok(SyntheticSequence { gt, noisy, contact, dt })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CTRefineTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub frames: usize,
    pub dt: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CTRefineTrainConfig {
    fn default() -> Self {
        CTRefineTrainConfig {
            steps: 300,
            batch: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            frames: 24,
            dt: 0.1,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

/// Seeds at or above this value are reserved for held-out evaluation.
pub const HELD_OUT_SEED_BASE: u64 = 1 << 40;

fn mse(g: &mut Graph, pred: Var, seq: &Trajectory) -> Result<Var> {
    let t = seq.len();
    let nk = seq[0].len();
    let target = g.constant(Tensor::from_fn(nk * t, 3, |r, c| seq[r % t][r / t][c]));
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Trains on fresh synthetic sequences each step; returns the mean loss
/// of every step.
pub fn train_ctrefine(model: &CTRefine, store: &mut ParamStore, cfg: &CTRefineTrainConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::invalid("training needs steps and batch > 0"));
    }
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: 0.1 * cfg.lr,
        total_steps: cfg.steps as u64,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seeds: Vec<u64> = (0..cfg.batch)
            .map(|b| (cfg.seed.wrapping_mul(1_000_003) + (step * cfg.batch + b) as u64) % HELD_OUT_SEED_BASE)
            .collect();
        let shared: &ParamStore = store;
        let results = seeds
            .par_iter()
            .map(|&s| -> Result<_> {
                let seq = synthetic_gait(s, cfg.frames, cfg.dt, cfg.noise_sigma)?;
                let mut g = Graph::new(shared);
                let out = model.forward(&mut g, &seq.noisy, &seq.contact_f64())?;
                let loss = mse(&mut g, out, &seq.gt)?;
                let value = g.value(loss).item()?;
                Ok((value, g.backward(loss)?.into_params()))
            })
            .collect::<Result<Vec<_>>>()?;
        store.zero_grad();
        let mut total = 0.0;
        for (v, grads) in &results {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("CTRefine loss at step {step}")));
            }
            total += v;
            store.accumulate(grads);
        }
        let scale = 1.0 / cfg.batch as f64;
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(store, sched.lr(step as u64));
        losses.push(total * scale);
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    None,
    Gaussian,
    SavitzkyGolay,
    OneEuro,
    Ctrefine,
}

impl RefineMethod {
    pub const ALL: [RefineMethod; 5] = [
        RefineMethod::None,
        RefineMethod::Gaussian,
        RefineMethod::SavitzkyGolay,
        RefineMethod::OneEuro,
        RefineMethod::Ctrefine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefineMethod::None => "none",
            RefineMethod::Gaussian => "gaussian",
            RefineMethod::SavitzkyGolay => "savitzky_golay",
            RefineMethod::OneEuro => "one_euro",
            RefineMethod::Ctrefine => "ctrefine",
        }
    }
}

/// Applies one method to a predicted sequence. CTRefine reads the contact
/// flags carried by `pred`.
pub fn refine_sequence(
    method: RefineMethod,
    pred: &[KeypointSet],
    dt: f64,
    cfg: &FilterConfig,
    ctrefine: Option<(&CTRefine, &ParamStore)>,
) -> Result<Vec<KeypointSet>> {
    cfg.validate()?;
    let traj: Trajectory = pred.iter().map(|k| k.coords.clone()).collect();
    let out = match method {
        RefineMethod::None => traj,
        RefineMethod::Gaussian => gaussian_smooth(&traj, cfg.gaussian_sigma)?,
        RefineMethod::SavitzkyGolay => savitzky_golay(&traj, cfg.sg_window, cfg.sg_order)?,
        RefineMethod::OneEuro => one_euro(&traj, dt, &cfg.one_euro)?,
        RefineMethod::Ctrefine => {
            let (model, store) = ctrefine.ok_or_else(|| Error::Missing("CTRefine model".into()))?;
            let contact: Vec<Vec<f64>> = pred
                .iter()
                .map(|k| k.contact.iter().map(|&c| c as u8 as f64).collect())
                .collect();
            model.refine(store, &traj, &contact)?
        }
    };
    pred.iter()
        .zip(out)
        .map(|(k, c)| KeypointSet::new(c, k.valid.clone(), k.contact.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub method: String,
    pub mpjpe_mm: f64,
    pub pck3: f64,
    pub pck5: f64,
}

/// One sequence to refine and score.
#[derive(Clone, Debug)]
pub struct RefineCase {
    pub pred: Vec<KeypointSet>,
    pub gt: Vec<KeypointSet>,
    pub dt: f64,
}

/// Scores every method over all cases pooled: the unrefined baseline, the
/// three filters, and CTRefine when a model is given.
pub fn compare_filters(
    cases: &[RefineCase],
    cfg: &FilterConfig,
    ctrefine: Option<(&CTRefine, &ParamStore)>,
    profile: KeypointProfile,
) -> Result<Vec<FilterRow>> {
    let methods: Vec<RefineMethod> = RefineMethod::ALL
        .into_iter()
        .filter(|m| *m != RefineMethod::Ctrefine || ctrefine.is_some())
        .collect();
    methods
        .iter()
        .map(|&m| {
            let mut pred = Vec::new();
            let mut gt = Vec::new();
            for c in cases {
                pred.extend(refine_sequence(m, &c.pred, c.dt, cfg, ctrefine)?);
                gt.extend(c.gt.iter().cloned());
            }
            Ok(FilterRow {
                method: m.name().to_string(),
                mpjpe_mm: mpjpe(&pred, &gt)?,
                pck3: pck(&pred, &gt, profile, 0.3)?,
                pck5: pck(&pred, &gt, profile, 0.5)?,
            })
        })
        .collect()
}

pub fn write_compare_csv<W: Write>(rows: &[FilterRow], mut w: W) -> Result<()> {
    writeln!(w, "method,mpjpe_mm,pck3,pck5")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.method, r.mpjpe_mm, r.pck3, r.pck5)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalised() {
        for s in [0.5, 1.5, 3.0] {
            assert!((gaussian_kernel(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = savitzky_golay_coefficients(5, 2).unwrap();
        let expect = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_sequences_are_rejected() {
        let t: Trajectory = vec![vec![[0.0; 3]]; 3];
        assert!(savitzky_golay(&t, 7, 2).is_err());
        assert!(gaussian_smooth(&t, 1.5).is_err());
        assert!(one_euro(&t, 0.1, &OneEuroConfig::default()).is_ok());
        assert!(FilterConfig {
            sg_window: 6,
            ..FilterConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gait_feet_are_pinned_in_stance() {
        let s = synthetic_gait(4, 40, 0.05, 0.0).unwrap();
        let p = KeypointProfile::Smpl15Obj;
        let la = p.index_of("left_ankle").unwrap();
        let mut stance = 0;
        for f in 1..40 {
            if s.contact[f][la] && s.contact[f - 1][la] {
                stance += 1;
                assert_eq!(s.gt[f][la], s.gt[f - 1][la]);
            }
        }
        assert!(stance > 5);
        assert_eq!(s.noisy, s.gt);
    }
}
