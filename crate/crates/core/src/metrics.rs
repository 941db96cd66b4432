//! Keypoint accuracy (MPJPE, PCK), segmentation accuracy and their
//! correlation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{distance, torso_length, KeypointProfile, KeypointSet};

fn check_pairs(pred: &[KeypointSet], gt: &[KeypointSet]) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", format!("{} predicted frames vs {} ground-truth", pred.len(), gt.len())));
    }
    let nk = gt.first().map_or(0, |k| k.len());
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != nk || g.len() != nk {
            return Err(Error::shape("metrics", format!("frame {f} keypoint count differs")));
        }
    }
    Ok(nk)
}

fn pairs<'a>(p: &'a KeypointSet, g: &'a KeypointSet) -> impl Iterator<Item = (usize, f64)> + 'a {
    (0..g.len())
        .filter(|&k| p.valid[k] && g.valid[k])
        .map(|k| (k, distance(&p.coords[k], &g.coords[k])))
}

/// Mean joint error in millimetres over (frame, joint) pairs valid in both.
pub fn mpjpe(pred: &[KeypointSet], gt: &[KeypointSet]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| pairs(p, g))
        .fold((0.0, 0usize), |(s, n), (_, e)| (s + e, n + 1));
    if n == 0 {
        return Err(Error::Degenerate("no valid joints to score".into()));
    }
    Ok(1000.0 * sum / n as f64)
}

/// MPJPE of each frame; `None` for frames without valid joints.
pub fn frame_mpjpe(pred: &[KeypointSet], gt: &[KeypointSet]) -> Result<Vec<Option<f64>>> {
    check_pairs(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let e: Vec<f64> = pairs(p, g).map(|(_, e)| e).collect();
            (!e.is_empty()).then(|| 1000.0 * e.iter().sum::<f64>() / e.len() as f64)
        })
        .collect())
}

/// Mean error per joint in millimetres; `None` for joints never valid.
pub fn per_joint_error(pred: &[KeypointSet], gt: &[KeypointSet]) -> Result<Vec<Option<f64>>> {
    let nk = check_pairs(pred, gt)?;
    let mut sum = vec![0.0; nk];
    let mut count = vec![0usize; nk];
    for (p, g) in pred.iter().zip(gt) {
        for (k, e) in pairs(p, g) {
            sum[k] += e;
            count[k] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| 1000.0 * s / c as f64))
        .collect())
}

/// Percentage of valid joints closer than `fraction` of the ground-truth
/// torso length. Frames with a missing or zero-length torso are skipped.
pub fn pck(pred: &[KeypointSet], gt: &[KeypointSet], profile: KeypointProfile, fraction: f64) -> Result<f64> {
    check_pairs(pred, gt)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        let torso = match torso_length(g, profile) {
            Ok(t) if !t.is_degenerate() => t.meters(),
            Ok(_) => {
                log::warn!("frame {f}: zero torso length, excluded from PCK");
                continue;
            }
            Err(e) => {
                log::warn!("frame {f}: {e}, excluded from PCK");
                continue;
            }
        };
        for (_, e) in pairs(p, g) {
            total += 1;
            hit += (e < fraction * torso) as usize;
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("no frames with a usable torso".into()));
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// Row-wise argmax of a logit matrix.
pub fn argmax_rows(logits: &Tensor) -> Vec<u8> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Percentage of points whose predicted class matches.
pub fn seg_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("seg_accuracy", format!("{} predictions vs {} labels", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Degenerate("no points to score".into()));
    }
    let ok = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * ok as f64 / gt.len() as f64)
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEvalReport {
    pub mpjpe_mm: f64,
    pub pck3: f64,
    pub pck5: f64,
    pub per_joint_mm: Vec<Option<f64>>,
    pub n_frames: usize,
    pub seg_accuracy: Option<f64>,
    /// Correlation of per-frame segmentation accuracy with per-frame MPJPE.
    pub seg_pose_r: Option<f64>,
}

impl PoseEvalReport {
    pub fn evaluate(pred: &[KeypointSet], gt: &[KeypointSet], profile: KeypointProfile) -> Result<Self> {
        let report = PoseEvalReport {
            mpjpe_mm: mpjpe(pred, gt)?,
            pck3: pck(pred, gt, profile, 0.3)?,
            pck5: pck(pred, gt, profile, 0.5)?,
            per_joint_mm: per_joint_error(pred, gt)?,
            n_frames: gt.len(),
            seg_accuracy: None,
            seg_pose_r: None,
        };
        debug_assert!(report.pck5 >= report.pck3);
        Ok(report)
    }

    /// Adds segmentation accuracy over all points and its per-frame
    /// correlation with pose error (left undefined for fewer than 3 frames
    /// or constant series).
    pub fn with_segmentation(
        mut self,
        pred: &[KeypointSet],
        gt: &[KeypointSet],
        seg_pred: &[Vec<u8>],
        seg_gt: &[Vec<u8>],
    ) -> Result<Self> {
        if seg_pred.len() != seg_gt.len() || seg_gt.len() != gt.len() {
            return Err(Error::shape("with_segmentation", "segmentation frames do not match keypoint frames"));
        }
        let all_pred: Vec<u8> = seg_pred.concat();
        let all_gt: Vec<u8> = seg_gt.concat();
        self.seg_accuracy = Some(seg_accuracy(&all_pred, &all_gt)?);
        let per_frame = frame_mpjpe(pred, gt)?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for f in 0..gt.len() {
            if let (Some(e), Ok(acc)) = (per_frame[f], seg_accuracy(&seg_pred[f], &seg_gt[f])) {
                xs.push(acc);
                ys.push(e);
            }
        }
        self.seg_pose_r = if xs.len() >= 3 { pearson(&xs, &ys)? } else { None };
        Ok(self)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x}"));
        writeln!(w, "metric,value")?;
        writeln!(w, "mpjpe_mm,{}", self.mpjpe_mm)?;
        writeln!(w, "pck3,{}", self.pck3)?;
        writeln!(w, "pck5,{}", self.pck5)?;
        writeln!(w, "n_frames,{}", self.n_frames)?;
        writeln!(w, "seg_accuracy,{}", opt(self.seg_accuracy))?;
        writeln!(w, "seg_pose_r,{}", opt(self.seg_pose_r))?;
        Ok(())
    }

    /// Joints that were never valid get an empty error field.
    pub fn write_per_joint_csv<W: Write>(&self, profile: KeypointProfile, mut w: W) -> Result<()> {
        writeln!(w, "joint_index,joint_name,error_mm")?;
        for (k, e) in self.per_joint_mm.iter().enumerate() {
            let name = profile.names().get(k).copied().unwrap_or("unknown");
            match e {
                Some(v) => writeln!(w, "{k},{name},{v}")?,
                None => writeln!(w, "{k},{name},")?,
            }
        }
        Ok(())
    }
}
