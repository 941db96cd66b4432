//! Inference over a sequence, metric reports, temporal refinement and plots.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::plot;
use super::record::Dataset;
use super::train::{checkpoint_keypoints, checkpoint_mode, config_sidecar};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, frame_mpjpe, seg_accuracy, PoseEvalReport};
use crate::model::{Mode, Model};
use crate::tensor::{checkpoint, Graph, ParamStore};
use crate::temporal::{refine_sequence, train_ctrefine, CTRefine, RefineMethod};
use crate::types::{KeypointProfile, KeypointSet};

/// A trained network with the configuration it was trained under.
pub struct LoadedModel {
    pub cfg: RunConfig,
    pub mode: Mode,
    pub model: Model,
    pub store: ParamStore,
}

/// Loads a checkpoint and the config stored next to it (or `cfg` when
/// given).
pub fn load_model(ckpt: &Path, cfg: Option<&RunConfig>) -> Result<LoadedModel> {
    let entries = checkpoint::load(ckpt)?;
    let mut cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let side = config_sidecar(ckpt);
            let text = fs::read_to_string(&side).map_err(|e| Error::Missing(format!("{}: {e}", side.display())))?;
            RunConfig::from_json(&text)?
        }
    };
    cfg.model.num_keypoints = checkpoint_keypoints(&entries)?;
    let mut store = ParamStore::new();
    let model = Model::new(&cfg.model, &cfg.cppool, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_named(&entries, &[])?;
    Ok(LoadedModel {
        mode: checkpoint_mode(&entries)?,
        cfg,
        model,
        store,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Predicted keypoints; contact is the thresholded keypoint-contact head.
    pub keypoints: Vec<KeypointSet>,
    pub seg: Vec<Vec<u8>>,
}

/// Runs the network on every frame, in parallel with read-only weights.
pub fn predict(model: &Model, store: &ParamStore, mode: Mode, data: &Dataset) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::Degenerate("no frames to evaluate".into()));
    }
    let nk = model.num_keypoints(store);
    if nk != data.manifest.num_keypoints {
        return Err(Error::invalid(format!(
            "model predicts {nk} keypoints but the data has {}",
            data.manifest.num_keypoints
        )));
    }
    let per_frame = data
        .records
        .par_iter()
        .map(|r| {
            let cloud = r.cloud()?;
            let mut g = Graph::new(store);
            let out = model.forward(&mut g, &cloud.cloud, mode)?;
            let k = g.value(out.keypoints);
            let c = g.value(out.keypoint_contact);
            let coords = (0..nk).map(|i| [k.get(i, 0), k.get(i, 1), k.get(i, 2)]).collect();
            let contact = (0..nk).map(|i| c.get(i, 0) > 0.0).collect();
            let kp = KeypointSet::new(coords, vec![true; nk], contact)?;
            if kp.coords.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite prediction in frame {}", r.frame_index)));
            }
            Ok((kp, argmax_rows(g.value(out.seg))))
        })
        .collect::<Result<Vec<_>>>()?;
    let (keypoints, seg) = per_frame.into_iter().unzip();
    Ok(Predictions { keypoints, seg })
}

pub fn ground_truth(data: &Dataset) -> Result<Vec<KeypointSet>> {
    data.records.iter().map(|r| r.keypoint_set()).collect()
}

/// Pose metrics plus segmentation accuracy and its correlation with pose
/// error.
pub fn evaluate(pred: &Predictions, data: &Dataset) -> Result<PoseEvalReport> {
    let gt = ground_truth(data)?;
    let seg_gt: Vec<Vec<u8>> = data.records.iter().map(|r| r.part.clone()).collect();
    PoseEvalReport::evaluate(&pred.keypoints, &gt, data.profile())?.with_segmentation(
        &pred.keypoints,
        &gt,
        &pred.seg,
        &seg_gt,
    )
}

/// Smooths the predicted trajectories of the sequence. With
/// `oracle_contact` CTRefine sees ground-truth keypoint contact.
pub fn refine_predictions(
    method: RefineMethod,
    pred: &Predictions,
    data: &Dataset,
    cfg: &RunConfig,
    ctrefine: Option<(&CTRefine, &ParamStore)>,
) -> Result<Predictions> {
    let mut input = pred.keypoints.clone();
    if cfg.refine.oracle_contact {
        for (k, g) in input.iter_mut().zip(ground_truth(data)?) {
            k.contact = g.contact;
        }
    }
    let mut out = refine_sequence(method, &input, data.manifest.dt, &cfg.filters, ctrefine)?;
    for (o, p) in out.iter_mut().zip(&pred.keypoints) {
        o.contact = p.contact.clone();
    }
    Ok(Predictions {
        keypoints: out,
        seg: pred.seg.clone(),
    })
}

/// Trains CTRefine on synthetic gait and returns it with its weights.
pub fn fit_ctrefine(cfg: &RunConfig) -> Result<(CTRefine, ParamStore, Vec<f64>)> {
    let mut store = ParamStore::new();
    let mut train = cfg.refine.train;
    train.seed = cfg.seed;
    let model = CTRefine::new(&cfg.refine.model, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let losses = train_ctrefine(&model, &mut store, &train)?;
    Ok((model, store, losses))
}

pub fn load_ctrefine(path: &Path, cfg: &RunConfig) -> Result<(CTRefine, ParamStore)> {
    let entries = checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let mut mcfg = cfg.refine.model;
    mcfg.num_keypoints = entries
        .iter()
        .find(|(n, _)| n == "ctrefine.joint")
        .map(|(_, t)| t.rows())
        .ok_or_else(|| Error::Missing("ctrefine.joint in checkpoint".into()))?;
    let model = CTRefine::new(&mcfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_named(&entries, &[])?;
    Ok((model, store))
}

/// Where the outputs of one report go.
#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub report: PathBuf,
    pub per_joint: PathBuf,
    pub plots: Option<PathBuf>,
}

impl ReportPaths {
    /// The per-joint table sits next to the report with a `_per_joint`
    /// suffix.
    pub fn new(report: &Path, plots: Option<&Path>) -> Self {
        let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        ReportPaths {
            report: report.to_path_buf(),
            per_joint: report.with_file_name(format!("{stem}_per_joint.csv")),
            plots: plots.map(Path::to_path_buf),
        }
    }
}

/// Writes the report, the per-joint table and, when a plot directory is
/// given, `per_joint.svg` and `seg_vs_mpjpe.svg`.
pub fn write_report(
    report: &PoseEvalReport,
    pred: &Predictions,
    data: &Dataset,
    paths: &ReportPaths,
) -> Result<()> {
    let profile: KeypointProfile = data.profile();
    for p in [&paths.report, &paths.per_joint] {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(&paths.report, buf)?;
    let mut buf = Vec::new();
    report.write_per_joint_csv(profile, &mut buf)?;
    fs::write(&paths.per_joint, buf)?;
    if let Some(dir) = &paths.plots {
        fs::create_dir_all(dir)?;
        let bars = plot::bar_chart("Per-joint error", profile.names(), &report.per_joint_mm, "error (mm)");
        fs::write(dir.join("per_joint.svg"), bars)?;
        let gt = ground_truth(data)?;
        let errs = frame_mpjpe(&pred.keypoints, &gt)?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (f, e) in errs.iter().enumerate() {
            if let (Some(e), Ok(a)) = (e, seg_accuracy(&pred.seg[f], &data.records[f].part)) {
                xs.push(a);
                ys.push(*e);
            }
        }
        let note = match report.seg_pose_r {
            Some(r) => format!("r = {r:.3}"),
            None => "r undefined".to_string(),
        };
        let sc = plot::scatter("Segmentation vs pose error", &xs, &ys, "segmentation accuracy (%)", "MPJPE (mm)", &note);
        fs::write(dir.join("seg_vs_mpjpe.svg"), sc)?;
    }
    Ok(())
}
