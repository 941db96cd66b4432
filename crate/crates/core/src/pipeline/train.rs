//! Seeded pretraining and finetuning with per-epoch checkpoints.
//!
//! Every step draws its batch and its loss randomness from streams keyed by
//! the step number, so a run resumed from a checkpoint continues exactly as
//! an uninterrupted one would.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::mix::{DatasetMix, Draw};
use super::record::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    finetune_loss, pretrain_loss, tsc_targets, FrameLabels, PartHierarchy, PretrainContext, FINETUNE_TERMS,
    PRETRAIN_TERMS,
};
use crate::model::{Mode, Model, QUERY_PARAM};
use crate::nn::{AdamW, CosineSchedule};
use crate::tensor::checkpoint;
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::types::{KeypointProfile, PointCloud, Skeleton, NUM_CLASSES};

const STEP_KEY: &str = "train.step";
const PHASE_KEY: &str = "train.phase";
const TARGETS_KEY: &str = "train.tsc_targets";

/// Seed offsets separating the random streams of different consumers.
const LOSS_STREAM: u64 = 0x4c4f_5353;
const REINIT_STREAM: u64 = 0x5155_4552;

pub fn term_names(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Pretrain => &PRETRAIN_TERMS,
        Mode::Finetune => &FINETUNE_TERMS,
    }
}

fn phase_code(mode: Mode) -> f64 {
    match mode {
        Mode::Pretrain => 0.0,
        Mode::Finetune => 1.0,
    }
}

/// Path of the config written next to a checkpoint.
pub fn config_sidecar(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    ckpt.with_file_name(name)
}

/// Path of the diagnostic written when a loss turns non-finite.
pub fn nan_dump_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".nan.json");
    ckpt.with_file_name(name)
}

fn entry<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Missing(format!("{name} in checkpoint")))
}

/// Number of keypoint queries stored in a checkpoint.
pub fn checkpoint_keypoints(entries: &[(String, Tensor)]) -> Result<usize> {
    Ok(entry(entries, QUERY_PARAM)?.rows())
}

pub fn checkpoint_mode(entries: &[(String, Tensor)]) -> Result<Mode> {
    match entry(entries, PHASE_KEY)?.item()? {
        v if v == 0.0 => Ok(Mode::Pretrain),
        v if v == 1.0 => Ok(Mode::Finetune),
        v => Err(Error::Format(format!("unknown training phase {v}"))),
    }
}

#[derive(Clone, Debug)]
struct Sample {
    cloud: PointCloud,
    labels: FrameLabels,
}

fn samples(d: &Dataset) -> Result<Vec<Sample>> {
    d.records
        .iter()
        .map(|r| {
            let c = r.cloud()?;
            Ok(Sample {
                labels: FrameLabels {
                    part: c.part,
                    contact: c.contact,
                    keypoints: r.keypoint_set()?,
                },
                cloud: c.cloud,
            })
        })
        .collect()
}

/// One logged optimizer step: batch means of the total and of every
/// weighted term.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NanReport {
    pub step: u64,
    pub batch_index: usize,
    pub source: usize,
    pub frame_index: u32,
    pub total: f64,
    pub terms: Vec<(String, Option<f64>)>,
}

struct FrameResult {
    total: f64,
    terms: Vec<f64>,
    raw: Vec<(String, Option<f64>)>,
    grads: Option<crate::tensor::Gradients>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub mode: Mode,
    pub model: Model,
    pub store: ParamStore,
    pub step: u64,
    opt: AdamW,
    targets: Tensor,
    hierarchy: PartHierarchy,
    skeleton: Skeleton,
    sources: Vec<Vec<Sample>>,
    frame_ids: Vec<Vec<u32>>,
    mix: DatasetMix,
    steps_per_epoch: u64,
    total_steps: u64,
    stop_step: u64,
    /// Details of the last non-finite loss.
    pub failure: Option<NanReport>,
}

impl Trainer {
    /// A freshly initialised model for `data`. All sources must share one
    /// keypoint profile.
    pub fn new(cfg: &RunConfig, mode: Mode, data: &[Dataset]) -> Result<Self> {
        cfg.validate()?;
        let first = data.first().ok_or_else(|| Error::Degenerate("no training data".into()))?;
        let profile: KeypointProfile = first.profile();
        if data.iter().any(|d| d.profile() != profile) {
            return Err(Error::invalid("data sources use different keypoint profiles"));
        }
        let nk = profile.num_keypoints();
        let mut cfg = cfg.clone();
        if mode == Mode::Pretrain && cfg.model.num_keypoints != nk {
            return Err(Error::invalid(format!(
                "model.num_keypoints is {} but the data has {nk} keypoints",
                cfg.model.num_keypoints
            )));
        }
        cfg.model.num_keypoints = nk;
        let ratios = if cfg.dataset_mix.is_empty() {
            vec![1.0; data.len()]
        } else {
            cfg.dataset_mix.clone()
        };
        let mix = DatasetMix::new(data.iter().map(Dataset::len).collect(), ratios)?;
        let batch = cfg.optimizer.batch as u64;
        let steps_per_epoch = (mix.active_frames() as u64).div_ceil(batch).max(1);
        let total_steps = steps_per_epoch * cfg.optimizer.epochs as u64;
        let stop_step = cfg.optimizer.max_steps.map_or(total_steps, |m| m.min(total_steps));
        let mut store = ParamStore::new();
        let model = Model::new(&cfg.model, &cfg.cppool, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let opt = AdamW::new(&store, cfg.optimizer.weight_decay);
        Ok(Trainer {
            targets: tsc_targets(NUM_CLASSES, cfg.model.projection_dim, cfg.seed)?,
            hierarchy: PartHierarchy::standard(),
            skeleton: profile.skeleton(),
            sources: data.iter().map(samples).collect::<Result<_>>()?,
            frame_ids: data.iter().map(|d| d.records.iter().map(|r| r.frame_index).collect()).collect(),
            cfg,
            mode,
            model,
            store,
            step: 0,
            opt,
            mix,
            steps_per_epoch,
            total_steps,
            stop_step,
            failure: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// True once the run reached `max_steps` or the end of the schedule.
    pub fn is_done(&self) -> bool {
        self.step >= self.stop_step
    }

    /// Starts from the weights of another run. Keypoint queries are
    /// replaced when `reinit_queries` is set; otherwise the stored queries
    /// must match the data's keypoint count.
    pub fn load_weights(&mut self, entries: &[(String, Tensor)], reinit_queries: bool) -> Result<()> {
        let stored = checkpoint_keypoints(entries)?;
        let nk = self.cfg.model.num_keypoints;
        if stored != nk && !reinit_queries {
            return Err(Error::invalid(format!(
                "checkpoint has {stored} keypoint queries but the data has {nk}; \
                 re-initialise the queries to continue"
            )));
        }
        let skip: &[&str] = if reinit_queries { &[QUERY_PARAM] } else { &[] };
        self.store.load_named(entries, skip)?;
        if reinit_queries {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ REINIT_STREAM);
            self.model.reinit_queries(&mut self.store, nk, &mut rng)?;
        }
        if let Ok(t) = entry(entries, TARGETS_KEY) {
            self.targets = t.clone();
        }
        self.opt = AdamW::new(&self.store, self.cfg.optimizer.weight_decay);
        self.step = 0;
        Ok(())
    }

    /// Restores a checkpoint written by this trainer's phase, including the
    /// optimizer state and step counter.
    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if checkpoint_mode(entries)? != self.mode {
            return Err(Error::invalid("checkpoint was written by the other training phase"));
        }
        if checkpoint_keypoints(entries)? != self.cfg.model.num_keypoints {
            return Err(Error::invalid("checkpoint keypoint count differs from the data"));
        }
        self.store.load_named(entries, &[])?;
        self.opt.load_state(&self.store, entries)?;
        self.targets = entry(entries, TARGETS_KEY)?.clone();
        self.step = entry(entries, STEP_KEY)?.item()? as u64;
        Ok(())
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.store.named_values();
        out.extend(self.opt.state_entries(&self.store));
        out.push((STEP_KEY.into(), Tensor::scalar(self.step as f64)));
        out.push((PHASE_KEY.into(), Tensor::scalar(phase_code(self.mode))));
        out.push((TARGETS_KEY.into(), self.targets.clone()));
        out
    }

    pub fn schedule(&self) -> CosineSchedule {
        let base = self.cfg.optimizer.lr(self.mode);
        CosineSchedule {
            base_lr: base,
            min_lr: base * self.cfg.optimizer.min_lr_ratio,
            total_steps: self.total_steps,
        }
    }

    /// Frames used by `step`.
    pub fn batch_draws(&self, step: u64) -> Vec<Draw> {
        self.mix.block(self.cfg.seed, step, self.cfg.optimizer.batch)
    }

    fn frame_loss(&self, draw: Draw, stream: u64) -> Result<FrameResult> {
        let sample = &self.sources[draw.0][draw.1];
        let mut g = Graph::new(&self.store);
        let out = self.model.forward(&mut g, &sample.cloud, self.mode)?;
        let loss = match self.mode {
            Mode::Pretrain => {
                let ctx = PretrainContext {
                    weights: &self.cfg.pretrain_weights,
                    hoicl: &self.cfg.hoicl,
                    hierarchy: &self.hierarchy,
                    targets: &self.targets,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ LOSS_STREAM);
                rng.set_stream(stream);
                pretrain_loss(&mut g, &out, &sample.labels, &ctx, &mut rng)?
            }
            Mode::Finetune => finetune_loss(
                &mut g,
                &out,
                &sample.labels.keypoints,
                &self.skeleton,
                &self.cfg.finetune_weights,
            )?,
        };
        let total = loss.value(&g);
        let terms = loss.terms.iter().map(|t| t.contribution).collect();
        let raw = loss.terms.iter().map(|t| (t.name.clone(), t.value)).collect();
        let grads = if total.is_finite() {
            Some(g.backward(loss.total)?.into_params())
        } else {
            None
        };
        Ok(FrameResult { total, terms, raw, grads })
    }

    /// Runs one optimizer step on the batch mean of per-frame gradients.
    /// Frames are evaluated in parallel and merged in batch order.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let draws = self.batch_draws(step);
        let batch = draws.len();
        let results = draws
            .par_iter()
            .enumerate()
            .map(|(b, &d)| self.frame_loss(d, step * batch as u64 + b as u64))
            .collect::<Result<Vec<_>>>()?;
        let nterms = term_names(self.mode).len();
        let mut total = 0.0;
        let mut terms = vec![0.0; nterms];
        self.store.zero_grad();
        for (b, r) in results.iter().enumerate() {
            let grads = match &r.grads {
                Some(g) => g,
                None => {
                    let (source, index) = draws[b];
                    let report = NanReport {
                        step,
                        batch_index: b,
                        source,
                        frame_index: self.frame_ids[source][index],
                        total: r.total,
                        terms: r.raw.clone(),
                    };
                    let msg = format!(
                        "non-finite loss at step {step}, batch index {b} (source {source}, frame {})",
                        report.frame_index
                    );
                    self.failure = Some(report);
                    return Err(Error::Numerical(msg));
                }
            };
            total += r.total;
            for (t, v) in terms.iter_mut().zip(&r.terms) {
                *t += v;
            }
            self.store.accumulate(grads);
        }
        let scale = 1.0 / batch as f64;
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.get_mut(id).grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let lr = self.schedule().lr(step);
        self.opt.step(&mut self.store, lr);
        self.step += 1;
        Ok(StepLog {
            step,
            total: total * scale,
            terms: terms.into_iter().map(|t| t * scale).collect(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint path, rewritten at every checkpoint epoch.
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with `.loss.csv` appended.
    pub loss_log: Option<PathBuf>,
    /// Weights to start from.
    pub init: Option<PathBuf>,
    pub reinit_queries: bool,
    /// Continue from `out` when it exists.
    pub resume: bool,
}

impl TrainOptions {
    pub fn loss_log_path(&self) -> PathBuf {
        self.loss_log.clone().unwrap_or_else(|| {
            let mut name = self.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".loss.csv");
            self.out.with_file_name(name)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub mode: Mode,
    pub start_step: u64,
    pub steps: u64,
    pub log: Vec<StepLog>,
}

fn csv_header(mode: Mode) -> String {
    let mut s = String::from("step,total");
    for t in term_names(mode) {
        s.push(',');
        s.push_str(t);
    }
    s
}

fn csv_row(l: &StepLog) -> String {
    let mut s = format!("{},{}", l.step, l.total);
    for t in &l.terms {
        s.push_str(&format!(",{t}"));
    }
    s
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_log(path: &Path, header: &str, step: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad loss log row {line:?}")))?;
        if s < step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn save_checkpoint(trainer: &Trainer, out: &Path) -> Result<()> {
    let tmp = out.with_extension("partial");
    checkpoint::save(&tmp, &trainer.checkpoint_entries())?;
    fs::rename(&tmp, out)?;
    Ok(())
}

/// Trains to completion, writing the loss log, a checkpoint every
/// `checkpoint_every_epochs` epochs and at the end, and the config used
/// next to the checkpoint. A non-finite loss aborts with a diagnostic file
/// naming the offending batch index.
pub fn run_training(cfg: &RunConfig, mode: Mode, data: &[Dataset], opts: &TrainOptions) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg, mode, data)?;
    let log_path = opts.loss_log_path();
    let header = csv_header(mode);
    let resumed = opts.resume && opts.out.exists();
    if resumed {
        trainer.restore(&checkpoint::load(&opts.out)?)?;
        log::info!("resuming {} at step {}", opts.out.display(), trainer.step);
    } else if let Some(init) = &opts.init {
        trainer.load_weights(&checkpoint::load(init)?, opts.reinit_queries)?;
    } else if opts.reinit_queries {
        return Err(Error::invalid("query re-initialisation needs initial weights"));
    }
    let mut log_text = if resumed {
        truncate_log(&log_path, &header, trainer.step)?
    } else {
        format!("{header}\n")
    };
    if let Some(parent) = opts.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut sidecar = trainer.cfg.to_json();
    sidecar.push('\n');
    fs::write(config_sidecar(&opts.out), sidecar)?;
    fs::write(&log_path, &log_text)?;

    let start_step = trainer.step;
    let every = trainer.steps_per_epoch() * trainer.cfg.optimizer.checkpoint_every_epochs as u64;
    let mut log = Vec::new();
    while !trainer.is_done() {
        let row = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(report) = &trainer.failure {
                    let path = nan_dump_path(&opts.out);
                    fs::write(&path, serde_json::to_string_pretty(report)?)?;
                    fs::write(&log_path, &log_text)?;
                    return Err(Error::Numerical(format!("{e}; diagnostics written to {}", path.display())));
                }
                return Err(e);
            }
        };
        log_text.push_str(&csv_row(&row));
        log_text.push('\n');
        log.push(row);
        if trainer.step % every == 0 || trainer.is_done() {
            fs::write(&log_path, &log_text)?;
            save_checkpoint(&trainer, &opts.out)?;
        }
    }
    Ok(TrainSummary {
        mode,
        start_step,
        steps: trainer.step,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_names() {
        let p = Path::new("/tmp/run/model.ckpt");
        assert_eq!(config_sidecar(p), Path::new("/tmp/run/model.ckpt.config.json"));
        assert_eq!(nan_dump_path(p), Path::new("/tmp/run/model.ckpt.nan.json"));
        let o = TrainOptions {
            out: p.into(),
            ..TrainOptions::default()
        };
        assert_eq!(o.loss_log_path(), Path::new("/tmp/run/model.ckpt.loss.csv"));
    }

    #[test]
    fn log_rows_and_truncation() {
        let l = StepLog {
            step: 3,
            total: 1.5,
            terms: vec![1.0, 0.5],
        };
        assert_eq!(csv_row(&l), "3,1.5,1,0.5");
        assert_eq!(csv_header(Mode::Finetune), "step,total,heatmap,limb");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        fs::write(&p, "step,total,heatmap,limb\n0,1,1,0\n1,2,2,0\n2,3,3,0\n").unwrap();
        let t = truncate_log(&p, "step,total,heatmap,limb", 2).unwrap();
        assert_eq!(t, "step,total,heatmap,limb\n0,1,1,0\n1,2,2,0\n");
    }
}
