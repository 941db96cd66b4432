//! Configuration, sequence files and the simulate / train / evaluate /
//! refine workflow behind the command line.

pub mod config;
pub mod eval;
pub mod mix;
pub mod plot;
pub mod record;
pub mod simulate;
pub mod train;

pub use config::{OptimizerConfig, PathsConfig, RefineSettings, RunConfig, SimConfig, SEED_ENV};
pub use eval::{
    evaluate, fit_ctrefine, ground_truth, load_ctrefine, load_model, predict, refine_predictions, write_report,
    LoadedModel, Predictions, ReportPaths,
};
pub use mix::DatasetMix;
pub use record::{Dataset, FrameRecord, Manifest, RECORD_MAGIC};
pub use simulate::{simulate, simulate_record};
pub use train::{run_training, StepLog, TrainOptions, TrainSummary, Trainer};
