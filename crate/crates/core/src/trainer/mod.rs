//! Online and offline training under an experiment specification.

pub mod data;
pub mod run;
pub mod spec;

pub use data::{dataset_record, make_batch, sample_instance, supervise, validation_set, Batch, DatasetRecord, Instance};
pub use run::{load_records, run_experiment, run_seed, EvalPoint, RunOptions, RunRecord, TrainError};
pub use spec::{ExperimentSpec, IntRange, SpecError, EPOCH_SAMPLES};
