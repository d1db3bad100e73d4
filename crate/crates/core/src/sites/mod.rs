//! Synthetic multi-site data and the experiment workflows built on it.

mod dataset;
mod generator;
mod plan;
mod runner;

pub use dataset::{preprocess, volume_examples, zscore, DatasetSplit};
pub use generator::{generate_site, generate_volume, LabeledVolume, PhantomConfig, SiteProfile};
pub use plan::{Condition, ConditionKind, ExperimentPlan, DESK_DILATIONS};
pub use runner::{
    average_probabilities, build_datasets, checkpoint_path, condition_config, condition_dir,
    evaluate_plan, finetune, predict_checkpoint, run_condition, run_dwc, run_ensemble,
    run_experiment, run_experiment_with, ConditionOutcome, Datasets, ExperimentOutcome, SiteData,
    SUMMARY_FILE, TIDY_FILE,
};
