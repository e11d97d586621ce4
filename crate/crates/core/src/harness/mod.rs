// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration, training and evaluation runs, and ablation
//! sweeps.

mod ablate;
mod config;
pub mod plot;
mod run;

pub use ablate::{preset, run_ablation_suite, run_presets, AblationAxis, AblationRow, AblationTable, AxisLevel, PRESETS};
pub use config::{
    parse_override, set_dotted, AdapterSection, EvalSection, ExperimentConfig, LossSection, PromptSection,
    SamplingSection, Scenario, TrainSection,
};
pub use run::{
    ci95, init_params, params_digest, run_eval, run_train, EpisodeRecord, EvalSummary, LossPoint, RunOutput, RunReport,
    Timing, TrainOptions, TrainSummary, ValPoint, REPORT_FORMAT,
};
