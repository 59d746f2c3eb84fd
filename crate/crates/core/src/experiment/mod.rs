//! The cold-start / warm-up experiment pipeline and the gradient checks.

mod config;
mod gradcheck;
mod report;
mod run;

pub use config::{DatasetSpec, ExperimentConfig, InitPolicy, DATA_DIR_ENV};
pub use gradcheck::{check_instances, check_schema, grad_check, GradCheckConfig, GradCheckReport, SuiteResult};
pub use report::{summarize, ExperimentReport, MetaTraceSummary, ReportRow, Stat, SummaryRow, CSV_COLUMNS};
pub use run::{
    evaluate_stage, load_dataset, meta_stage, model_config, pretrain_stage, report_csv_path, report_rows,
    run_experiment, run_stages, ArmCurve, Layout, Prepared, Stage,
};
