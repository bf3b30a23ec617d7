//! The diagonal-accuracy experiment: several estimators of `diag(H)` for a
//! batched network objective, compared with the exact diagonal as the number
//! of probes per case grows.

mod config;
mod output;
mod run;

pub use config::{DiagMethod, ExactMethod, ExperimentConfig, Metric, Series};
pub use output::{
    accuracy_svg, emit_outputs, write_metrics_csv, write_results_csv, write_timings_csv, RESULTS_HEADER,
};
pub use run::{
    cumulative_means, exact_diagonal, prepare_network, run_accuracy_experiment, series_seed, synthetic_data,
    ExperimentRun, ResultRow,
};
