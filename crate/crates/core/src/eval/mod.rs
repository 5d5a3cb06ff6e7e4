//! Forecast metrics, persistence baselines and the ablation / sensitivity
//! experiment harnesses.

mod harness;
mod metrics;

pub use harness::{
    read_sweep_csv, run_ablations, run_sweep, run_transfer, train_transfer, TransferModels, write_sweep_csv, AblationRow, AblationTable, SweepParam,
    SweepRow, SweepSpec, TransferSetup, FULL_MODEL_LABEL,
};
pub use metrics::{
    evaluate, evaluate_per_station, format_table, mae, mse, Forecaster, MeanForecaster, MetricReport, Persistence, PersistenceKind,
    StationMetrics, Units,
};

#[cfg(test)]
mod tests;
