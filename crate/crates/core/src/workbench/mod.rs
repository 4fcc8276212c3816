//! Checkpoints, configs, artifact formats and the experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod experiments;
pub mod metrics;
pub mod ppm;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_stored, save_checkpoint,
};
pub use config::{load_config, parse_config, ExperimentConfig};
pub use csv::{format_sig9, parse_csv, read_csv, write_csv, Cell, ParsedTable, Table};
pub use experiments::{
    parse_values, run_analyze, run_compare, run_intervene, run_report, run_sample, run_sweep,
    run_train, Context, Outcome, Overrides, SampleMetrics, SweepParam,
};
pub use metrics::{detail_energy, detail_energy_samples, sliced_w2};
pub use ppm::{encode_ppm, quantize, tile, write_ppm, Image};
