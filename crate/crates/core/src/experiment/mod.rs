//! Config-driven experiments: data preparation, cached model training and
//! method comparison.

mod config;
mod runner;

pub use config::{DataConfig, DataSource, ExperimentConfig, SisaConfig};
pub use runner::{
    render_saved, Experiment, Manifest, ABLATION_FILE, ABLATION_LABELS, BUNDLE_FILE,
    COMPARISON_FILE, MANIFEST_FILE, RENDERED_FILE, REPORTS_DIR, RESOLVED_CONFIG_FILE,
};
