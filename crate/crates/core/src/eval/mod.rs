//! Effectiveness and efficiency metrics.

mod metrics;
mod report;

pub use metrics::{
    acc, auc, bernoulli_l2, full_vocab_divergence, jsd_on_forgotten, l2_on_forgotten, logloss,
    paired_divergence, LOGLOSS_EPS,
};
pub use report::{render_table, time_and_count, MethodCost, MetricsReport, LOG_BASE};
