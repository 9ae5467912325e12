use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamCount;

/// Log base of every entropic quantity in a report.
pub const LOG_BASE: &str = "e";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    pub auc: f64,
    pub acc: f64,
    pub logloss: f64,
    /// Against the retrained model on the forgotten set; absent for the
    /// reference rows.
    pub jsd: Option<f64>,
    pub l2norm: Option<f64>,
    pub wall_time_seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub log_base: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::Config(format!("{}: {what} = {v} out of range", self.method)))
        };
        if !(0.0..=1.0).contains(&self.auc) {
            return bad("auc", self.auc);
        }
        if !(0.0..=1.0).contains(&self.acc) {
            return bad("acc", self.acc);
        }
        if !(self.logloss >= 0.0) {
            return bad("logloss", self.logloss);
        }
        if let Some(j) = self.jsd {
            if !(0.0..=std::f64::consts::LN_2 + 1e-12).contains(&j) {
                return bad("jsd", j);
            }
        }
        if let Some(l) = self.l2norm {
            if !(l >= 0.0) {
                return bad("l2norm", l);
            }
        }
        if !(self.wall_time_seconds >= 0.0) {
            return bad("wall_time_seconds", self.wall_time_seconds);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad report: {e}")))
    }
}

/// Wall time and trainable-parameter audit of one unlearning call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub wall_time_seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Runs `f` under a monotonic clock.
pub fn time_and_count<T>(f: impl FnOnce() -> Result<(T, ParamCount)>) -> Result<(T, MethodCost)> {
    let start = Instant::now();
    let (value, count) = f()?;
    let cost = MethodCost {
        wall_time_seconds: start.elapsed().as_secs_f64(),
        trainable_params: count.trainable,
        total_params: count.total,
    };
    Ok((value, cost))
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", 100.0 * x))
}

/// Plain-text table with effectiveness and efficiency column groups. JSD and
/// L2 are shown in percent. `Time/RT` is wall time relative to the Retrain
/// row, when one is present.
pub fn render_table(rows: &[MetricsReport]) -> String {
    let head = [
        "Method", "AUC", "ACC", "LL", "JSD(%)", "L2(%)", "Time(s)", "Time/RT", "#Params",
    ];
    let retrain = rows
        .iter()
        .find(|r| r.method == "Retrain")
        .map(|r| r.wall_time_seconds)
        .filter(|&t| t > 0.0);
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.4}", r.auc),
                format!("{:.4}", r.acc),
                format!("{:.4}", r.logloss),
                opt_pct(r.jsd),
                opt_pct(r.l2norm),
                format!("{:.2}", r.wall_time_seconds),
                retrain.map_or_else(|| "-".to_string(), |t| format!("{:.3}", r.wall_time_seconds / t)),
                format!("{:.2e}", r.trainable_params as f64),
            ]
        })
        .collect();
    let mut width = head.map(str::len);
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let eff: usize = width[1..6].iter().sum::<usize>() + 3 * 4;
    let cost: usize = width[6] + width[7] + width[8] + 3 * 2;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:w0$} | {:^eff$} | {:^cost$}",
        "",
        "Effectiveness",
        "Efficiency",
        w0 = width[0]
    );
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = width[i]);
            } else {
                let _ = write!(s, "{c:>w$}", w = width[i]);
            }
        }
        s
    };
    let head: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "{}", line(&head));
    let total: usize = width.iter().sum::<usize>() + 3 * 8;
    let _ = writeln!(out, "{}", "-".repeat(total));
    for row in &body {
        let _ = writeln!(out, "{}", line(row));
    }
    out
}
