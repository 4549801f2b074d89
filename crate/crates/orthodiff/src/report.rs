//! Metrics persistence and the ablation grid printout.

use std::fmt::Write as _;
use std::path::Path;

use orthodiff_core::evaluation::MetricsReport;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::write_atomic;

/// Flat CSV row of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub image_sim_mean: f64,
    pub image_sim_std: f64,
    pub text_sim_mean: f64,
    pub text_sim_std: f64,
    pub identity_probe: f64,
    pub background_probe: f64,
    pub pose_probe: f64,
    pub background_drift_raw: f64,
    pub background_drift_decoupled: f64,
    pub pose_drift_raw: f64,
    pub pose_drift_decoupled: f64,
    pub drift_pairs: usize,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            label: r.label.clone(),
            image_sim_mean: r.image_sim.mean,
            image_sim_std: r.image_sim.std,
            text_sim_mean: r.text_sim.mean,
            text_sim_std: r.text_sim.std,
            identity_probe: r.identity_probe,
            background_probe: r.background_probe,
            pose_probe: r.pose_probe,
            background_drift_raw: r.background_drift.raw,
            background_drift_decoupled: r.background_drift.decoupled,
            pose_drift_raw: r.pose_drift.raw,
            pose_drift_decoupled: r.pose_drift.decoupled,
            drift_pairs: r.background_drift.pairs,
            config_hash: r.config_hash.clone(),
            checkpoint_id: r.checkpoint_id.clone(),
        }
    }
}

/// Write `<stem>.json` and `<stem>.csv` under `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    let json = serde_json::to_vec_pretty(reports).map_err(|e| Error::Corrupt(e.to_string()))?;
    write_atomic(&dir.join(format!("{stem}.json")), &json)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(MetricsRow::from(r)).map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    write_atomic(&dir.join(format!("{stem}.csv")), &bytes)
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

/// Ablation-style table, one row per report.
pub fn grid(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>15} {:>15} {:>8} {:>8} {:>8} {:>13} {:>13}",
        "variant", "image_sim", "text_sim", "id", "bg", "pose", "bg drift", "pose drift"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<24} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>8.3} {:>8.3} {:>8.3} {:>6.3}/{:<6.3} {:>6.3}/{:<6.3}",
            r.label,
            r.image_sim.mean,
            r.image_sim.std,
            r.text_sim.mean,
            r.text_sim.std,
            r.identity_probe,
            r.background_probe,
            r.pose_probe,
            r.background_drift.decoupled,
            r.background_drift.raw,
            r.pose_drift.decoupled,
            r.pose_drift.raw,
        );
    }
    s.push_str("drift columns: decoupled/raw\n");
    s
}
