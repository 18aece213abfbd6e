//! Merge metric tables from several run directories.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::MetricsReport;

pub const METRICS_STEM: &str = "metrics";

/// Rows of every run's `metrics.json`, in argument order. Repeated labels get
/// `_2`, `_3`, ... in order of appearance.
pub fn report(run_dirs: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(read_run(dir)?);
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for r in &mut rows {
        let n = seen.entry(r.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}_{}", r.label, n);
        }
    }
    Ok(rows)
}

fn read_run(dir: &Path) -> Result<Vec<MetricsReport>> {
    let malformed = |why: String| Error::Dataset(format!("malformed run directory {}: {why}", dir.display()));
    let path = dir.join(format!("{METRICS_STEM}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| malformed(format!("cannot read {METRICS_STEM}.json ({e})")))?;
    let rows: Vec<MetricsReport> = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if rows.is_empty() {
        return Err(malformed(format!("{METRICS_STEM}.json has no rows")));
    }
    // re-derive so a hand-edited PSNR cannot drift from its MSE
    rows.into_iter()
        .map(|r| MetricsReport::from_mse(r.label, r.mse, r.ssim, r.n_images).map_err(|e| malformed(e.to_string())))
        .collect()
}
