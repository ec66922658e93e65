//! Side-by-side table of completed runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::experiment::Summary;

pub fn load_summary(dir: &Path) -> CliResult<Summary> {
    let p = dir.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

pub const COMPARE_HEADER: &str = "protocol,algorithm,alpha,accuracy_mean,accuracy_std,bytes_per_client,ratio_vs_min";

/// Rows sorted by bytes per client; the ratio column is relative to the
/// cheapest run.
pub fn compare_summaries(summaries: &[Summary]) -> CliResult<String> {
    if summaries.len() < 2 {
        return Err(CliError::Runtime("compare needs at least two runs".into()));
    }
    let mut rows: Vec<&Summary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        a.bytes_per_client
            .total_cmp(&b.bytes_per_client)
            .then_with(|| a.protocol.cmp(&b.protocol))
            .then_with(|| a.alpha.total_cmp(&b.alpha))
    });
    let min = rows[0].bytes_per_client;
    let mut out = format!("{COMPARE_HEADER}\n");
    for s in rows {
        let ratio = if min > 0.0 {
            s.bytes_per_client / min
        } else if s.bytes_per_client == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.1},{:.4}",
            s.protocol, s.algorithm, s.alpha, s.accuracy_mean, s.accuracy_std, s.bytes_per_client, ratio
        );
    }
    Ok(out)
}

pub fn compare_dirs(dirs: &[impl AsRef<Path>]) -> CliResult<String> {
    let summaries = dirs
        .iter()
        .map(|d| load_summary(d.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    compare_summaries(&summaries)
}
