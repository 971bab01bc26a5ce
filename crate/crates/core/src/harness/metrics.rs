//! Metrics and plot-series emission. All files are UTF-8, LF-terminated,
//! written atomically (temp file + rename), with floats at 9 significant
//! digits so byte-level determinism checks are meaningful.

use crate::error::Result;
use crate::fed::{fmt_f64, RoundRecord, METRICS_HEADER};
use crate::transformer::checkpoint::write_atomic;
use std::path::Path;

/// Write the fixed-schema per-round metrics CSV.
pub fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Write per-mode plot series: round vs eval accuracy and round vs ‖δ‖².
/// Empty record lists produce header-only files.
pub fn emit_plot_data(records: &[RoundRecord], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    if records.is_empty() {
        for name in ["plot_accuracy.csv", "plot_delta.csv"] {
            let path = out_dir.join(name);
            let header = if name.contains("accuracy") {
                "round,eval_acc\n"
            } else {
                "round,delta_norm_sq\n"
            };
            write_atomic(&path, header.as_bytes())?;
            written.push(path);
        }
        return Ok(written);
    }
    let mut modes: Vec<&'static str> = Vec::new();
    for r in records {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(r.mode.as_str());
        }
    }
    for mode in modes {
        let mut acc = String::from("round,eval_acc\n");
        let mut delta = String::from("round,delta_norm_sq\n");
        for r in records.iter().filter(|r| r.mode.as_str() == mode) {
            acc.push_str(&format!("{},{}\n", r.round, fmt_f64(r.eval_acc)));
            delta.push_str(&format!("{},{}\n", r.round, fmt_f64(r.delta_norm_sq)));
        }
        let acc_path = out_dir.join(format!("plot_{mode}_accuracy.csv"));
        write_atomic(&acc_path, acc.as_bytes())?;
        let delta_path = out_dir.join(format!("plot_{mode}_delta.csv"));
        write_atomic(&delta_path, delta.as_bytes())?;
        written.push(acc_path);
        written.push(delta_path);
    }
    Ok(written)
}
