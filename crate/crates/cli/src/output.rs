//! File emission: atomic writes and the CSV schemas.
//!
//! CSV uses `.` decimals, `,` separators, LF line endings, and always a
//! header row; floats print in the shortest round-trip form so reruns with
//! equal seeds produce byte-identical bodies.

use std::fmt::Write as _;
use std::path::Path;

use tcl_core::gradlab::SweepRow;
use tcl_core::trainer::{ProbeEpochRecord, TrainTrace};

/// Writes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

fn cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// `epoch,phase,loss,lr,mean_pos_grad,mean_neg_grad,top1` with contrastive
/// rows first, then probe rows.
pub fn metrics_csv(trace: &TrainTrace, probe: &[ProbeEpochRecord]) -> String {
    let mut out = String::from("epoch,phase,loss,lr,mean_pos_grad,mean_neg_grad,top1\n");
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},contrastive,{},{},{},{},",
            r.epoch,
            r.loss,
            r.lr,
            cell(r.mean_pos_grad),
            cell(r.mean_neg_grad),
        );
    }
    for r in probe {
        let _ = writeln!(out, "{},probe,{},{},,,{}", r.epoch, r.loss, r.lr, r.top1);
    }
    out
}

/// `k1,k2,mean_pos_mag,mean_neg_mag,supcon_pos_mag,supcon_neg_mag,top1`;
/// the top1 cell is empty when the sweep ran without training.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("k1,k2,mean_pos_mag,mean_neg_mag,supcon_pos_mag,supcon_neg_mag,top1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k1,
            r.k2,
            r.mean_pos_mag,
            r.mean_neg_mag,
            r.supcon_pos_mag,
            r.supcon_neg_mag,
            cell(r.top1),
        );
    }
    out
}
