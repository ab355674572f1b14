//! Aggregation of per-fold results into markdown and CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use frisbi::baselines::BaselineKind;
use frisbi::simulate::PriorBox;

use crate::error::{CliError, Result};
use crate::experiment::{collect_results, FoldTrainReport, ResultRecord};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

/// One aggregated table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub baseline: String,
    pub calib_size: usize,
    pub noise_rate: f64,
    pub folds: usize,
    pub lpp_mean: f64,
    pub lpp_std: f64,
    pub acauc_mean: f64,
    pub acauc_std: f64,
    /// Folds whose amortizer loss did not decrease.
    pub flagged_folds: Vec<usize>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Result directories under `root` (itself and every direct subdirectory).
fn result_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = vec![root.to_path_buf()];
    if root.is_dir() {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subs.sort();
        dirs.extend(subs);
    }
    Ok(dirs)
}

fn flagged(dir: &Path, fold: usize) -> bool {
    let path = dir.join(format!("train_report_{fold}.json"));
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<FoldTrainReport>(&t).ok())
        .is_some_and(|r| r.warnings().iter().any(|w| w == "amortizer-not-learning"))
}

/// Groups records by (baseline, calib size, noise rate).
pub fn aggregate(root: &Path) -> Result<Vec<ReportRow>> {
    type Key = (BaselineKind, usize, u64);
    let mut groups: BTreeMap<Key, Vec<(ResultRecord, bool)>> = BTreeMap::new();
    for dir in result_dirs(root)? {
        if !dir.is_dir() {
            continue;
        }
        for rec in collect_results(&dir)? {
            let flag = flagged(&dir, rec.fold);
            groups
                .entry((rec.baseline, rec.calib_size, rec.noise_rate.to_bits()))
                .or_default()
                .push((rec, flag));
        }
    }
    if groups.is_empty() {
        return Err(CliError::NoResults);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((kind, calib_size, rate), recs)| {
            let lpps: Vec<f64> = recs.iter().map(|(r, _)| r.report.lpp).collect();
            let acs: Vec<f64> = recs.iter().map(|(r, _)| r.report.acauc).collect();
            let (lpp_mean, lpp_std) = mean_std(&lpps);
            let (acauc_mean, acauc_std) = mean_std(&acs);
            let mut flagged_folds: Vec<usize> = recs.iter().filter(|(_, f)| *f).map(|(r, _)| r.fold).collect();
            if kind != BaselineKind::FrisbiFull {
                flagged_folds.clear();
            }
            ReportRow {
                baseline: kind.name().to_string(),
                calib_size,
                noise_rate: f64::from_bits(rate),
                folds: recs.len(),
                lpp_mean,
                lpp_std,
                acauc_mean,
                acauc_std,
                flagged_folds,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.noise_rate, a.calib_size)
            .partial_cmp(&(b.noise_rate, b.calib_size))
            .expect("finite")
            .then_with(|| a.baseline.cmp(&b.baseline))
    });
    Ok(rows)
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("# Results\n\n");
    let prior = PriorBox::log_density();
    let _ = writeln!(out, "Reference: prior LPP = {prior:.4}, calibrated ACAUC = 0.\n");
    let mut settings: Vec<(f64, usize)> = rows.iter().map(|r| (r.noise_rate, r.calib_size)).collect();
    settings.dedup();
    for (rate, n) in settings {
        let _ = writeln!(out, "## calib_size = {n}, noise_rate = {rate}\n");
        out.push_str("| baseline | folds | LPP | ACAUC | flags |\n|---|---|---|---|---|\n");
        for r in rows.iter().filter(|r| r.noise_rate == rate && r.calib_size == n) {
            let flags = if r.flagged_folds.is_empty() {
                String::new()
            } else {
                format!("amortizer-not-learning (folds {:?})", r.flagged_folds)
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} |",
                r.baseline, r.folds, r.lpp_mean, r.lpp_std, r.acauc_mean, r.acauc_std, flags
            );
        }
        let _ = writeln!(out, "| prior (reference) | - | {prior:.4} | 0 | |\n");
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "baseline", "calib_size", "noise_rate", "folds", "lpp_mean", "lpp_std", "acauc_mean", "acauc_std",
        "flagged_folds",
    ])?;
    let prior = PriorBox::log_density();
    let mut settings: Vec<(f64, usize)> = rows.iter().map(|r| (r.noise_rate, r.calib_size)).collect();
    settings.dedup();
    for r in rows {
        let flags: Vec<String> = r.flagged_folds.iter().map(usize::to_string).collect();
        w.write_record([
            r.baseline.clone(),
            r.calib_size.to_string(),
            r.noise_rate.to_string(),
            r.folds.to_string(),
            r.lpp_mean.to_string(),
            r.lpp_std.to_string(),
            r.acauc_mean.to_string(),
            r.acauc_std.to_string(),
            flags.join(";"),
        ])?;
    }
    for (rate, n) in settings {
        w.write_record([
            "prior_reference".to_string(),
            n.to_string(),
            rate.to_string(),
            "0".into(),
            prior.to_string(),
            "0".into(),
            "0".into(),
            "0".into(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.md` and `report.csv` into `dir`.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    if !dir.is_dir() {
        return Err(CliError::NoResults);
    }
    let rows = aggregate(dir)?;
    std::fs::write(dir.join(REPORT_MD), render_markdown(&rows))?;
    write_csv(&dir.join(REPORT_CSV), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std() {
        assert_eq!(mean_std(&[-1.0, -3.0]), (-2.0, 1.0));
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn empty_dir_has_no_results() {
        let d = tempfile::tempdir().unwrap();
        let err = cmd_report(d.path()).unwrap_err();
        assert_eq!(err.to_string(), "no-results");
    }
}
