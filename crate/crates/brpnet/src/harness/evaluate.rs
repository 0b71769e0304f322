//! Evaluation over prediction/ground-truth directories plus the tab-separated
//! report format: one `stem aji f1 dice1 dice2` row per image and an
//! AGGREGATE row of unweighted means.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::load_instance_map;
use crate::metrics::{F1Criterion, ImageMetrics, MetricReport};
use crate::{Error, Result};

/// Accepts either a flat directory of `<stem>.png` label maps or a dataset
/// directory with a `labels/` subdirectory.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let base = if dir.join("labels").is_dir() {
        dir.join("labels")
    } else {
        dir.to_path_buf()
    };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
        let path = entry.map_err(|e| Error::io(&base, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("unreadable name in {}", base.display())))?
                .to_string();
            out.insert(stem, path);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no .png label maps in {}", base.display())));
    }
    Ok(out)
}

pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, criterion: F1Criterion) -> Result<MetricReport> {
    let preds = label_files(pred_dir)?;
    let gts = label_files(gt_dir)?;
    for stem in preds.keys() {
        if !gts.contains_key(stem) {
            return Err(Error::Dataset(format!("prediction {stem} has no ground truth")));
        }
    }
    for stem in gts.keys() {
        if !preds.contains_key(stem) {
            return Err(Error::Dataset(format!("ground truth {stem} has no prediction")));
        }
    }
    let mut rows: Vec<ImageMetrics> = Vec::with_capacity(preds.len());
    for (stem, pred_path) in &preds {
        let pred = load_instance_map(pred_path)?;
        let gt = load_instance_map(&gts[stem])?;
        rows.push(MetricReport::score_pair(stem, &gt, &pred, criterion)?);
    }
    Ok(MetricReport::from_rows(rows))
}

pub fn format_report(report: &MetricReport) -> String {
    let mut out = String::new();
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.stem, r.aji, r.f1, r.dice1, r.dice2
        ));
    }
    out.push_str(&format!(
        "AGGREGATE\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        report.aji, report.f1, report.dice1, report.dice2
    ));
    out
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    std::fs::write(path, format_report(report)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Grid, InstanceMap};
    use crate::data::save_instance_map;

    fn write_map(dir: &Path, stem: &str, m: &InstanceMap) {
        std::fs::create_dir_all(dir).unwrap();
        save_instance_map(&dir.join(format!("{stem}.png")), m).unwrap();
    }

    #[test]
    fn perfect_predictions_score_one_and_compose_like_direct_calls() {
        let base = std::env::temp_dir().join("brp_eval_test");
        let _ = std::fs::remove_dir_all(&base);
        let pred = base.join("pred");
        let gt = base.join("gt");
        let mut g = Grid::filled(16, 16, 0u32);
        for r in 2..6 {
            for c in 2..6 {
                g.set(r, c, 1);
            }
            for c in 9..13 {
                g.set(r, c, 2);
            }
        }
        let m = InstanceMap(g);
        write_map(&pred, "a", &m);
        write_map(&gt, "a", &m);
        // Second image: empty prediction against nonempty gt.
        let empty = InstanceMap::zeros(16, 16);
        write_map(&pred, "b", &empty);
        write_map(&gt, "b", &m);

        let report = evaluate_dirs(&pred, &gt, F1Criterion::IouHalf).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].aji, 1.0);
        assert_eq!(report.rows[0].f1, 1.0);
        assert_eq!(report.rows[1].aji, 0.0);
        assert_eq!(report.rows[1].f1, 0.0);
        // Aggregate is the unweighted mean; composition matches direct calls.
        let direct = crate::metrics::aji(&m, &m).unwrap();
        assert!((report.aji - (direct + 0.0) / 2.0).abs() < 1e-12);
        let text = format_report(&report);
        assert!(text.lines().count() == 3);
        assert!(text.contains("AGGREGATE"));
    }

    #[test]
    fn stem_mismatch_is_an_error() {
        let base = std::env::temp_dir().join("brp_eval_mismatch");
        let _ = std::fs::remove_dir_all(&base);
        let pred = base.join("pred");
        let gt = base.join("gt");
        write_map(&pred, "only_pred", &InstanceMap::zeros(8, 8));
        write_map(&gt, "only_gt", &InstanceMap::zeros(8, 8));
        assert!(evaluate_dirs(&pred, &gt, F1Criterion::IouHalf).is_err());
    }
}
