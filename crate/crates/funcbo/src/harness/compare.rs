//! Cross-run comparison: collects final metrics from run summaries and
//! emits per-method quantile rows as plot-ready CSV.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// Five-number summary with quantiles by linear interpolation between
/// order statistics: the p-quantile of sorted `x[0..n]` sits at rank
/// `h = (n-1) p`, interpolated between `x[floor(h)]` and `x[floor(h)+1]`.
pub fn five_point(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() {
        return Err(Error::InvalidArg {
            op: "five_point",
            reason: "no values".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite metric"));
    let q = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < sorted.len() {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        }
    };
    Ok([q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)])
}

pub const COMPARISON_HEADER: &str = "method,metric,min,q1,median,q3,max,n_seeds";

/// Read `summary.json` from each run directory, group the named final
/// metric by method, and emit one quantile row per method. Directories
/// with missing or unreadable summaries are reported in `skipped` and left
/// out of the table.
pub fn emit_comparison(run_dirs: &[&Path], metric: &str) -> Result<(String, Vec<String>)> {
    let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        let value = match super::record::read_summary_value(&path) {
            Ok(v) => v,
            Err(e) => {
                skipped.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        let method = value["method"].as_str().unwrap_or("unknown").to_string();
        match value["final_metrics"][metric].as_f64() {
            Some(v) => by_method.entry(method).or_default().push(v),
            None => skipped.push(format!("{}: no final metric '{metric}'", dir.display())),
        }
    }
    if by_method.is_empty() {
        return Err(Error::InvalidArg {
            op: "emit_comparison",
            reason: format!("no run produced the metric '{metric}'"),
        });
    }
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for (method, values) in &by_method {
        let [min, q1, med, q3, max] = five_point(values)?;
        out.push_str(&format!(
            "{method},{metric},{min},{q1},{med},{q3},{max},{}\n",
            values.len()
        ));
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    #[test]
    fn single_value_collapses_all_quantiles() {
        let q = five_point(&[2.5]).unwrap();
        assert_eq!(q, [2.5; 5]);
    }

    #[test]
    fn two_values_interpolate() {
        let q = five_point(&[1.0, 3.0]).unwrap();
        assert_eq!(q, [1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn quantiles_match_independent_recomputation() {
        let mut rng = Rng::new(21);
        let values: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
        let q = five_point(&values).unwrap();
        // independent route: sort, then index arithmetic written out
        let mut s = values.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(q[0], s[0]);
        assert_eq!(q[4], s[19]);
        let h: f64 = 19.0 * 0.25;
        let expect_q1 = s[h.floor() as usize]
            + (h - h.floor()) * (s[h.floor() as usize + 1] - s[h.floor() as usize]);
        assert!((q[1] - expect_q1).abs() < 1e-15);
        let h: f64 = 19.0 * 0.5;
        let expect_med = s[h.floor() as usize]
            + (h - h.floor()) * (s[h.floor() as usize + 1] - s[h.floor() as usize]);
        assert!((q[2] - expect_med).abs() < 1e-15);
    }

    #[test]
    fn comparison_groups_by_method_and_reports_missing() {
        use crate::harness::record::{write_summary, RunSummary};
        use std::collections::BTreeMap;
        let dir = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for (i, (method, v)) in [("funcid", 1.0), ("funcid", 3.0), ("aid", 2.0)]
            .iter()
            .enumerate()
        {
            let d = dir.path().join(format!("run{i}"));
            std::fs::create_dir(&d).unwrap();
            write_summary(
                &d.join("summary.json"),
                &RunSummary {
                    version: "v1",
                    task: "quad".into(),
                    method: method.to_string(),
                    seed: i as u64,
                    config: BTreeMap::new(),
                    final_metrics: BTreeMap::from([("outer_loss".to_string(), *v)]),
                    oracle_checks: vec![],
                    wall_ms_total: None,
                    build: "test".into(),
                },
            )
            .unwrap();
            dirs.push(d);
        }
        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        dirs.push(empty);
        let refs: Vec<&std::path::Path> = dirs.iter().map(|d| d.as_path()).collect();
        let (csv, skipped) = emit_comparison(&refs, "outer_loss").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COMPARISON_HEADER);
        assert_eq!(lines[1], "aid,outer_loss,2,2,2,2,2,1");
        assert_eq!(lines[2], "funcid,outer_loss,1,1.5,2,2.5,3,2");
        assert_eq!(skipped.len(), 1);
    }
}
