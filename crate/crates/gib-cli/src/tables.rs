//! Plain-text comparison tables for ablation runs: variants as row groups,
//! sweep values as columns, mean (and stdev where requested) as cells.

use gib_core::report::{summarize, MetricsRecord};
use std::fmt::Write as _;

/// Rows = variants, columns = axis values, cells = mean accuracy.
/// Adds a `diff` row after each pair of consecutive rows when
/// `diff_pairs` is set (the hidden-dimension comparison layout).
pub fn mean_table(
    records: &[MetricsRecord],
    variants: &[String],
    diff_pairs: bool,
) -> String {
    let mut axis_values: Vec<f64> = records.iter().map(|r| r.axis_value).collect();
    axis_values.sort_by(|a, b| a.partial_cmp(b).expect("finite axis values"));
    axis_values.dedup();
    let axis_name = records.first().map_or("axis", |r| r.axis_name.as_str());

    let mut out = String::new();
    let _ = write!(out, "{:<26}", format!("variant \\ {axis_name}"));
    for v in &axis_values {
        let _ = write!(out, "{:>10}", format!("{v}"));
    }
    let _ = writeln!(out);

    let mut means: Vec<Vec<f64>> = Vec::new();
    for variant in variants {
        let rows: Vec<MetricsRecord> = records
            .iter()
            .filter(|r| &r.variant == variant)
            .cloned()
            .collect();
        let summary = summarize(&rows);
        let row_means: Vec<f64> = axis_values
            .iter()
            .map(|&v| {
                summary
                    .iter()
                    .find(|s| s.axis_value == v)
                    .map_or(f64::NAN, |s| s.mean_accuracy)
            })
            .collect();
        let _ = write!(out, "{variant:<26}");
        for m in &row_means {
            let _ = write!(out, "{:>10.3}", m);
        }
        let _ = writeln!(out);
        means.push(row_means);

        if diff_pairs && means.len().is_multiple_of(2) {
            let a = &means[means.len() - 2];
            let b = &means[means.len() - 1];
            let _ = write!(out, "{:<26}", "  diff");
            for (x, y) in a.iter().zip(b) {
                let _ = write!(out, "{:>10.3}", y - x);
            }
            let _ = writeln!(out);
        }
    }
    out
}

/// Rows = variant x {mean, stdev}, columns = axis values.
pub fn mean_stdev_table(records: &[MetricsRecord], variants: &[String]) -> String {
    let mut axis_values: Vec<f64> = records.iter().map(|r| r.axis_value).collect();
    axis_values.sort_by(|a, b| a.partial_cmp(b).expect("finite axis values"));
    axis_values.dedup();
    let axis_name = records.first().map_or("axis", |r| r.axis_name.as_str());

    let mut out = String::new();
    let _ = write!(out, "{:<26}", format!("variant \\ {axis_name}"));
    for v in &axis_values {
        let _ = write!(out, "{:>10}", format!("{v}"));
    }
    let _ = writeln!(out);
    for variant in variants {
        let rows: Vec<MetricsRecord> = records
            .iter()
            .filter(|r| &r.variant == variant)
            .cloned()
            .collect();
        let summary = summarize(&rows);
        for (label, pick) in [
            ("mean", true),
            ("stdev", false),
        ] {
            let _ = write!(out, "{:<26}", format!("{variant} {label}"));
            for &v in &axis_values {
                let cell = summary
                    .iter()
                    .find(|s| s.axis_value == v)
                    .map_or(f64::NAN, |s| if pick { s.mean_accuracy } else { s.stdev_accuracy });
                let _ = write!(out, "{:>10.3}", cell);
            }
            let _ = writeln!(out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gib_core::report::LossComponents;

    fn record(variant: &str, fold: usize, axis: f64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "exp".into(),
            variant: variant.into(),
            backbone: "gcn".into(),
            hidden_dim: 16,
            fold,
            axis_name: "snr_db".into(),
            axis_value: axis,
            accuracy: acc,
            loss: LossComponents::default(),
            epoch: 1,
            seed: 0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn mean_table_has_one_row_per_variant_and_all_columns() {
        let records = vec![
            record("beta=0.01", 0, -15.0, 0.5),
            record("beta=0.01", 0, 25.0, 0.7),
            record("beta=0.1", 0, -15.0, 0.55),
            record("beta=0.1", 0, 25.0, 0.72),
        ];
        let table = mean_table(&records, &["beta=0.01".into(), "beta=0.1".into()], false);
        assert!(table.contains("beta=0.01"));
        assert!(table.contains("beta=0.1"));
        assert!(table.contains("-15"));
        assert!(table.contains("25"));
        assert!(table.contains("0.500"));
        assert!(table.contains("0.720"));
    }

    #[test]
    fn diff_rows_appear_for_pairs() {
        let records = vec![
            record("dim-16", 0, 5.0, 0.70),
            record("dim-32", 0, 5.0, 0.73),
        ];
        let table = mean_table(&records, &["dim-16".into(), "dim-32".into()], true);
        assert!(table.contains("diff"));
        assert!(table.contains("0.030"));
    }

    #[test]
    fn stdev_table_has_mean_and_stdev_rows() {
        let records = vec![
            record("full", 0, 5.0, 0.7),
            record("full", 1, 5.0, 0.8),
        ];
        let table = mean_stdev_table(&records, &["full".into()]);
        assert!(table.contains("full mean"));
        assert!(table.contains("full stdev"));
        assert!(table.contains("0.750"));
    }
}
