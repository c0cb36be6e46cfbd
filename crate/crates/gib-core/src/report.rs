//! Metrics rows and run manifests: the on-disk record of every experiment.
//!
//! `metrics.csv` carries one row per (variant, fold, sweep point) with a
//! fixed header; `manifest.json` captures the resolved configuration and
//! seeds so a run can be repeated without the original spec file.

use serde::{Deserialize, Serialize};
use std::io::Write;

/// Per-loss breakdown recorded with every accuracy measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossComponents {
    pub inf: f64,
    pub mi: f64,
    pub con: f64,
    pub vq: f64,
    pub cm: f64,
    pub total: f64,
}

/// One evaluation outcome on one fold at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub variant: String,
    pub backbone: String,
    pub hidden_dim: usize,
    pub fold: usize,
    pub axis_name: String,
    pub axis_value: f64,
    pub accuracy: f64,
    pub loss: LossComponents,
    pub epoch: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Fixed CSV header; column order is part of the format.
pub const CSV_HEADER: &str = "experiment,variant,backbone,hidden_dim,fold,axis_name,axis_value,accuracy,loss_inf,loss_mi,loss_con,loss_vq,loss_cm,loss_total,seed,wall_time_s";

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_escape(&self.experiment),
            csv_escape(&self.variant),
            csv_escape(&self.backbone),
            self.hidden_dim,
            self.fold,
            csv_escape(&self.axis_name),
            self.axis_value,
            self.accuracy,
            self.loss.inf,
            self.loss.mi,
            self.loss.con,
            self.loss.vq,
            self.loss.cm,
            self.loss.total,
            self.seed,
            self.wall_time_s,
        )
    }
}

/// Write a header plus rows; rows must already be in their final order.
pub fn write_metrics_csv<W: Write>(out: &mut W, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for record in records {
        writeln!(out, "{}", record.to_csv_row())?;
    }
    Ok(())
}

/// Parse rows written by [`write_metrics_csv`]. Quoted fields are limited
/// to what `csv_escape` produces.
pub fn parse_metrics_csv(content: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut lines = content.lines();
    let header = lines.next().ok_or("empty metrics file")?;
    if header.trim() != CSV_HEADER {
        return Err(format!("unexpected header: {header}"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 16 {
            return Err(format!("line {}: expected 16 fields, got {}", i + 2, fields.len()));
        }
        let num = |s: &str| -> Result<f64, String> {
            s.parse().map_err(|_| format!("line {}: bad number '{s}'", i + 2))
        };
        records.push(MetricsRecord {
            experiment: fields[0].clone(),
            variant: fields[1].clone(),
            backbone: fields[2].clone(),
            hidden_dim: num(&fields[3])? as usize,
            fold: num(&fields[4])? as usize,
            axis_name: fields[5].clone(),
            axis_value: num(&fields[6])?,
            accuracy: num(&fields[7])?,
            loss: LossComponents {
                inf: num(&fields[8])?,
                mi: num(&fields[9])?,
                con: num(&fields[10])?,
                vq: num(&fields[11])?,
                cm: num(&fields[12])?,
                total: num(&fields[13])?,
            },
            epoch: 0,
            seed: num(&fields[14])? as u64,
            wall_time_s: num(&fields[15])?,
        });
    }
    Ok(records)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if in_quotes && chars.peek() == Some(&'"') => {
                current.push('"');
                chars.next();
            }
            '"' => in_quotes = !in_quotes,
            ',' if !in_quotes => {
                fields.push(std::mem::take(&mut current));
            }
            other => current.push(other),
        }
    }
    fields.push(current);
    fields
}

/// Mean and sample standard deviation of per-fold accuracies at one
/// sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub axis_value: f64,
    pub mean_accuracy: f64,
    pub stdev_accuracy: f64,
    pub folds: usize,
}

/// Aggregate records (already filtered to one variant) by axis value.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SettingSummary> {
    let mut values: Vec<f64> = records.iter().map(|r| r.axis_value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("axis values are finite"));
    values.dedup();
    values
        .into_iter()
        .map(|axis_value| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| r.axis_value == axis_value)
                .map(|r| r.accuracy)
                .collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let stdev = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SettingSummary { axis_value, mean_accuracy: mean, stdev_accuracy: stdev, folds: accs.len() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fold: usize, axis: f64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "exp".into(),
            variant: "full".into(),
            backbone: "gcn".into(),
            hidden_dim: 16,
            fold,
            axis_name: "snr_db".into(),
            axis_value: axis,
            accuracy: acc,
            loss: LossComponents::default(),
            epoch: 10,
            seed: 7,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let records = vec![record(0, 5.0, 0.7), record(1, 5.0, 0.75)];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &records).unwrap();
        let parsed = parse_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].accuracy, 0.7);
        assert_eq!(parsed[1].fold, 1);
    }

    #[test]
    fn quoted_fields_roundtrip() {
        let mut r = record(0, 5.0, 0.7);
        r.experiment = "name,with,commas".into();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[r.clone()]).unwrap();
        let parsed = parse_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed[0].experiment, r.experiment);
    }

    #[test]
    fn summary_matches_hand_aggregation() {
        let records = vec![
            record(0, 5.0, 0.6),
            record(1, 5.0, 0.8),
            record(0, 15.0, 0.9),
            record(1, 15.0, 0.9),
        ];
        let summary = summarize(&records);
        assert_eq!(summary.len(), 2);
        assert!((summary[0].mean_accuracy - 0.7).abs() < 1e-12);
        // sample stdev of {0.6, 0.8}
        let expected = ((0.01f64 + 0.01) / 1.0).sqrt();
        assert!((summary[0].stdev_accuracy - expected).abs() < 1e-12);
        assert_eq!(summary[1].stdev_accuracy, 0.0);
    }
}
