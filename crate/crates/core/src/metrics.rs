//! Point-prediction metrics and results tables.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Biomarker, Normalizer, TrainingExample};
use crate::model::{Draw, Model};
use crate::mtr::N_TARGETS;

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets but {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    mse(y, y_hat).map(f64::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

impl TargetMetrics {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        let mse = mse(y, y_hat)?;
        Ok(TargetMetrics { mae: mae(y, y_hat)?, mse, rmse: mse.sqrt() })
    }

    fn average(parts: &[TargetMetrics; N_TARGETS]) -> Self {
        let n = N_TARGETS as f64;
        TargetMetrics {
            mae: parts.iter().map(|m| m.mae).sum::<f64>() / n,
            mse: parts.iter().map(|m| m.mse).sum::<f64>() / n,
            rmse: parts.iter().map(|m| m.rmse).sum::<f64>() / n,
        }
    }

    fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Mae => self.mae,
            Metric::Rmse => self.rmse,
            Metric::Mse => self.mse,
        }
    }
}

/// Per-biomarker metrics plus the unweighted mean of the four columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub per_target: [TargetMetrics; N_TARGETS],
    pub mean: TargetMetrics,
}

impl MetricSet {
    fn from_columns(y: &[Vec<f64>; N_TARGETS], y_hat: &[Vec<f64>; N_TARGETS]) -> Result<Self> {
        let mut per_target = [TargetMetrics { mae: 0.0, mse: 0.0, rmse: 0.0 }; N_TARGETS];
        for i in 0..N_TARGETS {
            per_target[i] = TargetMetrics::compute(&y[i], &y_hat[i])?;
        }
        Ok(MetricSet { per_target, mean: TargetMetrics::average(&per_target) })
    }

    /// The five columns in table order.
    pub fn columns(&self) -> [TargetMetrics; N_TARGETS + 1] {
        let p = self.per_target;
        [p[0], p[1], p[2], p[3], self.mean]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub n: usize,
    pub normalized: MetricSet,
    pub raw: MetricSet,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One target/prediction pair per patient and biomarker, normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub patient_id: String,
    pub biomarker: String,
    pub target: f64,
    pub prediction: f64,
}

/// Metrics from paired targets and predictions (normalized units). Raw-unit
/// metrics are computed on the inverse-mapped values.
pub fn evaluate_pairs(
    variant: &str,
    targets: &[[f64; N_TARGETS]],
    predictions: &[[f64; N_TARGETS]],
    norm: &Normalizer,
) -> Result<MetricsReport> {
    check_len(targets.len(), predictions.len())?;
    let column = |rows: &[[f64; N_TARGETS]], raw: bool| -> [Vec<f64>; N_TARGETS] {
        std::array::from_fn(|i| {
            let b = Biomarker::ALL[i];
            rows.iter().map(|r| if raw { norm.to_raw(r[i], b) } else { r[i] }).collect()
        })
    };
    Ok(MetricsReport {
        variant: variant.into(),
        n: targets.len(),
        normalized: MetricSet::from_columns(&column(targets, false), &column(predictions, false))?,
        raw: MetricSet::from_columns(&column(targets, true), &column(predictions, true))?,
    })
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} targets but {b} predictions")));
    }
    if a == 0 {
        return Err(Error::Empty("test set"));
    }
    Ok(())
}

/// Point metrics at the mean weights.
pub fn evaluate(model: &Model, test: &[TrainingExample], norm: &Normalizer) -> Result<(MetricsReport, Vec<PointPrediction>)> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut targets = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    let mut points = Vec::with_capacity(test.len() * N_TARGETS);
    for ex in test {
        let y = ex.target.to_array();
        let y_hat = model.predict(ex, Draw::Mean)?.means;
        for b in Biomarker::ALL {
            points.push(PointPrediction {
                patient_id: ex.patient_id.clone(),
                biomarker: b.display().into(),
                target: y[b.index()],
                prediction: y_hat[b.index()],
            });
        }
        targets.push(y);
        preds.push(y_hat);
    }
    let report = evaluate_pairs(model.config.ablation.display(), &targets, &preds, norm)?;
    Ok((report, points))
}

pub fn write_points<W: Write>(out: W, points: &[PointPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Mae,
    Rmse,
    Mse,
}

const METRICS: [(Metric, &str); 3] = [(Metric::Mae, "MAE"), (Metric::Rmse, "RMSE"), (Metric::Mse, "MSE")];
const COLUMNS: [&str; N_TARGETS + 1] = ["SysBp", "BMI", "HbA1c", "LDL", "Mean"];

/// `value` scaled by 1e2, to three significant digits.
pub fn format_e2(value: f64) -> String {
    format_sig(value * 100.0, 3)
}

pub fn format_sig(x: f64, digits: i32) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.*}", (digits - 1).max(0) as usize, x);
    }
    let magnitude = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (0.9996 -> 1.00).
    let rounded_mag = {
        let decimals = (digits - 1 - magnitude).max(0) as usize;
        let s: f64 = format!("{:.*}", decimals, x).parse().unwrap_or(x);
        if s == 0.0 {
            magnitude
        } else {
            s.abs().log10().floor() as i32
        }
    };
    let decimals = (digits - 1 - rounded_mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn header() -> Vec<String> {
    let mut h = vec!["Model".to_string()];
    for (_, m) in METRICS {
        for c in COLUMNS {
            h.push(format!("{m} {c}"));
        }
    }
    h
}

fn cells(set: &MetricSet, scaled: bool) -> Vec<String> {
    let mut out = Vec::new();
    for (metric, _) in METRICS {
        for col in set.columns() {
            let v = col.get(metric);
            out.push(if scaled { format_e2(v) } else { format_sig(v, 3) });
        }
    }
    out
}

/// Table rows: normalized values ×1e-2 (`raw = false`) or raw clinical units.
fn table_rows(reports: &[MetricsReport], raw: bool) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            let mut row = vec![r.variant.clone()];
            row.extend(if raw { cells(&r.raw, false) } else { cells(&r.normalized, true) });
            row
        })
        .collect()
}

pub fn write_table_csv<W: Write>(out: W, reports: &[MetricsReport], raw: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header())?;
    for row in table_rows(reports, raw) {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Column-aligned text rendering of the same table.
pub fn table_text(reports: &[MetricsReport], raw: bool) -> String {
    let mut rows = vec![header()];
    rows.extend(table_rows(reports, raw));
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let unit = if raw { "raw clinical units" } else { "normalized units, x1e-2" };
    let _ = writeln!(out, "# {unit}");
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_values() {
        let (y, p) = ([1.0, 2.0], [1.5, 2.5]);
        assert_eq!(mae(&y, &p).unwrap(), 0.5);
        assert_eq!(mse(&y, &p).unwrap(), 0.25);
        assert_eq!(rmse(&y, &p).unwrap(), 0.5);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(mse(&[], &[]), Err(Error::Empty(_))));
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn homogeneity_and_jensen() {
        let y = [0.1, 0.5, -0.3, 2.0];
        let p = [0.0, 0.7, 0.1, 1.5];
        let c = -3.0;
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let cp: Vec<f64> = p.iter().map(|v| c * v).collect();
        assert_abs_diff_eq!(rmse(&cy, &cp).unwrap(), c.abs() * rmse(&y, &p).unwrap(), epsilon = 1e-12);
        assert!(mse(&y, &p).unwrap() >= mae(&y, &p).unwrap().powi(2));
    }

    proptest::proptest! {
        #[test]
        fn identities_hold_on_any_pairs(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let m = TargetMetrics::compute(&y, &p).unwrap();
            proptest::prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
            if m.mse > 0.0 {
                proptest::prop_assert!(((m.rmse * m.rmse - m.mse) / m.mse).abs() <= 1e-12);
            }
            let (mut ry, mut rp) = (y.clone(), p.clone());
            ry.reverse();
            rp.reverse();
            proptest::prop_assert!((mae(&ry, &rp).unwrap() - m.mae).abs() <= 1e-12);
        }
    }

    #[test]
    fn formatting() {
        assert_eq!(format_e2(0.00887), "0.887");
        assert_eq!(format_e2(0.0135), "1.35");
        assert_eq!(format_e2(0.000272), "0.0272");
        assert_eq!(format_e2(0.123456), "12.3");
        assert_eq!(format_e2(0.0), "0.00");
        assert_eq!(format_sig(0.99960, 3), "1.00");
        assert_eq!(format_sig(1234.0, 3), "1234");
    }

    #[test]
    fn report_mean_column_and_raw_scaling() {
        let norm = Normalizer::default();
        let targets = vec![[0.2, 0.3, 0.4, 0.5], [0.6, 0.1, 0.3, 0.2], [0.5, 0.5, 0.5, 0.5]];
        let preds = vec![[0.25, 0.3, 0.35, 0.4], [0.5, 0.2, 0.3, 0.3], [0.45, 0.45, 0.6, 0.55]];
        let r = evaluate_pairs("x", &targets, &preds, &norm).unwrap();
        let p = r.normalized.per_target;
        assert_abs_diff_eq!(r.normalized.mean.mae, (p[0].mae + p[1].mae + p[2].mae + p[3].mae) / 4.0, epsilon = 1e-12);
        for b in Biomarker::ALL {
            let span = b.range().span();
            let n = r.normalized.per_target[b.index()];
            let raw = r.raw.per_target[b.index()];
            assert_abs_diff_eq!(raw.mae, n.mae * span, epsilon = 1e-9 * span);
            assert_abs_diff_eq!(raw.rmse, n.rmse * span, epsilon = 1e-9 * span);
            assert_abs_diff_eq!(raw.mse, n.mse * span * span, epsilon = 1e-9 * span * span);
        }
    }

    #[test]
    fn tables_have_one_row_per_report() {
        let norm = Normalizer::default();
        let t = vec![[0.2, 0.3, 0.4, 0.5]];
        let a = evaluate_pairs("MBT (full)", &t, &[[0.21, 0.3, 0.4, 0.5]], &norm).unwrap();
        let b = evaluate_pairs("w/o DeepMTR", &t, &[[0.3, 0.3, 0.4, 0.5]], &norm).unwrap();
        let mut buf = Vec::new();
        write_table_csv(&mut buf, &[a.clone(), b.clone()], false).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("Model,MAE SysBp,MAE BMI,MAE HbA1c,MAE LDL,MAE Mean,RMSE SysBp"));
        // 0.01 error on SysBp -> MAE 1.00 (x1e-2), mean 0.250.
        assert!(csv.lines().nth(1).unwrap().starts_with("MBT (full),1.00,0.00,0.00,0.00,0.250,"));
        let text = table_text(&[a, b], false);
        assert_eq!(text.lines().count(), 4);
    }
}
