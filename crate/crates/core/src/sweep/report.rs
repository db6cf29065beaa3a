use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::stats::{pearson, spearman, Summary};
use super::GridPoint;
use crate::metrics::MetricsReport;
use crate::train::{fmt_f64, BatchSize};
use crate::{Error, Result};

const FAILED_PREFIX: &str = "failed: ";
/// Metric columns correlated against the loss columns in the summary.
const CURVATURE_COLUMNS: [&str; 4] = ["tr_hx", "jac_fro", "tr_hw_total", "scaled_quadform"];
const TARGET_COLUMNS: [&str; 2] = ["test_loss", "gap"];
const MIN_CORRELATION_ROWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOutcome {
    Ok(MetricsReport),
    Failed(String),
}

/// One (grid point, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub point: GridPoint,
    pub outcome: RunOutcome,
}

impl RunRow {
    pub fn metrics(&self) -> Option<&MetricsReport> {
        match &self.outcome {
            RunOutcome::Ok(m) => Some(m),
            RunOutcome::Failed(_) => None,
        }
    }

    pub fn status(&self) -> String {
        match &self.outcome {
            RunOutcome::Ok(_) => "ok".to_string(),
            RunOutcome::Failed(msg) => format!("{FAILED_PREFIX}{msg}"),
        }
    }

    /// Numeric value of a report column; `None` when absent for this row.
    fn value(&self, column: &str) -> Option<f64> {
        match column {
            "seed" => return Some(self.seed as f64),
            "eta" => return Some(self.point.eta),
            "iters" => return Some(self.point.iters as f64),
            "batch" => {
                return match self.point.batch {
                    BatchSize::Size(m) => Some(m as f64),
                    BatchSize::Full => None,
                }
            }
            _ => {}
        }
        let m = self.metrics()?;
        match column {
            "train_loss" => Some(m.train_loss),
            "test_loss" => Some(m.test_loss),
            "gap" => Some(m.gap),
            "tr_hx" => m.tr_input_hessian,
            "jac_fro" => m.jacobian_frobenius,
            "tr_hw_total" => m.tr_weight_hessian_total,
            "scaled_quadform" => m.scaled_quadform,
            "hit_rate" => m.hit_rate,
            other => {
                let k: usize = other.strip_prefix("tr_hw_layer_")?.parse().ok()?;
                m.tr_weight_hessian_per_layer.get(k.checked_sub(1)?).copied()
            }
        }
    }
}

/// Summary of one metric column at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub column: String,
    pub median: f64,
    pub iqr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub point: GridPoint,
    pub runs: usize,
    pub failures: usize,
    pub columns: Vec<ColumnSummary>,
}

impl Aggregate {
    pub fn summary(&self, column: &str) -> Option<&ColumnSummary> {
        self.columns.iter().find(|c| c.column == column)
    }
}

/// Spearman and Pearson correlation of a metric against a loss column.
/// `None` marks an undefined value (a constant column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: String,
    pub target: String,
    pub rows: usize,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Number of weight layers, which fixes the per-layer trace columns.
    pub weight_layers: usize,
    /// Every run in grid × seed order, failures included.
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    pub correlations: Vec<Correlation>,
}

impl SweepReport {
    pub fn new(weight_layers: usize, rows: Vec<RunRow>) -> Self {
        let mut report = Self {
            weight_layers,
            rows,
            aggregates: Vec::new(),
            correlations: Vec::new(),
        };
        report.aggregates = report.aggregate();
        report.correlations = report.correlate();
        report
    }

    pub fn successes(&self) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(|r| r.metrics().is_some())
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(|r| r.metrics().is_none())
    }

    /// Documented column order of the per-run CSV.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = [
            "seed", "eta", "batch", "iters", "train_loss", "test_loss", "gap", "tr_hx", "jac_fro", "tr_hw_total",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((1..=self.weight_layers).map(|k| format!("tr_hw_layer_{k}")));
        cols.extend(["scaled_quadform", "hit_rate", "status"].iter().map(|s| s.to_string()));
        cols
    }

    fn metric_columns(&self) -> Vec<String> {
        self.columns()
            .into_iter()
            .filter(|c| !matches!(c.as_str(), "seed" | "eta" | "batch" | "iters" | "status"))
            .collect()
    }

    /// Values of a numeric column, one per row.
    pub fn column_values(&self, column: &str) -> Result<Vec<Option<f64>>> {
        if column == "status" || !self.columns().iter().any(|c| c == column) {
            return Err(Error::invalid(format!("unknown numeric column `{column}`")));
        }
        Ok(self.rows.iter().map(|r| r.value(column)).collect())
    }

    /// Grid points in order of first appearance.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut out: Vec<GridPoint> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.point) {
                out.push(r.point);
            }
        }
        out
    }

    fn aggregate(&self) -> Vec<Aggregate> {
        let metric_columns = self.metric_columns();
        self.grid_points()
            .into_iter()
            .map(|point| {
                let rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.point == point).collect();
                let failures = rows.iter().filter(|r| r.metrics().is_none()).count();
                let columns = metric_columns
                    .iter()
                    .filter_map(|c| {
                        let vals: Vec<f64> = rows.iter().filter_map(|r| r.value(c)).collect();
                        Summary::of(&vals).map(|s| ColumnSummary {
                            column: c.clone(),
                            median: s.median,
                            iqr: s.iqr,
                            count: s.count,
                        })
                    })
                    .collect();
                Aggregate {
                    point,
                    runs: rows.len(),
                    failures,
                    columns,
                }
            })
            .collect()
    }

    fn correlate(&self) -> Vec<Correlation> {
        let mut out = Vec::new();
        for metric in CURVATURE_COLUMNS {
            for target in TARGET_COLUMNS {
                let (x, y) = paired(self, metric, target);
                if x.len() >= MIN_CORRELATION_ROWS {
                    out.push(Correlation {
                        metric: metric.to_string(),
                        target: target.to_string(),
                        rows: x.len(),
                        spearman: spearman(&x, &y),
                        pearson: pearson(&x, &y),
                    });
                }
            }
        }
        out
    }
}

fn paired(report: &SweepReport, a: &str, b: &str) -> (Vec<f64>, Vec<f64>) {
    report
        .rows
        .iter()
        .filter_map(|r| Some((r.value(a)?, r.value(b)?)))
        .unzip()
}

/// Spearman correlation of two columns over the rows where both are present.
/// `Ok(None)` when either column is constant.
pub fn rank_correlation(report: &SweepReport, metric: &str, target: &str) -> Result<Option<f64>> {
    report.column_values(metric)?;
    report.column_values(target)?;
    let (x, y) = paired(report, metric, target);
    if x.len() < MIN_CORRELATION_ROWS {
        return Err(Error::invalid(format!(
            "rank correlation needs at least {MIN_CORRELATION_ROWS} rows, got {}",
            x.len()
        )));
    }
    Ok(spearman(&x, &y))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn emit_csv(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    let columns = report.columns();
    w.write_record(&columns)?;
    for r in &report.rows {
        let record: Vec<String> = columns
            .iter()
            .map(|c| match c.as_str() {
                "seed" => r.seed.to_string(),
                "batch" => r.point.batch.to_string(),
                "iters" => r.point.iters.to_string(),
                "status" => r.status(),
                other => cell(r.value(other)),
            })
            .collect();
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn row_json(report: &SweepReport, r: &RunRow) -> Value {
    let mut obj = Map::new();
    for c in report.columns() {
        let v = match c.as_str() {
            "seed" => json!(r.seed),
            "batch" => serde_json::to_value(r.point.batch).expect("batch size serializes"),
            "iters" => json!(r.point.iters),
            "status" => json!(r.status()),
            other => r.value(other).map_or(Value::Null, |v| json!(v)),
        };
        obj.insert(c, v);
    }
    Value::Object(obj)
}

pub fn emit_json(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = json!({
        "weight_layers": report.weight_layers,
        "columns": report.columns(),
        "rows": report.rows.iter().map(|r| row_json(report, r)).collect::<Vec<_>>(),
    });
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Per-grid-point median and interquartile range of every metric column.
pub fn emit_aggregate_csv(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let metrics = report.metric_columns();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = ["eta", "batch", "iters", "runs", "failures"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in &metrics {
        header.push(format!("{m}_median"));
        header.push(format!("{m}_iqr"));
    }
    w.write_record(&header)?;
    for a in &report.aggregates {
        let mut rec = vec![
            fmt_f64(a.point.eta),
            a.point.batch.to_string(),
            a.point.iters.to_string(),
            a.runs.to_string(),
            a.failures.to_string(),
        ];
        for m in &metrics {
            let s = a.summary(m);
            rec.push(cell(s.map(|s| s.median)));
            rec.push(cell(s.map(|s| s.iqr)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn emit_summary_json(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = json!({
        "runs": report.rows.len(),
        "succeeded": report.successes().count(),
        "failed": report.failures().count(),
        "aggregates": report.aggregates,
        "correlations": report.correlations,
    });
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Rebuild a report from the columns of a per-run record.
fn row_from_fields(
    layers: usize,
    get: impl Fn(&str) -> Result<Option<String>>,
    num: impl Fn(&str) -> Result<Option<f64>>,
) -> Result<RunRow> {
    let required = |c: &str| get(c)?.ok_or_else(|| Error::invalid(format!("missing `{c}`")));
    let seed = required("seed")?
        .parse()
        .map_err(|_| Error::invalid("seed is not an integer"))?;
    let batch: BatchSize = required("batch")?.parse()?;
    let iters = required("iters")?
        .parse()
        .map_err(|_| Error::invalid("iters is not an integer"))?;
    let eta = num("eta")?.ok_or_else(|| Error::invalid("missing `eta`"))?;
    let point = GridPoint { eta, batch, iters };
    let status = required("status")?;
    let outcome = if status == "ok" {
        let need = |c: &str| num(c)?.ok_or_else(|| Error::invalid(format!("missing `{c}` in an ok row")));
        let per_layer: Vec<Option<f64>> = (1..=layers)
            .map(|k| num(&format!("tr_hw_layer_{k}")))
            .collect::<Result<_>>()?;
        RunOutcome::Ok(MetricsReport {
            train_loss: need("train_loss")?,
            test_loss: need("test_loss")?,
            gap: need("gap")?,
            tr_input_hessian: num("tr_hx")?,
            jacobian_frobenius: num("jac_fro")?,
            tr_weight_hessian_total: num("tr_hw_total")?,
            tr_weight_hessian_per_layer: per_layer.into_iter().flatten().collect(),
            scaled_quadform: num("scaled_quadform")?,
            hit_rate: num("hit_rate")?,
        })
    } else {
        RunOutcome::Failed(status.strip_prefix(FAILED_PREFIX).unwrap_or(&status).to_string())
    };
    Ok(RunRow { seed, point, outcome })
}

fn layer_count(columns: &[String]) -> usize {
    columns.iter().filter(|c| c.starts_with("tr_hw_layer_")).count()
}

/// Read a per-run CSV written by [`emit_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<SweepReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let layers = layer_count(&header);
    let expected = SweepReport::new(layers, Vec::new()).columns();
    if header != expected {
        return Err(Error::invalid(format!(
            "{}: unexpected header, expected {}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let idx = |c: &str| header.iter().position(|h| h == c).expect("validated header");
        let get = |c: &str| Ok(rec.get(idx(c)).filter(|s| !s.is_empty()).map(str::to_string));
        let num = |c: &str| -> Result<Option<f64>> {
            match rec.get(idx(c)).filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => s
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("{}: `{s}` in column `{c}` is not a number", path.display()))),
            }
        };
        rows.push(row_from_fields(layers, get, num)?);
    }
    Ok(SweepReport::new(layers, rows))
}

/// Read a per-run JSON document written by [`emit_json`].
pub fn read_json(path: impl AsRef<Path>) -> Result<SweepReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    let layers = doc["weight_layers"]
        .as_u64()
        .ok_or_else(|| Error::invalid("missing `weight_layers`"))? as usize;
    let rows = doc["rows"]
        .as_array()
        .ok_or_else(|| Error::invalid("missing `rows`"))?
        .iter()
        .map(|row| {
            let get = |c: &str| {
                Ok(match &row[c] {
                    Value::Null => None,
                    Value::String(s) => Some(s.clone()),
                    other => Some(other.to_string()),
                })
            };
            let num = |c: &str| match &row[c] {
                Value::Null => Ok(None),
                v => v
                    .as_f64()
                    .map(Some)
                    .ok_or_else(|| Error::invalid(format!("column `{c}` is not a number"))),
            };
            row_from_fields(layers, get, num)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport::new(layers, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(i: usize) -> MetricsReport {
        let f = i as f64;
        let train_loss = 0.1 / (f + 3.0);
        let test_loss = 0.3 + f / 7.0;
        MetricsReport {
            train_loss,
            test_loss,
            gap: test_loss - train_loss,
            tr_input_hessian: Some(1.0 / 3.0 + f),
            jacobian_frobenius: Some(std::f64::consts::PI * f),
            tr_weight_hessian_total: Some(2.0_f64.sqrt() + f),
            tr_weight_hessian_per_layer: vec![1.1 * f, 2.0_f64.sqrt() - 1.1 * f + f],
            scaled_quadform: Some(-1e-17 * f),
            hit_rate: if i % 2 == 0 { Some(0.5) } else { None },
        }
    }

    fn report(n: usize) -> SweepReport {
        let rows = (0..n)
            .map(|i| RunRow {
                seed: i as u64,
                point: GridPoint {
                    eta: 0.05,
                    batch: if i < 2 { BatchSize::Full } else { BatchSize::Size(10) },
                    iters: 100,
                },
                outcome: if i == 1 {
                    RunOutcome::Failed("training diverged at iteration 3: loss inf, again".into())
                } else {
                    RunOutcome::Ok(metrics(i))
                },
            })
            .collect();
        SweepReport::new(2, rows)
    }

    #[test]
    fn header_is_documented_order() {
        let r = report(0);
        assert_eq!(
            r.columns().join(","),
            "seed,eta,batch,iters,train_loss,test_loss,gap,tr_hx,jac_fro,tr_hw_total,\
             tr_hw_layer_1,tr_hw_layer_2,scaled_quadform,hit_rate,status"
        );
    }

    #[test]
    fn csv_and_json_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(3);
        emit_csv(&r, dir.path().join("r.csv")).unwrap();
        emit_json(&r, dir.path().join("r.json")).unwrap();
        let from_csv = read_csv(dir.path().join("r.csv")).unwrap();
        let from_json = read_json(dir.path().join("r.json")).unwrap();
        assert_eq!(from_csv, r);
        assert_eq!(from_json, r);
        for (a, b) in from_csv.rows.iter().zip(&r.rows) {
            if let (Some(x), Some(y)) = (a.metrics(), b.metrics()) {
                assert_eq!(x.gap.to_bits(), y.gap.to_bits());
            }
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        emit_csv(&report(0), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_csv(&path).unwrap().rows.is_empty());
    }

    #[test]
    fn json_and_csv_agree() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(4);
        emit_csv(&r, dir.path().join("r.csv")).unwrap();
        emit_json(&r, dir.path().join("r.json")).unwrap();
        let mut csv = csv::Reader::from_path(dir.path().join("r.csv")).unwrap();
        let header: Vec<String> = csv.headers().unwrap().iter().map(str::to_string).collect();
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        for (rec, row) in csv.records().zip(doc["rows"].as_array().unwrap()) {
            let rec = rec.unwrap();
            for (h, cell) in header.iter().zip(rec.iter()) {
                let v = &row[h.as_str()];
                match v {
                    Value::Null => assert_eq!(cell, ""),
                    Value::String(s) => assert_eq!(cell, s),
                    Value::Number(n) => assert_eq!(cell.parse::<f64>().unwrap(), n.as_f64().unwrap()),
                    other => panic!("unexpected {other}"),
                }
            }
        }
    }

    #[test]
    fn aggregates_use_successful_rows() {
        let r = report(6);
        assert_eq!(r.aggregates.len(), 2);
        let full = &r.aggregates[0];
        assert_eq!((full.runs, full.failures), (2, 1));
        assert_eq!(full.summary("train_loss").unwrap().count, 1);
        let sized = &r.aggregates[1];
        let tl = sized.summary("test_loss").unwrap();
        // rows 2..6: test_loss = 0.3 + i/7, quartiles at i = 2.75 and 4.25
        assert!((tl.median - (0.3 + 3.5 / 7.0)).abs() < 1e-12);
        assert!((tl.iqr - 1.5 / 7.0).abs() < 1e-12);
        assert_eq!(r.successes().count() + r.failures().count(), 6);
    }

    #[test]
    fn rank_correlation_contract() {
        let r = report(8);
        assert_eq!(rank_correlation(&r, "tr_hx", "test_loss").unwrap(), Some(1.0));
        assert_eq!(rank_correlation(&r, "scaled_quadform", "test_loss").unwrap(), Some(-1.0));
        assert!(rank_correlation(&r, "nope", "test_loss").is_err());
        assert!(rank_correlation(&report(4), "tr_hx", "test_loss").is_err());
        let constant = rank_correlation(&r, "eta", "test_loss").unwrap();
        assert_eq!(constant, None);
        assert!(r.correlations.iter().any(|c| c.metric == "tr_hx" && c.spearman == Some(1.0)));
    }

    #[test]
    fn unknown_columns_rejected() {
        let r = report(2);
        assert!(r.column_values("status").is_err());
        assert!(r.column_values("tr_hw_layer_3").is_err());
        assert_eq!(r.column_values("tr_hw_layer_2").unwrap().len(), 2);
    }
}
