//! CSV and JSON emission. Floats are written with 17 significant digits (CSV)
//! or shortest round-trip form (JSON).

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use super::config::OutputFormat;

/// One output row: moments at a time point, optionally with standard errors.
#[derive(Debug, Clone)]
pub struct Row {
    /// Optional leading label column (e.g. which engine produced the row).
    pub label: Option<String>,
    pub time: f64,
    pub mean: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub se_mean: Option<DVector<f64>>,
    pub se_covariance: Option<DMatrix<f64>>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(n: usize, rows: &[Row]) -> Vec<String> {
    let mut cols = Vec::new();
    if rows.iter().any(|r| r.label.is_some()) {
        cols.push("label".to_string());
    }
    cols.push("time".to_string());
    cols.extend((0..n).map(|i| format!("mean_{i}")));
    if rows.iter().any(|r| r.covariance.is_some()) {
        for i in 0..n {
            for j in i..n {
                cols.push(format!("cov_{i}{j}"));
            }
        }
    }
    if rows.iter().any(|r| r.se_mean.is_some()) {
        cols.extend((0..n).map(|i| format!("se_mean_{i}")));
    }
    if rows.iter().any(|r| r.se_covariance.is_some()) {
        for i in 0..n {
            for j in i..n {
                cols.push(format!("se_cov_{i}{j}"));
            }
        }
    }
    cols
}

fn upper(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn to_csv(rows: &[Row]) -> String {
    let n = rows.first().map_or(0, |r| r.mean.len());
    let labelled = rows.iter().any(|r| r.label.is_some());
    let mut out = header(n, rows).join(",");
    out.push('\n');
    for r in rows {
        let mut fields = Vec::new();
        if labelled {
            fields.push(r.label.clone().unwrap_or_default());
        }
        fields.push(fmt_f64(r.time));
        fields.extend(r.mean.iter().map(|v| fmt_f64(*v)));
        if let Some(c) = &r.covariance {
            fields.extend(upper(c).into_iter().map(fmt_f64));
        }
        if let Some(s) = &r.se_mean {
            fields.extend(s.iter().map(|v| fmt_f64(*v)));
        }
        if let Some(s) = &r.se_covariance {
            fields.extend(upper(s).into_iter().map(fmt_f64));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|v| json!(v)).collect()))
            .collect(),
    )
}

pub fn row_json(r: &Row) -> Value {
    let mut obj = serde_json::Map::new();
    if let Some(l) = &r.label {
        obj.insert("label".into(), json!(l));
    }
    // JSON has no infinity; stationary rows carry a null time
    obj.insert(
        "time".into(),
        if r.time.is_finite() {
            json!(r.time)
        } else {
            Value::Null
        },
    );
    obj.insert("mean".into(), json!(r.mean.as_slice()));
    if let Some(c) = &r.covariance {
        obj.insert("covariance".into(), matrix_json(c));
    }
    if let Some(s) = &r.se_mean {
        obj.insert("se_mean".into(), json!(s.as_slice()));
    }
    if let Some(s) = &r.se_covariance {
        obj.insert("se_covariance".into(), matrix_json(s));
    }
    Value::Object(obj)
}

pub fn to_json(command: &str, metadata: Value, rows: &[Row]) -> String {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "metadata": metadata,
        "rows": rows.iter().map(row_json).collect::<Vec<_>>(),
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json output");
    s.push('\n');
    s
}

pub fn render(format: OutputFormat, command: &str, metadata: Value, rows: &[Row]) -> String {
    match format {
        OutputFormat::Csv => to_csv(rows),
        OutputFormat::Json => to_json(command, metadata, rows),
    }
}
