use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::SCHEMA_VERSION;
use crate::error::{FilterError, Result};

pub const CSV_HEADER: &str =
    "scenario,filter,sigma_q,sigma_cv,sigma_r,alpha,r_max,metric,value,stderr,trials,runtime_ms";

/// One aggregated cell of a results table.
///
/// `value` is `None` when at least one trial diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub filter: String,
    pub sigma_q: Option<f64>,
    pub sigma_cv: Option<f64>,
    pub sigma_r: Option<f64>,
    pub alpha: Option<f64>,
    pub r_max: Option<f64>,
    pub metric: String,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub trials: usize,
    pub runtime_ms: f64,
}

impl ResultRow {
    pub fn is_diverged(&self) -> bool {
        self.value.is_none()
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        fn opt(a: Option<f64>, b: Option<f64>) -> Ordering {
            match (a, b) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(x), Some(y)) => x.total_cmp(&y),
            }
        }
        self.scenario
            .cmp(&other.scenario)
            .then_with(|| self.filter.cmp(&other.filter))
            .then_with(|| opt(self.sigma_q, other.sigma_q))
            .then_with(|| opt(self.sigma_cv, other.sigma_cv))
            .then_with(|| opt(self.sigma_r, other.sigma_r))
            .then_with(|| opt(self.alpha, other.alpha))
            .then_with(|| opt(self.r_max, other.r_max))
            .then_with(|| self.metric.cmp(&other.metric))
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.key_cmp(b));
}

/// Formats with six significant digits in the style of C's `%.6g`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(format_sig6).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.is_empty() || field == "diverged" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| FilterError::Io(format!("bad numeric field {field:?}")))
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))
        .map_err(|e| FilterError::Io(e.to_string()))?;
    for r in rows {
        let value = match r.value {
            Some(v) => format_sig6(v),
            None => "diverged".into(),
        };
        w.write_record([
            r.scenario.clone(),
            r.filter.clone(),
            fmt_opt(r.sigma_q),
            fmt_opt(r.sigma_cv),
            fmt_opt(r.sigma_r),
            fmt_opt(r.alpha),
            fmt_opt(r.r_max),
            r.metric.clone(),
            value,
            fmt_opt(r.stderr),
            r.trials.to_string(),
            format_sig6(r.runtime_ms),
        ])
        .map_err(|e| FilterError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| FilterError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| FilterError::Io(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| FilterError::Io(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(FilterError::Io("unexpected CSV header".into()));
    }
    rd.records()
        .map(|rec| {
            let rec = rec.map_err(|e| FilterError::Io(e.to_string()))?;
            Ok(ResultRow {
                scenario: rec[0].to_string(),
                filter: rec[1].to_string(),
                sigma_q: parse_opt(&rec[2])?,
                sigma_cv: parse_opt(&rec[3])?,
                sigma_r: parse_opt(&rec[4])?,
                alpha: parse_opt(&rec[5])?,
                r_max: parse_opt(&rec[6])?,
                metric: rec[7].to_string(),
                value: parse_opt(&rec[8])?,
                stderr: parse_opt(&rec[9])?,
                trials: rec[10]
                    .parse()
                    .map_err(|_| FilterError::Io("bad trial count".into()))?,
                runtime_ms: parse_opt(&rec[11])?.unwrap_or(0.0),
            })
        })
        .collect()
}

/// JSON document `{"schema_version": 1, "rows": [...]}` with the same
/// six-digit rounding as the CSV.
pub fn rows_to_json(rows: &[ResultRow]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        rows: &'a [ResultRow],
    }
    let round = |v: Option<f64>| v.map(|x| format_sig6(x).parse::<f64>().unwrap_or(x));
    let rounded: Vec<ResultRow> = rows
        .iter()
        .map(|r| ResultRow {
            sigma_q: round(r.sigma_q),
            sigma_cv: round(r.sigma_cv),
            sigma_r: round(r.sigma_r),
            alpha: round(r.alpha),
            r_max: round(r.r_max),
            value: round(r.value),
            stderr: round(r.stderr),
            runtime_ms: round(Some(r.runtime_ms)).unwrap_or(0.0),
            ..r.clone()
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&Doc {
        schema_version: SCHEMA_VERSION,
        rows: &rounded,
    })
    .map_err(|e| FilterError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Output format of [`emit_results`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `<dir>/<stem>.csv` or `.json`. Refuses an empty row set.
pub fn emit_results(rows: &[ResultRow], dir: &Path, stem: &str, format: Format) -> Result<PathBuf> {
    if rows.is_empty() {
        return Err(FilterError::Io("no result rows to write".into()));
    }
    fs::create_dir_all(dir)?;
    let (ext, text) = match format {
        Format::Csv => ("csv", rows_to_csv(rows)?),
        Format::Json => ("json", rows_to_json(rows)?),
    };
    let path = dir.join(format!("{stem}.{ext}"));
    write_atomic(&path, &text)?;
    Ok(path)
}
