//! Deterministic report persistence.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use imstab_core::{ComplexField, Grid};

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub id: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub alpha: Option<f64>,
    pub c_final: Option<f64>,
    pub verdict: bool,
}

pub const SUMMARY_HEADER: &str = "id,lhs,rhs,alpha,C_final,verdict\n";

#[derive(Debug)]
pub struct IoError {
    pub path: PathBuf,
    pub source: io::Error,
}

impl std::fmt::Display for IoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.source)
    }
}

impl std::error::Error for IoError {}

fn at(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError { path: path.to_path_buf(), source }
}

/// Serializes to a `Value`; maps become sorted because serde_json's map is a BTreeMap.
pub fn to_value<T: Serialize>(report: &T) -> Value {
    serde_json::to_value(report).expect("reports serialize")
}

/// Removes every `wall_time_s` entry, returning them keyed by JSON pointer.
pub fn strip_timings(v: &mut Value) -> Map<String, Value> {
    fn walk(v: &mut Value, path: &str, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) => {
                if let Some(t) = m.remove("wall_time_s") {
                    out.insert(format!("{path}/wall_time_s"), t);
                }
                for (k, c) in m.iter_mut() {
                    walk(c, &format!("{path}/{k}"), out);
                }
            }
            Value::Array(a) => {
                for (i, c) in a.iter_mut().enumerate() {
                    walk(c, &format!("{path}/{i}"), out);
                }
            }
            _ => {}
        }
    }
    let mut out = Map::new();
    walk(v, "", &mut out);
    out
}

/// Pretty JSON with a trailing newline. Floats use shortest round-trip form.
pub fn render(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value renders");
    s.push('\n');
    s
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(at(path))
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            csv_field(&self.id),
            cell(self.lhs),
            cell(self.rhs),
            cell(self.alpha),
            cell(self.c_final),
            if self.verdict { "pass" } else { "fail" }
        )
    }
}

/// Appends rows under an exclusive file lock, writing the header first if the
/// file is empty.
pub fn append_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), IoError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(at(path))?;
    f.lock().map_err(at(path))?;
    let mut buf = String::new();
    if f.metadata().map_err(at(path))?.len() == 0 {
        buf.push_str(SUMMARY_HEADER);
    }
    for r in rows {
        buf.push_str(&r.to_csv());
    }
    let res = f.write_all(buf.as_bytes()).and_then(|_| f.flush());
    let _ = f.unlock();
    res.map_err(at(path))
}

/// Writes `x1,x2,re,im` for every defined node.
pub fn field_csv(grid: &Grid, u: &ComplexField) -> String {
    let mut s = String::from("x1,x2,re,im\n");
    for k in 0..grid.node_count() {
        if !u.is_valid(k) {
            continue;
        }
        let [x, y] = grid.coords(k);
        let z = u.value(k);
        s.push_str(&format!("{x},{y},{},{}\n", z.re, z.im));
    }
    s
}

/// Paths written by one subcommand.
#[derive(Debug, Default, Clone)]
pub struct Written {
    pub report: PathBuf,
    pub timings: Option<PathBuf>,
    pub extra: Vec<PathBuf>,
}

/// Persists a report as `<stem>.json` (timings stripped into
/// `<stem>.timings.json`) and appends the summary rows.
pub fn write_report(
    dir: &Path,
    stem: &str,
    report: Value,
    rows: &[SummaryRow],
) -> Result<Written, IoError> {
    fs::create_dir_all(dir).map_err(at(dir))?;
    let mut report = report;
    let timings = strip_timings(&mut report);
    let path = dir.join(format!("{stem}.json"));
    write_atomic(&path, render(&report).as_bytes())?;
    let mut out = Written { report: path, ..Default::default() };
    if !timings.is_empty() {
        let tp = dir.join(format!("{stem}.timings.json"));
        write_atomic(&tp, render(&Value::Object(timings)).as_bytes())?;
        out.timings = Some(tp);
    }
    append_summary(&dir.join("summary.csv"), rows)?;
    Ok(out)
}
