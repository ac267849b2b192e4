//! CSV formats: observation matrices, training traces and summaries.
//!
//! Floats are written in Rust's shortest round-trip form, so every file
//! parses back to the identical values regardless of locale.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::optimize::TraceRow;

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { row: 0, column: 0, msg: format!("{}: {other:?}", path.display()) },
    }
}

/// Reads a `T × d_y` matrix with a header row. Rows and columns in errors
/// are 1-based and count the header as row 1.
pub fn load_matrix_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let width = reader.headers().map_err(|e| csv_err(path, e))?.len();
    if width == 0 {
        return Err(Error::Parse { row: 1, column: 1, msg: "empty file".into() });
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() > width {
            return Err(Error::Parse { row, column: width + 1, msg: "extra cell".into() });
        }
        for col in 0..width {
            let cell = record.get(col).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Parse { row, column: col + 1, msg: "missing value".into() });
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse { row, column: col + 1, msg: format!("not a number: `{cell}`") })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { row: 2, column: 1, msg: "no data rows".into() });
    }
    Dataset::new(values, width)
}

/// Writes `data` with header `y1, …, y_d`.
pub fn write_matrix_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = (1..=data.obs_dim()).map(|k| format!("y{k}")).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| fmt_f(*v))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One training-trace line with the run it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub method: String,
    pub particles: usize,
    pub horizon: usize,
    pub row: TraceRow,
}

pub const TRACE_HEADER: [&str; 9] =
    ["method", "particles", "horizon", "seed", "iteration", "elbo_hat", "smoothed_elbo", "smoothed_se", "wall_time"];

/// Header plus one line per row; unevaluated smoothed cells are empty.
pub fn write_trace(rows: &[LabeledRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.particles.to_string(),
            r.horizon.to_string(),
            r.row.seed.to_string(),
            r.row.iteration.to_string(),
            fmt_f(r.row.elbo_hat),
            fmt_opt(r.row.smoothed_elbo),
            fmt_opt(r.row.smoothed_se),
            fmt_f(r.row.wall_time),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cell<T: std::str::FromStr>(rec: &csv::StringRecord, row: usize, col: usize) -> Result<T> {
    let s = rec.get(col).unwrap_or("");
    s.parse().map_err(|_| Error::Parse { row, column: col + 1, msg: format!("bad value `{s}`") })
}

fn opt_cell(rec: &csv::StringRecord, row: usize, col: usize) -> Result<Option<f64>> {
    if rec.get(col).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        cell(rec, row, col).map(Some)
    }
}

fn read_records(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse { row: 1, column: 1, msg: format!("unexpected header in {}", path.display()) });
    }
    reader.records().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<LabeledRow>> {
    read_records(path, &TRACE_HEADER)?
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let row = k + 2;
            Ok(LabeledRow {
                method: rec.get(0).unwrap_or("").to_owned(),
                particles: cell(rec, row, 1)?,
                horizon: cell(rec, row, 2)?,
                row: TraceRow {
                    seed: cell(rec, row, 3)?,
                    iteration: cell(rec, row, 4)?,
                    elbo_hat: cell(rec, row, 5)?,
                    smoothed_elbo: opt_cell(rec, row, 6)?,
                    smoothed_se: opt_cell(rec, row, 7)?,
                    wall_time: cell(rec, row, 8)?,
                },
            })
        })
        .collect()
}

/// One summary value. `quantity` names what `value` is (`elbo`, `log_p`,
/// `grad_mean`, `grad_var`, `tv`, ...); `setting` carries any extra
/// coordinate such as `lambda=-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub setting: String,
    pub particles: usize,
    pub horizon: usize,
    pub quantity: String,
    pub value: f64,
    pub std_err: Option<f64>,
}

impl SummaryRow {
    pub fn new(method: &str, particles: usize, horizon: usize, quantity: &str, value: f64, std_err: Option<f64>) -> Self {
        Self {
            method: method.into(),
            setting: String::new(),
            particles,
            horizon,
            quantity: quantity.into(),
            value,
            std_err,
        }
    }

    pub fn with_setting(mut self, setting: impl Into<String>) -> Self {
        self.setting = setting.into();
        self
    }
}

pub const SUMMARY_HEADER: [&str; 7] = ["method", "setting", "particles", "horizon", "quantity", "value", "std_err"];

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.setting.clone(),
            r.particles.to_string(),
            r.horizon.to_string(),
            r.quantity.clone(),
            fmt_f(r.value),
            fmt_opt(r.std_err),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_records(path, &SUMMARY_HEADER)?
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let row = k + 2;
            Ok(SummaryRow {
                method: rec.get(0).unwrap_or("").to_owned(),
                setting: rec.get(1).unwrap_or("").to_owned(),
                particles: cell(rec, row, 2)?,
                horizon: cell(rec, row, 3)?,
                quantity: rec.get(4).unwrap_or("").to_owned(),
                value: cell(rec, row, 5)?,
                std_err: opt_cell(rec, row, 6)?,
            })
        })
        .collect()
}

/// Writes a CSV with the given header and pre-formatted rows.
pub(crate) fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn f(v: f64) -> String {
    fmt_f(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn reads_a_column() {
        let (_d, p) = tmp("v\n0.1\n-0.2\n");
        let d = load_matrix_csv(&p).unwrap();
        assert_eq!(d, Dataset::from_rows(&[vec![0.1], vec![-0.2]]).unwrap());
    }

    #[test]
    fn reports_row_and_column() {
        let (_d, p) = tmp("a,b\n1,2\n3\n");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { row: 3, column: 2, .. })));
        let (_d, p) = tmp("a,b\n1,2\n3,\n");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { row: 3, column: 2, .. })));
        let (_d, p) = tmp("a,b\n1,x\n");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { row: 2, column: 2, .. })));
        let (_d, p) = tmp("a,b\n1,2,3\n");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { row: 2, column: 3, .. })));
        let (_d, p) = tmp("");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { .. })));
        let (_d, p) = tmp("a\n");
        assert!(matches!(load_matrix_csv(&p), Err(Error::Parse { .. })));
        assert!(matches!(load_matrix_csv(Path::new("/nonexistent/x.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trace(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().trim_end(), TRACE_HEADER.join(","));
        assert!(read_trace(&p).unwrap().is_empty());
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let e = write_trace(&[], Path::new("/nonexistent/dir/t.csv")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }), "{e}");
    }

    proptest! {
        #[test]
        fn matrix_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e300f64..1e300, 3), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.csv");
            let d = Dataset::from_rows(&rows).unwrap();
            write_matrix_csv(&p, &d).unwrap();
            prop_assert_eq!(load_matrix_csv(&p).unwrap(), d);
        }

        #[test]
        fn trace_round_trip(
            vals in proptest::collection::vec((-1e6f64..1e6, proptest::option::of(-1e6f64..1e6), 0.0f64..1e3), 0..30),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.csv");
            let rows: Vec<LabeledRow> = vals
                .iter()
                .enumerate()
                .map(|(i, (e, s, w))| LabeledRow {
                    method: "vsmc".into(),
                    particles: 4,
                    horizon: 10,
                    row: TraceRow { iteration: i + 1, elbo_hat: *e, smoothed_elbo: *s, smoothed_se: s.map(f64::abs), wall_time: *w, seed: 7 },
                })
                .collect();
            write_trace(&rows, &p).unwrap();
            prop_assert_eq!(read_trace(&p).unwrap(), rows);
        }

        #[test]
        fn summary_round_trip(v in -1e9f64..1e9, se in proptest::option::of(0.0f64..10.0)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.csv");
            let rows = vec![SummaryRow::new("VSMC", 4, 25, "elbo", v, se).with_setting("lambda=-1")];
            write_summary(&rows, &p).unwrap();
            prop_assert_eq!(read_summary(&p).unwrap(), rows);
        }
    }
}
