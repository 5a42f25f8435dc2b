//! From a raw panel (rows = periods, columns = series) to normal scores.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{std_normal_cdf, std_normal_quantile};
use crate::targets::CopulaData;

/// Pseudo-observations are kept in `[U_CLAMP, 1 - U_CLAMP]`.
pub const U_CLAMP: f64 = 1e-6;
pub const DEFAULT_MIN_OBS: usize = 10;

/// `T x r` table with row and column labels and no missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub values: DMatrix<f64>,
    pub column_labels: Vec<String>,
    pub row_labels: Vec<String>,
}

impl Panel {
    pub fn new(values: DMatrix<f64>, column_labels: Vec<String>, row_labels: Vec<String>) -> Result<Self> {
        if column_labels.len() != values.ncols() || row_labels.len() != values.nrows() {
            return Err(Error::Data(format!(
                "labels ({} rows, {} columns) do not match a {}x{} table",
                row_labels.len(),
                column_labels.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("panel contains non-finite values".into()));
        }
        Ok(Panel { values, column_labels, row_labels })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Parse CSV: header row of column labels, first column of row labels.
    /// Columns with any missing cell are dropped with a warning.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(Error::Data("expected a label column and at least one data column".into()));
        }
        let labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            rows.push(rec.get(0).unwrap_or("").trim().to_string());
            let mut row = Vec::with_capacity(labels.len());
            for (c, cell) in rec.iter().skip(1).enumerate() {
                row.push(parse_cell(cell).map_err(|_| {
                    Error::Data(format!("row {} column '{}': cannot parse '{cell}'", line + 2, labels[c]))
                })?);
            }
            cells.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("no data rows".into()));
        }
        let keep: Vec<usize> = (0..labels.len())
            .filter(|&c| {
                let complete = cells.iter().all(|r| r[c].is_some());
                if !complete {
                    log::warn!("dropping column '{}' because it has missing cells", labels[c]);
                }
                complete
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::Data("every column has missing cells".into()));
        }
        let values = DMatrix::from_fn(rows.len(), keep.len(), |i, j| cells[i][keep[j]].expect("complete column"));
        Panel::new(values, keep.iter().map(|&c| labels[c].clone()).collect(), rows)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Write with the same header layout used for reading.
    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![String::new()];
        header.extend(self.column_labels.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.row_labels[i].clone()];
            rec.extend((0..self.n_cols()).map(|j| format!("{:?}", self.values[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t == "." {
        return Ok(None);
    }
    t.parse::<f64>().map(Some)
}

/// First differences `y_t - y_{t-1}`; row labels are those of the later period.
pub fn difference_series(panel: &Panel) -> Result<Panel> {
    let t = panel.n_rows();
    if t < 2 {
        return Err(Error::TooFewObservations { column: "all".into(), found: t, required: 2 });
    }
    let v = &panel.values;
    let diff = DMatrix::from_fn(t - 1, panel.n_cols(), |i, j| v[(i + 1, j)] - v[(i, j)]);
    Panel::new(diff, panel.column_labels.clone(), panel.row_labels[1..].to_vec())
}

/// Gaussian-kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeMarginal {
    pub points: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeMarginal {
    pub fn new(points: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() || !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::Domain(format!("invalid kde: {} points, bandwidth {bandwidth}", points.len())));
        }
        Ok(KdeMarginal { points, bandwidth })
    }

    /// Silverman's rule `1.06 sd n^(-1/5)`.
    pub fn silverman(points: Vec<f64>) -> Result<Self> {
        let n = points.len() as f64;
        if points.len() < 2 {
            return Err(Error::TooFewObservations { column: String::new(), found: points.len(), required: 2 });
        }
        let mean = points.iter().sum::<f64>() / n;
        let sd = (points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Data("cannot fit a kde to a constant column".into()));
        }
        Self::new(points, 1.06 * sd * n.powf(-0.2))
    }

    pub fn density(&self, y: f64) -> f64 {
        let b = self.bandwidth;
        self.points.iter().map(|p| crate::numerics::std_normal_pdf((y - p) / b)).sum::<f64>()
            / (self.points.len() as f64 * b)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        kde_cdf(self, y)
    }
}

/// `(1/n) sum_i Phi((y - y_i)/b)`, clamped to `[U_CLAMP, 1 - U_CLAMP]`.
pub fn kde_cdf(kde: &KdeMarginal, y: f64) -> f64 {
    let b = kde.bandwidth;
    let u = kde.points.iter().map(|p| std_normal_cdf((y - p) / b)).sum::<f64>() / kde.points.len() as f64;
    u.clamp(U_CLAMP, 1.0 - U_CLAMP)
}

/// Per-column KDE, CDF and probit.
pub fn to_copula_scores(panel: &Panel, min_obs: usize) -> Result<CopulaData> {
    CopulaData::new(normal_scores(panel, min_obs)?.values)
}

/// Same as [`to_copula_scores`], keeping the labels.
pub fn normal_scores(panel: &Panel, min_obs: usize) -> Result<Panel> {
    let n = panel.n_rows();
    let cols: Vec<Vec<f64>> = (0..panel.n_cols())
        .into_par_iter()
        .map(|j| {
            let label = &panel.column_labels[j];
            if n < min_obs {
                return Err(Error::TooFewObservations { column: label.clone(), found: n, required: min_obs });
            }
            let col: Vec<f64> = panel.values.column(j).iter().copied().collect();
            let kde = KdeMarginal::silverman(col.clone()).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("column '{label}': {msg}")),
                other => other,
            })?;
            Ok(col.iter().map(|&y| std_normal_quantile(kde_cdf(&kde, y))).collect())
        })
        .collect::<Result<_>>()?;
    let values = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Panel::new(values, panel.column_labels.clone(), panel.row_labels.clone())
}
