//! Observation files.
//!
//! One row per observation. A `d1 x d2` observation `Y` is stored as its
//! `d1*d2` entries in row-major order (`Y[r, v]` in column `d2*r + v`), which
//! is the vectorization the model uses. Seasonal files prepend two integer
//! columns, `cycle` and `season` (both 1-based). A header row is optional and
//! is recognized by a first row that does not parse as numbers.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d1: usize,
    pub d2: usize,
    /// `n x d1*d2`.
    pub y: DMatrix<f64>,
    /// `(cycle, season)` of each row for seasonal data.
    pub blocks: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    /// Rows grouped by block in time order `t = S(c−1) + s`.
    pub fn block_matrices(&self, seasons: usize, cycles: usize) -> Result<Vec<DMatrix<f64>>> {
        let labels = self
            .blocks
            .as_ref()
            .ok_or_else(|| HarnessError::Config("seasonal fit needs cycle and season columns".into()))?;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); seasons * cycles];
        for (i, &(c, s)) in labels.iter().enumerate() {
            if c == 0 || s == 0 || c > cycles || s > seasons {
                return Err(HarnessError::Config(format!(
                    "row {} has (cycle, season) = ({c}, {s}) outside {cycles} cycles x {seasons} seasons",
                    i + 1
                )));
            }
            rows[seasons * (c - 1) + (s - 1)].push(i);
        }
        rows.iter()
            .enumerate()
            .map(|(t, idx)| {
                if idx.is_empty() {
                    return Err(HarnessError::Config(format!(
                        "no observations for cycle {}, season {}",
                        t / seasons + 1,
                        t % seasons + 1
                    )));
                }
                Ok(self.y.select_rows(idx.iter()))
            })
            .collect()
    }

    /// Subtracts the sample mean, per block for seasonal data.
    pub fn center(&mut self) {
        let groups: Vec<Vec<usize>> = match &self.blocks {
            None => vec![(0..self.n()).collect()],
            Some(labels) => {
                let mut keys: Vec<(usize, usize)> = labels.clone();
                keys.sort_unstable();
                keys.dedup();
                keys.iter().map(|k| (0..self.n()).filter(|&i| labels[i] == *k).collect()).collect()
            }
        };
        for g in groups {
            let mean = g.iter().fold(nalgebra::RowDVector::zeros(self.y.ncols()), |acc, &i| acc + self.y.row(i))
                / g.len() as f64;
            for &i in &g {
                let centered = self.y.row(i) - &mean;
                self.y.set_row(i, &centered);
            }
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = Vec::new();
        if self.blocks.is_some() {
            header.extend(["cycle".to_string(), "season".to_string()]);
        }
        header.extend((0..self.y.ncols()).map(|j| format!("y_{}_{}", j / self.d2, j % self.d2)));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(b) = &self.blocks {
                rec.push(b[i].0.to_string());
                rec.push(b[i].1.to_string());
            }
            // shortest round-trip representation
            rec.extend(self.y.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Csv { path: path.to_path_buf(), line: e.position().map_or(0, |p| p.line()), message: e.to_string() }
}

/// Reads `path`; with `seasonal` the first two columns are `cycle, season`.
pub fn ingest_csv(path: &Path, d1: usize, d2: usize, seasonal: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    ingest_reader(file, path, d1, d2, seasonal)
}

pub fn ingest_reader<R: Read>(reader: R, name: &Path, d1: usize, d2: usize, seasonal: bool) -> Result<Dataset> {
    let d = d1 * d2;
    let width = d + if seasonal { 2 } else { 0 };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let err = |line: u64, message: String| HarnessError::Csv { path: name.to_path_buf(), line, message };
    let mut values: Vec<f64> = Vec::new();
    let mut blocks = Vec::new();
    let mut n = 0;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(name, e))?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            // header row
            if rec.len() != width {
                return Err(err(line, format!("header has {} fields, expected {width} (d1*d2 = {d})", rec.len())));
            }
            continue;
        }
        if rec.len() != width {
            return Err(err(
                line,
                format!("row has {} fields, expected {width} (d1*d2 = {d}{})", rec.len(), if seasonal { " plus cycle, season" } else { "" }),
            ));
        }
        let mut fields = rec.iter().enumerate();
        if seasonal {
            let mut label = |what: &str| -> Result<usize> {
                let (_, f) = fields.next().expect("width checked");
                f.parse::<usize>()
                    .ok()
                    .filter(|v| *v >= 1)
                    .ok_or_else(|| err(line, format!("{what} {f:?} is not a positive integer")))
            };
            let c = label("cycle")?;
            let s = label("season")?;
            blocks.push((c, s));
        }
        for (col, f) in fields {
            let v: f64 = f.parse().map_err(|_| err(line, format!("field {} ({f:?}) is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(err(line, format!("field {} is not finite", col + 1)));
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(err(0, "no observations".into()));
    }
    Ok(Dataset { d1, d2, y: DMatrix::from_row_slice(n, d, &values), blocks: seasonal.then_some(blocks) })
}
