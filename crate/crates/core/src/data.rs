//! Functional panels `Y_tj(u_k)` and their CSV formats.
//!
//! Two layouts are read and written:
//!
//! * long: header `time,variable,gridpoint,value`, one row per cell;
//! * wide: header `time,variable,<g1>,<g2>,...`, one row per (time, variable).
//!
//! Times and variables keep their order of first appearance; grid points
//! are sorted numerically and mapped affinely onto [0, 1].

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvFormat {
    Long,
    Wide,
}

impl std::str::FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" | "long-csv" => Ok(CsvFormat::Long),
            "wide" | "wide-csv" => Ok(CsvFormat::Wide),
            other => Err(Error::invalid("format", format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    None,
    Log,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Transform::None),
            "log" => Ok(Transform::Log),
            other => Err(Error::invalid("transform", format!("unknown transform `{other}`"))),
        }
    }
}

/// Observed curves: `values[t]` is the p×L matrix of time t.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalPanel {
    pub values: Vec<DMatrix<f64>>,
    pub grid: Vec<f64>,
    pub times: Vec<String>,
    pub variables: Vec<String>,
}

impl FunctionalPanel {
    pub fn new(
        values: Vec<DMatrix<f64>>,
        grid: Vec<f64>,
        times: Vec<String>,
        variables: Vec<String>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("panel", "no time steps"));
        }
        let shape = (variables.len(), grid.len());
        if let Some(bad) = values.iter().find(|v| v.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "panel",
                lhs: bad.shape(),
                rhs: shape,
            });
        }
        if times.len() != values.len() {
            return Err(Error::invalid("panel", "one label per time step required"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("grid", "must be strictly increasing"));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::non_finite("panel values"));
        }
        Ok(Self {
            values,
            grid,
            times,
            variables,
        })
    }

    /// Panel with generated labels `t1..`, `y1..`.
    pub fn from_values(values: Vec<DMatrix<f64>>, grid: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let p = values.first().map(|v| v.nrows()).unwrap_or(0);
        Self::new(
            values,
            grid,
            (1..=n).map(|i| format!("t{i}")).collect(),
            (1..=p).map(|i| format!("y{i}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn l(&self) -> usize {
        self.grid.len()
    }

    /// p × (n·L) matrix with column `t·L + k`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, p, l) = (self.n(), self.p(), self.l());
        DMatrix::from_fn(p, n * l, |i, c| self.values[c / l][(i, c % l)])
    }

    /// Sub-panel of time steps `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n() {
            return Err(Error::invalid("slice", format!("bad range {start}..{end} for n={}", self.n())));
        }
        Ok(Self {
            values: self.values[start..end].to_vec(),
            grid: self.grid.clone(),
            times: self.times[start..end].to_vec(),
            variables: self.variables.clone(),
        })
    }

    /// Population standard deviation of all cells.
    pub fn std(&self) -> f64 {
        let count = (self.n() * self.p() * self.l()) as f64;
        let mean = self.values.iter().map(|v| v.sum()).sum::<f64>() / count;
        let ss: f64 = self
            .values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| (x - mean).powi(2))
            .sum();
        (ss / count).sqrt()
    }

    pub fn apply(&mut self, transform: Transform) -> Result<()> {
        if transform == Transform::Log {
            for (t, v) in self.values.iter_mut().enumerate() {
                if let Some(bad) = v.iter().find(|&&x| !(x > 0.0)) {
                    return Err(Error::Parse {
                        location: format!("time {}", self.times[t]),
                        message: format!("log transform of non-positive value {bad}"),
                    });
                }
                v.apply(|x| *x = x.ln());
            }
        }
        Ok(())
    }
}

/// Affine map of sorted grid points onto [0, 1] (a single point maps to 0).
pub fn normalize_grid(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = match (raw.first(), raw.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Vec::new(),
    };
    if hi == lo {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn parse_f64(s: &str, location: impl Fn() -> String) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        location: location(),
        message: format!("`{s}` is not a number"),
    })
}

fn csv_err(e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "csv".to_string());
    Error::Parse {
        location,
        message: e.to_string(),
    }
}

struct Cells {
    times: Vec<String>,
    variables: Vec<String>,
    grid_raw: Vec<f64>,
    cells: HashMap<(usize, usize, u64), f64>,
}

impl Cells {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            variables: Vec::new(),
            grid_raw: Vec::new(),
            cells: HashMap::new(),
        }
    }

    fn index(list: &mut Vec<String>, key: &str) -> usize {
        match list.iter().position(|x| x == key) {
            Some(i) => i,
            None => {
                list.push(key.to_string());
                list.len() - 1
            }
        }
    }

    fn insert(&mut self, time: &str, var: &str, g: f64, value: f64, location: String) -> Result<()> {
        let ti = Self::index(&mut self.times, time);
        let vi = Self::index(&mut self.variables, var);
        if !self.grid_raw.iter().any(|&x| x.to_bits() == g.to_bits()) {
            self.grid_raw.push(g);
        }
        if self.cells.insert((ti, vi, g.to_bits()), value).is_some() {
            return Err(Error::Parse {
                location,
                message: format!("duplicate cell time={time} variable={var} gridpoint={g}"),
            });
        }
        Ok(())
    }

    fn finish(mut self) -> Result<FunctionalPanel> {
        if self.times.is_empty() {
            return Err(Error::Parse {
                location: "csv".into(),
                message: "no data rows".into(),
            });
        }
        self.grid_raw.sort_by(|a, b| a.partial_cmp(b).expect("grid points are finite"));
        let (n, p, l) = (self.times.len(), self.variables.len(), self.grid_raw.len());
        let mut missing = Vec::new();
        let mut values = vec![DMatrix::zeros(p, l); n];
        for t in 0..n {
            for i in 0..p {
                for (k, g) in self.grid_raw.iter().enumerate() {
                    match self.cells.get(&(t, i, g.to_bits())) {
                        Some(&v) => values[t][(i, k)] = v,
                        None => missing.push(format!(
                            "time={} variable={} gridpoint={}",
                            self.times[t], self.variables[i], g
                        )),
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
        FunctionalPanel::new(values, normalize_grid(&self.grid_raw), self.times, self.variables)
    }
}

/// Parse a panel from CSV text.
pub fn read_panel<R: Read>(reader: R, format: CsvFormat, transform: Transform) -> Result<FunctionalPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut cells = Cells::new();
    match format {
        CsvFormat::Long => {
            let want = ["time", "variable", "gridpoint", "value"];
            if headers.len() != 4 || headers.iter().zip(want).any(|(h, w)| h != w) {
                return Err(Error::Parse {
                    location: "line 1".into(),
                    message: format!("expected header {}", want.join(",")),
                });
            }
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let loc = || format!("line {line}");
                let g = parse_f64(&rec[2], loc)?;
                let v = parse_f64(&rec[3], loc)?;
                cells.insert(&rec[0], &rec[1], g, v, loc())?;
            }
        }
        CsvFormat::Wide => {
            if headers.len() < 3 || &headers[0] != "time" || &headers[1] != "variable" {
                return Err(Error::Parse {
                    location: "line 1".into(),
                    message: "expected header time,variable,<gridpoints...>".into(),
                });
            }
            let grid: Vec<f64> = headers
                .iter()
                .skip(2)
                .map(|h| parse_f64(h, || "line 1".to_string()))
                .collect::<Result<_>>()?;
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let loc = || format!("line {line}");
                for (k, g) in grid.iter().enumerate() {
                    let v = parse_f64(&rec[k + 2], loc)?;
                    cells.insert(&rec[0], &rec[1], *g, v, loc())?;
                }
            }
        }
    }
    let mut panel = cells.finish()?;
    panel.apply(transform)?;
    Ok(panel)
}

pub fn load_panel(path: &Path, format: CsvFormat, transform: Transform) -> Result<FunctionalPanel> {
    let file = std::fs::File::open(path)?;
    read_panel(std::io::BufReader::new(file), format, transform)
}

/// Serialize a panel; floats use the shortest round-trip representation.
pub fn write_panel<W: Write>(panel: &FunctionalPanel, writer: W, format: CsvFormat) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    match format {
        CsvFormat::Long => {
            w.write_record(["time", "variable", "gridpoint", "value"]).map_err(io)?;
            for (t, v) in panel.values.iter().enumerate() {
                for (i, name) in panel.variables.iter().enumerate() {
                    for (k, g) in panel.grid.iter().enumerate() {
                        w.write_record([
                            panel.times[t].as_str(),
                            name.as_str(),
                            &g.to_string(),
                            &v[(i, k)].to_string(),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
        CsvFormat::Wide => {
            let mut header = vec!["time".to_string(), "variable".to_string()];
            header.extend(panel.grid.iter().map(|g| g.to_string()));
            w.write_record(&header).map_err(io)?;
            for (t, v) in panel.values.iter().enumerate() {
                for (i, name) in panel.variables.iter().enumerate() {
                    let mut row = vec![panel.times[t].clone(), name.clone()];
                    row.extend((0..panel.l()).map(|k| v[(i, k)].to_string()));
                    w.write_record(&row).map_err(io)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
