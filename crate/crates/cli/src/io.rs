//! Tables, matrix JSON and trajectory files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mlfilter::models::{Dims, Trajectory};

use crate::args::Format;

/// Columns of numbers; `NaN` cells are written empty (CSV) or `null` (JSON).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let mut table = Table::new(columns);
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let row = record
                .iter()
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        cell.parse::<f64>()
                            .with_context(|| format!("{}: row {}: bad number `{cell}`", path.display(), line + 2))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != table.columns.len() {
                bail!("{}: row {} has {} cells", path.display(), line + 2, row.len());
            }
            table.rows.push(row);
        }
        Ok(table)
    }
}

/// `prefix_1 ..= prefix_n`.
pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// `prefix_ij` for every entry, row-major.
pub fn indexed2(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (1..=rows)
        .flat_map(|i| (1..=cols).map(move |j| format!("{prefix}_{i}{j}")))
        .collect()
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|v| json!(v)).collect()))
            .collect(),
    )
}

pub fn matrix_from_json(v: &Value, name: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_value(v.clone()).with_context(|| format!("`{name}` must be a list of rows"))?;
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        bail!("`{name}` must be a non-empty rectangular list of rows");
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Single writer for one output directory; remembers what it wrote.
#[derive(Debug)]
pub struct Output {
    pub dir: PathBuf,
    pub format: Format,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn table(&mut self, stem: &str, table: &Table) -> Result<PathBuf> {
        match self.format {
            Format::Csv => {
                let path = self.dir.join(format!("{stem}.csv"));
                let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
                w.write_record(&table.columns)?;
                for row in &table.rows {
                    w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }))?;
                }
                w.flush()?;
                self.written.push(path.clone());
                Ok(path)
            }
            Format::Json => self.json(
                stem,
                &json!({
                    "columns": table.columns,
                    "rows": table.rows,
                }),
            ),
        }
    }

    pub fn json(&mut self, stem: &str, value: &Value) -> Result<PathBuf> {
        let path = self.dir.join(format!("{stem}.json"));
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.clone());
        Ok(path)
    }
}

pub fn trajectory_table(traj: &Trajectory, dims: Dims) -> Table {
    let mut columns = vec!["k".to_string()];
    columns.extend(indexed("x", dims.state));
    columns.extend(indexed("y", dims.obs));
    let mut table = Table::new(columns);
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![k as f64];
        row.extend(x.iter());
        match traj.y(k) {
            Some(y) => row.extend(y.iter()),
            None => row.extend(std::iter::repeat_n(f64::NAN, dims.obs)),
        }
        table.push(row);
    }
    table
}

/// Inverse of [`trajectory_table`]; checks the header against the model.
pub fn read_trajectory(path: &Path, dims: Dims, seed: u64) -> Result<Trajectory> {
    let table = Table::read_csv(path)?;
    let mut expected = vec!["k".to_string()];
    expected.extend(indexed("x", dims.state));
    expected.extend(indexed("y", dims.obs));
    if table.columns != expected {
        bail!(
            "{}: expected columns {}, found {}",
            path.display(),
            expected.join(","),
            table.columns.join(",")
        );
    }
    if table.rows.len() < 2 {
        bail!("{}: need rows for k = 0 and at least one step", path.display());
    }
    let p = dims.state;
    let mut states = Vec::new();
    let mut observations = Vec::new();
    let mut initial_observation = None;
    for (i, row) in table.rows.iter().enumerate() {
        if row[0] != i as f64 {
            bail!("{}: row {} has k = {}, expected {i}", path.display(), i + 2, row[0]);
        }
        states.push(DVector::from_column_slice(&row[1..1 + p]));
        let y = &row[1 + p..];
        let observed = y.iter().all(|v| !v.is_nan());
        if !observed && y.iter().any(|v| !v.is_nan()) {
            bail!("{}: row {} has a partial observation", path.display(), i + 2);
        }
        match (i, observed) {
            (0, true) => initial_observation = Some(DVector::from_column_slice(y)),
            (0, false) => {}
            (_, true) => observations.push(DVector::from_column_slice(y)),
            (_, false) => bail!("{}: row {} is missing its observation", path.display(), i + 2),
        }
    }
    Ok(Trajectory {
        states,
        observations,
        initial_observation,
        seed,
    })
}
