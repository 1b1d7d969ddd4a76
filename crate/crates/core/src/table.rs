//! Numeric CSV tables with a provenance comment line.
//!
//! Layout: `# config_hash=<hex> seed=<u64>`, a header row, then data rows.
//! Numbers use Rust's shortest round-trip formatting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::model::Provenance;

pub fn provenance_line(p: &Provenance) -> String {
    format!("# config_hash={} seed={}", p.config_hash, p.seed)
}

/// Writes a table of already-formatted cells.
pub fn write_rows(path: &Path, provenance: &Provenance, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", provenance_line(provenance))?;
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn write_numeric(path: &Path, provenance: &Provenance, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(|v| format!("{v}")).collect())
        .collect();
    write_rows(path, provenance, header, &cells)
}

/// Writes a matrix with columns named `{prefix}{j}`.
pub fn write_matrix(path: &Path, provenance: &Provenance, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    write_numeric(path, provenance, &header, &rows)
}

pub fn write_series(path: &Path, provenance: &Provenance, prefix: &str, series: &[DVector<f64>]) -> Result<()> {
    let header: Vec<String> = (0..series.first().map_or(0, |v| v.len()))
        .map(|j| format!("{prefix}{j}"))
        .collect();
    let rows: Vec<Vec<f64>> = series.iter().map(|v| v.iter().copied().collect()).collect();
    write_numeric(path, provenance, &header, &rows)
}

/// Raw table contents: header names plus string cells.
pub struct Table {
    pub provenance: Option<Provenance>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn parse_provenance(line: &str) -> Option<Provenance> {
    let rest = line.strip_prefix('#')?.trim();
    let mut hash = None;
    let mut seed = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("config_hash=") {
            hash = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    Some(Provenance {
        config_hash: hash?,
        seed: seed?,
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let provenance = text.lines().next().and_then(parse_provenance);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Table {
        provenance,
        header,
        rows,
    })
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let table = read_table(path)?;
    let ncols = table.header.len();
    let mut data = Vec::with_capacity(ncols * table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(invalid(format!("{}: row {} has {} cells", path.display(), i, row.len())));
        }
        for cell in row {
            data.push(
                cell.parse::<f64>()
                    .map_err(|e| invalid(format!("{}: bad number {cell:?}: {e}", path.display())))?,
            );
        }
    }
    Ok(DMatrix::from_row_slice(table.rows.len(), ncols, &data))
}

pub fn read_series(path: &Path) -> Result<Vec<DVector<f64>>> {
    let m = read_matrix(path)?;
    Ok(m.row_iter().map(|r| r.transpose()).collect())
}
