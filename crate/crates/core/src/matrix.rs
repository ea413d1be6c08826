//! Dense subscriber × feature matrix and its two on-disk encodings.
//!
//! CSV: header `ego_id,<feature names…>`, one row per subscriber, floats in
//! shortest round-trip form. Binary (`CFM1`): magic, little-endian `u64` row
//! and column counts, length-prefixed row ids and column names, then the
//! values column by column as little-endian `f64`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"CFM1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    row_ids: Vec<String>,
    columns: Vec<String>,
    /// Row-major.
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * columns.len() {
            return Err(Error::Invariant(format!(
                "matrix of {}x{} given {} values",
                row_ids.len(),
                columns.len(),
                values.len()
            )));
        }
        Ok(FeatureMatrix {
            row_ids,
            columns,
            values,
        })
    }

    pub fn zeros(row_ids: Vec<String>, columns: Vec<String>) -> Self {
        let values = vec![0.0; row_ids.len() * columns.len()];
        FeatureMatrix {
            row_ids,
            columns,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        let p = self.n_cols();
        (0..self.n_rows()).map(|i| self.values[i * p + col]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.column(j))
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// Sub-matrix holding the named columns in the given order.
    pub fn select_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureMatrix> {
        let index: HashMap<&str, usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.as_str(), j))
            .collect();
        let idx = names
            .iter()
            .map(|n| {
                index
                    .get(n.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownFeature(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(FeatureMatrix {
            row_ids: self.row_ids.clone(),
            columns: names.iter().map(|n| n.as_ref().to_string()).collect(),
            values,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            values,
        }
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        let p = self.n_cols();
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::NonFinite {
                row: k / p,
                column: self.columns[k % p].clone(),
            }),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(b"ego_id")?;
        for c in &self.columns {
            write!(out, ",{c}")?;
        }
        out.write_all(b"\n")?;
        for i in 0..self.n_rows() {
            out.write_all(self.row_ids[i].as_bytes())?;
            for v in self.row(i) {
                write!(out, ",{v}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<FeatureMatrix> {
        let mut lines = BufReader::new(input).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty matrix file".into()))?
            .map_err(|e| Error::Data(e.to_string()))?;
        let mut fields = header.split(',');
        if fields.next() != Some("ego_id") {
            return Err(Error::Data("matrix header must start with `ego_id`".into()));
        }
        let columns: Vec<String> = fields.map(str::to_string).collect();
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            row_ids.push(fields.next().unwrap_or_default().to_string());
            let before = values.len();
            for f in fields {
                values.push(f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("matrix line {}: bad number `{f}`", k + 2))
                })?);
            }
            if values.len() - before != columns.len() {
                return Err(Error::Data(format!(
                    "matrix line {}: expected {} values",
                    k + 2,
                    columns.len()
                )));
            }
        }
        FeatureMatrix::new(row_ids, columns, values)
    }

    pub fn write_binary<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(MATRIX_MAGIC)?;
        out.write_all(&(self.n_rows() as u64).to_le_bytes())?;
        out.write_all(&(self.n_cols() as u64).to_le_bytes())?;
        for s in self.row_ids.iter().chain(&self.columns) {
            out.write_all(&(s.len() as u32).to_le_bytes())?;
            out.write_all(s.as_bytes())?;
        }
        let p = self.n_cols();
        for j in 0..p {
            for i in 0..self.n_rows() {
                out.write_all(&self.values[i * p + j].to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_binary<R: Read>(input: R) -> Result<FeatureMatrix> {
        let mut r = BufReader::new(input);
        let bad = |what: &str| Error::Data(format!("binary matrix: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MATRIX_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<R>| -> Result<u64> {
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated header"))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = read_u64(&mut r)? as usize;
        let p = read_u64(&mut r)? as usize;
        let read_str = |r: &mut BufReader<R>| -> Result<String> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|_| bad("truncated name table"))?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut buf).map_err(|_| bad("truncated name table"))?;
            String::from_utf8(buf).map_err(|_| bad("name is not utf-8"))
        };
        let row_ids = (0..n).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let columns = (0..p).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut values = vec![0.0; n * p];
        let mut buf = [0u8; 8];
        for j in 0..p {
            for i in 0..n {
                r.read_exact(&mut buf).map_err(|_| bad("truncated values"))?;
                values[i * p + j] = f64::from_le_bytes(buf);
            }
        }
        FeatureMatrix::new(row_ids, columns, values)
    }

    /// Load either encoding, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<FeatureMatrix> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MATRIX_MAGIC) {
            Self::read_binary(bytes.as_slice())
        } else {
            Self::read_csv(bytes.as_slice())
        }
    }
}
