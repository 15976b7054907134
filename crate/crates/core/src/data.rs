use std::io::Read;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::MixedGraph;

/// An `n x m` sample, one row per observation, columns in graph vertex
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    centered: bool,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::Data("dataset has no observations".into()));
        }
        if y.ncols() == 0 {
            return Err(Error::Data("dataset has no columns".into()));
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite entry".into()));
        }
        Ok(Dataset { y, centered: false })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Data("ragged rows".into()));
        }
        Dataset::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    /// Reads a CSV with a header row. Columns are matched to graph vertices
    /// by name; extra columns are ignored.
    pub fn from_csv<R: Read>(reader: R, graph: &MixedGraph) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut columns = Vec::with_capacity(graph.num_vertices());
        for name in graph.names() {
            let idx = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("no column named `{name}`")))?;
            columns.push(idx);
        }
        let mut values = Vec::new();
        let mut n = 0;
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (v, &c) in columns.iter().enumerate() {
                let field = record
                    .get(c)
                    .ok_or_else(|| Error::Data(format!("row {}: missing field for `{}`", row + 1, graph.names()[v])))?;
                let x: f64 = field
                    .parse()
                    .map_err(|_| Error::Data(format!("row {}: cannot parse `{field}` as a number", row + 1)))?;
                values.push(x);
            }
            n += 1;
        }
        let m = columns.len();
        Dataset::new(DMatrix::from_row_iterator(n, m, values))
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = names.join(",");
        out.push('\n');
        for row in self.y.row_iter() {
            let fields: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Subtracts the column means.
    pub fn centered(&self) -> Dataset {
        let mut y = self.y.clone();
        for mut col in y.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        Dataset { y, centered: true }
    }

    /// `Y^T Y / n`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        self.y.tr_mul(&self.y) / self.n() as f64
    }

    pub fn check_graph(&self, graph: &MixedGraph) -> Result<()> {
        if self.m() != graph.num_vertices() {
            return Err(Error::Dimension(format!(
                "data has {} columns, graph has {} vertices",
                self.m(),
                graph.num_vertices()
            )));
        }
        Ok(())
    }

    /// Reorders columns so that new column `k` is old column `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        let y = DMatrix::from_fn(self.n(), perm.len(), |i, k| self.y[(i, perm[k])]);
        Dataset {
            y,
            centered: self.centered,
        }
    }
}
