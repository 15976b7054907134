//! JSON plumbing shared by the subcommands: labeled matrices, the run
//! manifest, and the mapping from library errors to exit codes.

use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use elsem::{Error, MixedGraph};
use nalgebra::DMatrix;
use serde_json::{json, Map, Number, Value};
use sha2::{Digest, Sha256};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NO_CONVERGENCE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// A failure carrying its exit code and a machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "kind": self.kind, "message": self.message, "exit_code": self.code })
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let (code, kind) = match &e {
            Error::Graph(_) => (EXIT_USAGE, "graph"),
            Error::Data(_) | Error::Csv(_) => (EXIT_USAGE, "data"),
            Error::Config(_) => (EXIT_USAGE, "config"),
            Error::Io(_) => (EXIT_USAGE, "io"),
            Error::Dimension(_) | Error::Support(_) => (EXIT_USAGE, "input"),
            Error::InvalidTest(_) => (EXIT_USAGE, "invalid_test"),
            Error::NoConvergence(_) => (EXIT_NO_CONVERGENCE, "no_convergence"),
            _ => (EXIT_NUMERICAL, "numerical"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure {
            code: EXIT_USAGE,
            kind: "io",
            message: e.to_string(),
        }
    }
}

/// A float as a JSON number with 17 significant digits.
pub fn number17(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Value::Number(Number::from_str(&format!("{x:.16e}")).expect("formatted float is a JSON number"))
}

pub fn opt_number17(x: Option<f64>) -> Value {
    x.map_or(Value::Null, number17)
}

/// `{"rows": [...], "cols": [...], "values": [[...], ...]}` with vertex
/// labels on both axes.
pub fn labeled_matrix(names: &[String], a: &DMatrix<f64>) -> Value {
    let values: Vec<Value> = (0..a.nrows())
        .map(|i| Value::Array((0..a.ncols()).map(|j| number17(a[(i, j)])).collect()))
        .collect();
    json!({ "rows": names, "cols": names, "values": values })
}

/// Reads a labeled matrix and reorders it to the graph's vertex order.
pub fn read_labeled_matrix(v: &Value, graph: &MixedGraph, what: &str) -> Result<DMatrix<f64>, Failure> {
    let bad = |msg: &str| Failure::usage(format!("{what}: {msg}"));
    let labels = |key: &str| -> Result<Vec<String>, Failure> {
        v.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| bad(&format!("missing `{key}` array")))?
            .iter()
            .map(|s| {
                s.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| bad(&format!("`{key}` must hold strings")))
            })
            .collect()
    };
    let rows = labels("rows")?;
    let cols = labels("cols")?;
    let values = v
        .get("values")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing `values` array"))?;
    if values.len() != rows.len() {
        return Err(bad("row count differs from `rows`"));
    }
    let m = graph.num_vertices();
    let index = |name: &String| {
        graph
            .index_of(name)
            .ok_or_else(|| bad(&format!("unknown vertex `{name}`")))
    };
    let mut out = DMatrix::zeros(m, m);
    let mut seen = vec![vec![false; m]; m];
    for (row, vals) in rows.iter().zip(values) {
        let i = index(row)?;
        let vals = vals.as_array().ok_or_else(|| bad("each row must be an array"))?;
        if vals.len() != cols.len() {
            return Err(bad("column count differs from `cols`"));
        }
        for (col, x) in cols.iter().zip(vals) {
            let j = index(col)?;
            out[(i, j)] = x.as_f64().ok_or_else(|| bad("entries must be numbers"))?;
            seen[i][j] = true;
        }
    }
    if seen.iter().flatten().any(|s| !s) {
        return Err(bad("matrix does not cover every vertex pair"));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to rerun a command.
pub struct Manifest {
    pub command: &'static str,
    pub options: Map<String, Value>,
    pub seed: Option<u64>,
    pub inputs: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Manifest {
        Manifest {
            command,
            options: Map::new(),
            seed: None,
            inputs: Map::new(),
        }
    }

    pub fn option(&mut self, key: &str, value: impl Into<Value>) {
        self.options.insert(key.to_string(), value.into());
    }

    /// Reads an input file, recording its path and digest.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<String, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure {
            code: EXIT_USAGE,
            kind: "io",
            message: format!("{}: {e}", path.display()),
        })?;
        self.inputs.insert(
            role.to_string(),
            json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }),
        );
        String::from_utf8(bytes).map_err(|_| Failure::usage(format!("{}: not valid UTF-8", path.display())))
    }

    pub fn to_json(&self, wall_time: f64) -> Value {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        json!({
            "command": self.command,
            "options": self.options,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": self.inputs,
            "wall_time": wall_time,
            "timestamp": timestamp,
        })
    }
}

pub fn write_json(out: Option<&Path>, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
