//! The pair `(B, Omega)` and the covariance parametrization
//! `Sigma(B, Omega) = (I - B)^{-1} Omega (I - B)^{-T}`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::MixedGraph;

const SYMMETRY_TOL: f64 = 1e-10;

/// Coefficient matrix `B` (`B[(v, u)]` is the effect of `u` on `v`) and
/// error covariance `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub b: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

/// `I - B`, failing when it is numerically singular:
/// `|det(I - B)| < 1e-12 (1 + ||B||_F)`.
pub fn i_minus_b(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = b.nrows();
    let a = DMatrix::identity(m, m) - b;
    let det = a.determinant();
    if !det.is_finite() || det.abs() < 1e-12 * (1.0 + b.norm()) {
        return Err(Error::SingularSystem { det });
    }
    Ok(a)
}

/// Checks that `b` is `m x m` and zero off the directed edges.
pub fn check_b_support(graph: &MixedGraph, b: &DMatrix<f64>) -> Result<()> {
    let m = graph.num_vertices();
    if b.shape() != (m, m) {
        return Err(Error::Dimension(format!("B is {:?}, expected {m}x{m}", b.shape())));
    }
    for v in 0..m {
        for u in 0..m {
            if b[(v, u)] != 0.0 && !graph.has_directed(u, v) {
                return Err(Error::Support(format!(
                    "B[{}, {}] = {} without edge {} -> {}",
                    graph.names()[v],
                    graph.names()[u],
                    b[(v, u)],
                    graph.names()[u],
                    graph.names()[v]
                )));
            }
        }
    }
    Ok(())
}

pub fn check_omega_support(graph: &MixedGraph, omega: &DMatrix<f64>) -> Result<()> {
    let m = graph.num_vertices();
    if omega.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "Omega is {:?}, expected {m}x{m}",
            omega.shape()
        )));
    }
    for u in 0..m {
        for v in 0..m {
            if (omega[(u, v)] - omega[(v, u)]).abs() > SYMMETRY_TOL * (1.0 + omega[(u, v)].abs()) {
                return Err(Error::Support(format!("Omega not symmetric at ({u}, {v})")));
            }
            if u != v && omega[(u, v)] != 0.0 && !graph.has_bidirected(u, v) {
                return Err(Error::Support(format!(
                    "Omega[{}, {}] = {} without edge {} <-> {}",
                    graph.names()[u],
                    graph.names()[v],
                    omega[(u, v)],
                    graph.names()[u],
                    graph.names()[v]
                )));
            }
        }
    }
    Ok(())
}

pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|x| x.is_finite()) && a.clone().cholesky().is_some()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().min()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let m = a.nrows();
    for i in 0..m {
        for j in i + 1..m {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// Reads the free coefficients of `B` in directed-edge order.
pub fn b_to_free(graph: &MixedGraph, b: &DMatrix<f64>) -> Vec<f64> {
    graph.directed_edges().iter().map(|&(s, v)| b[(v, s)]).collect()
}

pub fn b_from_free(graph: &MixedGraph, x: &[f64]) -> DMatrix<f64> {
    let m = graph.num_vertices();
    let mut b = DMatrix::zeros(m, m);
    for (&(s, v), &val) in graph.directed_edges().iter().zip(x) {
        b[(v, s)] = val;
    }
    b
}

pub fn omega_to_free(graph: &MixedGraph, omega: &DMatrix<f64>) -> Vec<f64> {
    graph.omega_support().iter().map(|&(u, v)| omega[(u, v)]).collect()
}

pub fn omega_from_free(graph: &MixedGraph, x: &[f64]) -> DMatrix<f64> {
    let m = graph.num_vertices();
    let mut omega = DMatrix::zeros(m, m);
    for (&(u, v), &val) in graph.omega_support().iter().zip(x) {
        omega[(u, v)] = val;
        omega[(v, u)] = val;
    }
    omega
}

impl ModelParams {
    /// Validates shapes, supports, nonsingularity of `I - B` and positive
    /// definiteness of `Omega`.
    pub fn new(graph: &MixedGraph, b: DMatrix<f64>, omega: DMatrix<f64>) -> Result<Self> {
        check_b_support(graph, &b)?;
        check_omega_support(graph, &omega)?;
        i_minus_b(&b)?;
        if !is_positive_definite(&omega) {
            return Err(Error::NotPositiveDefinite("Omega".into()));
        }
        Ok(ModelParams { b, omega })
    }

    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    /// Parameter vector `theta`: free entries of `B` in directed-edge
    /// order, then free entries of `Omega` in half-vectorization order.
    pub fn to_theta(&self, graph: &MixedGraph) -> Vec<f64> {
        let mut theta = b_to_free(graph, &self.b);
        theta.extend(omega_to_free(graph, &self.omega));
        theta
    }

    /// Inverse of [`to_theta`](Self::to_theta); does not validate.
    pub fn from_theta(graph: &MixedGraph, theta: &[f64]) -> ModelParams {
        let k = graph.directed_edges().len();
        ModelParams {
            b: b_from_free(graph, &theta[..k]),
            omega: omega_from_free(graph, &theta[k..]),
        }
    }

    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        sigma_of(&self.b, &self.omega)
    }

    /// Labels for `theta` coordinates, e.g. `B[Y<-X]`, `Omega[X,Y]`.
    pub fn theta_labels(graph: &MixedGraph) -> Vec<String> {
        let n = graph.names();
        let mut labels: Vec<String> = graph
            .directed_edges()
            .iter()
            .map(|&(s, v)| format!("B[{}<-{}]", n[v], n[s]))
            .collect();
        labels.extend(
            graph
                .omega_support()
                .iter()
                .map(|&(u, v)| format!("Omega[{},{}]", n[u], n[v])),
        );
        labels
    }
}

/// `(I - B)^{-1} Omega (I - B)^{-T}`, symmetrized.
pub fn sigma_of(b: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = i_minus_b(b)?;
    let det = a.determinant();
    let inv = a.try_inverse().ok_or(Error::SingularSystem { det })?;
    let mut sigma = &inv * omega * inv.transpose();
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// Half-vectorization: entries `(u, v)` with `u <= v`, row by row.
pub fn vech(a: &DMatrix<f64>) -> Vec<f64> {
    let m = a.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for u in 0..m {
        for v in u..m {
            out.push(a[(u, v)]);
        }
    }
    out
}
