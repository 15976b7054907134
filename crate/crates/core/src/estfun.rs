//! Estimating functions for the profiled and naive formulations, and the
//! recovery of `Omega` from observation weights.
//!
//! Constraint order is fixed everywhere: the `m` mean constraints first,
//! then pairs in lexicographic vertex order.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::MixedGraph;
use crate::params::{check_b_support, sigma_of, ModelParams};

/// Maximum structural-zero violation accepted by [`omega_of`].
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// `g_v(Y_i, B) = Y_vi - sum_{s in pa(v)} beta_vs Y_si`, i.e. `Y (I - B)^T`.
pub fn residuals(data: &Dataset, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.shape() != (data.m(), data.m()) {
        return Err(Error::Dimension(format!(
            "B is {:?} but data has {} columns",
            b.shape(),
            data.m()
        )));
    }
    Ok(data.y() - data.y() * b.transpose())
}

/// Profiled estimating functions, `n x (m + #nonedges)`: the observation
/// itself, then `g_u g_v` for each nonedge `{u, v}`.
pub fn estfun_profile(data: &Dataset, graph: &MixedGraph, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    data.check_graph(graph)?;
    check_b_support(graph, b)?;
    let r = residuals(data, b)?;
    Ok(profile_matrix(data.y(), &r, &graph.nonedges()))
}

pub(crate) fn profile_matrix(y: &DMatrix<f64>, r: &DMatrix<f64>, pairs: &[(usize, usize)]) -> DMatrix<f64> {
    let (n, m) = y.shape();
    let mut g = DMatrix::zeros(n, m + pairs.len());
    g.columns_mut(0, m).copy_from(y);
    for (k, &(u, v)) in pairs.iter().enumerate() {
        let col = r.column(u).component_mul(&r.column(v));
        g.set_column(m + k, &col);
    }
    g
}

/// Which version of the naive estimating function to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NaiveForm {
    /// `g_u g_v - omega_uv` for all `u <= v`.
    #[default]
    Residual,
    /// `Y_u Y_v - Sigma_uv` for all `u <= v`.
    Vech,
}

/// Naive estimating functions, `n x (m + m(m+1)/2)`.
pub fn estfun_naive(data: &Dataset, graph: &MixedGraph, params: &ModelParams, form: NaiveForm) -> Result<DMatrix<f64>> {
    data.check_graph(graph)?;
    check_b_support(graph, &params.b)?;
    let m = data.m();
    if params.omega.shape() != (m, m) {
        return Err(Error::Dimension("Omega shape".into()));
    }
    match form {
        NaiveForm::Residual => {
            let r = residuals(data, &params.b)?;
            Ok(naive_matrix(data.y(), &r, &params.omega))
        }
        NaiveForm::Vech => {
            let sigma = sigma_of(&params.b, &params.omega)?;
            Ok(naive_matrix(data.y(), data.y(), &sigma))
        }
    }
}

/// Columns `y`, then `r_u r_v - center_uv` over `u <= v`.
pub(crate) fn naive_matrix(y: &DMatrix<f64>, r: &DMatrix<f64>, center: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = y.shape();
    let mut g = DMatrix::zeros(n, m + m * (m + 1) / 2);
    g.columns_mut(0, m).copy_from(y);
    let mut k = m;
    for u in 0..m {
        for v in u..m {
            let mut col = r.column(u).component_mul(&r.column(v));
            col.add_scalar_mut(-center[(u, v)]);
            g.set_column(k, &col);
            k += 1;
        }
    }
    g
}

/// Result of profiling `Omega` out at given weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaRecovery {
    pub omega: DMatrix<f64>,
    /// Largest `|M_uv|` over structurally zero entries of
    /// `M = (I - B) Y^T diag(p) Y (I - B)^T`.
    pub max_violation: f64,
}

fn check_simplex(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::NotSimplex(format!("{} weights for {n} observations", p.len())));
    }
    if p.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::NotSimplex("weight outside [0, 1]".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::NotSimplex(format!("weights sum to {total}")));
    }
    Ok(())
}

/// `M = R^T diag(p) R` for residuals `R`, without feasibility checks.
pub fn weighted_residual_moment(data: &Dataset, b: &DMatrix<f64>, p: &[f64]) -> Result<DMatrix<f64>> {
    let r = residuals(data, b)?;
    let mut rw = r.clone();
    for (i, mut row) in rw.row_iter_mut().enumerate() {
        row *= p[i];
    }
    let mut out = r.tr_mul(&rw);
    crate::params::symmetrize(&mut out);
    Ok(out)
}

/// Recovers `Omega(B)` from EL weights: the free entries of
/// `(I - B) Y^T diag(p) Y (I - B)^T`, with every other entry set to zero.
///
/// Fails if `p` is not on the simplex or if the structurally zero entries
/// exceed `tol` in magnitude.
pub fn omega_of(data: &Dataset, graph: &MixedGraph, b: &DMatrix<f64>, p: &[f64], tol: f64) -> Result<OmegaRecovery> {
    data.check_graph(graph)?;
    check_b_support(graph, b)?;
    check_simplex(p, data.n())?;
    let full = weighted_residual_moment(data, b, p)?;
    let m = data.m();
    let mut omega = DMatrix::zeros(m, m);
    let mut max_violation = 0.0_f64;
    for u in 0..m {
        for v in 0..m {
            if u == v || graph.has_bidirected(u, v) {
                omega[(u, v)] = full[(u, v)];
            } else {
                max_violation = max_violation.max(full[(u, v)].abs());
            }
        }
    }
    if max_violation > tol {
        return Err(Error::Infeasible(max_violation));
    }
    Ok(OmegaRecovery { omega, max_violation })
}

/// Weighted column means `sum_i p_i G_i`.
pub fn weighted_means(g: &DMatrix<f64>, p: &[f64]) -> DVector<f64> {
    g.tr_mul(&DVector::from_column_slice(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dataset {
        Dataset::new(DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0))).unwrap()
    }

    fn random_b(rng: &mut ChaCha8Rng, g: &MixedGraph) -> DMatrix<f64> {
        let x: Vec<f64> = g.directed_edges().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        crate::params::b_from_free(g, &x)
    }

    #[test]
    fn residuals_trivial_cases() {
        let d = Dataset::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert_eq!(residuals(&d, &DMatrix::zeros(2, 2)).unwrap(), d.y().clone());
        let b = dmatrix![0.0, 0.0; 1.0, 0.0];
        let r = residuals(&d, &b).unwrap();
        assert_eq!(r.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert!(residuals(&d, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn residuals_match_parent_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nA -> C\nB -> C\nC -> A").unwrap();
        let d = random_data(&mut rng, 20, 3);
        let b = random_b(&mut rng, &g);
        let r = residuals(&d, &b).unwrap();
        for i in 0..d.n() {
            for v in 0..3 {
                let mut want = d.y()[(i, v)];
                for &s in g.parents(v).unwrap() {
                    want -= b[(v, s)] * d.y()[(i, s)];
                }
                assert_relative_eq!(r[(i, v)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn profile_complete_bidirected_is_just_y() {
        let g = MixedGraph::parse("nodes: A B C\nA <-> B\nA <-> C\nB <-> C").unwrap();
        let d = Dataset::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let gm = estfun_profile(&d, &g, &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(gm, d.y().clone());
    }

    #[test]
    fn profile_two_nodes_no_edges() {
        let g = MixedGraph::parse("nodes: A B").unwrap();
        let d = Dataset::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let gm = estfun_profile(&d, &g, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(gm.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 6.0]);
    }

    #[test]
    fn profile_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = MixedGraph::parse("nodes: A B C D\nA -> B\nB -> C\nA -> D\nB <-> D\nA <-> C").unwrap();
        let d = random_data(&mut rng, 15, 4);
        let b = random_b(&mut rng, &g);
        let gm = estfun_profile(&d, &g, &b).unwrap();
        let r = residuals(&d, &b).unwrap();
        assert_eq!(gm.ncols(), g.dof_counts().profile_constraints);
        for i in 0..d.n() {
            let mut k = 4;
            for u in 0..4 {
                for v in 0..4 {
                    if u < v && !g.has_bidirected(u, v) {
                        assert_relative_eq!(gm[(i, k)], r[(i, u)] * r[(i, v)], epsilon = 1e-14);
                        k += 1;
                    }
                }
            }
            assert_eq!(k, gm.ncols());
        }
    }

    #[test]
    fn naive_scalar_row() {
        let g = MixedGraph::parse("nodes: A").unwrap();
        let d = Dataset::from_rows(&[vec![2.0]]).unwrap();
        let p = ModelParams {
            b: DMatrix::zeros(1, 1),
            omega: DMatrix::identity(1, 1),
        };
        let gm = estfun_naive(&d, &g, &p, NaiveForm::Residual).unwrap();
        assert_eq!(gm.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
    }

    #[test]
    fn naive_moment_matching_at_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = MixedGraph::parse("nodes: A B C\nA <-> B\nA <-> C\nB <-> C").unwrap();
        let d = random_data(&mut rng, 30, 3).centered();
        let p = ModelParams {
            b: DMatrix::zeros(3, 3),
            omega: d.second_moment(),
        };
        let gm = estfun_naive(&d, &g, &p, NaiveForm::Residual).unwrap();
        for mean in gm.row_mean().iter() {
            assert!(mean.abs() < 1e-13);
        }
    }

    #[test]
    fn vech_form_is_linear_transform_of_residual_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\nA <-> C").unwrap();
        let d = random_data(&mut rng, 10, 3);
        let b = random_b(&mut rng, &g);
        let mut omega = DMatrix::identity(3, 3) * 2.0;
        omega[(0, 2)] = 0.4;
        omega[(2, 0)] = 0.4;
        let params = ModelParams::new(&g, b.clone(), omega).unwrap();
        let res = estfun_naive(&d, &g, &params, NaiveForm::Residual).unwrap();
        let vech = estfun_naive(&d, &g, &params, NaiveForm::Vech).unwrap();
        let a = DMatrix::identity(3, 3) - &b;
        for i in 0..d.n() {
            // Oracle: rebuild the symmetric matrix Y Y^T - Sigma from its vech
            // coordinates and map it through A (.) A^T.
            let mut s = DMatrix::zeros(3, 3);
            let mut k = 3;
            for u in 0..3 {
                for v in u..3 {
                    s[(u, v)] = vech[(i, k)];
                    s[(v, u)] = vech[(i, k)];
                    k += 1;
                }
            }
            let t = &a * s * a.transpose();
            let mut k = 3;
            for u in 0..3 {
                for v in u..3 {
                    assert_relative_eq!(res[(i, k)], t[(u, v)], epsilon = 1e-12);
                    k += 1;
                }
            }
            for v in 0..3 {
                assert_eq!(res[(i, v)], vech[(i, v)]);
            }
        }
    }

    #[test]
    fn omega_uniform_saturated_is_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = MixedGraph::parse("nodes: A B C\nA <-> B\nA <-> C\nB <-> C").unwrap();
        let d = random_data(&mut rng, 12, 3);
        let p = vec![1.0 / 12.0; 12];
        let rec = omega_of(&d, &g, &DMatrix::zeros(3, 3), &p, FEASIBILITY_TOL).unwrap();
        assert_relative_eq!(rec.omega, d.second_moment(), epsilon = 1e-14);
        assert_eq!(rec.max_violation, 0.0);
    }

    #[test]
    fn omega_feasibility_diagnostic() {
        // residual columns orthogonal under uniform weights
        let g = MixedGraph::parse("nodes: A B").unwrap();
        let d = Dataset::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let rec = omega_of(&d, &g, &DMatrix::zeros(2, 2), &[0.25; 4], FEASIBILITY_TOL).unwrap();
        assert_eq!(rec.max_violation, 0.0);
        assert_eq!(rec.omega, DMatrix::identity(2, 2));

        let bad = Dataset::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            omega_of(&bad, &g, &DMatrix::zeros(2, 2), &[0.5, 0.5], FEASIBILITY_TOL),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            omega_of(&d, &g, &DMatrix::zeros(2, 2), &[0.5; 4], FEASIBILITY_TOL),
            Err(Error::NotSimplex(_))
        ));
    }
}
