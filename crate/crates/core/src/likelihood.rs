//! Profile, naive and pinned log empirical likelihoods as functions of the
//! model parameters, with their analytic gradients.
//!
//! Every variant shares one constraint layout: the `m` mean constraints,
//! then `g_u g_v - c_uv` for a list of vertex pairs `(u, v)` with fixed
//! centers `c_uv`. The profile uses the nonedges with zero centers, the
//! naive formulation all pairs `u <= v` with centers `omega_uv`.
//!
//! By the envelope theorem the gradient is
//! `-N lambda^T sum_i p_i dG_i` over the `N` rows of the solved problem;
//! under AEL the pseudo-observation is folded into effective weights
//! `p_i - (a_n / n) p_{n+1}`.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::el::{ael_augment, solve_dual, DualOptions, DualSolution};
use crate::error::{Error, Result};
use crate::estfun::residuals;
use crate::graph::MixedGraph;
use crate::params::{b_from_free, b_to_free, check_b_support, omega_to_free, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Adjustment {
    #[default]
    None,
    /// Adjusted EL with pseudo-observation level `a_n`.
    Ael { level: f64 },
}

/// One solved inner problem together with what it was solved at.
#[derive(Debug, Clone)]
pub struct ElEvaluation {
    pub b: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub centers: Vec<f64>,
    pub adjustment: Adjustment,
    pub dual: DualSolution,
    residuals: DMatrix<f64>,
}

impl ElEvaluation {
    /// `sum log p_i`, or `-inf` when the EL is undefined.
    pub fn log_el(&self) -> f64 {
        self.dual.log_el
    }

    pub fn is_defined(&self) -> bool {
        self.dual.converged()
    }

    /// Weights of the `n` observations (pseudo-observation dropped).
    pub fn observation_weights(&self) -> &[f64] {
        &self.dual.weights[..self.residuals.nrows()]
    }

    /// `(w, N)`: effective observation weights and the row count.
    fn effective_weights(&self) -> (Vec<f64>, f64) {
        let n = self.residuals.nrows();
        let p = &self.dual.weights;
        match self.adjustment {
            Adjustment::None => (p.clone(), n as f64),
            Adjustment::Ael { level } => {
                let shift = level / n as f64 * p[n];
                (p[..n].iter().map(|pi| pi - shift).collect(), (n + 1) as f64)
            }
        }
    }

    /// Full `m x m` gradient with respect to every entry of `B` (entry
    /// `(v, s)` is the derivative in `beta_vs`) and the gradient with
    /// respect to each center.
    fn raw_gradient(&self, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
        if !self.is_defined() {
            return Err(Error::Undefined("inner problem did not converge".into()));
        }
        let m = y.ncols();
        let (w, rows) = self.effective_weights();
        let lambda = &self.dual.lambda;
        let mut quad = DMatrix::zeros(m, m);
        for (k, &(u, v)) in self.pairs.iter().enumerate() {
            let l = lambda[m + k];
            if u == v {
                quad[(u, u)] += 2.0 * l;
            } else {
                quad[(u, v)] += l;
                quad[(v, u)] += l;
            }
        }
        let mut z = &self.residuals * quad;
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row *= w[i];
        }
        // (s, v) entry is sum_i w_i Y_si (R Q)_iv
        let ysz = y.tr_mul(&z) * rows;
        let grad_b = ysz.transpose();
        let wsum: f64 = w.iter().sum();
        let grad_c = (0..self.pairs.len()).map(|k| rows * lambda[m + k] * wsum).collect();
        Ok((grad_b, grad_c))
    }

    fn check_fresh(&self, b: &DMatrix<f64>, centers: Option<&[f64]>) -> Result<()> {
        if &self.b != b || centers.is_some_and(|c| c != self.centers.as_slice()) {
            return Err(Error::StaleDual);
        }
        Ok(())
    }
}

fn constraint_matrix(y: &DMatrix<f64>, r: &DMatrix<f64>, pairs: &[(usize, usize)], centers: &[f64]) -> DMatrix<f64> {
    let (n, m) = y.shape();
    let mut g = DMatrix::zeros(n, m + pairs.len());
    g.columns_mut(0, m).copy_from(y);
    for (k, (&(u, v), &c)) in pairs.iter().zip(centers).enumerate() {
        let mut col = r.column(u).component_mul(&r.column(v));
        if c != 0.0 {
            col.add_scalar_mut(-c);
        }
        g.set_column(m + k, &col);
    }
    g
}

/// Solves the inner problem for an arbitrary pair/center layout.
pub fn evaluate(
    data: &Dataset,
    b: &DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
    centers: Vec<f64>,
    adjustment: Adjustment,
    opts: &DualOptions,
    warm: Option<&DVector<f64>>,
) -> Result<ElEvaluation> {
    if pairs.len() != centers.len() {
        return Err(Error::Dimension("pairs and centers differ in length".into()));
    }
    let r = residuals(data, b)?;
    let g = constraint_matrix(data.y(), &r, &pairs, &centers);
    let dual = match adjustment {
        Adjustment::None => solve_dual(&g, opts, warm),
        Adjustment::Ael { level } => solve_dual(&ael_augment(&g, level), opts, warm),
    };
    Ok(ElEvaluation {
        b: b.clone(),
        pairs,
        centers,
        adjustment,
        dual,
        residuals: r,
    })
}

/// Profile log-EL `l(B)`: constraints on the means and on every
/// structurally zero entry of `Omega`.
pub fn log_el_profile(
    data: &Dataset,
    graph: &MixedGraph,
    b: &DMatrix<f64>,
    adjustment: Adjustment,
    opts: &DualOptions,
    warm: Option<&DVector<f64>>,
) -> Result<ElEvaluation> {
    data.check_graph(graph)?;
    check_b_support(graph, b)?;
    let pairs = graph.nonedges();
    let centers = vec![0.0; pairs.len()];
    evaluate(data, b, pairs, centers, adjustment, opts, warm)
}

/// Profile gradient for whichever adjustment `eval` was solved with.
pub fn profile_grad_any(data: &Dataset, graph: &MixedGraph, b: &DMatrix<f64>, eval: &ElEvaluation) -> Result<Vec<f64>> {
    eval.check_fresh(b, None)?;
    let (grad_b, _) = eval.raw_gradient(data.y())?;
    Ok(b_to_free(graph, &grad_b))
}

/// Gradient of the profile log-EL over the free entries of `B`, in
/// directed-edge order.
pub fn grad_log_el(data: &Dataset, graph: &MixedGraph, b: &DMatrix<f64>, eval: &ElEvaluation) -> Result<Vec<f64>> {
    if eval.adjustment != Adjustment::None {
        return Err(Error::Undefined("evaluation is adjusted; use grad_log_ael".into()));
    }
    profile_grad_any(data, graph, b, eval)
}

/// Gradient of the adjusted profile log-EL.
pub fn grad_log_ael(data: &Dataset, graph: &MixedGraph, b: &DMatrix<f64>, eval: &ElEvaluation) -> Result<Vec<f64>> {
    if !matches!(eval.adjustment, Adjustment::Ael { .. }) {
        return Err(Error::Undefined("evaluation is not adjusted; use grad_log_el".into()));
    }
    profile_grad_any(data, graph, b, eval)
}

/// All pairs `u <= v` in half-vectorization order.
pub fn vech_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|u| (u..m).map(move |v| (u, v))).collect()
}

/// Naive log-EL `l(B, Omega)` with residual-product estimating equations
/// `g_u g_v - omega_uv` for all `u <= v`.
pub fn log_el_naive(
    data: &Dataset,
    graph: &MixedGraph,
    params: &ModelParams,
    adjustment: Adjustment,
    opts: &DualOptions,
    warm: Option<&DVector<f64>>,
) -> Result<ElEvaluation> {
    data.check_graph(graph)?;
    check_b_support(graph, &params.b)?;
    let pairs = vech_pairs(data.m());
    let centers = pairs.iter().map(|&(u, v)| params.omega[(u, v)]).collect();
    evaluate(data, &params.b, pairs, centers, adjustment, opts, warm)
}

/// Gradient of the naive log-EL over `theta` (free `B`, then free `Omega`).
pub fn grad_log_el_naive(
    data: &Dataset,
    graph: &MixedGraph,
    params: &ModelParams,
    eval: &ElEvaluation,
) -> Result<Vec<f64>> {
    let centers: Vec<f64> = eval.pairs.iter().map(|&(u, v)| params.omega[(u, v)]).collect();
    eval.check_fresh(&params.b, Some(&centers))?;
    let (grad_b, grad_c) = eval.raw_gradient(data.y())?;
    let mut out = b_to_free(graph, &grad_b);
    for (u, v) in graph.omega_support() {
        let k = eval
            .pairs
            .iter()
            .position(|&p| p == (u, v))
            .ok_or_else(|| Error::Dimension("naive evaluation lacks an Omega entry".into()))?;
        out.push(grad_c[k]);
    }
    Ok(out)
}

/// Log-EL at a fully specified `theta0 = (B0, Omega0)`: the profile
/// constraints at `B0`, plus `g_u g_v - omega0_uv` for every free entry
/// of `Omega0`.
pub fn log_el_pinned(
    data: &Dataset,
    graph: &MixedGraph,
    params: &ModelParams,
    adjustment: Adjustment,
    opts: &DualOptions,
    warm: Option<&DVector<f64>>,
) -> Result<ElEvaluation> {
    data.check_graph(graph)?;
    check_b_support(graph, &params.b)?;
    let mut pairs = graph.nonedges();
    let mut centers = vec![0.0; pairs.len()];
    for (u, v) in graph.omega_support() {
        pairs.push((u, v));
        centers.push(params.omega[(u, v)]);
    }
    evaluate(data, &params.b, pairs, centers, adjustment, opts, warm)
}

/// Log-EL of a parameter vector `theta` under the pinned layout; `None`
/// when undefined or `I - B` is singular.
pub fn log_el_theta(
    data: &Dataset,
    graph: &MixedGraph,
    theta: &[f64],
    adjustment: Adjustment,
    opts: &DualOptions,
) -> Option<f64> {
    let params = ModelParams::from_theta(graph, theta);
    crate::params::i_minus_b(&params.b).ok()?;
    let eval = log_el_pinned(data, graph, &params, adjustment, opts, None).ok()?;
    eval.is_defined().then(|| eval.log_el())
}

/// Convenience: `theta` for `(B, Omega)`.
pub fn theta_of(graph: &MixedGraph, b: &DMatrix<f64>, omega: &DMatrix<f64>) -> Vec<f64> {
    let mut t = b_to_free(graph, b);
    t.extend(omega_to_free(graph, omega));
    t
}

/// `B` from its free entries (re-exported for optimizers).
pub fn b_of(graph: &MixedGraph, x: &[f64]) -> DMatrix<f64> {
    b_from_free(graph, x)
}
