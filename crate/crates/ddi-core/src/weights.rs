//! Per-arm weighting schemes: IPTW, empirical likelihood, and empirical
//! likelihood with covariate balancing.
//!
//! The empirical-likelihood weights for an arm maximize the product of
//! per-individual probability masses subject to nonnegativity, unit sum,
//! and zero weighted mean of a constraint vector. For each candidate model
//! `j` the constraint column is the model's predicted probability of this
//! arm minus its full-sample average, evaluated at the arm's rows; the
//! balancing variant appends pooled-mean-centered covariate columns. The
//! solution has the form `w_i ∝ 1 / (1 + rho' g_i)` where `rho` minimizes
//! the convex dual `F(rho) = -(1/m) Σ log(1 + rho' g_i)` over the region
//! where every `1 + rho' g_i` stays positive.

use crate::data::{Arm, ArmPartition, Dataset};
use crate::error::{Error, Result};
use crate::propensity::FittedPropensity;
use nalgebra::{DMatrix, DVector};

/// Probabilities are clipped to this interval before inversion or
/// constraint construction so that degenerate fits cannot produce
/// infinite weights; clip events are counted and surfaced.
pub const PROB_CLIP: f64 = 1e-12;

const DUAL_RESIDUAL_TOL: f64 = 1e-8;
const DUAL_MAX_ITER: usize = 200;
const DUAL_FEAS_MARGIN: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;
const RANK_TOL: f64 = 1e-8;

/// Which scheme produced a [`WeightSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMethod {
    Iptw,
    EmpiricalLikelihood,
    BalancedEmpiricalLikelihood,
}

impl WeightMethod {
    /// Short machine-readable code used in configs and reports.
    pub fn code(self) -> &'static str {
        match self {
            WeightMethod::Iptw => "iptw",
            WeightMethod::EmpiricalLikelihood => "el",
            WeightMethod::BalancedEmpiricalLikelihood => "melcb",
        }
    }
}

/// Normalized weights for the members of one arm.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub arm: Arm,
    /// Row indices of the arm members (sorted, original row order).
    pub rows: Vec<usize>,
    /// Weights parallel to `rows`; nonnegative, summing to 1.
    pub weights: Vec<f64>,
    pub method: WeightMethod,
    /// Labels of the model(s) the weights were derived from.
    pub provenance: Vec<String>,
    /// Number of probability values that hit the clip bounds.
    pub clip_events: usize,
}

impl WeightSet {
    /// More than 5% of the arm hit the probability clip bounds.
    pub fn is_degenerate(&self) -> bool {
        self.clip_events * 20 > self.rows.len()
    }

    fn normalized(
        arm: Arm,
        rows: Vec<usize>,
        raw: Vec<f64>,
        method: WeightMethod,
        provenance: Vec<String>,
        clip_events: usize,
    ) -> WeightSet {
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();
        WeightSet { arm, rows, weights, method, provenance, clip_events }
    }
}

fn clip_probability(p: f64, clip_events: &mut usize) -> f64 {
    if p < PROB_CLIP {
        *clip_events += 1;
        PROB_CLIP
    } else if p > 1.0 - PROB_CLIP {
        *clip_events += 1;
        1.0 - PROB_CLIP
    } else {
        p
    }
}

/// Inverse-probability weights for one arm, normalized to sum to 1.
pub fn iptw_weights(f: &FittedPropensity, part: &ArmPartition, arm: Arm) -> Result<WeightSet> {
    if !f.converged {
        return Err(Error::InvalidInput(format!("model `{}` did not converge", f.spec.label)));
    }
    let rows = part.members(arm).to_vec();
    if rows.is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    let mut clip_events = 0usize;
    let raw: Vec<f64> = rows
        .iter()
        .map(|&i| 1.0 / clip_probability(f.probs[(i, arm.index())], &mut clip_events))
        .collect();
    Ok(WeightSet::normalized(
        arm,
        rows,
        raw,
        WeightMethod::Iptw,
        vec![f.spec.label.clone()],
        clip_events,
    ))
}

/// Constraint matrix for one arm: per-model centered probability columns,
/// optionally followed by pooled-mean-centered covariate columns, with
/// near-collinear columns removed.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    pub arm: Arm,
    /// `m x K` retained constraint columns at the arm's rows.
    pub rows: DMatrix<f64>,
    /// Labels of the retained columns: model labels, then covariate names.
    pub column_labels: Vec<String>,
    /// Centering constants of the retained columns: full-sample mean
    /// predicted probability for model columns, pooled covariate mean for
    /// balance columns.
    pub centers: Vec<f64>,
    /// Labels removed by the collinearity filter, in specification order.
    pub dropped_columns: Vec<String>,
    /// Arm member indices the rows correspond to.
    pub member_rows: Vec<usize>,
    /// Probability clip events encountered while building model columns.
    pub clip_events: usize,
}

/// Build the constraint matrix for `arm`.
///
/// Model column `j` holds the clipped predicted probability of `arm` under
/// fit `j` minus its average over all `n` rows, restricted to the arm's
/// members. Balance column `l` holds the covariate minus its unweighted
/// pooled mean. Columns are filtered in specification order: a column
/// whose residual against the span of previously kept columns is below
/// `1e-8` times the largest column norm is dropped and recorded.
pub fn build_constraint_matrix(
    fits: &[FittedPropensity],
    d: &Dataset,
    part: &ArmPartition,
    arm: Arm,
    balance_covariates: &[String],
) -> Result<ConstraintMatrix> {
    let members = part.members(arm).to_vec();
    if members.is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    let n = d.n();
    let m = members.len();
    let mut clip_events = 0usize;

    let mut candidate_cols: Vec<(String, f64, DVector<f64>)> = Vec::new();
    for f in fits {
        if !f.converged {
            return Err(Error::InvalidInput(format!("model `{}` did not converge", f.spec.label)));
        }
        let clipped: Vec<f64> = f
            .probs
            .column(arm.index())
            .iter()
            .map(|&p| clip_probability(p, &mut clip_events))
            .collect();
        let center: f64 = clipped.iter().sum::<f64>() / n as f64;
        let col = DVector::from_iterator(m, members.iter().map(|&i| clipped[i] - center));
        candidate_cols.push((f.spec.label.clone(), center, col));
    }
    for name in balance_covariates {
        let values = d.covariate(name)?;
        let center: f64 = values.iter().sum::<f64>() / n as f64;
        let col = DVector::from_iterator(m, members.iter().map(|&i| values[i] - center));
        candidate_cols.push((name.clone(), center, col));
    }
    if candidate_cols.is_empty() {
        return Err(Error::InvalidInput("no fits and no balance covariates given".into()));
    }

    // Collinearity filter: modified Gram-Schmidt in specification order;
    // the drop threshold is relative to the largest candidate column norm
    // (the leading pivot a pivoted QR would select).
    let leading = candidate_cols.iter().map(|(_, _, c)| c.norm()).fold(0.0f64, f64::max);
    let mut kept: Vec<(String, f64, DVector<f64>)> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dropped_columns = Vec::new();
    for (label, center, col) in candidate_cols {
        let mut residual = col.clone();
        for q in &basis {
            let proj = q.dot(&residual);
            residual.axpy(-proj, q, 1.0);
        }
        let norm = residual.norm();
        if leading == 0.0 || norm < RANK_TOL * leading {
            dropped_columns.push(label);
        } else {
            basis.push(residual / norm);
            kept.push((label, center, col));
        }
    }
    if kept.is_empty() {
        return Err(Error::AllColumnsDropped { arm });
    }

    let k = kept.len();
    let mut rows = DMatrix::zeros(m, k);
    let mut column_labels = Vec::with_capacity(k);
    let mut centers = Vec::with_capacity(k);
    for (j, (label, center, col)) in kept.into_iter().enumerate() {
        rows.set_column(j, &col);
        column_labels.push(label);
        centers.push(center);
    }
    Ok(ConstraintMatrix {
        arm,
        rows,
        column_labels,
        centers,
        dropped_columns,
        member_rows: members,
        clip_events,
    })
}

/// Solution of the convex dual minimization.
#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Multiplier vector over the retained constraint columns.
    pub rho: DVector<f64>,
    pub converged: bool,
    /// Max-abs stationarity residual `Σ g_i / (1 + rho' g_i)` at the
    /// solution.
    pub grad_norm: f64,
    pub iterations: usize,
    /// Labels removed by the collinearity filter (copied from the matrix).
    pub dropped_columns: Vec<String>,
}

/// Minimize `F(rho) = -(1/m) Σ log(1 + rho' g_i)` by damped Newton with
/// backtracking that keeps every `1 + rho' g_i` at least `1e-10`.
///
/// `rho = 0` is always feasible, so there is no infeasible-start case.
/// Convergence requires the stationarity residual `Σ g_i / (1 + rho' g_i)`
/// to drop below `1e-8` in max-abs norm within 200 iterations.
pub fn solve_dual(g: &ConstraintMatrix) -> Result<DualSolution> {
    let m = g.rows.nrows();
    let k = g.rows.ncols();
    if m == 0 || k == 0 {
        return Err(Error::InvalidInput("empty constraint matrix".into()));
    }

    let mut rho = DVector::zeros(k);
    let mut denom = vec![1.0f64; m]; // 1 + rho' g_i at the current iterate
    let mut objective = 0.0f64;

    let eval = |rho: &DVector<f64>, denom: &mut [f64]| -> Option<f64> {
        let lin = &g.rows * rho;
        let mut obj = 0.0;
        for i in 0..m {
            let v = 1.0 + lin[i];
            if v < DUAL_FEAS_MARGIN {
                return None;
            }
            denom[i] = v;
            obj -= v.ln();
        }
        Some(obj / m as f64)
    };

    let mut residual = DVector::zeros(k);
    let mut last_residual_norm = f64::INFINITY;
    for iter in 0..DUAL_MAX_ITER {
        // Stationarity residual and (scaled) gradient.
        residual.fill(0.0);
        for i in 0..m {
            let inv = 1.0 / denom[i];
            for j in 0..k {
                residual[j] += g.rows[(i, j)] * inv;
            }
        }
        last_residual_norm = residual.amax();
        // An unbounded dual (no interior solution) drives the raw
        // stationarity sum to zero at infinity while the normalized
        // weights still violate the constraints, so both residuals must
        // pass before declaring convergence.
        let weight_total: f64 = denom.iter().map(|&v| 1.0 / v).sum();
        if last_residual_norm < DUAL_RESIDUAL_TOL
            && last_residual_norm / weight_total < DUAL_RESIDUAL_TOL
        {
            return Ok(DualSolution {
                rho,
                converged: true,
                grad_norm: last_residual_norm,
                iterations: iter,
                dropped_columns: g.dropped_columns.clone(),
            });
        }

        // Hessian (1/m) Σ g g' / denom^2.
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..m {
            let scale = 1.0 / (denom[i] * denom[i] * m as f64);
            for a in 0..k {
                let ga = g.rows[(i, a)];
                for b in a..k {
                    hess[(a, b)] += ga * g.rows[(i, b)] * scale;
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }

        let grad = &residual * (-1.0 / m as f64);
        let chol = match nalgebra::Cholesky::new(hess.clone()) {
            Some(c) => c,
            None => match nalgebra::Cholesky::new(hess + DMatrix::identity(k, k) * 1e-12) {
                Some(c) => c,
                None => {
                    return Err(Error::DualNonConvergence {
                        iterations: iter,
                        residual: last_residual_norm,
                    })
                }
            },
        };
        let direction = chol.solve(&(-&grad));
        let slope = grad.dot(&direction); // negative for a descent direction

        let mut step = 1.0;
        let mut moved = false;
        let mut trial_denom = vec![0.0f64; m];
        // fp-noise allowance: the end-game Newton gain is far below the
        // resolution of the objective, which would otherwise stall the
        // Armijo test before the residual tolerance is reached.
        let slack = 1e-12 * (1.0 + objective.abs());
        for _ in 0..60 {
            let candidate = &rho + &direction * step;
            if let Some(obj) = eval(&candidate, &mut trial_denom) {
                if obj <= objective + ARMIJO * step * slope + slack {
                    rho = candidate;
                    denom.copy_from_slice(&trial_denom);
                    objective = obj;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            return Err(Error::DualNonConvergence {
                iterations: iter,
                residual: last_residual_norm,
            });
        }
    }
    Err(Error::DualNonConvergence { iterations: DUAL_MAX_ITER, residual: last_residual_norm })
}

fn weights_from_dual(g: &ConstraintMatrix, rho: &DVector<f64>) -> Vec<f64> {
    let lin = &g.rows * rho;
    lin.iter().map(|&v| 1.0 / (1.0 + v)).collect()
}

fn uniform_weights(
    part: &ArmPartition,
    arm: Arm,
    method: WeightMethod,
    provenance: Vec<String>,
    clip_events: usize,
) -> WeightSet {
    let rows = part.members(arm).to_vec();
    let m = rows.len();
    WeightSet {
        arm,
        rows,
        weights: vec![1.0 / m as f64; m],
        method,
        provenance,
        clip_events,
    }
}

fn el_like_weights(
    fits: &[FittedPropensity],
    d: &Dataset,
    part: &ArmPartition,
    arm: Arm,
    balance_covariates: &[String],
    method: WeightMethod,
) -> Result<WeightSet> {
    if part.members(arm).is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    let provenance: Vec<String> = fits.iter().map(|f| f.spec.label.clone()).collect();
    let g = match build_constraint_matrix(fits, d, part, arm, balance_covariates) {
        Ok(g) => g,
        // Every column degenerate (e.g. constant propensities): the
        // constrained optimum is the unconstrained one, flat weights.
        Err(Error::AllColumnsDropped { .. }) => {
            return Ok(uniform_weights(part, arm, method, provenance, 0))
        }
        Err(e) => return Err(e),
    };
    let dual = solve_dual(&g)?;
    let raw = weights_from_dual(&g, &dual.rho);
    Ok(WeightSet::normalized(arm, g.member_rows.clone(), raw, method, provenance, g.clip_events))
}

/// Empirical-likelihood weights constrained by the candidate model set.
pub fn el_weights(
    fits: &[FittedPropensity],
    d: &Dataset,
    part: &ArmPartition,
    arm: Arm,
) -> Result<WeightSet> {
    if fits.is_empty() {
        return Err(Error::InvalidInput("empirical likelihood needs at least one fitted model".into()));
    }
    el_like_weights(fits, d, part, arm, &[], WeightMethod::EmpiricalLikelihood)
}

/// Empirical-likelihood weights with additional exact mean-balance
/// constraints for the given covariates.
pub fn melcb_weights(
    fits: &[FittedPropensity],
    d: &Dataset,
    part: &ArmPartition,
    arm: Arm,
    balance_covariates: &[String],
) -> Result<WeightSet> {
    if balance_covariates.is_empty() {
        return Err(Error::InvalidInput("balance covariate list must be nonempty".into()));
    }
    el_like_weights(
        fits,
        d,
        part,
        arm,
        balance_covariates,
        WeightMethod::BalancedEmpiricalLikelihood,
    )
}
