//! Candidate propensity-score models: specification, fitting, prediction.
//!
//! The composite treatment has four levels with (0,0) as the reference, so
//! the default model is a multinomial logistic regression fitted by
//! Newton-Raphson on the stacked coefficient vector. A factored
//! alternative fits two binary logistic models, one for the object drug
//! given covariates and one for the precipitant given the object and
//! covariates, and multiplies the estimated probabilities.
//!
//! Both families share one softmax fitter: a binary logistic model is the
//! two-class case. Newton steps use step-halving (halve until the
//! log-likelihood does not decrease, at most 30 halvings), start from the
//! zero vector, and declare convergence when the max-abs score drops below
//! 1e-8 within 100 iterations. A singular information matrix is retried
//! once with a 1e-6 ridge so that rare degenerate bootstrap resamples do
//! not abort a sweep.

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::formula::{build_design_matrix, FormulaTerm};
use nalgebra::{DMatrix, DVector};

const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
const RIDGE: f64 = 1e-6;

/// How the four arm probabilities are parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// One multinomial logistic model with (0,0) as reference.
    Multinomial,
    /// Two binary logistic models: object given covariates, precipitant
    /// given object and covariates.
    FactoredBinary,
}

/// A candidate propensity model: a label, formula terms, and a family.
/// An intercept is always included.
#[derive(Debug, Clone)]
pub struct PropensityModelSpec {
    pub label: String,
    pub terms: Vec<FormulaTerm>,
    pub family: ModelFamily,
}

impl PropensityModelSpec {
    pub fn multinomial(label: impl Into<String>, terms: Vec<FormulaTerm>) -> Self {
        PropensityModelSpec { label: label.into(), terms, family: ModelFamily::Multinomial }
    }

    pub fn factored(label: impl Into<String>, terms: Vec<FormulaTerm>) -> Self {
        PropensityModelSpec { label: label.into(), terms, family: ModelFamily::FactoredBinary }
    }

    pub fn intercept_only(label: impl Into<String>) -> Self {
        Self::multinomial(label, Vec::new())
    }
}

/// Fitted coefficients, by family.
#[derive(Debug, Clone)]
pub enum FittedCoefficients {
    /// One vector per non-reference arm, ordered (1,1), (0,1), (1,0).
    Multinomial { per_arm: [DVector<f64>; 3] },
    /// `object`: coefficients of the A-model over [intercept, terms...];
    /// `precipitant`: coefficients of the B-model over
    /// [intercept, terms..., A].
    Factored { object: DVector<f64>, precipitant: DVector<f64> },
}

/// A fitted candidate model with its per-arm probabilities.
#[derive(Debug, Clone)]
pub struct FittedPropensity {
    pub spec: PropensityModelSpec,
    pub coefficients: FittedCoefficients,
    /// `n x 4` probabilities, columns in [`Arm::ALL`] order; every row sums
    /// to 1 and all entries lie strictly inside (0, 1).
    pub probs: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Inverse observed information of the stacked coefficient vector
    /// (multinomial family only).
    pub coef_covariance: Option<DMatrix<f64>>,
}

/// Fit `spec` according to its family.
pub fn fit_propensity(d: &Dataset, spec: &PropensityModelSpec) -> Result<FittedPropensity> {
    match spec.family {
        ModelFamily::Multinomial => fit_multinomial_logistic(d, spec),
        ModelFamily::FactoredBinary => fit_factored_binary(d, spec),
    }
}

/// Column of fitted probabilities for one arm.
pub fn predict_arm_probabilities(f: &FittedPropensity, arm: Arm) -> Result<Vec<f64>> {
    if !f.converged {
        return Err(Error::InvalidInput(format!(
            "model `{}` did not converge; predictions unavailable",
            f.spec.label
        )));
    }
    Ok(f.probs.column(arm.index()).iter().copied().collect())
}

/// Fit the four-level multinomial logistic model with (0,0) as reference.
pub fn fit_multinomial_logistic(d: &Dataset, spec: &PropensityModelSpec) -> Result<FittedPropensity> {
    let design = build_design_matrix(d, &spec.terms)?;
    let classes: Vec<usize> = (0..d.n()).map(|i| d.arm_of(i).index()).collect();
    let fit = fit_softmax(&design, &classes, 4)?;
    let [c11, c01, c10] = <[DVector<f64>; 3]>::try_from(fit.coefficients).expect("three non-reference arms");
    Ok(FittedPropensity {
        spec: spec.clone(),
        coefficients: FittedCoefficients::Multinomial { per_arm: [c11, c01, c10] },
        probs: fit.probs,
        converged: true,
        iterations: fit.iterations,
        coef_covariance: Some(fit.covariance),
    })
}

/// Fit binary logistic models for A given X and B given (A, X) and
/// multiply the estimated probabilities; rows of the resulting `n x 4`
/// matrix sum to 1 by construction.
pub fn fit_factored_binary(d: &Dataset, spec: &PropensityModelSpec) -> Result<FittedPropensity> {
    let n = d.n();
    let design = build_design_matrix(d, &spec.terms)?;

    // A-model: class 0 = treated (A=1), reference = untreated.
    let classes_a: Vec<usize> = d.treat_a().iter().map(|&a| if a == 1 { 0 } else { 1 }).collect();
    let fit_a = fit_softmax(&design, &classes_a, 2)?;
    let object = fit_a.coefficients.into_iter().next().expect("one non-reference class");

    // B-model design appends the observed A as the last column.
    let mut design_b = DMatrix::zeros(n, design.ncols() + 1);
    design_b.view_mut((0, 0), (n, design.ncols())).copy_from(&design);
    for i in 0..n {
        design_b[(i, design.ncols())] = f64::from(d.treat_a()[i]);
    }
    let classes_b: Vec<usize> = d.treat_b().iter().map(|&b| if b == 1 { 0 } else { 1 }).collect();
    let fit_b = fit_softmax(&design_b, &classes_b, 2)?;
    let precipitant = fit_b.coefficients.into_iter().next().expect("one non-reference class");

    let mut probs = DMatrix::zeros(n, 4);
    for i in 0..n {
        let p_a1 = fit_a.probs[(i, 0)];
        // P(B=1 | A=a, X) evaluated at both counterfactual values of a.
        let eta_base: f64 = (0..design.ncols()).map(|j| design[(i, j)] * precipitant[j]).sum();
        let slope_a = precipitant[design.ncols()];
        let p_b1_given_a1 = expit(eta_base + slope_a);
        let p_b1_given_a0 = expit(eta_base);
        for arm in Arm::ALL {
            let pa = if arm.a == 1 { p_a1 } else { 1.0 - p_a1 };
            let pb1 = if arm.a == 1 { p_b1_given_a1 } else { p_b1_given_a0 };
            let pb = if arm.b == 1 { pb1 } else { 1.0 - pb1 };
            probs[(i, arm.index())] = (pa * pb).max(1e-300);
        }
    }

    Ok(FittedPropensity {
        spec: spec.clone(),
        coefficients: FittedCoefficients::Factored { object, precipitant },
        probs,
        converged: true,
        iterations: fit_a.iterations.max(fit_b.iterations),
        coef_covariance: None,
    })
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SoftmaxFit {
    /// One coefficient vector per non-reference class.
    coefficients: Vec<DVector<f64>>,
    /// `n x n_classes` fitted probabilities (reference class last).
    probs: DMatrix<f64>,
    iterations: usize,
    /// Inverse observed information of the stacked coefficients.
    covariance: DMatrix<f64>,
}

/// Class probabilities under the current coefficients; reference class is
/// `n_classes - 1` with linear predictor fixed at zero.
fn softmax_probs(design: &DMatrix<f64>, beta: &DVector<f64>, n_classes: usize) -> DMatrix<f64> {
    let n = design.nrows();
    let k = design.ncols();
    let c_free = n_classes - 1;
    // eta[i][c] for non-reference classes.
    let beta_mat = DMatrix::from_column_slice(k, c_free, beta.as_slice());
    let eta = design * beta_mat;
    let mut probs = DMatrix::zeros(n, n_classes);
    for i in 0..n {
        let mut max_eta = 0.0f64;
        for c in 0..c_free {
            max_eta = max_eta.max(eta[(i, c)]);
        }
        let mut denom = (-max_eta).exp();
        for c in 0..c_free {
            denom += (eta[(i, c)] - max_eta).exp();
        }
        for c in 0..c_free {
            probs[(i, c)] = ((eta[(i, c)] - max_eta).exp() / denom).max(1e-300);
        }
        probs[(i, c_free)] = ((-max_eta).exp() / denom).max(1e-300);
    }
    probs
}

fn log_likelihood(probs: &DMatrix<f64>, classes: &[usize]) -> f64 {
    classes.iter().enumerate().map(|(i, &c)| probs[(i, c)].ln()).sum()
}

/// Maximize the softmax log-likelihood by damped Newton-Raphson.
fn fit_softmax(design: &DMatrix<f64>, classes: &[usize], n_classes: usize) -> Result<SoftmaxFit> {
    let n = design.nrows();
    let k = design.ncols();
    let c_free = n_classes - 1;
    let dim = c_free * k;
    debug_assert_eq!(classes.len(), n);

    let mut beta = DVector::zeros(dim);
    let mut probs = softmax_probs(design, &beta, n_classes);
    let mut loglik = log_likelihood(&probs, classes);
    let mut scaled = DMatrix::zeros(n, k);

    for iter in 1..=MAX_ITER {
        // Complete separation: every row classified with near-certainty
        // means the likelihood is unbounded and the MLE does not exist.
        if (0..n).all(|i| probs[(i, classes[i])] >= 1.0 - 1e-8) {
            return Err(Error::Separation(
                "fitted probabilities of all observed classes reached 1".into(),
            ));
        }

        let mut resid = DMatrix::zeros(n, c_free);
        for c in 0..c_free {
            let p_col = probs.column(c);
            let mut r_col = resid.column_mut(c);
            for i in 0..n {
                let t = if classes[i] == c { 1.0 } else { 0.0 };
                r_col[i] = t - p_col[i];
            }
        }
        let score_mat = design.tr_mul(&resid);
        let mut score = DVector::zeros(dim);
        for c in 0..c_free {
            for j in 0..k {
                score[c * k + j] = score_mat[(j, c)];
            }
        }
        if score.amax() < SCORE_TOL {
            let info = information_matrix(design, &probs, c_free, &mut scaled);
            let covariance = invert_spd(&info)?;
            let coefficients = (0..c_free)
                .map(|c| DVector::from_column_slice(&beta.as_slice()[c * k..(c + 1) * k]))
                .collect();
            return Ok(SoftmaxFit { coefficients, probs, iterations: iter - 1, covariance });
        }

        let info = information_matrix(design, &probs, c_free, &mut scaled);
        let (chol, used_ridge) = match nalgebra::Cholesky::new(info.clone()) {
            Some(c) => (c, false),
            None => {
                let ridged = info + DMatrix::identity(dim, dim) * RIDGE;
                match nalgebra::Cholesky::new(ridged) {
                    Some(c) => (c, true),
                    None => {
                        return Err(Error::Separation(
                            "information matrix singular even with ridge penalty".into(),
                        ))
                    }
                }
            }
        };
        let delta = chol.solve(&score);

        // Near the optimum the Newton gain falls below the floating-point
        // resolution of the log-likelihood; "does not decrease" is judged
        // with an fp-noise allowance so the full step still applies and
        // the score can reach its tolerance.
        let slack = 1e-12 * (1.0 + loglik.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &delta * step;
            let cand_probs = softmax_probs(design, &candidate, n_classes);
            let cand_loglik = log_likelihood(&cand_probs, classes);
            if cand_loglik >= loglik - slack {
                beta = candidate;
                probs = cand_probs;
                loglik = cand_loglik;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if used_ridge {
                return Err(Error::Separation(
                    "no ascent step found from a singular information matrix".into(),
                ));
            }
            return Err(Error::NonConvergence { iterations: iter });
        }
    }
    Err(Error::NonConvergence { iterations: MAX_ITER })
}

/// Observed information of the stacked coefficients: blocks
/// `X' diag(p_c (delta_cd - p_d)) X`.
#[allow(clippy::needless_range_loop)]
fn information_matrix(
    design: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    c_free: usize,
    scaled: &mut DMatrix<f64>,
) -> DMatrix<f64> {
    let n = design.nrows();
    let k = design.ncols();
    let mut info = DMatrix::zeros(c_free * k, c_free * k);
    let design_data = design.as_slice();
    let mut w = vec![0.0f64; n];
    for c in 0..c_free {
        for d_cls in c..c_free {
            let delta = if c == d_cls { 1.0 } else { 0.0 };
            {
                let p_c = probs.column(c);
                let p_d = probs.column(d_cls);
                for i in 0..n {
                    w[i] = p_c[i] * (delta - p_d[i]);
                }
            }
            let scaled_data = scaled.as_mut_slice();
            for j in 0..k {
                let off = j * n;
                for i in 0..n {
                    scaled_data[off + i] = design_data[off + i] * w[i];
                }
            }
            let block = design.tr_mul(&*scaled);
            for a in 0..k {
                for b in 0..k {
                    info[(c * k + a, d_cls * k + b)] = block[(a, b)];
                    if d_cls != c {
                        info[(d_cls * k + b, c * k + a)] = block[(a, b)];
                    }
                }
            }
        }
    }
    info
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = m.nrows();
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(chol.inverse());
    }
    let ridged = m + DMatrix::identity(dim, dim) * RIDGE;
    nalgebra::Cholesky::new(ridged)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Separation("information matrix singular even with ridge penalty".into()))
}
