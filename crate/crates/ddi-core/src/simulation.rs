//! Monte-Carlo study harness.
//!
//! Two data-generating processes share one covariate law (two Bernoulli,
//! one standard normal, one uniform, one unit exponential) and one binary
//! outcome model whose interaction strength `xi` controls the true DDI:
//!
//! - **DGP A**: treatment sampled from a multinomial-logistic law whose
//!   intercept shift `gamma0` is calibrated to a target prevalence of the
//!   untreated arm (0,0);
//! - **DGP B**: treatment from latent thresholded scores `Z1 = Q10 + Z0`,
//!   `Z2 = Q01 - Z0` (shared standard-normal noise, `gamma0 = 0`), with
//!   the threshold `c` calibrated instead. No multinomial-logistic model
//!   is correct under this law.
//!
//! One study configuration runs many independent datasets, estimates the
//! DDI with every configured estimator (per-model IPTW, EL, mELCB),
//! bootstraps each, and aggregates signed relative bias, coverage of the
//! simulated ground truth, and empirical standard error.

use crate::data::{arm_partition, Arm, ArmPartition, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{ddi_point_estimate, resample_indices, weighted_arm_mean, LinkFunction};
use crate::formula::parse_formula;
use crate::propensity::{fit_propensity, FittedPropensity, PropensityModelSpec};
use crate::rng::{stream, Stage};
use crate::weights::{el_weights, iptw_weights, melcb_weights, WeightSet};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which treatment-assignment truth generates the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpKind {
    /// Multinomial-logistic assignment (a correctly specifiable truth).
    #[serde(rename = "A")]
    MultinomialLogistic,
    /// Latent-threshold assignment (no logistic model is correct).
    #[serde(rename = "B")]
    LatentThreshold,
}

/// The five covariate names used by the simulated datasets.
pub fn covariate_names() -> Vec<String> {
    (1..=5).map(|i| format!("X{i}")).collect()
}

fn draw_covariate_row<R: Rng>(rng: &mut R) -> [f64; 5] {
    let x1 = f64::from(u8::from(rng.random::<f64>() < 0.2));
    let x2 = f64::from(u8::from(rng.random::<f64>() < 0.4));
    let x3: f64 = StandardNormal.sample(rng);
    let x4: f64 = Uniform::new(-0.5, 0.5).unwrap().sample(rng);
    let x5: f64 = Exp::new(1.0).unwrap().sample(rng);
    [x1, x2, x3, x4, x5]
}

/// Independent covariates: X1 ~ Bernoulli(0.2), X2 ~ Bernoulli(0.4),
/// X3 ~ Normal(0,1), X4 ~ Uniform(-0.5, 0.5), X5 ~ Exp(1).
pub fn gen_covariates<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, 5);
    for i in 0..n {
        let row = draw_covariate_row(rng);
        for j in 0..5 {
            m[(i, j)] = row[j];
        }
    }
    m
}

/// Odds scales of the three treated arms relative to (0,0): exponentials
/// of the assignment linear predictors, ordered (1,1), (0,1), (1,0).
pub fn treatment_scales(x: &[f64; 5], gamma0: f64) -> [f64; 3] {
    let e4 = x[3].exp();
    let e5 = x[4].exp();
    let cross = x[0] * x[2] + x[1] * e4;
    let s11 =
        (gamma0 + 0.7 + 0.4 * x[0] + 0.2 * x[1] - 0.2 * x[2] - 0.4 * e4 - 0.4 * e5 + 0.2 * cross).exp();
    let s01 =
        (gamma0 + 0.6 + 0.2 * x[0] + 0.6 * x[1] - 0.4 * x[2] - 0.6 * e4 - 0.2 * e5 + 0.2 * cross).exp();
    let s10 =
        (gamma0 + 0.5 + 0.6 * x[0] + 0.4 * x[1] - 0.2 * x[2] - 0.2 * e4 - 0.2 * e5 + 0.4 * cross).exp();
    [s11, s01, s10]
}

/// Arm probabilities of DGP A in [`Arm::ALL`] order.
pub fn treatment_probabilities(x: &[f64; 5], gamma0: f64) -> [f64; 4] {
    let s = treatment_scales(x, gamma0);
    let denom = 1.0 + s[0] + s[1] + s[2];
    [s[0] / denom, s[1] / denom, s[2] / denom, 1.0 / denom]
}

fn covariate_row(x: &DMatrix<f64>, i: usize) -> [f64; 5] {
    [x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)], x[(i, 4)]]
}

/// Sample treatments from the multinomial-logistic truth.
pub fn gen_treatment_mnl<R: Rng>(x: &DMatrix<f64>, gamma0: f64, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
    let n = x.nrows();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let p = treatment_probabilities(&covariate_row(x, i), gamma0);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut arm = Arm::new(0, 0);
        for candidate in Arm::ALL {
            acc += p[candidate.index()];
            if u < acc {
                arm = candidate;
                break;
            }
        }
        a.push(arm.a);
        b.push(arm.b);
    }
    (a, b)
}

/// Sample treatments from the latent-threshold truth: `Z1 = Q10 + Z0`,
/// `Z2 = Q01 - Z0` with `Z0 ~ Normal(0,1)` and `gamma0 = 0`; the object is
/// taken when `Z1 >= c` and the precipitant when `Z2 >= c`.
pub fn gen_treatment_latent<R: Rng>(x: &DMatrix<f64>, c: f64, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
    let n = x.nrows();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let s = treatment_scales(&covariate_row(x, i), 0.0);
        let z0: f64 = StandardNormal.sample(rng);
        let z1 = s[2] + z0; // Q10 + Z0
        let z2 = s[1] - z0; // Q01 - Z0
        a.push(u8::from(z1 >= c));
        b.push(u8::from(z2 >= c));
    }
    (a, b)
}

fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Success probability of the binary outcome given covariates and
/// treatments.
pub fn outcome_success_prob(x: &[f64; 5], a: u8, b: u8, xi: f64) -> f64 {
    let af = f64::from(a);
    let bf = f64::from(b);
    let e4 = x[3].exp();
    let e5 = x[4].exp();
    let s = x[0] + x[1] - x[2] + e4 - e5 + x[0] * x[2] + x[1] * e4;
    let lp = 0.5 - 0.1 * af - 0.2 * bf - xi * af * bf
        + 0.4 * s * (0.5 + xi * (0.2 * af + 0.1 * bf + af * bf));
    expit(lp)
}

/// Sample the binary outcome.
pub fn gen_outcome<R: Rng>(
    x: &DMatrix<f64>,
    a: &[u8],
    b: &[u8],
    xi: f64,
    rng: &mut R,
) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            let p = outcome_success_prob(&covariate_row(x, i), a[i], b[i], xi);
            f64::from(rng.random::<f64>() < p)
        })
        .collect()
}

/// One simulated dataset under the given DGP and calibrated parameter.
pub fn simulate_dataset(
    n: usize,
    dgp: DgpKind,
    parameter: f64,
    xi: f64,
    rng: &mut impl Rng,
) -> Dataset {
    let x = gen_covariates(n, rng);
    let (a, b) = match dgp {
        DgpKind::MultinomialLogistic => gen_treatment_mnl(&x, parameter, rng),
        DgpKind::LatentThreshold => gen_treatment_latent(&x, parameter, rng),
    };
    let y = gen_outcome(&x, &a, &b, xi, rng);
    Dataset::new(y, a, b, x, covariate_names()).expect("simulated dataset is well-formed")
}

/// Calibrated assignment parameter for a target prevalence of arm (0,0).
#[derive(Debug, Clone, Serialize)]
pub struct DgpCalibration {
    pub dgp: DgpKind,
    /// `gamma0` for DGP A, threshold `c` for DGP B.
    pub parameter: f64,
    pub achieved_prevalence: f64,
    pub mc_size: usize,
}

const CALIBRATION_TOL: f64 = 2.5e-4;

/// Calibrate `gamma0` (DGP A) or `c` (DGP B) by bisection against
/// Monte-Carlo prevalence estimates over `mc_size` covariate draws.
///
/// The same draws are reused at every bisection step, so the estimated
/// prevalence is exactly monotone in the parameter and the search is
/// deterministic given the seed.
pub fn calibrate_prevalence(
    dgp: DgpKind,
    target: f64,
    mc_size: usize,
    seed: u64,
) -> Result<DgpCalibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!("target prevalence {target} outside (0,1)")));
    }
    if mc_size < 100_000 {
        return Err(Error::InvalidInput("calibration needs mc_size >= 1e5".into()));
    }

    // Per-draw sufficient statistics: for DGP A the total odds scale
    // (prevalence(gamma0) = mean 1/(1 + e^gamma0 * t)); for DGP B the
    // smallest threshold putting the draw in arm (0,0)
    // (prevalence(c) = mean 1{u < c}).
    let chunk = 1 << 16;
    let n_chunks = mc_size.div_ceil(chunk);
    let stats: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = stream(seed, Stage::Calibration, &[dgp_tag(dgp), ci as u64]);
            let rows = chunk.min(mc_size - ci * chunk);
            let mut out = Vec::with_capacity(rows);
            for _ in 0..rows {
                let x = draw_covariate_row(&mut rng);
                match dgp {
                    DgpKind::MultinomialLogistic => {
                        let s = treatment_scales(&x, 0.0);
                        out.push(s[0] + s[1] + s[2]);
                    }
                    DgpKind::LatentThreshold => {
                        let s = treatment_scales(&x, 0.0);
                        let z0: f64 = StandardNormal.sample(&mut rng);
                        out.push((s[2] + z0).max(s[1] - z0));
                    }
                }
            }
            out
        })
        .collect();
    let stats: Vec<f64> = stats.into_iter().flatten().collect();
    let m = stats.len() as f64;

    let prevalence = |param: f64| -> f64 {
        match dgp {
            DgpKind::MultinomialLogistic => {
                let e = param.exp();
                stats.iter().map(|&t| 1.0 / (1.0 + e * t)).sum::<f64>() / m
            }
            DgpKind::LatentThreshold => {
                stats.iter().filter(|&&u| u < param).count() as f64 / m
            }
        }
    };

    // Prevalence is decreasing in gamma0 and increasing in c.
    let (mut lo, mut hi, increasing) = match dgp {
        DgpKind::MultinomialLogistic => (-20.0, 20.0, false),
        DgpKind::LatentThreshold => (-10.0, 60.0, true),
    };
    let (p_lo, p_hi) = (prevalence(lo), prevalence(hi));
    let straddles = if increasing {
        p_lo <= target && target <= p_hi
    } else {
        p_hi <= target && target <= p_lo
    };
    if !straddles {
        return Err(Error::Bracket { lo, hi, target });
    }

    let mut mid = 0.5 * (lo + hi);
    let mut achieved = prevalence(mid);
    for _ in 0..200 {
        if (achieved - target).abs() <= CALIBRATION_TOL || (hi - lo) < 1e-12 {
            break;
        }
        let go_up = (achieved < target) == increasing;
        if go_up {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
        achieved = prevalence(mid);
    }
    if (achieved - target).abs() >= 0.002 {
        return Err(Error::Calibration(format!(
            "achieved {achieved:.4} vs target {target:.4} after bisection"
        )));
    }
    Ok(DgpCalibration { dgp, parameter: mid, achieved_prevalence: achieved, mc_size })
}

fn dgp_tag(dgp: DgpKind) -> u64 {
    match dgp {
        DgpKind::MultinomialLogistic => 1,
        DgpKind::LatentThreshold => 2,
    }
}

/// Simulated ground truth: the additive-scale DDI implied by the outcome
/// model at interaction strength `xi`, averaged over `mc_size` covariate
/// draws. Potential-outcome means need no treatment draw, so this is
/// independent of the assignment DGP and its calibration.
pub fn oracle_true_ddi(xi: f64, mc_size: usize, seed: u64) -> f64 {
    let chunk = 1 << 16;
    let n_chunks = mc_size.div_ceil(chunk);
    let sums: Vec<[f64; 4]> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = stream(seed, Stage::Oracle, &[ci as u64]);
            let rows = chunk.min(mc_size - ci * chunk);
            let mut acc = [0.0f64; 4];
            for _ in 0..rows {
                let x = draw_covariate_row(&mut rng);
                for arm in Arm::ALL {
                    acc[arm.index()] += outcome_success_prob(&x, arm.a, arm.b, xi);
                }
            }
            acc
        })
        .collect();
    let mut means = [0.0f64; 4];
    for s in sums {
        for k in 0..4 {
            means[k] += s[k];
        }
    }
    for mean in &mut means {
        *mean /= mc_size as f64;
    }
    (means[0] - means[1]) - (means[2] - means[3])
}

/// The four-model candidate set used by the studies: three misspecified
/// candidates and one matching the generator's functional form.
pub fn default_model_set() -> Vec<PropensityModelSpec> {
    let names = covariate_names();
    let formulas = [
        ("PS-1", "X1 + X2"),
        ("PS-2", "X1 + X2 + X3 + X4 + X5"),
        ("PS-3", "X1 + X3 + X4"),
        ("PS-4", "X1 + X2 + X3 + exp(X4) + exp(X5) + X1:X3 + X2:exp(X4)"),
    ];
    formulas
        .iter()
        .map(|(label, f)| {
            PropensityModelSpec::multinomial(*label, parse_formula(f, &names).expect("fixed formula"))
        })
        .collect()
}

/// A candidate set in which every model is misspecified and none involves
/// X2 or X3.
pub fn all_wrong_model_set() -> Vec<PropensityModelSpec> {
    let names = covariate_names();
    let formulas = [
        ("MS-1", "X1"),
        ("MS-2", "X4 + X5"),
        ("MS-3", "X1 + X4"),
        ("MS-4", "X1 + exp(X4) + exp(X5)"),
    ];
    formulas
        .iter()
        .map(|(label, f)| {
            PropensityModelSpec::multinomial(*label, parse_formula(f, &names).expect("fixed formula"))
        })
        .collect()
}

/// One study configuration: a single (n, xi, prevalence) cell.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n: usize,
    pub xi: f64,
    pub target_prevalence_00: f64,
    pub dgp: DgpKind,
    pub runs: usize,
    pub bootstrap_r: usize,
    pub model_set: Vec<PropensityModelSpec>,
    /// Covariates balanced by the mELCB estimator; empty disables mELCB.
    pub balance_covariates: Vec<String>,
    pub seed: u64,
    /// Draws for the ground-truth oracle.
    pub oracle_mc: usize,
    /// Draws for prevalence calibration.
    pub calibration_mc: usize,
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidInput("simulation needs n >= 4".into()));
        }
        if self.runs == 0 {
            return Err(Error::InvalidInput("simulation needs runs >= 1".into()));
        }
        if !(self.target_prevalence_00 > 0.0 && self.target_prevalence_00 < 1.0) {
            return Err(Error::InvalidInput("target prevalence outside (0,1)".into()));
        }
        if self.bootstrap_r < 2 {
            return Err(Error::InvalidInput("bootstrap needs R >= 2".into()));
        }
        if self.model_set.is_empty() {
            return Err(Error::InvalidInput("at least one candidate model is required".into()));
        }
        Ok(())
    }
}

/// Aggregated performance of one estimator across runs.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    /// Mean signed relative bias `(theta_hat - theta) / theta`.
    pub mean_relative_bias: f64,
    /// Fraction of successful runs whose 95% CI covered the truth.
    pub coverage: f64,
    /// Standard deviation of the point estimates across successful runs.
    pub empirical_se: f64,
    pub mean_theta: f64,
    pub failed_runs: usize,
    pub runs_used: usize,
}

/// Five-number summary for boxplot-style output.
#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantiles(mut values: Vec<f64>) -> Quantiles {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        let rank = p * (values.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    Quantiles { min: q(0.0), q1: q(0.25), median: q(0.5), q3: q(0.75), max: q(1.0) }
}

/// Distribution of the post-weighting overall PSB of one balanced
/// covariate across runs, with the unweighted distribution for reference.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceDistribution {
    pub covariate: String,
    pub unweighted: Quantiles,
    pub weighted: Quantiles,
}

/// Study output for one configuration cell.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub n: usize,
    pub xi: f64,
    pub target_prevalence_00: f64,
    pub runs: usize,
    pub bootstrap_r: usize,
    pub oracle_true_ddi: f64,
    pub calibration: DgpCalibration,
    pub estimators: Vec<EstimatorSummary>,
    /// Present when an mELCB estimator ran: per balanced covariate.
    pub balance: Vec<BalanceDistribution>,
}

#[derive(Clone, Copy)]
enum EstimatorKind {
    Iptw(usize),
    El,
    Melcb,
}

struct RunRecord {
    /// Per estimator: (theta_hat, se, covered, relative bias), if the run
    /// succeeded for that estimator.
    stats: Vec<Option<(f64, f64, bool, f64)>>,
    /// Per balance covariate: (unweighted, weighted) overall PSB.
    balance: Vec<Option<(f64, f64)>>,
}

fn theta_for_estimator(
    d: &Dataset,
    part: &ArmPartition,
    per_spec: &[Option<usize>],
    fits: &[FittedPropensity],
    all_ok: bool,
    kind: EstimatorKind,
    balance: &[String],
) -> Option<(f64, Option<[WeightSet; 4]>)> {
    let sets: [WeightSet; 4] = match kind {
        EstimatorKind::Iptw(j) => {
            let fit = &fits[per_spec[j]?];
            let mut sets = Vec::with_capacity(4);
            for arm in Arm::ALL {
                sets.push(iptw_weights(fit, part, arm).ok()?);
            }
            sets.try_into().unwrap()
        }
        EstimatorKind::El => {
            if !all_ok {
                return None;
            }
            let mut sets = Vec::with_capacity(4);
            for arm in Arm::ALL {
                sets.push(el_weights(fits, d, part, arm).ok()?);
            }
            sets.try_into().unwrap()
        }
        EstimatorKind::Melcb => {
            if !all_ok {
                return None;
            }
            let mut sets = Vec::with_capacity(4);
            for arm in Arm::ALL {
                sets.push(melcb_weights(fits, d, part, arm, balance).ok()?);
            }
            sets.try_into().unwrap()
        }
    };
    let mut arm_means = [0.0f64; 4];
    for (k, w) in sets.iter().enumerate() {
        arm_means[k] = weighted_arm_mean(d, w);
    }
    let theta = ddi_point_estimate(&arm_means, LinkFunction::Identity).ok()?;
    Some((theta, Some(sets)))
}

/// Fit every candidate once, then evaluate every estimator.
fn all_estimator_thetas(
    d: &Dataset,
    specs: &[PropensityModelSpec],
    kinds: &[EstimatorKind],
    balance: &[String],
    keep_melcb_sets: bool,
) -> (Vec<Option<f64>>, Option<[WeightSet; 4]>, Option<ArmPartition>) {
    let part = match arm_partition(d) {
        Ok(p) => p,
        Err(_) => return (vec![None; kinds.len()], None, None),
    };
    let mut fits: Vec<FittedPropensity> = Vec::with_capacity(specs.len());
    let mut per_spec: Vec<Option<usize>> = Vec::with_capacity(specs.len());
    for spec in specs {
        match fit_propensity(d, spec) {
            Ok(f) => {
                per_spec.push(Some(fits.len()));
                fits.push(f);
            }
            Err(_) => per_spec.push(None),
        }
    }
    let all_ok = per_spec.iter().all(Option::is_some);
    let mut thetas = Vec::with_capacity(kinds.len());
    let mut melcb_sets = None;
    for &kind in kinds {
        match theta_for_estimator(d, &part, &per_spec, &fits, all_ok, kind, balance) {
            Some((theta, sets)) => {
                if keep_melcb_sets && matches!(kind, EstimatorKind::Melcb) {
                    melcb_sets = sets;
                }
                thetas.push(Some(theta));
            }
            None => thetas.push(None),
        }
    }
    (thetas, melcb_sets, Some(part))
}

/// Run one study cell with a precomputed calibration and oracle value.
/// Runs execute in parallel; every run and bootstrap replicate derives its
/// own random stream, so the report does not depend on thread count.
pub fn run_study_with(
    cfg: &SimulationConfig,
    calibration: &DgpCalibration,
    oracle_theta: f64,
) -> Result<StudyReport> {
    cfg.validate()?;
    let mut kinds: Vec<EstimatorKind> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (j, spec) in cfg.model_set.iter().enumerate() {
        kinds.push(EstimatorKind::Iptw(j));
        names.push(format!("iptw:{}", spec.label));
    }
    kinds.push(EstimatorKind::El);
    names.push("el".into());
    if !cfg.balance_covariates.is_empty() {
        kinds.push(EstimatorKind::Melcb);
        names.push("melcb".into());
    }

    let records: Vec<RunRecord> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream(cfg.seed, Stage::SimData, &[run as u64]);
            let d = simulate_dataset(cfg.n, cfg.dgp, calibration.parameter, cfg.xi, &mut rng);
            let (full_thetas, melcb_sets, part) =
                all_estimator_thetas(&d, &cfg.model_set, &kinds, &cfg.balance_covariates, true);

            // Bootstrap: one shared resample per replicate; every
            // estimator is evaluated on the same refitted models.
            let mut replicate_thetas: Vec<Vec<Option<f64>>> =
                vec![Vec::with_capacity(cfg.bootstrap_r); kinds.len()];
            for rep in 0..cfg.bootstrap_r {
                let mut rep_rng = stream(cfg.seed, Stage::Bootstrap, &[run as u64, rep as u64]);
                let rows = resample_indices(&mut rep_rng, d.n());
                let resample = d.select_rows(&rows);
                let (thetas, _, _) = all_estimator_thetas(
                    &resample,
                    &cfg.model_set,
                    &kinds,
                    &cfg.balance_covariates,
                    false,
                );
                for (e, t) in thetas.into_iter().enumerate() {
                    replicate_thetas[e].push(t);
                }
            }

            let stats = kinds
                .iter()
                .enumerate()
                .map(|(e, _)| {
                    let theta = full_thetas[e]?;
                    let successes: Vec<f64> =
                        replicate_thetas[e].iter().filter_map(|t| *t).collect();
                    let failed = cfg.bootstrap_r - successes.len();
                    if failed * 10 > cfg.bootstrap_r || successes.len() < 2 {
                        return None;
                    }
                    let k = successes.len() as f64;
                    let mean = successes.iter().sum::<f64>() / k;
                    let var =
                        successes.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1.0);
                    let se = var.sqrt();
                    let covered = (theta - 1.96 * se) <= oracle_theta
                        && oracle_theta <= (theta + 1.96 * se);
                    let relbias = (theta - oracle_theta) / oracle_theta;
                    Some((theta, se, covered, relbias))
                })
                .collect();

            let balance = cfg
                .balance_covariates
                .iter()
                .map(|name| {
                    let part = part.as_ref()?;
                    let sets = melcb_sets.as_ref()?;
                    let unweighted = crate::diagnostics::unweighted_sets(part);
                    let pre = crate::diagnostics::psb_overall(&d, &unweighted, name).ok()?;
                    let post = crate::diagnostics::psb_overall(&d, sets, name).ok()?;
                    Some((pre, post))
                })
                .collect();

            RunRecord { stats, balance }
        })
        .collect();

    let mut estimators = Vec::with_capacity(kinds.len());
    for (e, name) in names.iter().enumerate() {
        let ok: Vec<&(f64, f64, bool, f64)> =
            records.iter().filter_map(|r| r.stats[e].as_ref()).collect();
        let failed_runs = cfg.runs - ok.len();
        if failed_runs * 10 > cfg.runs {
            return Err(Error::TooManyFailures {
                failed: failed_runs,
                total: cfg.runs,
                context: format!("runs for estimator {name}"),
            });
        }
        let k = ok.len() as f64;
        let mean_theta = ok.iter().map(|s| s.0).sum::<f64>() / k;
        let empirical_se = if ok.len() > 1 {
            (ok.iter().map(|s| (s.0 - mean_theta) * (s.0 - mean_theta)).sum::<f64>() / (k - 1.0))
                .sqrt()
        } else {
            0.0
        };
        estimators.push(EstimatorSummary {
            estimator: name.clone(),
            mean_relative_bias: ok.iter().map(|s| s.3).sum::<f64>() / k,
            coverage: ok.iter().filter(|s| s.2).count() as f64 / k,
            empirical_se,
            mean_theta,
            failed_runs,
            runs_used: ok.len(),
        });
    }

    let balance = cfg
        .balance_covariates
        .iter()
        .enumerate()
        .map(|(ci, name)| {
            let pre: Vec<f64> =
                records.iter().filter_map(|r| r.balance[ci].map(|(p, _)| p)).collect();
            let post: Vec<f64> =
                records.iter().filter_map(|r| r.balance[ci].map(|(_, q)| q)).collect();
            BalanceDistribution {
                covariate: name.clone(),
                unweighted: quantiles(pre),
                weighted: quantiles(post),
            }
        })
        .collect();

    Ok(StudyReport {
        n: cfg.n,
        xi: cfg.xi,
        target_prevalence_00: cfg.target_prevalence_00,
        runs: cfg.runs,
        bootstrap_r: cfg.bootstrap_r,
        oracle_true_ddi: oracle_theta,
        calibration: calibration.clone(),
        estimators,
        balance,
    })
}

/// Calibrate, compute the oracle truth, and run one study cell.
pub fn run_study(cfg: &SimulationConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let calibration =
        calibrate_prevalence(cfg.dgp, cfg.target_prevalence_00, cfg.calibration_mc, cfg.seed)?;
    let oracle_theta = oracle_true_ddi(cfg.xi, cfg.oracle_mc, cfg.seed);
    run_study_with(cfg, &calibration, oracle_theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariate_moments_match_their_laws() {
        let mut rng = stream(42, Stage::Synthetic, &[100]);
        let n = 1_000_000;
        let x = gen_covariates(n, &mut rng);
        let expected = [0.2, 0.4, 0.0, 0.0, 1.0];
        for j in 0..5 {
            let mean: f64 = x.column(j).iter().sum::<f64>() / n as f64;
            assert!(
                (mean - expected[j]).abs() < 0.005,
                "column {j}: mean {mean} vs {}",
                expected[j]
            );
        }
        assert!(x.column(3).iter().all(|&v| (-0.5..=0.5).contains(&v)));

        // Mutual independence: all pairwise correlations near zero.
        let sds: Vec<f64> = (0..5)
            .map(|j| {
                let mean: f64 = x.column(j).iter().sum::<f64>() / n as f64;
                (x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
            })
            .collect();
        let means: Vec<f64> = (0..5).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
        for a in 0..5 {
            for b in (a + 1)..5 {
                let cov: f64 = (0..n)
                    .map(|i| (x[(i, a)] - means[a]) * (x[(i, b)] - means[b]))
                    .sum::<f64>()
                    / n as f64;
                let corr = cov / (sds[a] * sds[b]);
                assert!(corr.abs() < 0.005, "corr({a},{b}) = {corr}");
            }
        }
    }

    #[test]
    fn assignment_probabilities_match_hand_evaluation_at_zero_row() {
        let x = [0.0; 5];
        let p = treatment_probabilities(&x, 0.0);
        // At the zero covariate row both exponential transforms equal 1.
        let s11 = (0.7f64 - 0.4 - 0.4).exp();
        let s01 = (0.6f64 - 0.6 - 0.2).exp();
        let s10 = (0.5f64 - 0.2 - 0.2).exp();
        let denom = 1.0 + s11 + s01 + s10;
        assert!((p[0] - s11 / denom).abs() < 1e-12);
        assert!((p[1] - s01 / denom).abs() < 1e-12);
        assert!((p[2] - s10 / denom).abs() < 1e-12);
        assert!((p[3] - 1.0 / denom).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_parameters_collapse_to_the_untreated_arm() {
        let mut rng = stream(1, Stage::Synthetic, &[5]);
        let x = gen_covariates(500, &mut rng);
        let (a, b) = gen_treatment_mnl(&x, -40.0, &mut rng);
        assert!(a.iter().all(|&v| v == 0) && b.iter().all(|&v| v == 0));

        let (a, b) = gen_treatment_latent(&x, 1e6, &mut rng);
        assert!(a.iter().all(|&v| v == 0) && b.iter().all(|&v| v == 0));
    }

    #[test]
    fn latent_scores_are_negatively_correlated() {
        let mut rng = stream(9, Stage::Synthetic, &[6]);
        let n = 200_000;
        let mut z1 = Vec::with_capacity(n);
        let mut z2 = Vec::with_capacity(n);
        for _ in 0..n {
            let x = draw_covariate_row(&mut rng);
            let s = treatment_scales(&x, 0.0);
            let z0: f64 = StandardNormal.sample(&mut rng);
            z1.push(s[2] + z0);
            z2.push(s[1] - z0);
        }
        let m1 = z1.iter().sum::<f64>() / n as f64;
        let m2 = z2.iter().sum::<f64>() / n as f64;
        let cov: f64 =
            z1.iter().zip(&z2).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / n as f64;
        assert!(cov < 0.0, "shared antithetic noise must induce negative covariance");
    }

    #[test]
    fn outcome_probability_matches_hand_evaluation() {
        // Zero covariates, untreated: only the intercept block remains.
        let p = outcome_success_prob(&[0.0; 5], 0, 0, 2.0);
        assert!((p - expit(0.5)).abs() < 1e-12);

        // xi = 0 removes the conditional interaction on the logit scale.
        let x = [1.0, 1.0, 0.3, -0.2, 0.7];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let lp = |a: u8, b: u8| logit(outcome_success_prob(&x, a, b, 0.0));
        let interaction = lp(1, 1) - lp(0, 1) - lp(1, 0) + lp(0, 0);
        assert!(interaction.abs() < 1e-10);
    }

    #[test]
    fn outcome_mean_matches_independent_recoding() {
        // Second, independent coding of the linear predictor.
        fn reference_prob(x: &[f64; 5], a: u8, b: u8, xi: f64) -> f64 {
            let (a, b) = (f64::from(a), f64::from(b));
            let block = x[0] + x[1] - x[2] + x[3].exp() - x[4].exp()
                + x[0] * x[2]
                + x[1] * x[3].exp();
            let lp = 0.5 - 0.1 * a - 0.2 * b - xi * a * b
                + 0.4 * block * (0.5 + xi * (0.2 * a + 0.1 * b + a * b));
            1.0 / (1.0 + (-lp).exp())
        }
        let mut rng = stream(4, Stage::Synthetic, &[8]);
        let n = 400_000;
        let x = gen_covariates(n, &mut rng);
        let (a, b) = gen_treatment_mnl(&x, 0.0, &mut rng);
        let y = gen_outcome(&x, &a, &b, 1.0, &mut rng);
        let observed = y.iter().sum::<f64>() / n as f64;
        let expected: f64 = (0..n)
            .map(|i| reference_prob(&covariate_row(&x, i), a[i], b[i], 1.0))
            .sum::<f64>()
            / n as f64;
        assert!(
            (observed - expected).abs() < 0.002,
            "observed {observed} vs analytic {expected}"
        );
    }

    #[test]
    fn calibration_is_monotone_and_hits_targets() {
        let cal = calibrate_prevalence(DgpKind::MultinomialLogistic, 0.50, 200_000, 3).unwrap();
        assert!((cal.achieved_prevalence - 0.50).abs() < 0.002);
        // Independent draw at the calibrated parameter.
        let mut rng = stream(77, Stage::Synthetic, &[9]);
        let x = gen_covariates(1_000_000, &mut rng);
        let (a, b) = gen_treatment_mnl(&x, cal.parameter, &mut rng);
        let share = a
            .iter()
            .zip(&b)
            .filter(|(&ai, &bi)| ai == 0 && bi == 0)
            .count() as f64
            / 1e6;
        assert!((share - 0.50).abs() < 0.002, "independent share {share}");

        let cal_b = calibrate_prevalence(DgpKind::LatentThreshold, 0.10, 200_000, 3).unwrap();
        assert!((cal_b.achieved_prevalence - 0.10).abs() < 0.002);
        let (a, b) = gen_treatment_latent(&x, cal_b.parameter, &mut rng);
        let share = a
            .iter()
            .zip(&b)
            .filter(|(&ai, &bi)| ai == 0 && bi == 0)
            .count() as f64
            / 1e6;
        assert!((share - 0.10).abs() < 0.003, "independent share {share}");
    }

    #[test]
    fn oracle_reproduces_known_interaction_values() {
        // MC check at moderate size; the acceptance suite re-runs at 1e7.
        let cases = [(0.5, -0.107), (1.0, -0.170), (2.0, -0.231)];
        for (xi, expected) in cases {
            let theta = oracle_true_ddi(xi, 2_000_000, 11);
            assert!(
                (theta - expected).abs() < 0.003,
                "xi={xi}: oracle {theta} vs reported {expected}"
            );
        }
    }

    #[test]
    fn study_smoke_run_is_deterministic() {
        let cfg = SimulationConfig {
            n: 300,
            xi: 1.0,
            target_prevalence_00: 0.3,
            dgp: DgpKind::MultinomialLogistic,
            runs: 2,
            bootstrap_r: 4,
            model_set: vec![
                PropensityModelSpec::multinomial(
                    "PS-1",
                    parse_formula("X1 + X2", &covariate_names()).unwrap(),
                ),
            ],
            balance_covariates: vec!["X2".into()],
            seed: 5,
            oracle_mc: 200_000,
            calibration_mc: 100_000,
        };
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a.estimators.len(), 3); // iptw:PS-1, el, melcb
        for (x, y) in a.estimators.iter().zip(&b.estimators) {
            assert_eq!(x.mean_theta.to_bits(), y.mean_theta.to_bits());
            assert_eq!(x.empirical_se.to_bits(), y.empirical_se.to_bits());
        }
        assert!(a.balance.len() == 1);
        // Exact balance transfers to the PSB of the constrained covariate.
        assert!(a.balance[0].weighted.median < 1e-6);
    }
}
