//! Covariate-balance diagnostics.
//!
//! Population standardized bias (PSB) of a covariate in one arm is the
//! absolute difference between the weighted arm mean and the unweighted
//! pooled mean, divided by the unweighted pooled standard deviation
//! (sample, n-1 denominator). The overall PSB is the maximum across the
//! four arms; values above 0.2 are conventionally flagged as problematic.
//! Pairwise standardized mean differences compare weighted means of two
//! arms against the square root of the average of the two arms'
//! unweighted variances, with 0.1 as the usual cutoff.

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::weights::WeightSet;
use serde::Serialize;

/// The six unordered arm pairs, in reporting order.
pub const ARM_PAIRS: [(Arm, Arm); 6] = [
    (Arm { a: 1, b: 1 }, Arm { a: 1, b: 0 }),
    (Arm { a: 1, b: 1 }, Arm { a: 0, b: 1 }),
    (Arm { a: 1, b: 1 }, Arm { a: 0, b: 0 }),
    (Arm { a: 1, b: 0 }, Arm { a: 0, b: 1 }),
    (Arm { a: 1, b: 0 }, Arm { a: 0, b: 0 }),
    (Arm { a: 0, b: 1 }, Arm { a: 0, b: 0 }),
];

fn pooled_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn weighted_mean(values: &[f64], w: &WeightSet) -> f64 {
    w.rows.iter().zip(&w.weights).map(|(&i, &wi)| wi * values[i]).sum()
}

/// PSB of covariate `k` in the arm covered by `w`.
pub fn psb_arm_covariate(d: &Dataset, w: &WeightSet, k: &str) -> Result<f64> {
    let values = d.covariate(k)?;
    let (pooled_mean, pooled_sd) = pooled_moments(&values);
    if !(pooled_sd > 0.0) || !pooled_sd.is_finite() {
        return Err(Error::ConstantCovariate(k.to_string()));
    }
    Ok((weighted_mean(&values, w) - pooled_mean).abs() / pooled_sd)
}

/// Maximum PSB of covariate `k` across the four arms.
pub fn psb_overall(d: &Dataset, weight_sets: &[WeightSet; 4], k: &str) -> Result<f64> {
    let mut max = 0.0f64;
    for w in weight_sets {
        max = max.max(psb_arm_covariate(d, w, k)?);
    }
    Ok(max)
}

/// One labeled pairwise standardized mean difference.
#[derive(Debug, Clone, Serialize)]
pub struct PairwiseSmd {
    /// Label such as `(1,1)v(1,0)`.
    pub pair: String,
    pub smd: f64,
}

/// The six pairwise SMDs of covariate `k` under the given weights.
///
/// The denominator pools the two arms' unweighted variances (average of
/// the two, then square root) and is symmetric in the pair order.
pub fn pairwise_smd(d: &Dataset, weight_sets: &[WeightSet; 4], k: &str) -> Result<Vec<PairwiseSmd>> {
    let values = d.covariate(k)?;
    let mut arm_var = [0.0f64; 4];
    for w in weight_sets {
        let members: Vec<f64> = w.rows.iter().map(|&i| values[i]).collect();
        arm_var[w.arm.index()] = if members.len() > 1 { pooled_moments(&members).1.powi(2) } else { 0.0 };
    }
    let mut out = Vec::with_capacity(6);
    for (p, q) in ARM_PAIRS {
        let wp = &weight_sets[p.index()];
        let wq = &weight_sets[q.index()];
        let sd = ((arm_var[p.index()] + arm_var[q.index()]) / 2.0).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ConstantCovariate(k.to_string()));
        }
        let smd = (weighted_mean(&values, wp) - weighted_mean(&values, wq)).abs() / sd;
        out.push(PairwiseSmd { pair: format!("{}v{}", p.label(), q.label()), smd });
    }
    Ok(out)
}

/// Balance metrics of one covariate under one weighting.
#[derive(Debug, Clone, Serialize)]
pub struct CovariateBalance {
    pub covariate: String,
    /// PSB per arm in [`Arm::ALL`] order.
    pub psb_by_arm: [f64; 4],
    /// Maximum of `psb_by_arm`.
    pub psb_overall: f64,
    pub pairwise_smd: Vec<PairwiseSmd>,
    /// Overall PSB exceeds the 0.2 cutoff.
    pub flag_02: bool,
    /// Any pairwise SMD exceeds the 0.1 cutoff.
    pub flag_01_pairwise: bool,
}

/// Balance metrics for a set of covariates under one weighting.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub rows: Vec<CovariateBalance>,
}

impl BalanceReport {
    /// Number of covariates whose overall PSB exceeds 0.2.
    pub fn count_above_02(&self) -> usize {
        self.rows.iter().filter(|r| r.flag_02).count()
    }

    /// Number of covariates with any pairwise SMD above 0.1.
    pub fn count_above_01_pairwise(&self) -> usize {
        self.rows.iter().filter(|r| r.flag_01_pairwise).count()
    }
}

/// Compute the balance report for `covariates`; constant covariates are
/// skipped (their standardized metrics are undefined).
pub fn balance_report(
    d: &Dataset,
    weight_sets: &[WeightSet; 4],
    covariates: &[String],
) -> Result<BalanceReport> {
    let mut rows = Vec::with_capacity(covariates.len());
    for k in covariates {
        let mut psb_by_arm = [0.0f64; 4];
        match psb_arm_covariate(d, &weight_sets[0], k) {
            Err(Error::ConstantCovariate(_)) => continue,
            Err(e) => return Err(e),
            Ok(v) => psb_by_arm[weight_sets[0].arm.index()] = v,
        }
        for w in &weight_sets[1..] {
            psb_by_arm[w.arm.index()] = psb_arm_covariate(d, w, k)?;
        }
        let psb_overall = psb_by_arm.iter().cloned().fold(0.0f64, f64::max);
        let pairwise = pairwise_smd(d, weight_sets, k)?;
        let flag_01_pairwise = pairwise.iter().any(|p| p.smd > 0.1);
        rows.push(CovariateBalance {
            covariate: k.clone(),
            psb_by_arm,
            psb_overall,
            pairwise_smd: pairwise,
            flag_02: psb_overall > 0.2,
            flag_01_pairwise,
        });
    }
    Ok(BalanceReport { rows })
}

/// Uniform within-arm weights: the unweighted baseline for reports.
pub fn unweighted_sets(part: &crate::data::ArmPartition) -> [WeightSet; 4] {
    let mut sets = Vec::with_capacity(4);
    for arm in Arm::ALL {
        let rows = part.members(arm).to_vec();
        let m = rows.len();
        sets.push(WeightSet {
            arm,
            rows,
            weights: vec![1.0 / m as f64; m],
            method: crate::weights::WeightMethod::Iptw,
            provenance: vec!["unweighted".into()],
            clip_events: 0,
        });
    }
    sets.try_into().expect("four arms")
}
