//! DDI point estimation and bootstrap inference.
//!
//! The interaction contrast is
//! `theta = [f(E(Y_11)) - f(E(Y_01))] - [f(E(Y_10)) - f(E(Y_00))]`
//! with `f` an identity link (additive scale, difference of risk
//! differences) or a log link (multiplicative scale, `exp(theta)` is a
//! ratio of risk ratios). Arm means are weighted outcome averages under
//! one of the three weighting schemes.
//!
//! Variance estimation resamples individuals with replacement and repeats
//! the *entire* pipeline on every replicate - refitting all candidate
//! models and re-solving all duals - so that the uncertainty of weight
//! estimation is propagated. The reported interval is
//! `theta_hat +/- 1.96 * se` around the full-data estimate.

use crate::data::{arm_partition, Arm, ArmPartition, Dataset};
use crate::error::{Error, Result};
use crate::propensity::{fit_propensity, FittedPropensity, PropensityModelSpec};
use crate::rng::{stream, Stage};
use crate::weights::{el_weights, iptw_weights, melcb_weights, WeightSet};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Monotone link applied to arm means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Identity,
    Log,
}

impl LinkFunction {
    fn apply(self, x: f64) -> Result<f64> {
        match self {
            LinkFunction::Identity => Ok(x),
            LinkFunction::Log => {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(Error::Domain(format!("log link requires positive arm means, got {x}")))
                }
            }
        }
    }
}

/// Weighting scheme selection for a full estimation pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    /// IPTW from the single candidate model with this label.
    Iptw { model: String },
    /// Empirical likelihood over all candidate models.
    El,
    /// Empirical likelihood plus exact balance for these covariates.
    Melcb { balance_covariates: Vec<String> },
}

impl Method {
    pub fn code(&self) -> &'static str {
        match self {
            Method::Iptw { .. } => "iptw",
            Method::El => "el",
            Method::Melcb { .. } => "melcb",
        }
    }
}

/// Weighted mean outcome of the arm covered by `w`.
pub fn weighted_arm_mean(d: &Dataset, w: &WeightSet) -> f64 {
    let y = d.outcome();
    w.rows.iter().zip(&w.weights).map(|(&i, &wi)| wi * y[i]).sum()
}

/// Interaction contrast from the four arm means, ordered as [`Arm::ALL`].
pub fn ddi_point_estimate(arm_means: &[f64; 4], link: LinkFunction) -> Result<f64> {
    let f11 = link.apply(arm_means[0])?;
    let f01 = link.apply(arm_means[1])?;
    let f10 = link.apply(arm_means[2])?;
    let f00 = link.apply(arm_means[3])?;
    Ok((f11 - f01) - (f10 - f00))
}

/// A full estimation recipe: candidate models, weighting method, link.
#[derive(Debug, Clone)]
pub struct EstimationPipeline {
    pub specs: Vec<PropensityModelSpec>,
    pub method: Method,
    pub link: LinkFunction,
}

/// Point-estimation output of one pipeline pass over one dataset.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub theta: f64,
    pub arm_means: [f64; 4],
    pub weight_sets: [WeightSet; 4],
}

impl EstimationPipeline {
    pub fn new(specs: Vec<PropensityModelSpec>, method: Method, link: LinkFunction) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidInput("at least one candidate model is required".into()));
        }
        let mut labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != specs.len() {
            return Err(Error::InvalidInput("model labels must be unique".into()));
        }
        if let Method::Iptw { model } = &method {
            if !specs.iter().any(|s| &s.label == model) {
                return Err(Error::InvalidInput(format!("IPTW model `{model}` is not in the set")));
            }
        }
        if let Method::Melcb { balance_covariates } = &method {
            if balance_covariates.is_empty() {
                return Err(Error::InvalidInput(
                    "mELCB requires a nonempty balance covariate list".into(),
                ));
            }
        }
        Ok(EstimationPipeline { specs, method, link })
    }

    /// The candidate models this pipeline actually needs to fit.
    fn required_specs(&self) -> Vec<&PropensityModelSpec> {
        match &self.method {
            Method::Iptw { model } => {
                self.specs.iter().filter(|s| &s.label == model).collect()
            }
            _ => self.specs.iter().collect(),
        }
    }

    /// Fit the required models on `d`.
    pub fn fit_models(&self, d: &Dataset) -> Result<Vec<FittedPropensity>> {
        self.required_specs().into_iter().map(|spec| fit_propensity(d, spec)).collect()
    }

    /// Per-arm weight sets from already-fitted models.
    pub fn weight_sets(
        &self,
        d: &Dataset,
        part: &ArmPartition,
        fits: &[FittedPropensity],
    ) -> Result<[WeightSet; 4]> {
        let mut sets = Vec::with_capacity(4);
        for arm in Arm::ALL {
            let w = match &self.method {
                Method::Iptw { model } => {
                    let fit = fits
                        .iter()
                        .find(|f| &f.spec.label == model)
                        .ok_or_else(|| Error::InvalidInput(format!("model `{model}` not fitted")))?;
                    iptw_weights(fit, part, arm)?
                }
                Method::El => el_weights(fits, d, part, arm)?,
                Method::Melcb { balance_covariates } => {
                    melcb_weights(fits, d, part, arm, balance_covariates)?
                }
            };
            sets.push(w);
        }
        Ok(sets.try_into().expect("four arms"))
    }

    /// Run the whole pipeline on one dataset.
    pub fn estimate(&self, d: &Dataset) -> Result<PipelineFit> {
        let part = arm_partition(d)?;
        let fits = self.fit_models(d)?;
        let weight_sets = self.weight_sets(d, &part, &fits)?;
        let mut arm_means = [0.0f64; 4];
        for (k, w) in weight_sets.iter().enumerate() {
            arm_means[k] = weighted_arm_mean(d, w);
        }
        let theta = ddi_point_estimate(&arm_means, self.link)?;
        Ok(PipelineFit { theta, arm_means, weight_sets })
    }
}

/// A DDI estimate with optional bootstrap uncertainty.
#[derive(Debug, Clone, Serialize)]
pub struct DdiEstimate {
    pub theta: f64,
    pub link: LinkFunction,
    /// Weighted arm means in [`Arm::ALL`] order.
    pub arm_means: [f64; 4],
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub replicates_total: usize,
    pub replicates_failed: usize,
}

/// Draw `n` row indices with replacement.
pub fn resample_indices<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Nonparametric bootstrap: `r_total` resamples at the individual level,
/// full pipeline refit in each, normal-approximation interval around the
/// full-data estimate.
///
/// Replicates with empty arms, failed fits, or failed duals are skipped
/// and counted; more than 10% failures is an error. Replicate `r` depends
/// only on `(seed, r)`, so results do not depend on thread count.
pub fn bootstrap_inference(
    d: &Dataset,
    pipeline: &EstimationPipeline,
    r_total: usize,
    seed: u64,
) -> Result<DdiEstimate> {
    if r_total < 2 {
        return Err(Error::InvalidInput("bootstrap needs R >= 2 replicates".into()));
    }
    let full = pipeline.estimate(d)?;

    let thetas: Vec<Option<f64>> = (0..r_total)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Stage::Bootstrap, &[r as u64]);
            let rows = resample_indices(&mut rng, d.n());
            let resample = d.select_rows(&rows);
            pipeline.estimate(&resample).ok().map(|fit| fit.theta)
        })
        .collect();

    summarize_replicates(full.theta, full.arm_means, pipeline.link, &thetas)
}

/// Fold replicate estimates into a [`DdiEstimate`]; shared with the
/// simulation harness. Aggregation runs in fixed replicate order.
pub fn summarize_replicates(
    theta: f64,
    arm_means: [f64; 4],
    link: LinkFunction,
    replicate_thetas: &[Option<f64>],
) -> Result<DdiEstimate> {
    let r_total = replicate_thetas.len();
    let successes: Vec<f64> = replicate_thetas.iter().filter_map(|t| *t).collect();
    let failed = r_total - successes.len();
    if failed * 10 > r_total {
        return Err(Error::TooManyFailures {
            failed,
            total: r_total,
            context: "bootstrap replicates".into(),
        });
    }
    let k = successes.len() as f64;
    let mean = successes.iter().sum::<f64>() / k;
    let var = successes.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1.0);
    let se = var.sqrt();
    Ok(DdiEstimate {
        theta,
        link,
        arm_means,
        se: Some(se),
        ci_low: Some(theta - 1.96 * se),
        ci_high: Some(theta + 1.96 * se),
        replicates_total: r_total,
        replicates_failed: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn weighted_arm_mean_examples() {
        let d = Dataset::new(
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1, 1, 1, 1],
            vec![1, 1, 1, 1],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            names(&["X1"]),
        )
        .unwrap();
        let w = WeightSet {
            arm: Arm::new(1, 1),
            rows: vec![0, 1, 2, 3],
            weights: vec![0.25; 4],
            method: crate::weights::WeightMethod::Iptw,
            provenance: vec![],
            clip_events: 0,
        };
        assert!((weighted_arm_mean(&d, &w) - 0.5).abs() < 1e-15);

        let d2 = Dataset::new(
            vec![0.3, 0.9],
            vec![1, 1],
            vec![1, 1],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            names(&["X1"]),
        )
        .unwrap();
        let w2 = WeightSet {
            arm: Arm::new(1, 1),
            rows: vec![0, 1],
            weights: vec![2.0 / 3.0, 1.0 / 3.0],
            method: crate::weights::WeightMethod::Iptw,
            provenance: vec![],
            clip_events: 0,
        };
        assert!((weighted_arm_mean(&d2, &w2) - 0.5).abs() < 1e-15);

        // Constant outcome: any valid weights give back the constant.
        let d3 = Dataset::new(
            vec![0.7; 3],
            vec![1; 3],
            vec![1; 3],
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            names(&["X1"]),
        )
        .unwrap();
        let w3 = WeightSet {
            arm: Arm::new(1, 1),
            rows: vec![0, 1, 2],
            weights: vec![0.6, 0.3, 0.1],
            method: crate::weights::WeightMethod::Iptw,
            provenance: vec![],
            clip_events: 0,
        };
        assert!((weighted_arm_mean(&d3, &w3) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn point_estimate_on_both_scales() {
        let theta =
            ddi_point_estimate(&[0.3, 0.2, 0.25, 0.2], LinkFunction::Identity).unwrap();
        assert!((theta - 0.05).abs() < 1e-15);

        let theta = ddi_point_estimate(&[0.4; 4], LinkFunction::Identity).unwrap();
        assert!(theta.abs() < 1e-15);

        // Ratio of ratios equal to 1: zero on the log scale.
        let theta = ddi_point_estimate(&[0.2, 0.1, 0.2, 0.1], LinkFunction::Log).unwrap();
        assert!(theta.abs() < 1e-12);

        assert!(matches!(
            ddi_point_estimate(&[0.2, 0.0, 0.2, 0.1], LinkFunction::Log),
            Err(Error::Domain(_))
        ));
    }

    /// Dataset with arms assigned independently of everything and outcome
    /// constant within each arm; two distinct covariate values so that
    /// validation does not warn.
    fn constant_outcome_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, Stage::Synthetic, &[7]);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for i in 0..n {
            let ai = u8::from(rng.random::<f64>() < 0.5);
            let bi = u8::from(rng.random::<f64>() < 0.5);
            a.push(ai);
            b.push(bi);
            y.push(match (ai, bi) {
                (1, 1) => 0.4,
                (0, 1) => 0.3,
                (1, 0) => 0.2,
                _ => 0.1,
            });
            x.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        Dataset::new(y, a, b, DMatrix::from_column_slice(n, 1, &x), names(&["X1"])).unwrap()
    }

    #[test]
    fn constant_arm_outcomes_give_zero_bootstrap_se() {
        let d = constant_outcome_dataset(400, 2);
        let pipeline = EstimationPipeline::new(
            vec![PropensityModelSpec::intercept_only("m0")],
            Method::El,
            LinkFunction::Identity,
        )
        .unwrap();
        let est = bootstrap_inference(&d, &pipeline, 40, 99).unwrap();
        // theta = (0.4 - 0.3) - (0.2 - 0.1) = 0 and every replicate agrees.
        assert!(est.theta.abs() < 1e-12);
        assert!(est.se.unwrap().abs() < 1e-12);
        assert_eq!(est.replicates_failed, 0);
    }

    #[test]
    fn bootstrap_is_deterministic_across_thread_counts() {
        let d = constant_outcome_dataset(240, 5);
        // A dataset with real variation in Y.
        let mut rng = stream(11, Stage::Synthetic, &[3]);
        let y: Vec<f64> = d
            .outcome()
            .iter()
            .map(|&v| v + <f64 as From<f32>>::from(rng.random::<f32>()) * 0.5)
            .collect();
        let d = Dataset::new(
            y,
            d.treat_a().to_vec(),
            d.treat_b().to_vec(),
            d.covariates().clone(),
            names(&["X1"]),
        )
        .unwrap();
        let pipeline = EstimationPipeline::new(
            vec![PropensityModelSpec::intercept_only("m0")],
            Method::El,
            LinkFunction::Identity,
        )
        .unwrap();

        let run = |threads: usize| -> (f64, f64) {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let est = bootstrap_inference(&d, &pipeline, 50, 31).unwrap();
                (est.theta, est.se.unwrap())
            })
        };
        let (t1, s1) = run(1);
        let (t2, s2) = run(4);
        assert_eq!(t1.to_bits(), t2.to_bits());
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn exchanging_drug_roles_leaves_theta_unchanged() {
        // theta is symmetric in (A, B) by construction of the contrast.
        let mut rng = stream(17, Stage::Synthetic, &[4]);
        let n = 600;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let pa = 1.0 / (1.0 + (-0.3 * xi).exp());
            let ai = u8::from(rng.random::<f64>() < pa);
            let bi = u8::from(rng.random::<f64>() < 0.5);
            let py = 0.2 + 0.1 * f64::from(ai) + 0.15 * f64::from(bi) + 0.05 * xi.tanh();
            a.push(ai);
            b.push(bi);
            y.push(f64::from(rng.random::<f64>() < py));
            x.push(xi);
        }
        let terms = parse_formula("X1", &names(&["X1"])).unwrap();
        let spec = PropensityModelSpec::multinomial("m1", terms);
        let pipeline = EstimationPipeline::new(
            vec![spec],
            Method::El,
            LinkFunction::Identity,
        )
        .unwrap();
        let d = Dataset::new(
            y.clone(),
            a.clone(),
            b.clone(),
            DMatrix::from_column_slice(n, 1, &x),
            names(&["X1"]),
        )
        .unwrap();
        let swapped = Dataset::new(
            y,
            b,
            a,
            DMatrix::from_column_slice(n, 1, &x),
            names(&["X1"]),
        )
        .unwrap();
        let t1 = pipeline.estimate(&d).unwrap().theta;
        let t2 = pipeline.estimate(&swapped).unwrap().theta;
        assert!((t1 - t2).abs() < 1e-8, "{t1} vs {t2}");
    }

    #[test]
    fn link_invariances_hold() {
        let d = constant_outcome_dataset(300, 21);
        let pipeline = EstimationPipeline::new(
            vec![PropensityModelSpec::intercept_only("m0")],
            Method::El,
            LinkFunction::Identity,
        )
        .unwrap();
        let base = pipeline.estimate(&d).unwrap().theta;
        // Identity link: adding a constant to Y leaves theta unchanged.
        let shifted = Dataset::new(
            d.outcome().iter().map(|y| y + 5.0).collect(),
            d.treat_a().to_vec(),
            d.treat_b().to_vec(),
            d.covariates().clone(),
            names(&["X1"]),
        )
        .unwrap();
        let t = pipeline.estimate(&shifted).unwrap().theta;
        assert!((t - base).abs() < 1e-10);

        // Log link: multiplying Y by a positive constant leaves theta
        // unchanged.
        let log_pipeline = EstimationPipeline::new(
            vec![PropensityModelSpec::intercept_only("m0")],
            Method::El,
            LinkFunction::Log,
        )
        .unwrap();
        let base = log_pipeline.estimate(&d).unwrap().theta;
        let scaled = Dataset::new(
            d.outcome().iter().map(|y| y * 3.5).collect(),
            d.treat_a().to_vec(),
            d.treat_b().to_vec(),
            d.covariates().clone(),
            names(&["X1"]),
        )
        .unwrap();
        let t = log_pipeline.estimate(&scaled).unwrap().theta;
        assert!((t - base).abs() < 1e-10);
    }
}
