//! Canonical data model: observed samples, treatment arms, and validation.
//!
//! A two-drug interaction analysis views the pair of binary exposures as a
//! composite treatment with four levels. [`Arm`] enumerates those levels,
//! [`ArmPartition`] groups row indices by observed level, and
//! [`validate_dataset`] reports structural problems before any fitting.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

/// One of the four composite treatment levels `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Arm {
    /// Object (affected drug) indicator.
    pub a: u8,
    /// Precipitant (affecting drug) indicator.
    pub b: u8,
}

impl Arm {
    /// The four arms in canonical order: (1,1), (0,1), (1,0), (0,0).
    ///
    /// (0,0) is last and serves as the reference level for model fitting.
    pub const ALL: [Arm; 4] = [
        Arm { a: 1, b: 1 },
        Arm { a: 0, b: 1 },
        Arm { a: 1, b: 0 },
        Arm { a: 0, b: 0 },
    ];

    pub fn new(a: u8, b: u8) -> Arm {
        debug_assert!(a <= 1 && b <= 1);
        Arm { a, b }
    }

    /// Position of this arm in [`Arm::ALL`].
    pub fn index(self) -> usize {
        match (self.a, self.b) {
            (1, 1) => 0,
            (0, 1) => 1,
            (1, 0) => 2,
            (0, 0) => 3,
            _ => panic!("non-binary arm ({}, {})", self.a, self.b),
        }
    }

    pub fn label(self) -> String {
        format!("({},{})", self.a, self.b)
    }
}

/// An observed sample: outcome, two treatment indicators, covariates.
///
/// Construction checks only shape invariants (consistent `n`, nonempty and
/// unique covariate names); value-level problems such as non-binary
/// treatment codes or NaNs are reported by [`validate_dataset`] so that a
/// caller can surface all of them at once.
#[derive(Debug, Clone)]
pub struct Dataset {
    outcome: Vec<f64>,
    treat_a: Vec<u8>,
    treat_b: Vec<u8>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        outcome: Vec<f64>,
        treat_a: Vec<u8>,
        treat_b: Vec<u8>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Dataset> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset must have n >= 1 rows".into()));
        }
        if treat_a.len() != n || treat_b.len() != n || covariates.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "field lengths disagree: outcome {}, treat_a {}, treat_b {}, covariate rows {}",
                n,
                treat_a.len(),
                treat_b.len(),
                covariates.nrows()
            )));
        }
        let p = covariates.ncols();
        if p == 0 {
            return Err(Error::InvalidInput("dataset must have p >= 1 covariates".into()));
        }
        if covariate_names.len() != p {
            return Err(Error::InvalidInput(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                p
            )));
        }
        for (i, name) in covariate_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidInput("empty covariate name".into()));
            }
            if covariate_names[..i].contains(name) {
                return Err(Error::InvalidInput(format!("duplicate covariate name `{name}`")));
            }
        }
        Ok(Dataset { outcome, treat_a, treat_b, covariates, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treat_a(&self) -> &[u8] {
        &self.treat_a
    }

    pub fn treat_b(&self) -> &[u8] {
        &self.treat_b
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Column of covariate `name`, in row order.
    pub fn covariate(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .covariate_index(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        Ok(self.covariates.column(idx).iter().copied().collect())
    }

    /// Observed arm of row `i`.
    pub fn arm_of(&self, i: usize) -> Arm {
        Arm::new(self.treat_a[i], self.treat_b[i])
    }

    /// New dataset formed by the given rows (with repetition allowed), in
    /// the given order. Used for bootstrap resampling.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let m = rows.len();
        let p = self.p();
        let mut covariates = DMatrix::zeros(m, p);
        for (new_i, &old_i) in rows.iter().enumerate() {
            for j in 0..p {
                covariates[(new_i, j)] = self.covariates[(old_i, j)];
            }
        }
        Dataset {
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            treat_a: rows.iter().map(|&i| self.treat_a[i]).collect(),
            treat_b: rows.iter().map(|&i| self.treat_b[i]).collect(),
            covariates,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// The dataset must be rejected.
    Fatal,
    /// Legal but worth surfacing (e.g. affects standardized diagnostics).
    Warning,
}

/// A single validation finding.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub severity: Severity,
    pub description: String,
}

/// Outcome of [`validate_dataset`]; the dataset is accepted iff no fatal
/// violation is present.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.iter().all(|v| v.severity != Severity::Fatal)
    }

    fn fatal(&mut self, description: String) {
        self.violations.push(Violation { severity: Severity::Fatal, description });
    }

    fn warn(&mut self, description: String) {
        self.violations.push(Violation { severity: Severity::Warning, description });
    }
}

/// Check value-level invariants: binary treatments, finite values, empty
/// arms (fatal) and constant covariates (warning).
///
/// Pure and idempotent; never mutates the dataset.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    let bad_a = d.treat_a.iter().filter(|&&t| t > 1).count();
    let bad_b = d.treat_b.iter().filter(|&&t| t > 1).count();
    if bad_a > 0 {
        report.fatal(format!("non-binary treatment: {bad_a} value(s) of treat_a outside {{0,1}}"));
    }
    if bad_b > 0 {
        report.fatal(format!("non-binary treatment: {bad_b} value(s) of treat_b outside {{0,1}}"));
    }

    let bad_y = d.outcome.iter().filter(|y| !y.is_finite()).count();
    if bad_y > 0 {
        report.fatal(format!("missing/NaN values: {bad_y} non-finite outcome value(s)"));
    }
    for (j, name) in d.covariate_names.iter().enumerate() {
        let col = d.covariates.column(j);
        let bad = col.iter().filter(|x| !x.is_finite()).count();
        if bad > 0 {
            report.fatal(format!("missing/NaN values: covariate `{name}` has {bad} non-finite value(s)"));
        } else {
            let first = col[0];
            if col.iter().all(|&x| x == first) {
                report.warn(format!("constant covariate `{name}` (standardized diagnostics undefined)"));
            }
        }
    }

    if bad_a == 0 && bad_b == 0 {
        let mut counts = [0usize; 4];
        for i in 0..d.n() {
            counts[d.arm_of(i).index()] += 1;
        }
        for arm in Arm::ALL {
            if counts[arm.index()] == 0 {
                report.fatal(format!("empty arm {}", arm.label()));
            }
        }
    }

    report
}

/// Row indices grouped by observed treatment arm.
///
/// Each index set is sorted; the four sets are disjoint and cover `0..n-1`,
/// and every set is nonempty (sample-level positivity).
#[derive(Debug, Clone)]
pub struct ArmPartition {
    members: [Vec<usize>; 4],
}

impl ArmPartition {
    /// Sorted row indices observed at `arm`.
    pub fn members(&self, arm: Arm) -> &[usize] {
        &self.members[arm.index()]
    }

    pub fn arm_size(&self, arm: Arm) -> usize {
        self.members[arm.index()].len()
    }
}

/// Partition rows by observed arm, requiring every arm to be nonempty.
pub fn arm_partition(d: &Dataset) -> Result<ArmPartition> {
    let mut members: [Vec<usize>; 4] = Default::default();
    for i in 0..d.n() {
        let (a, b) = (d.treat_a[i], d.treat_b[i]);
        if a > 1 || b > 1 {
            return Err(Error::InvalidInput(format!(
                "non-binary treatment at row {i}; validate the dataset first"
            )));
        }
        members[Arm::new(a, b).index()].push(i);
    }
    for arm in Arm::ALL {
        if members[arm.index()].is_empty() {
            return Err(Error::EmptyArm { arm });
        }
    }
    Ok(ArmPartition { members })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_arm_dataset() -> Dataset {
        // One row per arm, distinct covariate values.
        Dataset::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1, 1, 0, 0],
            vec![1, 0, 1, 0],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["X1".into()],
        )
        .unwrap()
    }

    #[test]
    fn fully_valid_dataset_has_no_violations() {
        let report = validate_dataset(&four_arm_dataset());
        assert!(report.violations.is_empty());
        assert!(report.is_valid());
    }

    #[test]
    fn non_binary_treatment_is_fatal() {
        let d = Dataset::new(
            vec![0.0, 1.0, 0.0, 1.0],
            vec![2, 1, 0, 0],
            vec![1, 0, 1, 0],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["X1".into()],
        )
        .unwrap();
        let report = validate_dataset(&d);
        assert!(!report.is_valid());
        assert!(report
            .violations
            .iter()
            .any(|v| v.severity == Severity::Fatal && v.description.contains("non-binary treatment")));
    }

    #[test]
    fn empty_arm_is_fatal() {
        let d = Dataset::new(
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1, 1, 0, 1],
            vec![1, 0, 1, 1],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["X1".into()],
        )
        .unwrap();
        let report = validate_dataset(&d);
        assert!(!report.is_valid());
        assert!(report.violations.iter().any(|v| v.description.contains("empty arm (0,0)")));
    }

    #[test]
    fn nan_outcome_is_fatal_and_constant_covariate_warns() {
        let d = Dataset::new(
            vec![0.0, f64::NAN, 0.0, 1.0],
            vec![1, 1, 0, 0],
            vec![1, 0, 1, 0],
            DMatrix::from_column_slice(4, 1, &[2.0, 2.0, 2.0, 2.0]),
            vec!["X1".into()],
        )
        .unwrap();
        let report = validate_dataset(&d);
        assert!(!report.is_valid());
        assert!(report
            .violations
            .iter()
            .any(|v| v.severity == Severity::Warning && v.description.contains("constant covariate")));
    }

    #[test]
    fn validation_is_idempotent() {
        let d = four_arm_dataset();
        let a = validate_dataset(&d);
        let b = validate_dataset(&d);
        assert_eq!(a.violations.len(), b.violations.len());
    }

    #[test]
    fn partition_assigns_rows_to_observed_arms() {
        let d = four_arm_dataset();
        let part = arm_partition(&d).unwrap();
        assert_eq!(part.members(Arm::new(1, 1)), &[0]);
        assert_eq!(part.members(Arm::new(1, 0)), &[1]);
        assert_eq!(part.members(Arm::new(0, 1)), &[2]);
        assert_eq!(part.members(Arm::new(0, 0)), &[3]);
    }

    #[test]
    fn partition_rejects_empty_arms() {
        let d = Dataset::new(
            vec![0.0, 1.0],
            vec![1, 0],
            vec![1, 0],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            vec!["X1".into()],
        )
        .unwrap();
        match arm_partition(&d) {
            Err(Error::EmptyArm { .. }) => {}
            other => panic!("expected EmptyArm, got {other:?}"),
        }

        let d = Dataset::new(
            vec![0.0; 4],
            vec![0, 0, 0, 1],
            vec![1, 1, 0, 0],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["X1".into()],
        )
        .unwrap();
        match arm_partition(&d) {
            Err(Error::EmptyArm { arm }) => assert_eq!(arm, Arm::new(1, 1)),
            other => panic!("expected EmptyArm, got {other:?}"),
        }
    }

    #[test]
    fn partition_round_trips_to_row_indices() {
        let d = Dataset::new(
            vec![0.0; 9],
            vec![1, 0, 1, 0, 1, 0, 1, 0, 1],
            vec![1, 1, 0, 0, 1, 1, 0, 0, 1],
            DMatrix::from_fn(9, 1, |i, _| i as f64),
            vec!["X1".into()],
        )
        .unwrap();
        let part = arm_partition(&d).unwrap();
        let mut all: Vec<usize> = Arm::ALL.iter().flat_map(|&arm| part.members(arm).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        for arm in Arm::ALL {
            let m = part.members(arm);
            assert!(m.windows(2).all(|w| w[0] < w[1]), "indices sorted and unique");
        }
    }
}
