//! Reference values and tolerance checks for the acceptance suite.
//!
//! Standard errors are combined in quadrature: two independent estimates
//! `a` and `b` differ by `k` combined SEs when `|a - b| = k * hypot(se_a, se_b)`.

use std::fmt;

use dosefind::simulator::Estimate;
use statrs::distribution::{ContinuousCDF, Normal};

/// A reference mean with its standard error. Rates are proportions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub mean: f64,
    pub se: f64,
}

pub const fn reference(mean: f64, se: f64) -> Reference {
    Reference { mean, se }
}

/// Reference rows for the Bayesian setting, as `(policy, metric, value)`.
pub const BAYES_REFERENCE: [(&str, &str, Reference); 11] = [
    ("EWOC*", "risk1", reference(485.5, 3.6)),
    ("EWOC*", "dlt", reference(0.335, 0.001)),
    ("EWOC*", "od", reference(0.374, 0.001)),
    ("CRM", "risk1", reference(986.1, 45.9)),
    ("CRM", "dlt", reference(0.391, 0.001)),
    ("CRM", "od", reference(0.556, 0.001)),
    ("IVOC", "risk1", reference(723.2, 3.6)),
    ("IVOC", "dlt", reference(0.266, 9e-4)),
    ("EWOC+", "risk1", reference(454.8, 2.8)),
    ("EWOC+", "risk2", reference(0.73, 0.007)),
    ("EWOC+", "dlt", reference(0.291, 9e-4)),
];

/// EWOC+ rows are checked at 500 replications with a wider band.
pub const EWOC_PLUS_OD: Reference = reference(0.270, 9e-4);

pub fn combined_se(a: Option<f64>, b: Option<f64>) -> f64 {
    a.unwrap_or(0.0).hypot(b.unwrap_or(0.0))
}

/// Probability that the largest of `m` independent `|N(0,1)|` draws reaches `max_z`.
pub fn familywise_p(max_z: f64, m: usize) -> f64 {
    let tail = 2.0 * Normal::standard().sf(max_z);
    1.0 - (1.0 - tail).powi(m as i32)
}

/// One numeric comparison with its verdict and a one-line description.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(label: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `|ours - reference| <= k` combined SEs.
    pub fn band(label: impl Into<String>, ours: Estimate, r: Reference, k: f64) -> Self {
        let se = combined_se(ours.se, Some(r.se));
        let z = (ours.mean - r.mean).abs() / se;
        Self::new(
            label,
            z <= k,
            format!(
                "ours {} vs reference {} (SE {}): {z:.2} combined SE, limit {k}",
                fmt_est(ours),
                fmt_num(r.mean),
                fmt_num(r.se)
            ),
        )
    }

    /// `upper - lower >= k` combined SEs.
    pub fn gap(label: impl Into<String>, lower: Estimate, upper: Estimate, k: f64) -> Self {
        let se = combined_se(lower.se, upper.se);
        let z = (upper.mean - lower.mean) / se;
        Self::new(
            label,
            z >= k,
            format!("{} vs {}: gap {z:.2} combined SE, need >= {k}", fmt_est(lower), fmt_est(upper)),
        )
    }

    /// Exactly zero.
    pub fn zero(label: impl Into<String>, ours: Estimate) -> Self {
        Self::new(label, ours.mean == 0.0, format!("ours {}", fmt_est(ours)))
    }

    /// Positive with one-sided 95% confidence.
    pub fn positive(label: impl Into<String>, ours: Estimate) -> Self {
        let lower = ours.mean - 1.645 * ours.se.unwrap_or(0.0);
        Self::new(
            label,
            lower > 0.0,
            format!("ours {}, one-sided 95% lower bound {}", fmt_est(ours), fmt_num(lower)),
        )
    }
}

fn fmt_num(x: f64) -> String {
    if x != 0.0 && x.abs() < 0.01 {
        format!("{x:.2e}")
    } else {
        format!("{x:.4}")
    }
}

fn fmt_est(e: Estimate) -> String {
    match e.se {
        Some(se) => format!("{} (SE {})", fmt_num(e.mean), fmt_num(se)),
        None => fmt_num(e.mean),
    }
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: String,
    pub title: String,
    pub checks: Vec<Check>,
}

impl Verdict {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// The single summary line.
    pub fn line(&self) -> String {
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        format!(
            "{} {}: {} ({}/{} checks passed)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.checks.len() - failed,
            self.checks.len()
        )
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.line())?;
        for c in &self.checks {
            writeln!(f, "    [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.label, c.detail)?;
        }
        Ok(())
    }
}
