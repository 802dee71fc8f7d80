//! Two-parameter logistic dose-toxicity model.
//!
//! The curve `F(x) = 1 / (1 + exp(-(alpha + beta * x)))` is parameterized either
//! canonically by `(alpha, beta)` or naturally by `(rho, eta)`, where
//! `rho = F(x_min)` is the toxicity probability at the lowest dose and
//! `eta = F^{-1}(p)` is the maximum tolerated dose (MTD) for target rate `p`.

use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};

/// Lower clip applied to `rho` (and `p - rho`) when sampling or validating the
/// natural-parameter support.
pub const RHO_EPS: f64 = 1e-6;
/// Lower clip on `eta - x_min`, as a fraction of the dose-space width.
pub const ETA_EPS_FRACTION: f64 = 1e-6;

/// `1 / (1 + e^{-z})`, evaluated without overflow for either sign of `z`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 / (1 + e^{-z}))`.
#[inline]
pub fn log_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Closed dose interval `[x_min, x_max]`. Units are whatever the caller uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDoseSpace", into = "RawDoseSpace")]
pub struct DoseSpace {
    x_min: f64,
    x_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoseSpace {
    x_min: f64,
    x_max: f64,
}

impl TryFrom<RawDoseSpace> for DoseSpace {
    type Error = DoseError;
    fn try_from(raw: RawDoseSpace) -> Result<Self> {
        DoseSpace::new(raw.x_min, raw.x_max)
    }
}

impl From<DoseSpace> for RawDoseSpace {
    fn from(s: DoseSpace) -> Self {
        RawDoseSpace {
            x_min: s.x_min,
            x_max: s.x_max,
        }
    }
}

impl DoseSpace {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(DoseError::invalid("dose_space", "bounds must be finite"));
        }
        if x_min >= x_max {
            return Err(DoseError::invalid(
                "dose_space",
                format!("x_min ({x_min}) must be < x_max ({x_max})"),
            ));
        }
        Ok(Self { x_min, x_max })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.x_min, self.x_max)
    }

    /// Smallest admissible MTD after boundary regularization.
    pub fn eta_floor(&self) -> f64 {
        self.x_min + ETA_EPS_FRACTION * self.width()
    }
}

/// Monotone dose-response curve with an invertible toxicity probability.
pub trait DoseResponse {
    fn toxicity_prob(&self, x: f64) -> f64;
    fn mtd(&self, p: f64) -> f64;
}

/// `(alpha, beta)` with `beta > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl CanonicalParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(DoseError::invalid("alpha/beta", "must be finite"));
        }
        if beta <= 0.0 {
            return Err(DoseError::invalid("beta", format!("must be > 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    #[inline]
    pub fn linear_predictor(&self, x: f64) -> f64 {
        self.alpha + self.beta * x
    }

    /// Logistic weight `e^z / (1 + e^z)^2` at `z = alpha + beta x`.
    #[inline]
    pub fn fisher_weight(&self, x: f64) -> f64 {
        let e = (-self.linear_predictor(x).abs()).exp();
        e / ((1.0 + e) * (1.0 + e))
    }

    /// Per-observation Fisher information for `(alpha, beta)` at dose `x`.
    pub fn fisher_info(&self, x: f64) -> SymMatrix2 {
        let w = self.fisher_weight(x);
        SymMatrix2::new(w, w * x, w * x * x)
    }
}

impl DoseResponse for CanonicalParams {
    #[inline]
    fn toxicity_prob(&self, x: f64) -> f64 {
        logistic(self.linear_predictor(x))
    }

    fn mtd(&self, p: f64) -> f64 {
        (logit(p) - self.alpha) / self.beta
    }
}

/// `(rho, eta)` for a given target rate `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub rho: f64,
    pub eta: f64,
    pub target_p: f64,
}

impl NaturalParams {
    /// Validates `0 < rho <= p < 1` and `eta` inside the dose space.
    pub fn new(rho: f64, eta: f64, target_p: f64, space: &DoseSpace) -> Result<Self> {
        if !(target_p > 0.0 && target_p < 1.0) {
            return Err(DoseError::invalid("target_p", "must lie in (0, 1)"));
        }
        if !(rho > 0.0 && rho <= target_p) {
            return Err(DoseError::invalid(
                "rho",
                format!("must lie in (0, {target_p}], got {rho}"),
            ));
        }
        if !space.contains(eta) {
            return Err(DoseError::invalid(
                "eta",
                format!(
                    "must lie in [{}, {}], got {eta}",
                    space.x_min(),
                    space.x_max()
                ),
            ));
        }
        Ok(Self { rho, eta, target_p })
    }

    /// Projects onto the regularized support
    /// `[RHO_EPS, p - RHO_EPS] x [x_min + eps_eta, x_max]`.
    pub fn clipped(&self, space: &DoseSpace) -> Self {
        Self {
            rho: self.rho.clamp(RHO_EPS, self.target_p - RHO_EPS),
            eta: self.eta.clamp(space.eta_floor(), space.x_max()),
            target_p: self.target_p,
        }
    }

    pub fn to_canonical(&self, space: &DoseSpace) -> Result<CanonicalParams> {
        to_canonical(self, space)
    }
}

fn check_transform(np: &NaturalParams, space: &DoseSpace) -> Result<(f64, f64, f64)> {
    if !(np.rho > 0.0 && np.rho < 1.0) {
        return Err(DoseError::SingularTransform(format!(
            "rho = {} must lie strictly inside (0, 1)",
            np.rho
        )));
    }
    if !(np.target_p > 0.0 && np.target_p < 1.0) {
        return Err(DoseError::SingularTransform(format!(
            "p = {} must lie strictly inside (0, 1)",
            np.target_p
        )));
    }
    let span = np.eta - space.x_min();
    if !(span > 0.0) {
        return Err(DoseError::SingularTransform(format!(
            "eta = {} must exceed x_min = {}",
            np.eta,
            space.x_min()
        )));
    }
    // log(1/rho - 1) and log(1/p - 1)
    Ok((-logit(np.rho), -logit(np.target_p), span))
}

/// Maps `(rho, eta)` to `(alpha, beta)` so that `F(x_min) = rho` and `F(eta) = p`.
pub fn to_canonical(np: &NaturalParams, space: &DoseSpace) -> Result<CanonicalParams> {
    let (l_rho, l_p, span) = check_transform(np, space)?;
    let beta = (l_rho - l_p) / span;
    if !(beta > 0.0) {
        return Err(DoseError::SingularTransform(format!(
            "rho = {} >= p = {} gives a non-increasing curve",
            np.rho, np.target_p
        )));
    }
    let alpha = (space.x_min() * l_p - np.eta * l_rho) / span;
    Ok(CanonicalParams { alpha, beta })
}

/// `alpha + beta x` written directly in natural coordinates.
pub fn linear_predictor(x: f64, np: &NaturalParams, space: &DoseSpace) -> Result<f64> {
    let (l_rho, l_p, span) = check_transform(np, space)?;
    Ok(((x - np.eta) * l_rho - (x - space.x_min()) * l_p) / span)
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMatrix2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SymMatrix2 {
    pub const IDENTITY: SymMatrix2 = SymMatrix2 {
        a: 1.0,
        b: 0.0,
        c: 1.0,
    };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.a * s, self.b * s, self.c * s)
    }

    pub fn add(&self, other: &SymMatrix2) -> Self {
        Self::new(self.a + other.a, self.b + other.b, self.c + other.c)
    }

    /// `v' M^{-1} v`, given `det(M) = det`.
    pub fn inverse_quadratic_form(&self, v: [f64; 2], det: f64) -> f64 {
        (v[0] * v[0] * self.c - 2.0 * v[0] * v[1] * self.b + v[1] * v[1] * self.a) / det
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.a >= -tol && self.c >= -tol && self.det() >= -tol * (1.0 + self.trace().powi(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn standard_space() -> DoseSpace {
        DoseSpace::new(140.0, 425.0).unwrap()
    }

    const P: f64 = 1.0 / 3.0;

    #[test]
    fn dose_space_rejects_bad_bounds() {
        assert!(DoseSpace::new(1.0, 1.0).is_err());
        assert!(DoseSpace::new(2.0, 1.0).is_err());
        assert!(DoseSpace::new(f64::NAN, 1.0).is_err());
        assert!(DoseSpace::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn canonical_hits_anchor_points() {
        let space = standard_space();
        for (rho, eta) in [(0.19, 269.1), (0.07, 403.9), (0.30, 226.7)] {
            let np = NaturalParams::new(rho, eta, P, &space).unwrap();
            let cp = to_canonical(&np, &space).unwrap();
            assert!(cp.beta > 0.0);
            assert!((cp.toxicity_prob(140.0) - rho).abs() < 1e-10);
            assert!((cp.toxicity_prob(eta) - P).abs() < 1e-10);
        }
    }

    #[test]
    fn rho_equal_to_target_is_singular() {
        let space = standard_space();
        let np = NaturalParams::new(P, 300.0, P, &space).unwrap();
        assert!(matches!(
            to_canonical(&np, &space),
            Err(DoseError::SingularTransform(_))
        ));
    }

    #[test]
    fn eta_at_floor_is_singular() {
        let space = standard_space();
        let np = NaturalParams {
            rho: 0.1,
            eta: 140.0,
            target_p: P,
        };
        assert!(to_canonical(&np, &space).is_err());
        assert!(linear_predictor(200.0, &np, &space).is_err());
        let np = NaturalParams {
            rho: 0.0,
            eta: 300.0,
            target_p: P,
        };
        assert!(to_canonical(&np, &space).is_err());
    }

    #[test]
    fn linear_predictor_special_points() {
        let space = standard_space();
        let np = NaturalParams::new(0.19, 269.1, P, &space).unwrap();
        let at_eta = linear_predictor(269.1, &np, &space).unwrap();
        assert!((at_eta - (-((1.0 / P - 1.0).ln()))).abs() < 1e-12);
        let at_min = linear_predictor(140.0, &np, &space).unwrap();
        assert!((at_min + (1.0 / 0.19 - 1.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_predictor_matches_composed_transform() {
        // Oracle: the alpha/beta formulas composed by hand.
        let space = standard_space();
        let (rho, eta, x) = (0.19_f64, 269.1_f64, 282.5_f64);
        let lr = (1.0 / rho - 1.0).ln();
        let lp = (1.0 / P - 1.0).ln();
        let alpha = (140.0 * lp - eta * lr) / (eta - 140.0);
        let beta = (lr - lp) / (eta - 140.0);
        let np = NaturalParams::new(rho, eta, P, &space).unwrap();
        let g = linear_predictor(x, &np, &space).unwrap();
        assert!((g - (alpha + beta * x)).abs() < 1e-12);
    }

    #[test]
    fn logistic_at_zero_and_extremes() {
        let cp = CanonicalParams::new(0.0, 0.7).unwrap();
        assert_eq!(cp.toxicity_prob(0.0), 0.5);
        assert_eq!(cp.mtd(0.5), 0.0);
        assert!(logistic(800.0) == 1.0 && logistic(-800.0) >= 0.0);
        assert!(log_logistic(-800.0).is_finite());
        assert!((log_logistic(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn mtd_matches_bisection() {
        let cases = [(-3.0, 0.011), (-12.5, 0.04), (0.4, 0.002), (-1.0, 0.5)];
        for (alpha, beta) in cases {
            let cp = CanonicalParams::new(alpha, beta).unwrap();
            for p in [0.1, P, 0.6] {
                let (mut lo, mut hi) = (-1e5, 1e5);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if cp.toxicity_prob(mid) < p {
                        lo = mid
                    } else {
                        hi = mid
                    }
                }
                let eta = cp.mtd(p);
                assert!((eta - 0.5 * (lo + hi)).abs() < 1e-8 * (1.0 + eta.abs()));
                assert!((cp.toxicity_prob(eta) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fisher_info_shape() {
        let cp = CanonicalParams::new(-2.0, 0.01).unwrap();
        // alpha + beta x = 0 at x = 200
        let m = cp.fisher_info(200.0);
        assert!((m.a - 0.25).abs() < 1e-15);
        assert!((m.b - 50.0).abs() < 1e-12);
        assert!((m.c - 10000.0).abs() < 1e-9);
        assert!(m.det().abs() <= 1e-12 * m.a * m.c);

        let m1 = cp.fisher_info(150.0);
        let m2 = cp.fisher_info(300.0);
        let avg = m1.add(&m2).scale(0.5);
        let direct = avg.a * avg.c - avg.b * avg.b;
        assert!(direct > 0.0);
        assert!((avg.det() - direct).abs() <= 1e-12 * direct.abs());
    }

    proptest! {
        #[test]
        fn round_trip_recovers_natural(rho in 1e-4f64..(1.0/3.0 - 1e-4), eta in 141.0f64..425.0) {
            let space = standard_space();
            let np = NaturalParams::new(rho, eta, P, &space).unwrap();
            let cp = np.to_canonical(&space).unwrap();
            let rho_back = cp.toxicity_prob(space.x_min());
            let eta_back = cp.mtd(P);
            prop_assert!(((rho_back - rho) / rho).abs() < 1e-8);
            prop_assert!(((eta_back - eta) / eta).abs() < 1e-8);
        }

        #[test]
        fn toxicity_monotone_in_dose_and_eta(rho in 0.01f64..0.33, eta in 150.0f64..420.0, x in 140.0f64..424.0) {
            let space = standard_space();
            let cp = NaturalParams::new(rho, eta, P, &space).unwrap().to_canonical(&space).unwrap();
            let (lo, hi) = (cp.toxicity_prob(x), cp.toxicity_prob(x + 1.0));
            // steep curves saturate to 1.0 in f64
            prop_assert!(hi > lo || (hi == lo && lo == 1.0));
            let cp_hi = NaturalParams::new(rho, eta + 4.0, P, &space).unwrap().to_canonical(&space).unwrap();
            prop_assert!(cp_hi.toxicity_prob(x) <= cp.toxicity_prob(x));
        }

        #[test]
        fn fisher_info_is_psd_and_peaks_at_center(alpha in -20.0f64..5.0, beta in 1e-4f64..0.2, x in 0.0f64..500.0) {
            let cp = CanonicalParams::new(alpha, beta).unwrap();
            prop_assert!(cp.fisher_info(x).is_psd(1e-12));
            let center = -alpha / beta;
            prop_assert!(cp.fisher_weight(center) >= cp.fisher_weight(x));
        }
    }
}
