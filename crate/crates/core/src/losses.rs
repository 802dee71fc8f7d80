//! Loss functions `l(theta, x)` and design-criterion losses `l(theta, x; xi)`.

use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::model::{logit, CanonicalParams, DoseResponse, DoseSpace, NaturalParams, SymMatrix2};
use crate::posterior::PosteriorView;

/// Determinant floor below which an information matrix is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// Optimality criterion applied to an information matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Criterion {
    /// `-log det M`
    D,
    /// `c' M^{-1} c`. Without an explicit vector, `c` is the gradient of the
    /// MTD with respect to `(alpha, beta)` at the posterior mean.
    C {
        #[serde(default)]
        c: Option<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    SquaredError,
    /// Asymmetric absolute loss with feasibility bound `omega`.
    Ewoc { omega: f64 },
    /// Loss on the probability scale with weight `gamma`.
    Inverted { gamma: f64 },
    DesignCriterion { criterion: Criterion },
}

fn check_half_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 0.5 {
        Ok(())
    } else {
        Err(DoseError::invalid(name, format!("must satisfy 0 < {name} < 1/2, got {v}")))
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Ewoc { omega } => check_half_open("omega", omega),
            LossSpec::Inverted { gamma } => check_half_open("gamma", gamma),
            LossSpec::SquaredError => Ok(()),
            LossSpec::DesignCriterion { criterion } => match criterion {
                Criterion::C { c: Some(c) } if !(c[0].is_finite() && c[1].is_finite()) => {
                    Err(DoseError::invalid("c", "entries must be finite"))
                }
                _ => Ok(()),
            },
        }
    }

    /// True for losses that depend on the parameters only through the MTD.
    pub fn depends_on_eta_only(&self) -> bool {
        matches!(self, LossSpec::SquaredError | LossSpec::Ewoc { .. })
    }
}

#[inline]
pub fn ewoc_loss(eta: f64, x: f64, omega: f64) -> f64 {
    if x <= eta {
        omega * (eta - x)
    } else {
        (1.0 - omega) * (x - eta)
    }
}

/// Inverted loss expressed through the toxicity probability `f = F(x)`;
/// `x <= eta` exactly when `f <= p`.
#[inline]
pub fn inverted_loss(f: f64, p: f64, gamma: f64) -> f64 {
    (gamma * (p - f)).max((1.0 - gamma) * (f - p))
}

/// Pointwise loss. Design-criterion losses need a design measure and are
/// rejected here (see [`design_loss`]).
pub fn eval_loss(spec: &LossSpec, np: &NaturalParams, x: f64, space: &DoseSpace) -> Result<f64> {
    if !space.contains(x) {
        return Err(DoseError::invalid("x", format!("{x} outside the dose space")));
    }
    match *spec {
        LossSpec::SquaredError => Ok((np.eta - x) * (np.eta - x)),
        LossSpec::Ewoc { omega } => Ok(ewoc_loss(np.eta, x, omega)),
        LossSpec::Inverted { gamma } => {
            let f = np.to_canonical(space)?.toxicity_prob(x);
            Ok(inverted_loss(f, np.target_p, gamma))
        }
        LossSpec::DesignCriterion { .. } => Err(DoseError::invalid(
            "loss",
            "design-criterion losses require a design measure",
        )),
    }
}

/// Empirical design measure: the multiset of doses assigned so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignMeasure {
    doses: Vec<f64>,
}

impl DesignMeasure {
    pub fn new(doses: Vec<f64>) -> Self {
        Self { doses }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Number of doses counted with multiplicity.
    pub fn count(&self) -> usize {
        self.doses.len()
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn push(&mut self, x: f64) {
        self.doses.push(x);
    }

    /// The measure with one more point at `x`.
    pub fn augmented(&self, x: f64) -> Self {
        let mut doses = self.doses.clone();
        doses.push(x);
        Self { doses }
    }

    pub fn distinct_count(&self) -> usize {
        let mut d = self.doses.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d.len()
    }

    /// Unnormalized information `sum_i I(theta, x_i)`.
    pub fn information_sum(&self, params: &CanonicalParams) -> SymMatrix2 {
        self.doses
            .iter()
            .fold(SymMatrix2::default(), |acc, &x| acc.add(&params.fisher_info(x)))
    }
}

/// `M(theta, xi)`: multiplicity-weighted average Fisher information.
pub fn info_matrix(xi: &DesignMeasure, params: &CanonicalParams) -> Result<SymMatrix2> {
    if xi.count() == 0 {
        return Err(DoseError::invalid("xi", "design measure is empty"));
    }
    Ok(xi.information_sum(params).scale(1.0 / xi.count() as f64))
}

pub fn criterion(psi: &Criterion, m: &SymMatrix2) -> Result<f64> {
    let det = m.det();
    if !(det > SINGULAR_DET) {
        return Err(DoseError::SingularInformation { det });
    }
    Ok(match psi {
        Criterion::D => -det.ln(),
        Criterion::C { c } => {
            let c = c.ok_or_else(|| DoseError::invalid("c", "c-vector not resolved"))?;
            m.inverse_quadratic_form(c, det)
        }
    })
}

/// Criterion value with the determinant floored at [`SINGULAR_DET`]; used
/// inside posterior expectations where a few near-singular atoms must not
/// make the whole expectation infinite.
pub fn criterion_floored(psi: &Criterion, m: &SymMatrix2, c: [f64; 2]) -> f64 {
    let det = m.det().max(SINGULAR_DET);
    match psi {
        Criterion::D => -det.ln(),
        Criterion::C { .. } => m.inverse_quadratic_form(c, det).max(0.0),
    }
}

/// `Psi(M(theta, xi_{+x}))` with `xi_{+x} = (|xi| xi + delta_x) / (|xi| + 1)`.
pub fn design_loss(
    psi: &Criterion,
    np: &NaturalParams,
    x: f64,
    xi: &DesignMeasure,
    space: &DoseSpace,
) -> Result<f64> {
    if !space.contains(x) {
        return Err(DoseError::invalid("x", format!("{x} outside the dose space")));
    }
    let cp = np.to_canonical(space)?;
    criterion(psi, &info_matrix(&xi.augmented(x), &cp)?)
}

/// Default c-vector: gradient of `eta = (logit p - alpha) / beta` at the
/// posterior mean of `(alpha, beta)`.
pub fn default_c_vector<V: PosteriorView>(post: &V) -> [f64; 2] {
    let atoms = post.atoms();
    let (mut a, mut b) = (0.0, 0.0);
    for (j, w) in post.weights().iter().enumerate() {
        a += w * atoms.alpha[j];
        b += w * atoms.beta[j];
    }
    let eta = (logit(post.target_p()) - a) / b;
    [-1.0 / b, -eta / b]
}

/// Posterior expected loss `E[l(theta, x)]`.
pub fn expected_loss<V: PosteriorView>(post: &V, loss: &LossSpec, x: f64) -> Result<f64> {
    if !post.space().contains(x) {
        return Err(DoseError::invalid("x", format!("{x} outside the dose space")));
    }
    match *loss {
        LossSpec::Ewoc { omega } => Ok(post.eta_marginal().expected_ewoc_loss(x, omega)),
        LossSpec::SquaredError => Ok(post.eta_marginal().expected_squared_loss(x)),
        LossSpec::Inverted { gamma } => {
            let p = post.target_p();
            Ok(post.expectation(|a, j| inverted_loss(a.toxicity_prob(j, x), p, gamma)))
        }
        LossSpec::DesignCriterion { .. } => Err(DoseError::invalid(
            "loss",
            "use expected_design_loss for design criteria",
        )),
    }
}

/// Posterior expected design loss `E[Psi(M(theta, xi_{+x}))]` (determinant floored).
pub fn expected_design_loss<V: PosteriorView>(
    post: &V,
    psi: &Criterion,
    x: f64,
    xi: &DesignMeasure,
) -> Result<f64> {
    if !post.space().contains(x) {
        return Err(DoseError::invalid("x", format!("{x} outside the dose space")));
    }
    let c = match psi {
        Criterion::C { c: Some(c) } => *c,
        Criterion::C { c: None } => default_c_vector(post),
        Criterion::D => [0.0, 0.0],
    };
    let scale = 1.0 / (xi.count() + 1) as f64;
    Ok(post.expectation(|a, j| {
        let cp = CanonicalParams {
            alpha: a.alpha[j],
            beta: a.beta[j],
        };
        let m = xi.information_sum(&cp).add(&cp.fisher_info(x)).scale(scale);
        criterion_floored(psi, &m, c)
    }))
}
