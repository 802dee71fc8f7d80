//! Posterior inference for `(rho, eta)` given a dose/outcome history.
//!
//! Two representations are provided, both exposed through [`PosteriorView`] as
//! a finite set of weighted atoms in parameter space:
//!
//! - [`GridPosterior`]: tensor-product Gauss-Legendre quadrature on
//!   `[0, p] x [x_min, x_max]`, with log-space weight accumulation. Its
//!   eta-marginal interpolates the node densities linearly, so CDFs and
//!   quantiles are continuous in dose.
//! - [`WeightedSample`]: self-normalized importance sampling with the uniform
//!   prior on the clipped support as proposal.

use std::fmt;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::model::{
    log_logistic, logistic, to_canonical, DoseSpace, NaturalParams, ETA_EPS_FRACTION, RHO_EPS,
};

/// Minimum quadrature resolution along either axis.
pub const MIN_RESOLUTION: usize = 32;
pub const DEFAULT_RESOLUTION: (usize, usize) = (128, 128);
pub const DEFAULT_IMPORTANCE_SAMPLES: usize = 20_000;
pub const MIN_IMPORTANCE_SAMPLES: usize = 1_000;

type DensityFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Prior density on `(rho, eta)` over `[0, p] x [x_min, x_max]`.
#[derive(Clone)]
pub enum Prior {
    Uniform,
    Custom(Arc<DensityFn>),
}

impl fmt::Debug for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Uniform => f.write_str("Uniform"),
            Prior::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Prior {
    /// Wraps a user density after checking it is nonnegative and integrates to
    /// one over the support (64x64 Gauss-Legendre, tolerance 1e-3).
    pub fn custom<F>(density: F, p: f64, space: &DoseSpace) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let (rn, rw) = gauss_legendre(64, 0.0, p);
        let (en, ew) = gauss_legendre(64, space.x_min(), space.x_max());
        let mut total = 0.0;
        for (eta, we) in en.iter().zip(&ew) {
            for (rho, wr) in rn.iter().zip(&rw) {
                let d = density(*rho, *eta);
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(DoseError::invalid(
                        "prior",
                        format!("density must be finite and nonnegative, got {d} at ({rho}, {eta})"),
                    ));
                }
                total += d * wr * we;
            }
        }
        if (total - 1.0).abs() > 1e-3 {
            return Err(DoseError::invalid(
                "prior",
                format!("density integrates to {total}, expected 1"),
            ));
        }
        Ok(Prior::Custom(Arc::new(density)))
    }

    pub fn density(&self, rho: f64, eta: f64, p: f64, space: &DoseSpace) -> f64 {
        let inside = rho >= 0.0 && rho <= p && space.contains(eta);
        if !inside {
            return 0.0;
        }
        match self {
            Prior::Uniform => 1.0 / (p * space.width()),
            Prior::Custom(f) => f(rho, eta),
        }
    }

    /// Draws `(rho, eta)` uniformly over the clipped support.
    pub fn sample_proposal<R: Rng + ?Sized>(rng: &mut R, p: f64, space: &DoseSpace) -> (f64, f64) {
        let (r_lo, r_hi) = (RHO_EPS, p - RHO_EPS);
        let (e_lo, e_hi) = (space.eta_floor(), space.x_max());
        let rho = r_lo + (r_hi - r_lo) * rng.gen::<f64>();
        let eta = e_lo + (e_hi - e_lo) * rng.gen::<f64>();
        (rho, eta)
    }

    /// Density of [`Prior::sample_proposal`].
    pub fn proposal_density(p: f64, space: &DoseSpace) -> f64 {
        1.0 / ((p - 2.0 * RHO_EPS) * space.width() * (1.0 - ETA_EPS_FRACTION))
    }
}

/// One dosed patient: the dose actually given and whether a DLT occurred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dose: f64,
    pub dlt: bool,
}

impl Observation {
    pub fn new(dose: f64, dlt: bool) -> Self {
        Self { dose, dlt }
    }
}

/// Ordered dose/outcome history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub observations: Vec<Observation>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(f64, bool)]) -> Self {
        Self {
            observations: pairs.iter().map(|&(d, y)| Observation::new(d, y)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn push(&mut self, obs: Observation) {
        self.observations.push(obs);
    }

    pub fn last(&self) -> Option<&Observation> {
        self.observations.last()
    }

    pub fn dlt_count(&self) -> usize {
        self.observations.iter().filter(|o| o.dlt).count()
    }

    pub fn validate(&self, space: &DoseSpace) -> Result<()> {
        for (i, o) in self.observations.iter().enumerate() {
            if !space.contains(o.dose) {
                return Err(DoseError::invalid(
                    format!("history[{i}].dose"),
                    format!(
                        "{} outside [{}, {}]",
                        o.dose,
                        space.x_min(),
                        space.x_max()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[inline]
fn obs_log_lik(alpha: f64, beta: f64, obs: &Observation) -> f64 {
    let z = alpha + beta * obs.dose;
    if obs.dlt {
        log_logistic(z)
    } else {
        log_logistic(-z)
    }
}

/// Bernoulli log-likelihood of the history under `np`.
pub fn log_likelihood(h: &History, np: &NaturalParams, space: &DoseSpace) -> Result<f64> {
    let cp = to_canonical(np, space)?;
    Ok(h.observations
        .iter()
        .map(|o| obs_log_lik(cp.alpha, cp.beta, o))
        .sum())
}

/// Gauss-Legendre nodes and weights on `[a, b]`, nodes ascending.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("n > 0"));
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    pairs
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .unzip()
}

/// Parameter-space support points in struct-of-arrays layout.
#[derive(Debug, Clone, Default)]
pub struct Atoms {
    pub rho: Vec<f64>,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Atoms {
    fn with_capacity(n: usize) -> Self {
        Self {
            rho: Vec::with_capacity(n),
            eta: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            beta: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, np: &NaturalParams, space: &DoseSpace) -> Result<()> {
        let cp = to_canonical(np, space)?;
        self.rho.push(np.rho);
        self.eta.push(np.eta);
        self.alpha.push(cp.alpha);
        self.beta.push(cp.beta);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    #[inline]
    pub fn toxicity_prob(&self, j: usize, x: f64) -> f64 {
        logistic(self.alpha[j] + self.beta[j] * x)
    }
}

/// Fixed tensor-product quadrature rule with the log prior folded into the
/// per-node base weights. Atoms are stored eta-major: `j = k * n_rho + i`.
#[derive(Debug)]
pub struct QuadratureGrid {
    space: DoseSpace,
    p: f64,
    n_rho: usize,
    n_eta: usize,
    rho_weights: Vec<f64>,
    eta_nodes: Vec<f64>,
    eta_weights: Vec<f64>,
    atoms: Atoms,
    log_base: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(prior: &Prior, p: f64, space: DoseSpace, resolution: (usize, usize)) -> Result<Self> {
        let (n_rho, n_eta) = resolution;
        if n_rho < MIN_RESOLUTION || n_eta < MIN_RESOLUTION {
            return Err(DoseError::invalid(
                "resolution",
                format!("must be at least ({MIN_RESOLUTION}, {MIN_RESOLUTION}), got ({n_rho}, {n_eta})"),
            ));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(DoseError::invalid("target", "must lie in (0, 1)"));
        }
        let (rho_nodes, rho_weights) = gauss_legendre(n_rho, 0.0, p);
        let (eta_nodes, eta_weights) = gauss_legendre(n_eta, space.x_min(), space.x_max());
        let mut atoms = Atoms::with_capacity(n_rho * n_eta);
        let mut log_base = Vec::with_capacity(n_rho * n_eta);
        for (&eta, &we) in eta_nodes.iter().zip(&eta_weights) {
            for (&rho, &wr) in rho_nodes.iter().zip(&rho_weights) {
                let np = NaturalParams {
                    rho,
                    eta,
                    target_p: p,
                };
                atoms.push(&np, &space)?;
                log_base.push((prior.density(rho, eta, p, &space) * wr * we).ln());
            }
        }
        Ok(Self {
            space,
            p,
            n_rho,
            n_eta,
            rho_weights,
            eta_nodes,
            eta_weights,
            atoms,
            log_base,
        })
    }

    pub fn space(&self) -> &DoseSpace {
        &self.space
    }

    pub fn target_p(&self) -> f64 {
        self.p
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.n_rho, self.n_eta)
    }

    pub fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    pub fn eta_nodes(&self) -> &[f64] {
        &self.eta_nodes
    }

    pub fn eta_weights(&self) -> &[f64] {
        &self.eta_weights
    }

    /// Smooth eta-marginal from unnormalized per-eta-node masses.
    pub fn marginal(&self, masses: &[f64]) -> SmoothMarginal {
        SmoothMarginal::from_masses(self.space, &self.eta_nodes, &self.eta_weights, masses)
    }

    /// Sums atom weights over rho, giving the mass at each eta node.
    pub fn eta_masses(&self, weights: &[f64]) -> Vec<f64> {
        weights
            .chunks_exact(self.n_rho)
            .map(|row| row.iter().sum())
            .collect()
    }
}

/// Quadrature representation of the posterior of `(rho, eta)`.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    grid: Arc<QuadratureGrid>,
    history: History,
    log_unnorm: Vec<f64>,
    weights: Vec<f64>,
    log_norm: f64,
}

impl GridPosterior {
    /// The prior restricted to the quadrature grid.
    pub fn prior(grid: Arc<QuadratureGrid>) -> Self {
        let log_unnorm = grid.log_base.clone();
        let mut post = Self {
            grid,
            history: History::new(),
            log_unnorm,
            weights: Vec::new(),
            log_norm: 0.0,
        };
        post.normalize()
            .expect("prior restricted to the grid has positive mass");
        post
    }

    pub fn build(grid: Arc<QuadratureGrid>, history: &History) -> Result<Self> {
        history.validate(grid.space())?;
        let mut post = Self::prior(grid);
        for obs in &history.observations {
            post.absorb(obs);
        }
        post.history = history.clone();
        post.normalize()?;
        Ok(post)
    }

    /// Appends one observation in place.
    pub fn update(&mut self, obs: Observation) -> Result<()> {
        if !self.grid.space.contains(obs.dose) {
            return Err(DoseError::invalid(
                "dose",
                format!("{} outside the dose space", obs.dose),
            ));
        }
        self.absorb(&obs);
        self.history.push(obs);
        self.normalize()
    }

    pub fn updated(&self, obs: Observation) -> Result<Self> {
        let mut next = self.clone();
        next.update(obs)?;
        Ok(next)
    }

    fn absorb(&mut self, obs: &Observation) {
        let atoms = &self.grid.atoms;
        for (j, lw) in self.log_unnorm.iter_mut().enumerate() {
            *lw += obs_log_lik(atoms.alpha[j], atoms.beta[j], obs);
        }
    }

    fn normalize(&mut self) -> Result<()> {
        let max = self
            .log_unnorm
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DoseError::DegeneratePosterior(format!(
                "maximum log weight is {max}"
            )));
        }
        self.weights.clear();
        self.weights
            .extend(self.log_unnorm.iter().map(|lw| (lw - max).exp()));
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(DoseError::DegeneratePosterior(format!(
                "normalizing sum is {total}"
            )));
        }
        let inv = 1.0 / total;
        self.weights.iter_mut().for_each(|w| *w *= inv);
        self.log_norm = max + total.ln();
        Ok(())
    }

    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// `log(1/C)`: log of the integral of likelihood times prior.
    pub fn log_evidence(&self) -> f64 {
        self.log_norm
    }

    /// The normalizing constant `C` of the posterior density.
    pub fn norm_const(&self) -> f64 {
        (-self.log_norm).exp()
    }

    /// Posterior density of `(rho, eta)` at grid node `(i_rho, k_eta)`.
    pub fn density_at_node(&self, i_rho: usize, k_eta: usize) -> f64 {
        let j = k_eta * self.grid.n_rho + i_rho;
        self.weights[j] / (self.grid.rho_weights[i_rho] * self.grid.eta_weights[k_eta])
    }

    pub fn smooth_eta_marginal(&self) -> SmoothMarginal {
        self.grid.marginal(&self.grid.eta_masses(&self.weights))
    }
}

/// Self-normalized importance sample from the posterior. Particles are sorted
/// by eta.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    space: DoseSpace,
    p: f64,
    atoms: Atoms,
    weights: Vec<f64>,
    ess: f64,
    draws: usize,
}

impl WeightedSample {
    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn is_degenerate(&self) -> bool {
        self.ess < 0.01 * self.draws as f64
    }

    /// Self-normalized MC standard error of `E[f]`: `sqrt(sum w_b^2 (f_b - mean)^2)`.
    pub fn standard_error<F: Fn(&Atoms, usize) -> f64>(&self, f: F) -> f64 {
        let mean: f64 = (0..self.atoms.len())
            .map(|b| self.weights[b] * f(&self.atoms, b))
            .sum();
        (0..self.atoms.len())
            .map(|b| {
                let d = f(&self.atoms, b) - mean;
                self.weights[b] * self.weights[b] * d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Reweights this sample by one more observation (the particles are kept).
    pub fn updated(&self, obs: Observation) -> Self {
        let mut weights: Vec<f64> = (0..self.atoms.len())
            .map(|b| {
                self.weights[b] * obs_log_lik(self.atoms.alpha[b], self.atoms.beta[b], &obs).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Self {
            space: self.space,
            p: self.p,
            atoms: self.atoms.clone(),
            weights,
            ess,
            draws: self.draws,
        }
    }
}

/// Draws `draws` particles from the uniform proposal on the clipped support and
/// weights them by likelihood x prior / proposal.
pub fn draw_importance_sample<R: Rng + ?Sized>(
    prior: &Prior,
    space: &DoseSpace,
    p: f64,
    history: &History,
    draws: usize,
    rng: &mut R,
) -> Result<WeightedSample> {
    if draws < MIN_IMPORTANCE_SAMPLES {
        return Err(DoseError::invalid(
            "importance_samples",
            format!("must be at least {MIN_IMPORTANCE_SAMPLES}, got {draws}"),
        ));
    }
    history.validate(space)?;
    let mut particles: Vec<(f64, f64)> = (0..draws)
        .map(|_| Prior::sample_proposal(rng, p, space))
        .collect();
    particles.sort_by(|a, b| a.1.total_cmp(&b.1));

    let log_q = Prior::proposal_density(p, space).ln();
    let mut atoms = Atoms::with_capacity(draws);
    let mut log_w = Vec::with_capacity(draws);
    for &(rho, eta) in &particles {
        let np = NaturalParams {
            rho,
            eta,
            target_p: p,
        };
        atoms.push(&np, space)?;
        let j = atoms.len() - 1;
        let ll: f64 = history
            .observations
            .iter()
            .map(|o| obs_log_lik(atoms.alpha[j], atoms.beta[j], o))
            .sum();
        let lp = match prior {
            Prior::Uniform => -log_q,
            Prior::Custom(_) => prior.density(rho, eta, p, space).ln() - log_q,
        };
        log_w.push(ll + lp);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DoseError::DegeneratePosterior(
            "all importance weights vanish".into(),
        ));
    }
    let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let sample = WeightedSample {
        space: *space,
        p,
        atoms,
        weights,
        ess,
        draws,
    };
    if sample.is_degenerate() {
        log::warn!(
            "importance sample degenerate: ess {:.1} < 1% of {} draws",
            sample.ess,
            draws
        );
    }
    Ok(sample)
}

/// Weighted-atom view shared by the quadrature and importance-sampling
/// representations.
pub trait PosteriorView: Send + Sync {
    fn space(&self) -> &DoseSpace;
    fn target_p(&self) -> f64;
    fn atoms(&self) -> &Atoms;
    /// Normalized posterior weights, aligned with [`PosteriorView::atoms`].
    fn weights(&self) -> &[f64];
    /// Atoms sharing an eta value form one group; the eta-marginal is built
    /// from per-group masses.
    fn n_groups(&self) -> usize;
    fn group_of(&self, j: usize) -> usize;
    /// Marginal of eta from unnormalized per-group masses.
    fn marginal_from_group_masses(&self, masses: &[f64]) -> EtaMarginal;

    /// Marginal of eta under an arbitrary (unnormalized) reweighting of the atoms.
    fn eta_marginal_with(&self, weights: &[f64]) -> EtaMarginal {
        let mut masses = vec![0.0; self.n_groups()];
        for (j, w) in weights.iter().enumerate() {
            masses[self.group_of(j)] += w;
        }
        self.marginal_from_group_masses(&masses)
    }

    fn eta_marginal(&self) -> EtaMarginal {
        self.eta_marginal_with(self.weights())
    }

    fn mean_eta(&self) -> f64 {
        self.atoms()
            .eta
            .iter()
            .zip(self.weights())
            .map(|(e, w)| e * w)
            .sum()
    }

    fn quantile_eta(&self, omega: f64) -> f64 {
        self.eta_marginal().quantile(omega)
    }

    /// `P(y = 1 | x) = E[F(x)]`.
    fn predictive_dlt_prob(&self, x: f64) -> f64 {
        let atoms = self.atoms();
        self.weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * atoms.toxicity_prob(j, x))
            .sum()
    }

    /// Weighted mean of an arbitrary function of the atom index.
    fn expectation<F: Fn(&Atoms, usize) -> f64>(&self, f: F) -> f64
    where
        Self: Sized,
    {
        let atoms = self.atoms();
        self.weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * f(atoms, j))
            .sum()
    }
}

impl PosteriorView for GridPosterior {
    fn space(&self) -> &DoseSpace {
        &self.grid.space
    }

    fn target_p(&self) -> f64 {
        self.grid.p
    }

    fn atoms(&self) -> &Atoms {
        &self.grid.atoms
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn n_groups(&self) -> usize {
        self.grid.n_eta
    }

    #[inline]
    fn group_of(&self, j: usize) -> usize {
        j / self.grid.n_rho
    }

    fn marginal_from_group_masses(&self, masses: &[f64]) -> EtaMarginal {
        EtaMarginal::Smooth(SmoothMarginal::from_masses(
            self.grid.space,
            &self.grid.eta_nodes,
            &self.grid.eta_weights,
            masses,
        ))
    }

    fn eta_marginal_with(&self, weights: &[f64]) -> EtaMarginal {
        self.marginal_from_group_masses(&self.grid.eta_masses(weights))
    }
}

impl PosteriorView for WeightedSample {
    fn space(&self) -> &DoseSpace {
        &self.space
    }

    fn target_p(&self) -> f64 {
        self.p
    }

    fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn n_groups(&self) -> usize {
        self.atoms.len()
    }

    #[inline]
    fn group_of(&self, j: usize) -> usize {
        j
    }

    fn marginal_from_group_masses(&self, masses: &[f64]) -> EtaMarginal {
        let total: f64 = masses.iter().sum();
        EtaMarginal::Discrete(DiscreteMarginal {
            values: self.atoms.eta.clone(),
            weights: masses.iter().map(|m| m / total).collect(),
        })
    }

    fn eta_marginal_with(&self, weights: &[f64]) -> EtaMarginal {
        self.marginal_from_group_masses(weights)
    }
}

/// Marginal posterior distribution of the MTD.
#[derive(Debug, Clone)]
pub enum EtaMarginal {
    Smooth(SmoothMarginal),
    Discrete(DiscreteMarginal),
}

impl EtaMarginal {
    pub fn mean(&self) -> f64 {
        match self {
            EtaMarginal::Smooth(m) => m.mean(),
            EtaMarginal::Discrete(m) => m.mean(),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            EtaMarginal::Smooth(m) => m.second_moment,
            EtaMarginal::Discrete(m) => m.values.iter().zip(&m.weights).map(|(v, w)| w * v * v).sum(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            EtaMarginal::Smooth(m) => m.cdf(x),
            EtaMarginal::Discrete(m) => m.cdf(x),
        }
    }

    /// Left-continuous generalized inverse: the smallest `q` with `CDF(q) >= omega`.
    pub fn quantile(&self, omega: f64) -> f64 {
        match self {
            EtaMarginal::Smooth(m) => m.quantile(omega),
            EtaMarginal::Discrete(m) => m.quantile(omega),
        }
    }

    /// `E[omega (eta - x)^+ + (1 - omega) (x - eta)^+]`; minimized at the
    /// omega-quantile.
    pub fn expected_ewoc_loss(&self, x: f64, omega: f64) -> f64 {
        match self {
            EtaMarginal::Smooth(m) => m.expected_ewoc_loss(x, omega),
            EtaMarginal::Discrete(m) => m.expected_ewoc_loss(x, omega),
        }
    }

    /// `E[(eta - x)^2]`; minimized at the mean.
    pub fn expected_squared_loss(&self, x: f64) -> f64 {
        let mean = self.mean();
        (self.second_moment() - mean * mean).max(0.0) + (mean - x) * (mean - x)
    }
}

/// Eta-marginal from quadrature masses. Moments use the Gauss-Legendre masses
/// directly; the CDF integrates the linear interpolant of the node densities,
/// extended flat to the ends of the dose space.
#[derive(Debug, Clone)]
pub struct SmoothMarginal {
    knots: Vec<f64>,
    density: Vec<f64>,
    cdf: Vec<f64>,
    icdf: Vec<f64>,
    mean: f64,
    second_moment: f64,
}

impl SmoothMarginal {
    pub fn from_masses(space: DoseSpace, nodes: &[f64], node_weights: &[f64], masses: &[f64]) -> Self {
        let total_mass: f64 = masses.iter().sum();
        let inv_mass = if total_mass > 0.0 { 1.0 / total_mass } else { 0.0 };
        let mean = nodes.iter().zip(masses).map(|(e, m)| e * m).sum::<f64>() * inv_mass;
        let second_moment = nodes.iter().zip(masses).map(|(e, m)| e * e * m).sum::<f64>() * inv_mass;

        let k = nodes.len();
        let mut knots = Vec::with_capacity(k + 2);
        let mut density = Vec::with_capacity(k + 2);
        knots.push(space.x_min());
        density.push(masses[0] / node_weights[0]);
        for i in 0..k {
            knots.push(nodes[i]);
            density.push(masses[i] / node_weights[i]);
        }
        knots.push(space.x_max());
        density.push(masses[k - 1] / node_weights[k - 1]);

        let mut cdf = vec![0.0; k + 2];
        for s in 1..k + 2 {
            let h = knots[s] - knots[s - 1];
            cdf[s] = cdf[s - 1] + 0.5 * h * (density[s] + density[s - 1]);
        }
        let total = cdf[k + 1];
        if total > 0.0 {
            density.iter_mut().for_each(|d| *d /= total);
            cdf.iter_mut().for_each(|c| *c /= total);
        }
        cdf[k + 1] = 1.0;
        let mut icdf = vec![0.0; k + 2];
        for s in 1..k + 2 {
            let h = knots[s] - knots[s - 1];
            let slope = (density[s] - density[s - 1]) / h;
            icdf[s] = icdf[s - 1] + cdf[s - 1] * h + density[s - 1] * h * h / 2.0 + slope * h * h * h / 6.0;
        }
        Self {
            knots,
            density,
            cdf,
            icdf,
            mean,
            second_moment,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn support(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Segment `s` such that `knots[s] <= x < knots[s + 1]`.
    fn segment(&self, x: f64) -> usize {
        let idx = self.knots.partition_point(|&t| t <= x);
        idx.saturating_sub(1).min(self.knots.len() - 2)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x < a || x > b {
            return 0.0;
        }
        let s = self.segment(x);
        let h = self.knots[s + 1] - self.knots[s];
        let u = (x - self.knots[s]) / h;
        self.density[s] * (1.0 - u) + self.density[s + 1] * u
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        let s = self.segment(x);
        let h = self.knots[s + 1] - self.knots[s];
        let slope = (self.density[s + 1] - self.density[s]) / h;
        let u = x - self.knots[s];
        (self.cdf[s] + self.density[s] * u + slope * u * u / 2.0).min(1.0)
    }

    /// `int_{x_min}^{x} CDF(t) dt`.
    fn integrated_cdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return self.icdf[self.icdf.len() - 1] + (x - b);
        }
        let s = self.segment(x);
        let h = self.knots[s + 1] - self.knots[s];
        let slope = (self.density[s + 1] - self.density[s]) / h;
        let u = x - self.knots[s];
        self.icdf[s] + self.cdf[s] * u + self.density[s] * u * u / 2.0 + slope * u * u * u / 6.0
    }

    pub fn quantile(&self, omega: f64) -> f64 {
        let (a, b) = self.support();
        if omega <= 0.0 {
            return a;
        }
        if omega >= 1.0 {
            return b;
        }
        let j = self.cdf.partition_point(|&c| c < omega);
        if j == 0 {
            return a;
        }
        if j >= self.cdf.len() {
            return b;
        }
        let s = j - 1;
        let h = self.knots[j] - self.knots[s];
        let d0 = self.density[s];
        let slope = (self.density[j] - d0) / h;
        let r = omega - self.cdf[s];
        let disc = (d0 * d0 + 2.0 * slope * r).max(0.0);
        let denom = d0 + disc.sqrt();
        let u = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        self.knots[s] + u.clamp(0.0, h)
    }

    pub fn expected_ewoc_loss(&self, x: f64, omega: f64) -> f64 {
        let (_, b) = self.support();
        let smooth_mean = b - self.icdf[self.icdf.len() - 1];
        omega * (smooth_mean - x) + self.integrated_cdf(x)
    }
}

/// Eta-marginal of a weighted particle set (values ascending).
#[derive(Debug, Clone)]
pub struct DiscreteMarginal {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn new(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let (values, weights) = pairs.into_iter().map(|(v, w)| (v, w / total)).unzip();
        Self { values, weights }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.values.partition_point(|&v| v <= x);
        self.weights[..n].iter().sum()
    }

    pub fn quantile(&self, omega: f64) -> f64 {
        let mut cum = 0.0;
        for (v, w) in self.values.iter().zip(&self.weights) {
            cum += w;
            if cum >= omega {
                return *v;
            }
        }
        *self.values.last().expect("non-empty marginal")
    }

    pub fn expected_ewoc_loss(&self, x: f64, omega: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(&eta, w)| {
                let l = if x <= eta {
                    omega * (eta - x)
                } else {
                    (1.0 - omega) * (x - eta)
                };
                w * l
            })
            .sum()
    }
}

/// Convenience wrapper building a fresh grid for one history.
pub fn build_grid_posterior(
    prior: &Prior,
    p: f64,
    space: DoseSpace,
    history: &History,
    resolution: (usize, usize),
) -> Result<GridPosterior> {
    let grid = Arc::new(QuadratureGrid::new(prior, p, space, resolution)?);
    GridPosterior::build(grid, history)
}
