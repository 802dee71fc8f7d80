//! Dose-selection rules: each maps the current posterior (plus the trial state)
//! to the dose for the next patient.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DoseError, Result};
use crate::losses::{criterion_floored, default_c_vector, ewoc_loss, inverted_loss, Criterion, DesignMeasure, LossSpec};
use crate::model::{logistic, logit, DoseSpace, SymMatrix2};
use crate::posterior::{
    draw_importance_sample, EtaMarginal, GridPosterior, History, Observation, PosteriorView, Prior,
    QuadratureGrid, SmoothMarginal, WeightedSample, MIN_IMPORTANCE_SAMPLES,
};

/// 0.5 mg/m^2 steps on [140, 425].
pub const DEFAULT_DOSE_GRID_POINTS: usize = 571;

/// Once the updated history would exceed this length the lookahead's inner
/// dose comes from the importance sample instead of the quadrature grid.
pub const GRID_INNER_MAX_HISTORY: usize = 30;

/// Atoms lighter than this fraction of the heaviest are skipped in searches.
const ACTIVE_FRACTION: f64 = 1e-13;

const GOLDEN_TOL: f64 = 1e-3;

/// Coarse stride for the inner inverted-loss search of the lookahead.
const INNER_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LookaheadBackend {
    #[default]
    Quadrature,
    ImportanceSampling { draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    /// Posterior mean of the MTD.
    Crm,
    /// Posterior `omega`-quantile of the MTD.
    Ewoc { omega: f64 },
    /// EWOC with the bound escalated linearly from `omega_start` (patient 1)
    /// to `omega_end` (patient `n`).
    EwocStar {
        omega_start: f64,
        omega_end: f64,
        n: usize,
    },
    /// Grid minimizer of the expected inverted loss.
    Ivoc { gamma: f64 },
    /// Minimizes the expected design criterion subject to
    /// `P(eta_q < x) <= omega`, where `eta_q = F^{-1}(q)`. The first
    /// `initial_k` patients are dosed by EWOC.
    ConstrainedOptimal {
        criterion: Criterion,
        q: f64,
        omega: f64,
        initial_k: usize,
    },
    /// One-step lookahead: `E h(eta, x) + lambda E[E h(eta', x') | x, y]`.
    Lookahead {
        h: LossSpec,
        lambda: f64,
        #[serde(default)]
        backend: LookaheadBackend,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignPolicy {
    pub rule: Rule,
    #[serde(default)]
    pub enforce_coherence: bool,
}

impl DesignPolicy {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            enforce_coherence: false,
        }
    }

    pub fn coherent(rule: Rule) -> Self {
        Self {
            rule,
            enforce_coherence: true,
        }
    }

    pub fn validate(&self, p: f64) -> Result<()> {
        self.rule.validate(p)
    }

    /// Whether the rule draws random numbers.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self.rule,
            Rule::Lookahead {
                backend: LookaheadBackend::ImportanceSampling { .. },
                lambda,
                ..
            } if lambda > 0.0
        )
    }
}

fn check_bound(field: &str, omega: f64) -> Result<()> {
    if omega > 0.0 && omega <= 0.5 {
        Ok(())
    } else {
        Err(DoseError::invalid(field, format!("must satisfy 0 < {field} <= 1/2, got {omega}")))
    }
}

impl Rule {
    pub fn validate(&self, p: f64) -> Result<()> {
        match *self {
            Rule::Crm => Ok(()),
            Rule::Ewoc { omega } => check_bound("omega", omega),
            Rule::EwocStar {
                omega_start,
                omega_end,
                n,
            } => {
                check_bound("omega_start", omega_start)?;
                check_bound("omega_end", omega_end)?;
                if n == 0 {
                    return Err(DoseError::invalid("n", "must be at least 1"));
                }
                Ok(())
            }
            Rule::Ivoc { gamma } => LossSpec::Inverted { gamma }.validate(),
            Rule::ConstrainedOptimal {
                criterion,
                q,
                omega,
                initial_k,
            } => {
                if !(q >= p && q < 1.0) {
                    return Err(DoseError::invalid("q", format!("must lie in [p, 1), got {q}")));
                }
                if !(omega > 0.0 && omega <= 1.0) {
                    return Err(DoseError::invalid("omega", format!("must lie in (0, 1], got {omega}")));
                }
                if initial_k < 2 {
                    return Err(DoseError::invalid(
                        "initial_k",
                        "at least two initial patients are needed for a nonsingular information matrix",
                    ));
                }
                if let Criterion::C { c: Some(c) } = criterion {
                    if !c.iter().all(|v| v.is_finite()) || c == [0.0, 0.0] {
                        return Err(DoseError::invalid("c", "must be finite and nonzero"));
                    }
                }
                Ok(())
            }
            Rule::Lookahead { h, lambda, backend } => {
                if matches!(h, LossSpec::DesignCriterion { .. }) {
                    return Err(DoseError::invalid(
                        "h",
                        "lookahead needs a myopically minimizable loss (ewoc, inverted or squared_error)",
                    ));
                }
                h.validate()?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(DoseError::invalid("lambda", format!("must be finite and >= 0, got {lambda}")));
                }
                if let LookaheadBackend::ImportanceSampling { draws } = backend {
                    if draws < MIN_IMPORTANCE_SAMPLES {
                        return Err(DoseError::invalid(
                            "draws",
                            format!("must be at least {MIN_IMPORTANCE_SAMPLES}, got {draws}"),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

/// What a rule needs to know about the trial beyond the posterior.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignState {
    /// 1-based index of the patient about to be dosed.
    pub patient_index: usize,
    pub last: Option<Observation>,
    pub xi: DesignMeasure,
}

impl DesignState {
    pub fn initial() -> Self {
        Self {
            patient_index: 1,
            last: None,
            xi: DesignMeasure::empty(),
        }
    }

    pub fn from_history(history: &History) -> Self {
        Self {
            patient_index: history.len() + 1,
            last: history.last().copied(),
            xi: DesignMeasure::new(history.observations.iter().map(|o| o.dose).collect()),
        }
    }

    pub fn record(&mut self, obs: Observation) {
        self.patient_index += 1;
        self.last = Some(obs);
        self.xi.push(obs.dose);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseDecision {
    pub dose: f64,
    /// The rule's choice before any coherence restriction.
    pub unrestricted_dose: f64,
    pub coherence_restricted: bool,
    /// No dose satisfied the rule's own constraint.
    pub infeasible: bool,
    /// The importance sample behind this decision was degenerate.
    pub low_ess: bool,
}

impl DoseDecision {
    fn plain(dose: f64) -> Self {
        Self {
            dose,
            unrestricted_dose: dose,
            coherence_restricted: false,
            infeasible: false,
            low_ess: false,
        }
    }
}

/// `true` unless the move from `last` to `next` escalates after a DLT or
/// de-escalates after a non-DLT.
pub fn is_coherent(last: &Observation, next: f64) -> bool {
    if last.dlt {
        next <= last.dose
    } else {
        next >= last.dose
    }
}

/// Shared, read-only inputs for dose selection: the quadrature grid, the prior
/// (for importance sampling) and the dose grid used by searches.
pub struct DesignContext {
    grid: Arc<QuadratureGrid>,
    prior: Prior,
    doses: Vec<f64>,
    tox: OnceLock<Vec<f32>>,
}

impl fmt::Debug for DesignContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DesignContext")
            .field("resolution", &self.grid.resolution())
            .field("dose_points", &self.doses.len())
            .finish()
    }
}

impl DesignContext {
    pub fn new(grid: Arc<QuadratureGrid>, prior: Prior, dose_points: usize) -> Result<Self> {
        if dose_points < 2 {
            return Err(DoseError::invalid("dose_grid_points", "must be at least 2"));
        }
        let space = *grid.space();
        let step = space.width() / (dose_points - 1) as f64;
        let mut doses: Vec<f64> = (0..dose_points).map(|i| space.x_min() + i as f64 * step).collect();
        doses[dose_points - 1] = space.x_max();
        Ok(Self {
            grid,
            prior,
            doses,
            tox: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn space(&self) -> &DoseSpace {
        self.grid.space()
    }

    pub fn dose_grid(&self) -> &[f64] {
        &self.doses
    }

    /// `F_j(x_d)` for every grid dose and atom, dose-major, in single
    /// precision (the scans over it are memory bound). Built on first use.
    fn tox_table(&self) -> &[f32] {
        self.tox.get_or_init(|| {
            let atoms = self.grid.atoms();
            let mut table = Vec::with_capacity(self.doses.len() * atoms.len());
            for &x in &self.doses {
                table.extend((0..atoms.len()).map(|j| atoms.toxicity_prob(j, x) as f32));
            }
            table
        })
    }

    /// Toxicity probabilities of the active atoms at `point`: a table row for
    /// grid doses, otherwise computed into `buf`.
    fn tox<'b>(&'b self, active: &Active, point: Point, buf: &'b mut Vec<f32>) -> ToxView<'b> {
        let atoms = self.grid.atoms();
        match point {
            Point::Grid(d) => {
                let n = atoms.len();
                ToxView::Row(&self.tox_table()[d * n..(d + 1) * n])
            }
            Point::At(x) => {
                buf.clear();
                for seg in &active.segs {
                    buf.extend((seg.start..seg.start + seg.len).map(|j| atoms.toxicity_prob(j, x) as f32));
                }
                ToxView::Compact(buf)
            }
        }
    }

    fn point_dose(&self, point: Point) -> f64 {
        match point {
            Point::Grid(d) => self.doses[d],
            Point::At(x) => x,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Point {
    Grid(usize),
    At(f64),
}

/// Run of consecutive atoms (same eta node, contiguous rho range) kept by
/// [`Active`]. `offset` locates it in compact arrays.
#[derive(Debug, Clone, Copy)]
struct Segment {
    group: usize,
    start: usize,
    offset: usize,
    len: usize,
}

/// Grid atoms carrying non-negligible posterior mass, with renormalized
/// weights. Within each eta node the kept rho range is contiguous, so table
/// rows can be read as slices.
struct Active {
    segs: Vec<Segment>,
    w: Vec<f64>,
    /// Weight of each segment.
    seg_mass: Vec<f64>,
}

impl Active {
    fn new(post: &GridPosterior) -> Self {
        let weights = post.weights();
        let n_rho = post.grid().resolution().0;
        let max = weights.iter().copied().fold(0.0, f64::max);
        let cut = max * ACTIVE_FRACTION;
        let mut segs = Vec::new();
        let mut w = Vec::new();
        for (group, row) in weights.chunks_exact(n_rho).enumerate() {
            let Some(first) = row.iter().position(|&v| v > cut) else {
                continue;
            };
            let last = row.iter().rposition(|&v| v > cut).unwrap_or(first);
            segs.push(Segment {
                group,
                start: group * n_rho + first,
                offset: w.len(),
                len: last - first + 1,
            });
            w.extend_from_slice(&row[first..=last]);
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let seg_mass = segs.iter().map(|s| w[s.offset..s.offset + s.len].iter().sum()).collect();
        Self { segs, w, seg_mass }
    }

    fn len(&self) -> usize {
        self.w.len()
    }

    fn weights(&self, seg: &Segment) -> &[f64] {
        &self.w[seg.offset..seg.offset + seg.len]
    }
}

/// `sum_i w_i g(f_i)` with a fixed lane layout, so the result does not depend
/// on which instruction set runs it.
#[inline]
fn weighted_sum<G: Fn(f64) -> f64>(w: &[f64], f: &[f32], g: G) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { weighted_sum_avx2(w, f, g) };
        }
    }
    weighted_sum_lanes(w, f, g)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weighted_sum_avx2<G: Fn(f64) -> f64>(w: &[f64], f: &[f32], g: G) -> f64 {
    weighted_sum_lanes(w, f, g)
}

#[inline(always)]
fn weighted_sum_lanes<G: Fn(f64) -> f64>(w: &[f64], f: &[f32], g: G) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (wc, fc) = (w.chunks_exact(LANES), f.chunks_exact(LANES));
    let mut tail = 0.0;
    for (w, &f) in wc.remainder().iter().zip(fc.remainder()) {
        tail += w * g(f as f64);
    }
    for (wc, fc) in wc.zip(fc) {
        for k in 0..LANES {
            acc[k] += wc[k] * g(fc[k] as f64);
        }
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (half[0] + half[2]) + (half[1] + half[3]) + tail
}

enum ToxView<'b> {
    Row(&'b [f32]),
    Compact(&'b [f32]),
}

impl ToxView<'_> {
    #[inline]
    fn seg(&self, seg: &Segment) -> &[f32] {
        match self {
            ToxView::Row(r) => &r[seg.start..seg.start + seg.len],
            ToxView::Compact(c) => &c[seg.offset..seg.offset + seg.len],
        }
    }
}

/// Searches `[lo, hi]` over the grid doses inside it plus the endpoints. Ties
/// go to the lower dose. With `refine`, a golden-section search between the
/// neighbours of the best point replaces it if strictly better.
fn search<F: FnMut(Point) -> f64>(doses: &[f64], lo: f64, hi: f64, refine: bool, mut f: F) -> f64 {
    let first = doses.partition_point(|&d| d < lo);
    let end = doses.partition_point(|&d| d <= hi);
    let mut pts: Vec<(f64, Point)> = Vec::with_capacity(end.saturating_sub(first) + 2);
    if doses.get(first) != Some(&lo) {
        pts.push((lo, Point::At(lo)));
    }
    pts.extend((first..end).map(|d| (doses[d], Point::Grid(d))));
    if pts.last().map(|p| p.0) != Some(hi) {
        pts.push((hi, Point::At(hi)));
    }

    let vals: Vec<f64> = pts.iter().map(|&(_, p)| f(p)).collect();
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    if !refine || pts.len() < 2 {
        return pts[best].0;
    }
    let a = pts[best.saturating_sub(1)].0;
    let b = pts[(best + 1).min(pts.len() - 1)].0;
    let (x, fx) = golden(a, b, |x| f(Point::At(x)));
    if fx < vals[best] {
        x
    } else {
        pts[best].0
    }
}

fn golden<F: FnMut(f64) -> f64>(mut a: f64, mut b: f64, mut f: F) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Interval allowed by the coherence restriction after `last`.
fn allowed_interval(space: &DoseSpace, last: Option<&Observation>) -> (f64, f64) {
    match last {
        Some(o) if o.dlt => (space.x_min(), o.dose),
        Some(o) => (o.dose, space.x_max()),
        None => (space.x_min(), space.x_max()),
    }
}

pub fn crm_dose<V: PosteriorView>(post: &V) -> f64 {
    post.mean_eta()
}

pub fn ewoc_dose<V: PosteriorView>(post: &V, omega: f64) -> f64 {
    post.quantile_eta(omega)
}

/// Feasibility bound for patient `i` (1-based) under the linear schedule.
pub fn ewoc_star_bound(i: usize, omega_start: f64, omega_end: f64, n: usize) -> f64 {
    if n <= 1 {
        return omega_start;
    }
    let t = (i.max(1) - 1).min(n - 1) as f64 / (n - 1) as f64;
    omega_start + t * (omega_end - omega_start)
}

/// Grid minimizer of the expected inverted loss (ties to the lower dose).
pub fn ivoc_dose(ctx: &DesignContext, post: &GridPosterior, gamma: f64) -> Result<f64> {
    check_grid(ctx, post)?;
    let active = Active::new(post);
    let space = *ctx.space();
    Ok(ivoc_search(ctx, &active, post.target_p(), gamma, space.x_min(), space.x_max()))
}

fn ivoc_search(ctx: &DesignContext, active: &Active, p: f64, gamma: f64, lo: f64, hi: f64) -> f64 {
    let mut buf = Vec::with_capacity(active.len());
    let eta = ctx.grid.eta_nodes();
    search(&ctx.doses, lo, hi, false, |pt| {
        let tox = ctx.tox(active, pt, &mut buf);
        inverted_sum(active, &active.w, &active.seg_mass, &tox, ctx.point_dose(pt), eta, p, gamma)
    })
}

/// `sum_j w_j max(gamma (p - F_j), (1 - gamma) (F_j - p))` over active atoms,
/// written as `gamma (p - F) + (F - p)^+` per eta node: within a node
/// `F > p` exactly when `x > eta`, so only plain weighted sums are needed.
#[allow(clippy::too_many_arguments)]
fn inverted_sum(
    active: &Active,
    w: &[f64],
    seg_mass: &[f64],
    tox: &ToxView,
    x: f64,
    eta: &[f64],
    p: f64,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for (seg, &mass) in active.segs.iter().zip(seg_mass) {
        let s = weighted_sum(&w[seg.offset..seg.offset + seg.len], tox.seg(seg), |f| f);
        total += gamma * (p * mass - s);
        if x > eta[seg.group] {
            total += s - p * mass;
        }
    }
    total
}

fn check_grid(ctx: &DesignContext, post: &GridPosterior) -> Result<()> {
    if Arc::ptr_eq(ctx.grid(), post.grid()) {
        Ok(())
    } else {
        Err(DoseError::invalid("posterior", "posterior was built on a different quadrature grid than the design context"))
    }
}

/// Next dose for `policy` given the current posterior and trial state. `rng`
/// is used only by importance-sampling lookahead.
pub fn next_dose<R: Rng + ?Sized>(
    policy: &DesignPolicy,
    ctx: &DesignContext,
    post: &GridPosterior,
    state: &DesignState,
    rng: &mut R,
) -> Result<DoseDecision> {
    check_grid(ctx, post)?;
    let space = *ctx.space();
    let last = if policy.enforce_coherence {
        state.last.as_ref()
    } else {
        None
    };
    let (lo, hi) = allowed_interval(&space, last);

    let decision = match policy.rule {
        Rule::Crm => clamp_decision(crm_dose(post), lo, hi),
        Rule::Ewoc { omega } => clamp_decision(ewoc_dose(post, omega), lo, hi),
        Rule::EwocStar {
            omega_start,
            omega_end,
            n,
        } => {
            let omega = ewoc_star_bound(state.patient_index, omega_start, omega_end, n);
            clamp_decision(ewoc_dose(post, omega), lo, hi)
        }
        Rule::Ivoc { gamma } => {
            let active = Active::new(post);
            let p = post.target_p();
            let free = ivoc_search(ctx, &active, p, gamma, space.x_min(), space.x_max());
            restrict(free, lo, hi, || ivoc_search(ctx, &active, p, gamma, lo, hi))
        }
        Rule::ConstrainedOptimal {
            criterion,
            q,
            omega,
            initial_k,
        } => {
            if state.patient_index <= initial_k {
                clamp_decision(ewoc_dose(post, omega.min(0.5)), lo, hi)
            } else {
                constrained_optimal(ctx, post, &state.xi, &criterion, q, omega, lo, hi)
            }
        }
        Rule::Lookahead { h, lambda, backend } => {
            if lambda == 0.0 {
                myopic_decision(ctx, post, &h, lo, hi)
            } else {
                let la = Lookahead::new(ctx, post, h, lambda, backend, rng)?;
                let free = la.search(space.x_min(), space.x_max());
                let mut d = restrict(free, lo, hi, || la.search(lo, hi));
                d.low_ess = la.low_ess();
                d
            }
        }
    };
    debug_assert!(space.contains(decision.dose));
    Ok(decision)
}

fn clamp_decision(free: f64, lo: f64, hi: f64) -> DoseDecision {
    let dose = free.clamp(lo, hi);
    DoseDecision {
        dose,
        unrestricted_dose: free,
        coherence_restricted: dose != free,
        infeasible: false,
        low_ess: false,
    }
}

fn restrict<F: FnOnce() -> f64>(free: f64, lo: f64, hi: f64, restricted: F) -> DoseDecision {
    if free >= lo && free <= hi {
        return DoseDecision::plain(free);
    }
    DoseDecision {
        dose: restricted(),
        unrestricted_dose: free,
        coherence_restricted: true,
        infeasible: false,
        low_ess: false,
    }
}

/// Myopic minimizer of `E h(eta, x)` on `[lo, hi]`.
fn myopic_decision(ctx: &DesignContext, post: &GridPosterior, h: &LossSpec, lo: f64, hi: f64) -> DoseDecision {
    match *h {
        LossSpec::Ewoc { omega } => clamp_decision(ewoc_dose(post, omega), lo, hi),
        LossSpec::Inverted { gamma } => {
            let active = Active::new(post);
            let p = post.target_p();
            let space = ctx.space();
            let free = ivoc_search(ctx, &active, p, gamma, space.x_min(), space.x_max());
            restrict(free, lo, hi, || ivoc_search(ctx, &active, p, gamma, lo, hi))
        }
        _ => clamp_decision(crm_dose(post), lo, hi),
    }
}

/// Right end of the feasible set `{x : P(eta_q < x) <= omega}`.
fn feasible_bound(post: &GridPosterior, q: f64, omega: f64) -> f64 {
    let space = post.space();
    if omega >= 1.0 {
        return space.x_max();
    }
    if q == post.target_p() {
        return post.quantile_eta(omega);
    }
    let atoms = post.atoms();
    let lq = logit(q);
    let mut pairs: Vec<(f64, f64)> = post
        .weights()
        .iter()
        .enumerate()
        .map(|(j, &w)| ((lq - atoms.alpha[j]) / atoms.beta[j], w))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    for (v, w) in pairs {
        cum += w;
        if cum >= omega {
            return space.clamp(v);
        }
    }
    space.x_max()
}

#[allow(clippy::too_many_arguments)]
fn constrained_optimal(
    ctx: &DesignContext,
    post: &GridPosterior,
    xi: &DesignMeasure,
    psi: &Criterion,
    q: f64,
    omega: f64,
    lo: f64,
    hi: f64,
) -> DoseDecision {
    let space = *ctx.space();
    let x_omega = feasible_bound(post, q, omega);
    if x_omega < space.x_min() {
        return DoseDecision {
            infeasible: true,
            ..DoseDecision::plain(space.x_min())
        };
    }
    let active = Active::new(post);
    let atoms = ctx.grid.atoms();
    let base: Vec<SymMatrix2> = active
        .segs
        .iter()
        .flat_map(|seg| seg.start..seg.start + seg.len)
        .map(|j| {
            let cp = crate::model::CanonicalParams {
                alpha: atoms.alpha[j],
                beta: atoms.beta[j],
            };
            xi.information_sum(&cp)
        })
        .collect();
    let c = match psi {
        Criterion::C { c: Some(c) } => *c,
        Criterion::C { c: None } => default_c_vector(post),
        Criterion::D => [0.0, 0.0],
    };
    let scale = 1.0 / (xi.count() + 1) as f64;
    let mut buf = Vec::with_capacity(active.len());
    let mut objective = |pt: Point| {
        let x = ctx.point_dose(pt);
        let tox = ctx.tox(&active, pt, &mut buf);
        let mut total = 0.0;
        for seg in &active.segs {
            let base = &base[seg.offset..seg.offset + seg.len];
            for ((w, s), &f) in active.weights(seg).iter().zip(base).zip(tox.seg(seg)) {
                let f = f as f64;
                let fw = f * (1.0 - f);
                let m = s.add(&SymMatrix2::new(fw, fw * x, fw * x * x)).scale(scale);
                total += w * criterion_floored(psi, &m, c);
            }
        }
        total
    };

    let free = search(&ctx.doses, space.x_min(), x_omega, false, &mut objective);
    if free >= lo && free <= hi {
        return DoseDecision::plain(free);
    }
    let r_hi = hi.min(x_omega);
    if lo > r_hi {
        // Coherence and the overdose constraint cannot both hold; stay put.
        return DoseDecision {
            dose: lo,
            unrestricted_dose: free,
            coherence_restricted: true,
            infeasible: true,
            low_ess: false,
        };
    }
    DoseDecision {
        dose: search(&ctx.doses, lo, r_hi, false, &mut objective),
        unrestricted_dose: free,
        coherence_restricted: true,
        infeasible: false,
        low_ess: false,
    }
}

#[derive(Debug, Clone, Copy)]
enum Myopic {
    Ewoc(f64),
    Squared,
    Inverted(f64),
}

impl Myopic {
    fn from_loss(h: &LossSpec) -> Self {
        match *h {
            LossSpec::Ewoc { omega } => Myopic::Ewoc(omega),
            LossSpec::Inverted { gamma } => Myopic::Inverted(gamma),
            _ => Myopic::Squared,
        }
    }

    /// `(x', E h(eta, x'))` for a smooth eta-marginal (not used for inverted).
    fn on_marginal(self, m: SmoothMarginal) -> (f64, f64) {
        match self {
            Myopic::Ewoc(omega) => {
                let x = m.quantile(omega);
                (x, m.expected_ewoc_loss(x, omega))
            }
            _ => {
                let m = EtaMarginal::Smooth(m);
                let x = m.mean();
                (x, m.expected_squared_loss(x))
            }
        }
    }

    fn loss(self, eta: f64, f: f64, p: f64, x: f64) -> f64 {
        match self {
            Myopic::Ewoc(omega) => ewoc_loss(eta, x, omega),
            Myopic::Squared => (eta - x) * (eta - x),
            Myopic::Inverted(gamma) => inverted_loss(f, p, gamma),
        }
    }
}

/// Precomputed state for one lookahead decision. The importance sample (if
/// any) is drawn once, so every candidate dose sees the same particles.
struct Lookahead<'a> {
    ctx: &'a DesignContext,
    post: &'a GridPosterior,
    active: Active,
    h: Myopic,
    lambda: f64,
    base: SmoothMarginal,
    sample: Option<WeightedSample>,
    inner_on_grid: bool,
}

impl<'a> Lookahead<'a> {
    fn new<R: Rng + ?Sized>(
        ctx: &'a DesignContext,
        post: &'a GridPosterior,
        h: LossSpec,
        lambda: f64,
        backend: LookaheadBackend,
        rng: &mut R,
    ) -> Result<Self> {
        let sample = match backend {
            LookaheadBackend::Quadrature => None,
            LookaheadBackend::ImportanceSampling { draws } => Some(draw_importance_sample(
                ctx.prior(),
                ctx.space(),
                post.target_p(),
                post.history(),
                draws,
                rng,
            )?),
        };
        Ok(Self {
            ctx,
            post,
            active: Active::new(post),
            h: Myopic::from_loss(&h),
            lambda,
            base: post.smooth_eta_marginal(),
            sample,
            inner_on_grid: post.history().len() < GRID_INNER_MAX_HISTORY,
        })
    }

    fn low_ess(&self) -> bool {
        self.sample.as_ref().is_some_and(|s| s.is_degenerate())
    }

    fn search(&self, lo: f64, hi: f64) -> f64 {
        let mut scratch = Scratch::new(self.ctx.grid.resolution().1, self.active.len());
        search(&self.ctx.doses, lo, hi, true, |pt| match &self.sample {
            None => self.objective_grid(pt, &mut scratch),
            Some(sample) => self.objective_is(sample, pt, &mut scratch),
        })
    }

    /// Per-eta-node masses of the two updated grid posteriors; returns `Q(x)`.
    fn grid_masses(&self, tox: &ToxView, m0: &mut [f64], m1: &mut [f64]) -> f64 {
        m0.iter_mut().for_each(|m| *m = 0.0);
        m1.iter_mut().for_each(|m| *m = 0.0);
        let mut q = 0.0;
        for (seg, &mass) in self.active.segs.iter().zip(&self.active.seg_mass) {
            let dlt = weighted_sum(self.active.weights(seg), tox.seg(seg), |f| f);
            m1[seg.group] = dlt;
            m0[seg.group] = (mass - dlt).max(0.0);
            q += dlt;
        }
        q
    }

    /// Inner myopic dose and its expected loss under the grid posterior
    /// updated with outcome `y`.
    fn grid_inner(&self, tox: &ToxView, masses: &[f64], y: bool) -> (f64, f64) {
        match self.h {
            Myopic::Inverted(gamma) => {
                let mut wy = Vec::with_capacity(self.active.len());
                for seg in &self.active.segs {
                    let w = self.active.weights(seg);
                    wy.extend(w.iter().zip(tox.seg(seg)).map(|(w, &f)| {
                        let f = f as f64;
                        if y {
                            w * f
                        } else {
                            w * (1.0 - f)
                        }
                    }));
                }
                self.inner_inverted(&wy, gamma)
            }
            h => h.on_marginal(self.ctx.grid.marginal(masses)),
        }
    }

    /// Coarse-to-fine grid minimizer of the expected inverted loss under
    /// reweighted active atoms (`wy` in compact order).
    fn inner_inverted(&self, wy: &[f64], gamma: f64) -> (f64, f64) {
        let total: f64 = wy.iter().sum();
        let masses: Vec<f64> = self
            .active
            .segs
            .iter()
            .map(|seg| wy[seg.offset..seg.offset + seg.len].iter().sum())
            .collect();
        let p = self.post.target_p();
        let n = self.ctx.grid.atoms().len();
        let table = self.ctx.tox_table();
        let eta = self.ctx.grid.eta_nodes();
        let eval = |d: usize| -> f64 {
            let row = ToxView::Row(&table[d * n..(d + 1) * n]);
            inverted_sum(&self.active, wy, &masses, &row, self.ctx.doses[d], eta, p, gamma) / total
        };
        let nd = self.ctx.doses.len();
        let mut best = (0, f64::INFINITY);
        for d in (0..nd).step_by(INNER_STRIDE).chain(std::iter::once(nd - 1)) {
            let v = eval(d);
            if v < best.1 {
                best = (d, v);
            }
        }
        let lo = best.0.saturating_sub(INNER_STRIDE - 1);
        let hi = (best.0 + INNER_STRIDE - 1).min(nd - 1);
        let coarse = best;
        for d in lo..=hi {
            let v = if d == coarse.0 { coarse.1 } else { eval(d) };
            if v < best.1 || (v == best.1 && d < best.0) {
                best = (d, v);
            }
        }
        (self.ctx.doses[best.0], best.1)
    }

    fn objective_grid(&self, pt: Point, s: &mut Scratch) -> f64 {
        let x = self.ctx.point_dose(pt);
        let tox = self.ctx.tox(&self.active, pt, &mut s.buf);
        let q = self.grid_masses(&tox, &mut s.m0, &mut s.m1);
        let myopic = match self.h {
            Myopic::Ewoc(omega) => self.base.expected_ewoc_loss(x, omega),
            Myopic::Squared => EtaMarginal::Smooth(self.base.clone()).expected_squared_loss(x),
            Myopic::Inverted(gamma) => inverted_sum(
                &self.active,
                &self.active.w,
                &self.active.seg_mass,
                &tox,
                x,
                self.ctx.grid.eta_nodes(),
                self.post.target_p(),
                gamma,
            ),
        };
        let h0 = if q < 1.0 { self.grid_inner(&tox, &s.m0, false).1 } else { 0.0 };
        let h1 = if q > 0.0 { self.grid_inner(&tox, &s.m1, true).1 } else { 0.0 };
        myopic + self.lambda * ((1.0 - q) * h0 + q * h1)
    }

    fn objective_is(&self, sample: &WeightedSample, pt: Point, s: &mut Scratch) -> f64 {
        let x = self.ctx.point_dose(pt);
        let p = self.post.target_p();
        let atoms = sample.atoms();
        let w = sample.weights();
        s.is_tox.clear();
        s.is_tox.extend((0..atoms.len()).map(|b| logistic(atoms.alpha[b] + atoms.beta[b] * x)));
        let mut myopic = 0.0;
        let mut q = 0.0;
        for b in 0..atoms.len() {
            let f = s.is_tox[b];
            myopic += w[b] * self.h.loss(atoms.eta[b], f, p, x);
            q += w[b] * f;
        }
        let inner_x = if self.inner_on_grid {
            let tox = self.ctx.tox(&self.active, pt, &mut s.buf);
            self.grid_masses(&tox, &mut s.m0, &mut s.m1);
            [
                self.grid_inner(&tox, &s.m0, false).0,
                self.grid_inner(&tox, &s.m1, true).0,
            ]
        } else {
            [self.is_inner(sample, &s.is_tox, false), self.is_inner(sample, &s.is_tox, true)]
        };
        let mut h = [0.0; 2];
        for (y, hy) in h.iter_mut().enumerate() {
            let xp = inner_x[y];
            let (mut num, mut den) = (0.0, 0.0);
            for b in 0..atoms.len() {
                let l = if y == 1 { s.is_tox[b] } else { 1.0 - s.is_tox[b] };
                let v = w[b] * l;
                let f = match self.h {
                    Myopic::Inverted(_) => atoms.toxicity_prob(b, xp),
                    _ => 0.0,
                };
                num += v * self.h.loss(atoms.eta[b], f, p, xp);
                den += v;
            }
            *hy = if den > 0.0 { num / den } else { 0.0 };
        }
        myopic + self.lambda * ((1.0 - q) * h[0] + q * h[1])
    }

    /// Inner myopic dose from the reweighted importance sample.
    fn is_inner(&self, sample: &WeightedSample, is_tox: &[f64], y: bool) -> f64 {
        let atoms = sample.atoms();
        let v: Vec<f64> = sample
            .weights()
            .iter()
            .zip(is_tox)
            .map(|(w, &f)| if y { w * f } else { w * (1.0 - f) })
            .collect();
        let total: f64 = v.iter().sum();
        match self.h {
            Myopic::Ewoc(omega) => {
                // particles are sorted by eta
                let mut cum = 0.0;
                for (b, vb) in v.iter().enumerate() {
                    cum += vb / total;
                    if cum >= omega {
                        return atoms.eta[b];
                    }
                }
                atoms.eta[atoms.len() - 1]
            }
            Myopic::Squared => atoms.eta.iter().zip(&v).map(|(e, vb)| e * vb).sum::<f64>() / total,
            Myopic::Inverted(gamma) => {
                let p = self.post.target_p();
                let mut best = (self.ctx.doses[0], f64::INFINITY);
                for &x in &self.ctx.doses {
                    let e: f64 = (0..atoms.len())
                        .map(|b| v[b] * inverted_loss(atoms.toxicity_prob(b, x), p, gamma))
                        .sum();
                    if e < best.1 {
                        best = (x, e);
                    }
                }
                best.0
            }
        }
    }
}

struct Scratch {
    buf: Vec<f32>,
    is_tox: Vec<f64>,
    m0: Vec<f64>,
    m1: Vec<f64>,
}

impl Scratch {
    fn new(n_eta: usize, n_active: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n_active),
            is_tox: Vec::new(),
            m0: vec![0.0; n_eta],
            m1: vec![0.0; n_eta],
        }
    }
}
