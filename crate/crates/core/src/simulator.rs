//! Monte Carlo trial simulation and Table-1-style operating characteristics.
//!
//! Every replication `r` owns two ChaCha8 streams derived from the study seed:
//! stream `2r` draws the true parameters and the patient outcomes, stream
//! `2r + 1` feeds stochastic designs. Outcomes come from one uniform per
//! patient, so designs compared under the same seed see the same truths and
//! the same outcome noise. Results do not depend on the worker count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{is_coherent, next_dose, DesignContext, DesignPolicy, DesignState};
use crate::error::{DoseError, Result};
use crate::losses::{ewoc_loss, inverted_loss};
use crate::model::{logistic, linear_predictor, DoseSpace, NaturalParams};
use crate::posterior::{gauss_legendre, GridPosterior, Observation, PosteriorView, Prior};

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truth {
    /// Fresh `(rho, eta)` from the study prior for every replication.
    BayesianDraw,
    Fixed { rho: f64, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub truth: Truth,
    /// Patients per trial.
    pub n: usize,
    pub replications: usize,
    pub p: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self, space: &DoseSpace) -> Result<()> {
        if self.n == 0 {
            return Err(DoseError::invalid("n", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(DoseError::invalid("replications", "must be at least 1"));
        }
        if let Truth::Fixed { rho, eta } = self.truth {
            let np = NaturalParams::new(rho, eta, self.p, space)?;
            np.to_canonical(space)?;
        }
        Ok(())
    }
}

/// Loss parameters used to score trials against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskParams {
    pub omega: f64,
    pub gamma: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            omega: 0.25,
            gamma: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub doses: Vec<f64>,
    pub outcomes: Vec<bool>,
    pub truth: NaturalParams,
    /// Terminal posterior mean of the MTD.
    pub eta_hat: f64,
    pub per_patient_loss_ewoc: Vec<f64>,
    pub per_patient_loss_inverted: Vec<f64>,
    /// True toxicity probability at each dose given.
    pub true_tox: Vec<f64>,
    /// `true` where the transition into patient `i + 1` violates coherence.
    pub coherence_flags: Vec<bool>,
    pub infeasible_decisions: usize,
    pub low_ess_decisions: usize,
}

impl TrialResult {
    pub fn risk1(&self) -> f64 {
        self.per_patient_loss_ewoc.iter().sum()
    }

    pub fn risk2(&self) -> f64 {
        self.per_patient_loss_inverted.iter().sum()
    }

    pub fn dlt_rate(&self) -> f64 {
        mean_of(self.outcomes.iter().map(|&y| y as u8 as f64))
    }

    pub fn od_rate(&self) -> f64 {
        mean_of(self.doses.iter().map(|&x| (x > self.truth.eta) as u8 as f64))
    }

    pub fn od_star(&self) -> f64 {
        let p = self.truth.target_p;
        mean_of(self.true_tox.iter().map(|&f| (f - p).max(0.0)))
    }

    /// Share of transitions violating coherence; zero for one-patient trials.
    pub fn chv(&self) -> f64 {
        if self.coherence_flags.is_empty() {
            return 0.0;
        }
        mean_of(self.coherence_flags.iter().map(|&v| v as u8 as f64))
    }
}

fn mean_of<I: ExactSizeIterator<Item = f64>>(it: I) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// Draws `(rho, eta)` from a prior by rejection against the uniform
/// proposal; the uniform prior is sampled directly.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    prior: Prior,
    p: f64,
    space: DoseSpace,
    envelope: f64,
}

impl PriorSampler {
    pub fn new(prior: Prior, p: f64, space: DoseSpace) -> Self {
        let envelope = match &prior {
            Prior::Uniform => 0.0,
            Prior::Custom(_) => {
                let (rn, _) = gauss_legendre(128, 0.0, p);
                let (en, _) = gauss_legendre(128, space.x_min(), space.x_max());
                let peak = en
                    .iter()
                    .flat_map(|&e| rn.iter().map(move |&r| (r, e)))
                    .map(|(r, e)| prior.density(r, e, p, &space))
                    .fold(0.0, f64::max);
                1.5 * peak
            }
        };
        Self {
            prior,
            p,
            space,
            envelope,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NaturalParams {
        loop {
            let (rho, eta) = Prior::sample_proposal(rng, self.p, &self.space);
            let accept = match self.prior {
                Prior::Uniform => true,
                Prior::Custom(_) => {
                    rng.gen::<f64>() * self.envelope < self.prior.density(rho, eta, self.p, &self.space)
                }
            };
            if accept {
                return NaturalParams {
                    rho,
                    eta,
                    target_p: self.p,
                };
            }
        }
    }
}

fn replication_rngs(seed: u64, rep: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut outcome = ChaCha8Rng::seed_from_u64(seed);
    outcome.set_stream(2 * rep as u64);
    let mut design = ChaCha8Rng::seed_from_u64(seed);
    design.set_stream(2 * rep as u64 + 1);
    (outcome, design)
}

/// Runs one trial of `n` patients against a fixed truth.
pub fn simulate_trial<R1, R2>(
    policy: &DesignPolicy,
    ctx: &DesignContext,
    truth: &NaturalParams,
    n: usize,
    risk: RiskParams,
    outcome_rng: &mut R1,
    design_rng: &mut R2,
) -> Result<TrialResult>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let space = *ctx.space();
    let p = ctx.grid().target_p();
    let mut post = GridPosterior::prior(ctx.grid().clone());
    let mut state = DesignState::initial();
    let mut res = TrialResult {
        doses: Vec::with_capacity(n),
        outcomes: Vec::with_capacity(n),
        truth: *truth,
        eta_hat: f64::NAN,
        per_patient_loss_ewoc: Vec::with_capacity(n),
        per_patient_loss_inverted: Vec::with_capacity(n),
        true_tox: Vec::with_capacity(n),
        coherence_flags: Vec::with_capacity(n.saturating_sub(1)),
        infeasible_decisions: 0,
        low_ess_decisions: 0,
    };
    for patient in 1..=n {
        let wrap = |e: DoseError| DoseError::Replication {
            index: 0,
            patient,
            source: Box::new(e),
        };
        let d = next_dose(policy, ctx, &post, &state, design_rng).map_err(wrap)?;
        res.infeasible_decisions += d.infeasible as usize;
        res.low_ess_decisions += d.low_ess as usize;
        let f = logistic(linear_predictor(d.dose, truth, &space).map_err(wrap)?);
        let dlt = outcome_rng.gen::<f64>() < f;
        if let Some(last) = state.last {
            res.coherence_flags.push(!is_coherent(&last, d.dose));
        }
        res.doses.push(d.dose);
        res.outcomes.push(dlt);
        res.true_tox.push(f);
        res.per_patient_loss_ewoc.push(ewoc_loss(truth.eta, d.dose, risk.omega));
        res.per_patient_loss_inverted.push(inverted_loss(f, p, risk.gamma));
        let obs = Observation::new(d.dose, dlt);
        post.update(obs).map_err(wrap)?;
        state.record(obs);
    }
    res.eta_hat = post.mean_eta();
    Ok(res)
}

/// Replication `rep` of a scenario, with its own RNG streams.
pub fn simulate_replication(
    policy: &DesignPolicy,
    ctx: &DesignContext,
    scenario: &ScenarioSpec,
    sampler: &PriorSampler,
    risk: RiskParams,
    rep: usize,
) -> Result<TrialResult> {
    let (mut outcome, mut design) = replication_rngs(scenario.seed, rep);
    let truth = match scenario.truth {
        Truth::BayesianDraw => sampler.sample(&mut outcome),
        Truth::Fixed { rho, eta } => NaturalParams {
            rho,
            eta,
            target_p: scenario.p,
        },
    };
    simulate_trial(policy, ctx, &truth, scenario.n, risk, &mut outcome, &mut design).map_err(|e| match e {
        DoseError::Replication { patient, source, .. } => DoseError::Replication {
            index: rep,
            patient,
            source,
        },
        other => other,
    })
}

/// Mean with its Monte Carlo standard error; `se` is `None` for one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: Option<f64>,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = (xs.len() > 1).then(|| {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub replications: usize,
    pub failures: usize,
    pub risk1: Estimate,
    pub risk2: Estimate,
    pub bias: Estimate,
    /// `mean` holds the RMSE itself; its SE comes from the delta method.
    pub rmse: Estimate,
    pub dlt_rate: Estimate,
    pub od_rate: Estimate,
    pub od_star: Estimate,
    pub chv: Estimate,
}

/// Metric names in report order.
pub const METRICS: [&str; 8] = ["risk1", "risk2", "bias", "rmse", "dlt", "od", "od_star", "chv"];

impl MetricsReport {
    pub fn from_trials(trials: &[TrialResult], failures: usize) -> Result<Self> {
        if trials.is_empty() {
            return Err(DoseError::invalid("replications", "no successful replications"));
        }
        let col = |f: &dyn Fn(&TrialResult) -> f64| trials.iter().map(f).collect::<Vec<_>>();
        let err = col(&|t| t.eta_hat - t.truth.eta);
        let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
        let mse = Estimate::from_samples(&sq);
        let rmse_value = mse.mean.sqrt();
        let rmse = Estimate {
            mean: rmse_value,
            se: mse.se.map(|s| if rmse_value > 0.0 { s / (2.0 * rmse_value) } else { 0.0 }),
        };
        Ok(Self {
            replications: trials.len() + failures,
            failures,
            risk1: Estimate::from_samples(&col(&|t| t.risk1())),
            risk2: Estimate::from_samples(&col(&|t| t.risk2())),
            bias: Estimate::from_samples(&err),
            rmse,
            dlt_rate: Estimate::from_samples(&col(&|t| t.dlt_rate())),
            od_rate: Estimate::from_samples(&col(&|t| t.od_rate())),
            od_star: Estimate::from_samples(&col(&|t| t.od_star())),
            chv: Estimate::from_samples(&col(&|t| t.chv())),
        })
    }

    pub fn metric(&self, name: &str) -> Option<Estimate> {
        Some(match name {
            "risk1" => self.risk1,
            "risk2" => self.risk2,
            "bias" => self.bias,
            "rmse" => self.rmse,
            "dlt" => self.dlt_rate,
            "od" => self.od_rate,
            "od_star" => self.od_star,
            "chv" => self.chv,
            _ => return None,
        })
    }
}

/// Average coherence-violation rate over a set of trials.
pub fn coherence_violation_rate(trials: &[TrialResult]) -> f64 {
    mean_of(trials.iter().map(TrialResult::chv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    pub policy: DesignPolicy,
    /// Overrides the scenario's replication count for this design.
    pub replications: Option<usize>,
}

/// Trials of one design under one scenario, in replication order.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub trials: Vec<TrialResult>,
    pub failures: Vec<(usize, String)>,
}

/// Runs the replications of one design. `workers == 0` uses every core.
pub fn run_policy(
    policy: &NamedPolicy,
    ctx: &DesignContext,
    scenario: &ScenarioSpec,
    sampler: &PriorSampler,
    risk: RiskParams,
    workers: usize,
) -> Result<PolicyRun> {
    policy.policy.validate(scenario.p)?;
    scenario.validate(ctx.space())?;
    let reps = policy.replications.unwrap_or(scenario.replications);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DoseError::invalid("workers", e.to_string()))?;
    let outcomes: Vec<Result<TrialResult>> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| simulate_replication(&policy.policy, ctx, scenario, sampler, risk, rep))
            .collect()
    });
    let mut run = PolicyRun {
        trials: Vec::with_capacity(reps),
        failures: Vec::new(),
    };
    let mut first = None;
    for (rep, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(t) => run.trials.push(t),
            Err(e) => {
                log::warn!("{} / {}: replication {rep} failed: {e}", scenario.name, policy.name);
                run.failures.push((rep, e.to_string()));
                first.get_or_insert(e);
            }
        }
    }
    if run.failures.len() as f64 > MAX_FAILURE_FRACTION * reps as f64 {
        return Err(DoseError::StudyAborted {
            failed: run.failures.len(),
            total: reps,
            first: first.map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub policies: Vec<String>,
    pub reports: Vec<MetricsReport>,
}

/// One machine-readable row of a study report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub policy: String,
    pub metric: String,
    pub mean: f64,
    pub se: Option<f64>,
}

/// Runs every design under one scenario.
pub fn run_study(
    policies: &[NamedPolicy],
    ctx: &DesignContext,
    scenario: &ScenarioSpec,
    risk: RiskParams,
    workers: usize,
) -> Result<ScenarioReport> {
    let sampler = PriorSampler::new(ctx.prior().clone(), scenario.p, *ctx.space());
    let mut reports = Vec::with_capacity(policies.len());
    for policy in policies {
        let run = run_policy(policy, ctx, scenario, &sampler, risk, workers)?;
        reports.push(MetricsReport::from_trials(&run.trials, run.failures.len())?);
    }
    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        policies: policies.iter().map(|p| p.name.clone()).collect(),
        reports,
    })
}

impl ScenarioReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (policy, report) in self.policies.iter().zip(&self.reports) {
            for m in METRICS {
                let e = report.metric(m).expect("known metric");
                out.push(MetricRecord {
                    scenario: self.scenario.clone(),
                    policy: policy.clone(),
                    metric: m.to_string(),
                    mean: e.mean,
                    se: e.se,
                });
            }
        }
        out
    }

    pub fn get(&self, policy: &str) -> Option<&MetricsReport> {
        self.policies.iter().position(|p| p == policy).map(|i| &self.reports[i])
    }

    /// Human-readable table: one column per design, rates in percent.
    pub fn to_table(&self) -> String {
        const ROWS: [(&str, &str, f64, usize); 8] = [
            ("risk1", "Risk1", 1.0, 1),
            ("risk2", "Risk2", 1.0, 3),
            ("bias", "Bias", 1.0, 2),
            ("rmse", "RMSE", 1.0, 2),
            ("dlt", "DLT (%)", 100.0, 1),
            ("od", "OD (%)", 100.0, 1),
            ("od_star", "OD*", 1.0, 4),
            ("chv", "ChV (%)", 100.0, 2),
        ];
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("Statistic".to_string())
            .chain(self.policies.iter().cloned())
            .collect()];
        for (key, label, scale, digits) in ROWS {
            let mut row = vec![label.to_string()];
            for r in &self.reports {
                let e = r.metric(key).expect("known metric");
                let se = match e.se {
                    Some(s) => format!("{:.*}", digits + 1, s * scale),
                    None => "-".to_string(),
                };
                row.push(format!("{:.*} ({se})", digits, e.mean * scale));
            }
            cells.push(row);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "Scenario: {}", self.scenario);
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}
