//! Trial sessions rebuilt from their event logs.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use dosefind::config::PriorConfig;
use dosefind::designs::{is_coherent, next_dose, DesignContext, DesignPolicy, DesignState, Rule};
use dosefind::losses::LossSpec;
use dosefind::model::DoseSpace;
use dosefind::posterior::{GridPosterior, Observation, PosteriorView, DEFAULT_RESOLUTION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Points in the reported marginal density curve of the MTD.
pub const DENSITY_POINTS: usize = 200;
/// Largest accepted trial size.
pub const MAX_PATIENTS: usize = 1000;
const MAX_RESOLUTION: usize = 512;
const MAX_DOSE_POINTS: usize = 10_001;

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION.0
}

fn default_dose_points() -> usize {
    dosefind::designs::DEFAULT_DOSE_GRID_POINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub dose_space: DoseSpace,
    pub target_p: f64,
    #[serde(default)]
    pub prior: PriorConfig,
    pub policy: DesignPolicy,
    /// Planned number of patients.
    pub n: usize,
    /// Seed for stochastic designs; drawn at creation when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_dose_points")]
    pub dose_points: usize,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let p = self.target_p;
        if !(p > 0.0 && p < 1.0) {
            return Err(ServiceError::field("target_p", "must lie in (0, 1)"));
        }
        if self.n == 0 || self.n > MAX_PATIENTS {
            return Err(ServiceError::field("n", format!("must lie in [1, {MAX_PATIENTS}]")));
        }
        if self.grid_resolution > MAX_RESOLUTION {
            return Err(ServiceError::field(
                "grid_resolution",
                format!("must not exceed {MAX_RESOLUTION}"),
            ));
        }
        if !(2..=MAX_DOSE_POINTS).contains(&self.dose_points) {
            return Err(ServiceError::field(
                "dose_points",
                format!("must lie in [2, {MAX_DOSE_POINTS}]"),
            ));
        }
        self.policy.validate(p).map_err(|e| ServiceError::from_dose("policy", e))
    }

    /// Probability level reported alongside the posterior mean.
    pub fn quantile_level(&self, patient_index: usize) -> f64 {
        match self.policy.rule {
            Rule::Ewoc { omega } | Rule::ConstrainedOptimal { omega, .. } => omega.min(0.5),
            Rule::EwocStar {
                omega_start,
                omega_end,
                n,
            } => dosefind::designs::ewoc_star_bound(patient_index, omega_start, omega_end, n),
            Rule::Lookahead {
                h: LossSpec::Ewoc { omega },
                ..
            } => omega,
            _ => 0.25,
        }
    }
}

/// RNG handed to the design when choosing the dose of `patient_index`.
pub fn decision_rng(seed: u64, patient_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient_index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeInput {
    pub patient_index: usize,
    pub dose_given: f64,
    /// 1 for a dose-limiting toxicity, 0 otherwise.
    pub outcome: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum Event {
    TrialCreated {
        id: String,
        config: TrialConfig,
    },
    OutcomeRecorded {
        patient_index: usize,
        dose_given: f64,
        outcome: u8,
        /// Dose the engine recommended for this patient.
        recommended_dose: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Patient the dose is meant for (1-based).
    pub patient_index: usize,
    pub dose: f64,
    pub unrestricted_dose: f64,
    pub coherence_restricted: bool,
    pub infeasible: bool,
    pub low_ess: bool,
    /// The dose moves against the last outcome and coherence is not enforced.
    pub coherence_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeResponse {
    pub trial_id: String,
    pub patient_index: usize,
    pub status: Status,
    pub recommendation: Option<Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub eta: Vec<f64>,
    pub pdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub quantile_level: f64,
    pub quantile: f64,
    /// Central 90% interval of the MTD.
    pub interval_90: [f64; 2],
    pub density: DensityCurve,
}

impl PosteriorSummary {
    /// Summaries of the MTD marginal; `level` picks the reported quantile.
    pub fn of(post: &GridPosterior, level: f64) -> Self {
        let marginal = post.smooth_eta_marginal();
        let space = post.grid().space();
        let eta: Vec<f64> = (0..DENSITY_POINTS)
            .map(|i| space.x_min() + space.width() * i as f64 / (DENSITY_POINTS - 1) as f64)
            .collect();
        let pdf = eta.iter().map(|&x| marginal.pdf(x)).collect();
        Self {
            mean: post.mean_eta(),
            quantile_level: level,
            quantile: marginal.quantile(level),
            interval_90: [marginal.quantile(0.05), marginal.quantile(0.95)],
            density: DensityCurve { eta, pdf },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub patient_index: usize,
    pub dose: f64,
    pub outcome: u8,
    pub recommended_dose: Option<f64>,
}

/// Read-only snapshot served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub id: String,
    pub status: Status,
    pub config: TrialConfig,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub history: Vec<HistoryEntry>,
    pub dlt_count: usize,
    pub recommendation: Option<Recommendation>,
    pub posterior: PosteriorSummary,
    /// Terminal posterior mean of the MTD once the trial is complete.
    pub eta_hat: Option<f64>,
    pub event_log: Vec<EventRecord>,
}

/// Outcome of submitting a patient's result.
#[derive(Debug)]
pub enum Submission {
    /// A new event to persist, and the session it produces.
    New(EventRecord, Box<TrialSession>),
    /// Same payload as an already recorded patient.
    Duplicate(OutcomeResponse),
}

#[derive(Debug, Clone)]
pub struct TrialSession {
    id: String,
    config: TrialConfig,
    seed: u64,
    ctx: Arc<DesignContext>,
    post: GridPosterior,
    state: DesignState,
    recommended: Vec<Option<f64>>,
    /// `steps[k]` is the recommendation after `k` outcomes.
    steps: Vec<Option<Recommendation>>,
    events: Vec<EventRecord>,
}

impl TrialSession {
    /// Starts a trial; `config.seed` must already be set.
    pub fn create(
        id: String,
        config: TrialConfig,
        ctx: Arc<DesignContext>,
        now: DateTime<Utc>,
    ) -> Result<(EventRecord, Self), ServiceError> {
        let record = EventRecord {
            seq: 0,
            timestamp: now,
            event: Event::TrialCreated {
                id: id.clone(),
                config,
            },
        };
        let session = Self::start(&record, ctx)?;
        Ok((record, session))
    }

    fn start(record: &EventRecord, ctx: Arc<DesignContext>) -> Result<Self, ServiceError> {
        let Event::TrialCreated { id, config } = &record.event else {
            return Err(ServiceError::Corrupt("log does not start with trial_created".into()));
        };
        config.validate()?;
        let seed = config
            .seed
            .ok_or_else(|| ServiceError::Corrupt("trial_created without a seed".into()))?;
        let mut session = Self {
            id: id.clone(),
            config: *config,
            seed,
            post: GridPosterior::prior(ctx.grid().clone()),
            ctx,
            state: DesignState::initial(),
            recommended: Vec::new(),
            steps: Vec::new(),
            events: vec![record.clone()],
        };
        session.push_step()?;
        Ok(session)
    }

    /// Rebuilds a session from its full log.
    pub fn replay(events: &[EventRecord], ctx: Arc<DesignContext>) -> Result<Self, ServiceError> {
        let first = events
            .first()
            .ok_or_else(|| ServiceError::Corrupt("empty event log".into()))?;
        let mut session = Self::start(first, ctx)?;
        for record in &events[1..] {
            session.apply(record)?;
        }
        Ok(session)
    }

    fn push_step(&mut self) -> Result<(), ServiceError> {
        let k = self.post.history().len();
        if k >= self.config.n {
            self.steps.push(None);
            return Ok(());
        }
        let patient_index = k + 1;
        let mut rng = decision_rng(self.seed, patient_index);
        let d = next_dose(&self.config.policy, &self.ctx, &self.post, &self.state, &mut rng)
            .map_err(|e| ServiceError::from_dose("policy", e))?;
        let coherence_violation = self.state.last.is_some_and(|last| !is_coherent(&last, d.dose));
        self.steps.push(Some(Recommendation {
            patient_index,
            dose: d.dose,
            unrestricted_dose: d.unrestricted_dose,
            coherence_restricted: d.coherence_restricted,
            infeasible: d.infeasible,
            low_ess: d.low_ess,
            coherence_violation,
        }));
        Ok(())
    }

    fn apply(&mut self, record: &EventRecord) -> Result<(), ServiceError> {
        let Event::OutcomeRecorded {
            patient_index,
            dose_given,
            outcome,
            recommended_dose,
        } = record.event
        else {
            return Err(ServiceError::Corrupt("duplicate trial_created".into()));
        };
        if record.seq != self.events.len() as u64 {
            return Err(ServiceError::Corrupt(format!(
                "expected seq {}, found {}",
                self.events.len(),
                record.seq
            )));
        }
        self.check_input(&OutcomeInput {
            patient_index,
            dose_given,
            outcome,
        })?;
        if patient_index != self.post.history().len() + 1 {
            return Err(ServiceError::Corrupt(format!("out-of-order patient {patient_index}")));
        }
        let obs = Observation::new(dose_given, outcome == 1);
        self.post
            .update(obs)
            .map_err(|e| ServiceError::from_dose("dose_given", e))?;
        self.state.record(obs);
        self.recommended.push(recommended_dose);
        self.events.push(record.clone());
        self.push_step()
    }

    fn check_input(&self, input: &OutcomeInput) -> Result<(), ServiceError> {
        if input.outcome > 1 {
            return Err(ServiceError::field("outcome", "must be 0 or 1"));
        }
        let space = self.config.dose_space;
        if !input.dose_given.is_finite() || !space.contains(input.dose_given) {
            return Err(ServiceError::field(
                "dose_given",
                format!("must lie in [{}, {}]", space.x_min(), space.x_max()),
            ));
        }
        if input.patient_index == 0 {
            return Err(ServiceError::field("patient_index", "patient indices start at 1"));
        }
        Ok(())
    }

    /// Validates a submission and computes the resulting session without
    /// touching `self`.
    pub fn submit(&self, input: OutcomeInput, now: DateTime<Utc>) -> Result<Submission, ServiceError> {
        self.check_input(&input)?;
        let recorded = self.post.history().len();
        if input.patient_index <= recorded {
            let obs = self.post.history().observations[input.patient_index - 1];
            if obs.dose == input.dose_given && obs.dlt == (input.outcome == 1) {
                return Ok(Submission::Duplicate(self.response_at(input.patient_index)));
            }
            return Err(ServiceError::Conflict {
                code: "duplicate_patient",
                message: format!(
                    "patient {} is already recorded with a different payload",
                    input.patient_index
                ),
            });
        }
        if recorded >= self.config.n {
            return Err(ServiceError::Conflict {
                code: "trial_complete",
                message: format!("all {} patients are recorded", self.config.n),
            });
        }
        if input.patient_index != recorded + 1 {
            return Err(ServiceError::Conflict {
                code: "out_of_order",
                message: format!("expected patient {}, got {}", recorded + 1, input.patient_index),
            });
        }
        let record = EventRecord {
            seq: self.events.len() as u64,
            timestamp: now,
            event: Event::OutcomeRecorded {
                patient_index: input.patient_index,
                dose_given: input.dose_given,
                outcome: input.outcome,
                recommended_dose: self.current().map(|r| r.dose),
            },
        };
        let mut next = self.clone();
        next.apply(&record)?;
        Ok(Submission::New(record, Box::new(next)))
    }

    /// Response for the submission of `patient_index`.
    pub fn response_at(&self, patient_index: usize) -> OutcomeResponse {
        OutcomeResponse {
            trial_id: self.id.clone(),
            patient_index,
            status: if patient_index >= self.config.n {
                Status::Complete
            } else {
                Status::Active
            },
            recommendation: self.steps[patient_index],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn posterior(&self) -> &GridPosterior {
        &self.post
    }

    pub fn status(&self) -> Status {
        if self.post.history().len() >= self.config.n {
            Status::Complete
        } else {
            Status::Active
        }
    }

    /// Recommendation for the next patient, if any.
    pub fn current(&self) -> Option<Recommendation> {
        *self.steps.last().expect("at least the initial step")
    }

    /// Every recommendation so far, indexed by the number of recorded outcomes.
    pub fn recommendations(&self) -> &[Option<Recommendation>] {
        &self.steps
    }

    pub fn view(&self) -> TrialView {
        let level = self.config.quantile_level(self.state.patient_index.min(self.config.n));
        let posterior = PosteriorSummary::of(&self.post, level);
        let mean = posterior.mean;
        let history = self
            .post
            .history()
            .observations
            .iter()
            .zip(&self.recommended)
            .enumerate()
            .map(|(i, (o, r))| HistoryEntry {
                patient_index: i + 1,
                dose: o.dose,
                outcome: o.dlt as u8,
                recommended_dose: *r,
            })
            .collect();
        let status = self.status();
        TrialView {
            id: self.id.clone(),
            status,
            config: self.config,
            created_at: self.events[0].timestamp,
            updated_at: self.events.last().expect("created event").timestamp,
            history,
            dlt_count: self.post.history().dlt_count(),
            recommendation: self.current(),
            posterior,
            eta_hat: (status == Status::Complete).then_some(mean),
            event_log: self.events.clone(),
        }
    }
}
