//! In-memory index of live trials backed by an [`EventStore`].

use std::collections::HashMap;
use std::sync::Arc;

use chrono::Utc;
use dosefind::designs::DesignContext;
use dosefind::posterior::QuadratureGrid;
use parking_lot::{Mutex, RwLock};

use crate::error::ServiceError;
use crate::session::{OutcomeInput, OutcomeResponse, Recommendation, Status, Submission, TrialConfig, TrialSession, TrialView};
use crate::store::EventStore;

/// Numerical setup shared by trials with the same model settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ContextKey {
    x_min: u64,
    x_max: u64,
    p: u64,
    resolution: usize,
    dose_points: usize,
}

impl ContextKey {
    fn of(c: &TrialConfig) -> Self {
        Self {
            x_min: c.dose_space.x_min().to_bits(),
            x_max: c.dose_space.x_max().to_bits(),
            p: c.target_p.to_bits(),
            resolution: c.grid_resolution,
            dose_points: c.dose_points,
        }
    }
}

struct Trial {
    /// Serializes mutations of one trial.
    session: Mutex<TrialSession>,
    view: RwLock<Arc<TrialView>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecommendationResponse {
    pub trial_id: String,
    pub status: Status,
    pub recommendation: Option<Recommendation>,
}

pub struct Registry {
    store: Box<dyn EventStore>,
    trials: RwLock<HashMap<String, Arc<Trial>>>,
    contexts: Mutex<HashMap<ContextKey, Arc<DesignContext>>>,
}

impl Registry {
    /// Replays every stored trial.
    pub fn open(store: Box<dyn EventStore>) -> Result<Self, ServiceError> {
        let registry = Self {
            store,
            trials: RwLock::new(HashMap::new()),
            contexts: Mutex::new(HashMap::new()),
        };
        let logs = registry.store.load_all()?;
        for (id, events) in logs {
            let Some(crate::session::Event::TrialCreated { config, .. }) = events.first().map(|e| &e.event) else {
                return Err(ServiceError::Corrupt(format!("trial {id}: missing trial_created")));
            };
            let ctx = registry.context(config)?;
            let session = TrialSession::replay(&events, ctx)
                .map_err(|e| ServiceError::Corrupt(format!("trial {id}: {e}")))?;
            registry.insert(session);
        }
        log::info!("loaded {} trials", registry.trials.read().len());
        Ok(registry)
    }

    fn context(&self, config: &TrialConfig) -> Result<Arc<DesignContext>, ServiceError> {
        let key = ContextKey::of(config);
        let mut cache = self.contexts.lock();
        if let Some(ctx) = cache.get(&key) {
            return Ok(ctx.clone());
        }
        let prior = match config.prior {
            dosefind::config::PriorConfig::Uniform => dosefind::posterior::Prior::Uniform,
        };
        let r = config.grid_resolution;
        let grid = QuadratureGrid::new(&prior, config.target_p, config.dose_space, (r, r))
            .map_err(|e| ServiceError::from_dose("config", e))?;
        let ctx = Arc::new(
            DesignContext::new(Arc::new(grid), prior, config.dose_points)
                .map_err(|e| ServiceError::from_dose("config", e))?,
        );
        cache.insert(key, ctx.clone());
        Ok(ctx)
    }

    fn insert(&self, session: TrialSession) -> Arc<TrialView> {
        let view = Arc::new(session.view());
        let trial = Arc::new(Trial {
            session: Mutex::new(session),
            view: RwLock::new(view.clone()),
        });
        self.trials.write().insert(view.id.clone(), trial);
        view
    }

    fn trial(&self, id: &str) -> Result<Arc<Trial>, ServiceError> {
        self.trials
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn create_trial(&self, mut config: TrialConfig) -> Result<Arc<TrialView>, ServiceError> {
        config.validate()?;
        config.seed.get_or_insert_with(rand::random);
        let ctx = self.context(&config)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (record, session) = TrialSession::create(id.clone(), config, ctx, Utc::now())?;
        self.store.append(&id, &record)?;
        Ok(self.insert(session))
    }

    pub fn record_outcome(&self, id: &str, input: OutcomeInput) -> Result<OutcomeResponse, ServiceError> {
        let trial = self.trial(id)?;
        let mut session = trial.session.lock();
        match session.submit(input, Utc::now())? {
            Submission::Duplicate(response) => Ok(response),
            Submission::New(record, next) => {
                self.store.append(id, &record)?;
                *session = *next;
                *trial.view.write() = Arc::new(session.view());
                Ok(session.response_at(input.patient_index))
            }
        }
    }

    /// Latest snapshot; never waits for an in-flight mutation.
    pub fn get(&self, id: &str) -> Result<Arc<TrialView>, ServiceError> {
        Ok(self.trial(id)?.view.read().clone())
    }

    pub fn recommendation(&self, id: &str) -> Result<RecommendationResponse, ServiceError> {
        let view = self.get(id)?;
        Ok(RecommendationResponse {
            trial_id: view.id.clone(),
            status: view.status,
            recommendation: view.recommendation,
        })
    }

    pub fn len(&self) -> usize {
        self.trials.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
