//! `dosefind study`: run every policy under every scenario of a config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dosefind::config::StudyConfig;
use dosefind::simulator::{run_policy, MetricsReport, PriorSampler, ScenarioReport};
use serde::Serialize;

use crate::{write_file, CliError, Result};

pub const DEFAULT_OUT_DIR: &str = "dosefind-out";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Replaces every replication count, including per-policy ones.
    pub reps: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: StudyConfig) -> Result<StudyConfig> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            for s in &mut cfg.scenarios {
                s.seed = None;
            }
        }
        if let Some(reps) = self.reps {
            cfg.replications = reps;
            cfg.full_scale = false;
            for p in &mut cfg.policies {
                p.replications = None;
            }
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyTiming {
    pub policy: String,
    pub replications: usize,
    pub failures: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioTiming {
    pub scenario: String,
    pub seed: u64,
    pub policies: Vec<PolicyTiming>,
}

/// Everything needed to rerun a study: the resolved config plus run metadata.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub config: StudyConfig,
    pub scenarios: Vec<ScenarioTiming>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub reports: Vec<ScenarioReport>,
    pub manifest: Manifest,
}

impl StudyOutput {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.reports.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&r.to_table());
        }
        out
    }

    /// One JSON object per line: `{scenario, policy, metric, mean, se}`.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            for rec in r.records() {
                let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
            }
        }
        out
    }

    /// Writes `table.txt`, `records.jsonl`, `manifest.json` and the resolved
    /// `config.toml`, which reruns the study as is.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_file(&dir.join("table.txt"), &self.table())?;
        write_file(&dir.join("records.jsonl"), &self.records_jsonl())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), &manifest)?;
        write_file(&dir.join("config.toml"), &self.manifest.config.to_toml_string())?;
        Ok(())
    }
}

pub fn run(cfg: &StudyConfig) -> Result<StudyOutput> {
    let start = Instant::now();
    let ctx = cfg.context()?;
    let policies = cfg.named_policies();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for scenario in cfg.scenario_specs() {
        let sampler = PriorSampler::new(ctx.prior().clone(), scenario.p, *ctx.space());
        let mut scenario_reports = Vec::new();
        let mut policy_timings = Vec::new();
        for policy in &policies {
            let t = Instant::now();
            let run = run_policy(policy, &ctx, &scenario, &sampler, cfg.risk, cfg.workers)?;
            let seconds = t.elapsed().as_secs_f64();
            log::info!(
                "{} / {}: {} replications in {seconds:.1} s",
                scenario.name,
                policy.name,
                run.trials.len()
            );
            policy_timings.push(PolicyTiming {
                policy: policy.name.clone(),
                replications: run.trials.len() + run.failures.len(),
                failures: run.failures.len(),
                seconds,
            });
            scenario_reports.push(MetricsReport::from_trials(&run.trials, run.failures.len())?);
        }
        timings.push(ScenarioTiming {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            policies: policy_timings,
        });
        reports.push(ScenarioReport {
            scenario: scenario.name.clone(),
            policies: policies.iter().map(|p| p.name.clone()).collect(),
            reports: scenario_reports,
        });
    }
    Ok(StudyOutput {
        reports,
        manifest: Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            workers: cfg.workers,
            config: cfg.clone(),
            scenarios: timings,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Loads, applies overrides, runs and writes the report. Returns the output directory.
pub fn cmd_study(path: &Path, overrides: &Overrides) -> Result<(PathBuf, StudyOutput)> {
    let cfg = overrides.apply(StudyConfig::load(path)?)?;
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let output = run(&cfg)?;
    output.write(&dir)?;
    Ok((dir, output))
}
