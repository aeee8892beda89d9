//! End-to-end orchestration: ingest, reason, extract rules, compile policy,
//! score/refine rounds, predict, evaluate.
//!
//! Stages run in a fixed order and journal their completion (plus backend
//! usage) to `run_state.json`, so an interrupted run resumes without
//! repeating backend calls. Under the mock backend every artifact is
//! byte-deterministic: the lineage clock is fixed and all randomness flows
//! from the config seed.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{ArtifactError, RunJournal, RunManifest, StageRecord};
use crate::clock::{Clock, FixedClock, SystemClock};
use crate::config::{BackendMode, ConfigError, RunConfig};
use crate::dataset::{self, DatasetError, ProfileSet, SplitSpec};
use crate::evaluation::{self, EvalError};
use crate::gateway::{
    accumulate_usage, ChatBackend, ChatRequest, ChatResponse, CostReport, GatewayError,
    HttpBackend, ScriptedBackend,
};
use crate::memory::{MemoryError, MemorySessions};
use crate::policy::{self, DecisionPolicy, PolicyError};
use crate::prediction::{self, PredictionError, PredictionOptions, PredictionRow};
use crate::reasoning::{self, ReasoningError, ReasoningOptions};
use crate::rules::{self, Rule};
use crate::scoring::{self, PredictionOutcome, ScoringError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stage `{stage}` failed: {message}")]
    StageFatal { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit code per the CLI contract: 2 config, 3 stage-fatal,
    /// 4 auth, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Gateway(GatewayError::Auth(_)) => 4,
            PipelineError::Artifact(ArtifactError::ConfigMismatch { .. }) => 2,
            PipelineError::StageFatal { .. } => 3,
            _ => 1,
        }
    }
}

/// Pipeline stages in execution order. Refinement rounds expand to one stage
/// each so resume can skip them individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    Ingest,
    Reason,
    ExtractRules,
    CompilePolicy,
    Refine(u32),
    Predict,
    Evaluate,
}

impl StageId {
    pub fn name(&self) -> String {
        match self {
            StageId::Ingest => "ingest".into(),
            StageId::Reason => "reason".into(),
            StageId::ExtractRules => "extract_rules".into(),
            StageId::CompilePolicy => "compile_policy".into(),
            StageId::Refine(round) => format!("refine_round_{round}"),
            StageId::Predict => "predict".into(),
            StageId::Evaluate => "evaluate".into(),
        }
    }
}

/// The stage list for a config: refinement rounds appear only when RL
/// scoring is enabled.
pub fn stage_list(config: &RunConfig) -> Vec<StageId> {
    let mut stages = vec![
        StageId::Ingest,
        StageId::Reason,
        StageId::ExtractRules,
        StageId::CompilePolicy,
    ];
    if config.stages.rl_scoring {
        for round in 1..=config.stages.refine_rounds {
            stages.push(StageId::Refine(round));
        }
    }
    stages.push(StageId::Predict);
    stages.push(StageId::Evaluate);
    stages
}

/// Artifact names, relative to the output directory.
pub mod artifact_names {
    pub const TRAIN_PROFILES: &str = "train_profiles.csv";
    pub const TEST_PROFILES: &str = "test_profiles.csv";
    pub const REASONING_LOGS: &str = "reasoning_logs.csv";
    pub const EXTRACTED_RULES: &str = "extracted_rules.csv";
    pub const INITIAL_PREDICTIONS: &str = "initial_predictions.csv";
    pub const RL_SCORES: &str = "rl_scores.csv";
    pub const PERFORMANCE_SUMMARY: &str = "performance_summary.json";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const METRICS_TABLE: &str = "metrics.txt";
    pub const COST_REPORT: &str = "cost_report.json";
}

/// Paths of every artifact a completed run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub reasoning_logs: PathBuf,
    pub extracted_rules: PathBuf,
    pub policies: Vec<PathBuf>,
    pub rl_scores: Option<PathBuf>,
    pub predictions: PathBuf,
    pub metrics_json: PathBuf,
    pub metrics_table: PathBuf,
    pub cost_report: PathBuf,
    pub manifest: PathBuf,
}

// ---------------------------------------------------------------------------
// Usage metering
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
struct MeterWindow {
    calls: u64,
    prompt_tokens: u64,
    completion_tokens: u64,
    estimated: bool,
}

/// Backend wrapper that counts calls and tokens for the current stage.
struct MeteredBackend {
    inner: Arc<dyn ChatBackend>,
    window: Mutex<MeterWindow>,
}

impl MeteredBackend {
    fn new(inner: Arc<dyn ChatBackend>) -> Self {
        MeteredBackend {
            inner,
            window: Mutex::new(MeterWindow::default()),
        }
    }

    /// Drain the current window, returning usage since the last drain.
    fn drain(&self) -> MeterWindow {
        std::mem::take(&mut *self.window.lock().unwrap())
    }
}

impl ChatBackend for MeteredBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        let mut window = self.window.lock().unwrap();
        window.calls += 1;
        window.prompt_tokens += response.usage.prompt_tokens;
        window.completion_tokens += response.usage.completion_tokens;
        window.estimated |= response.usage.estimated;
        Ok(response)
    }

    fn name(&self) -> &'static str {
        self.inner.name()
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    config: RunConfig,
    backend: Arc<MeteredBackend>,
    clock: Box<dyn Clock>,
    config_hash: String,
}

fn build_backend(config: &RunConfig) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    match config.backend.mode {
        BackendMode::Mock => {
            let script = config
                .backend
                .mock_script
                .as_ref()
                .expect("validated: mock mode has a script");
            Ok(Arc::new(ScriptedBackend::from_script_file(script)?))
        }
        BackendMode::Live => {
            let key = std::env::var(&config.backend.credential_env).map_err(|_| {
                GatewayError::Auth(format!(
                    "credential environment variable {} is not set",
                    config.backend.credential_env
                ))
            })?;
            Ok(Arc::new(HttpBackend::new(
                config.backend.endpoint.clone(),
                config.backend.model.clone(),
                key,
                config.retry,
            )))
        }
    }
}

impl Pipeline {
    /// Build a pipeline with the backend described by the config.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let backend = build_backend(&config)?;
        Ok(Self::assemble(config, backend))
    }

    /// Build a pipeline around an injected backend (tests use this to share
    /// a scripted backend handle and count its calls).
    pub fn with_backend(
        config: RunConfig,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self::assemble(config, backend))
    }

    fn assemble(config: RunConfig, backend: Arc<dyn ChatBackend>) -> Self {
        // Mock runs must be byte-deterministic, so they get the fixed clock.
        let clock: Box<dyn Clock> = match config.backend.mode {
            BackendMode::Mock => Box::new(FixedClock::default()),
            BackendMode::Live => Box::new(SystemClock),
        };
        let config_hash = config.config_hash();
        Pipeline {
            backend: Arc::new(MeteredBackend::new(backend)),
            config,
            clock,
            config_hash,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn sessions(&self) -> MemorySessions {
        MemorySessions::new(
            &self.config.out_dir,
            self.config.stages.memory_scope,
            self.config.memory,
        )
    }

    /// Fresh end-to-end run: existing journal and artifacts are discarded.
    pub fn run(&self) -> Result<RunArtifacts, PipelineError> {
        self.start(false, None)
    }

    /// Resume an interrupted run; completed stages are skipped.
    pub fn resume(&self) -> Result<RunArtifacts, PipelineError> {
        self.start(true, None)
    }

    /// Run until `stop_after` completes (inclusive), journaling progress.
    /// With `resume` set, previously completed stages are skipped.
    pub fn run_until(
        &self,
        resume: bool,
        stop_after: Option<StageId>,
    ) -> Result<Option<RunArtifacts>, PipelineError> {
        std::fs::create_dir_all(&self.config.out_dir)?;
        let mut journal = if resume {
            let existing = RunJournal::load(&self.config.out_dir)?.ok_or_else(|| {
                PipelineError::StageFatal {
                    stage: "resume",
                    message: "no run_state.json to resume from".into(),
                }
            })?;
            if existing.config_hash != self.config_hash {
                return Err(ArtifactError::ConfigMismatch {
                    journal: existing.config_hash,
                    current: self.config_hash.clone(),
                }
                .into());
            }
            existing
        } else {
            self.clean_outputs()?;
            RunJournal::new(self.config_hash.clone())
        };
        journal.save(&self.config.out_dir)?;

        let mut artifacts = None;
        for stage in stage_list(&self.config) {
            let name = stage.name();
            if journal.is_complete(&name) {
                log::info!("stage {name} already complete; skipping");
            } else {
                log::info!("running stage {name}");
                self.backend.drain(); // reset the usage window
                let produced = self.run_stage(stage, &journal)?;
                let window = self.backend.drain();
                journal.record(StageRecord {
                    name: name.clone(),
                    calls: window.calls,
                    prompt_tokens: window.prompt_tokens,
                    completion_tokens: window.completion_tokens,
                    estimated: window.estimated,
                });
                journal.save(&self.config.out_dir)?;
                if let Some(produced) = produced {
                    artifacts = Some(produced);
                }
            }
            if stop_after == Some(stage) {
                return Ok(artifacts);
            }
        }

        // A resumed, already-complete run revalidates the manifest.
        if artifacts.is_none() {
            let manifest = RunManifest::load(&self.config.out_dir)?;
            manifest.validate(&self.config.out_dir)?;
            artifacts = Some(self.collect_artifacts());
        }
        Ok(artifacts)
    }

    fn start(
        &self,
        resume: bool,
        stop_after: Option<StageId>,
    ) -> Result<RunArtifacts, PipelineError> {
        self.run_until(resume, stop_after)?
            .ok_or_else(|| PipelineError::StageFatal {
                stage: "evaluate",
                message: "pipeline finished without producing artifacts".into(),
            })
    }

    fn clean_outputs(&self) -> Result<(), PipelineError> {
        use artifact_names::*;
        for name in [
            TRAIN_PROFILES,
            TEST_PROFILES,
            REASONING_LOGS,
            EXTRACTED_RULES,
            INITIAL_PREDICTIONS,
            RL_SCORES,
            PERFORMANCE_SUMMARY,
            PREDICTIONS,
            METRICS_JSON,
            METRICS_TABLE,
            COST_REPORT,
        ] {
            let path = self.out(name);
            if path.exists() {
                std::fs::remove_file(path)?;
            }
        }
        for entry in std::fs::read_dir(&self.config.out_dir)? {
            let path = entry?.path();
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if name.starts_with("policy_v") && name.ends_with(".json") {
                    std::fs::remove_file(path)?;
                }
            }
        }
        let manifest = RunManifest::path(&self.config.out_dir);
        if manifest.exists() {
            std::fs::remove_file(manifest)?;
        }
        self.sessions().reset()?;
        Ok(())
    }

    fn run_stage(
        &self,
        stage: StageId,
        journal: &RunJournal,
    ) -> Result<Option<RunArtifacts>, PipelineError> {
        match stage {
            StageId::Ingest => self.stage_ingest().map(|_| None),
            StageId::Reason => self.stage_reason().map(|_| None),
            StageId::ExtractRules => self.stage_extract_rules().map(|_| None),
            StageId::CompilePolicy => self.stage_compile_policy().map(|_| None),
            StageId::Refine(round) => self.stage_refine(round).map(|_| None),
            StageId::Predict => self.stage_predict().map(|_| None),
            StageId::Evaluate => self.stage_evaluate(journal).map(Some),
        }
    }

    // -- Stage: ingest ------------------------------------------------------

    pub fn stage_ingest(&self) -> Result<(ProfileSet, ProfileSet), PipelineError> {
        let loaded = dataset::load_profiles(
            &self.config.dataset.path,
            self.config.dataset.chunk_size,
            &self.config.dataset.columns,
        )?;
        dataset::write_skipped_report(&self.config.dataset.path, &loaded.skipped)?;
        let spec = SplitSpec {
            train_success: self.config.split.train_success,
            train_failure: self.config.split.train_failure,
            test_success: self.config.split.test_success,
            test_failure: self.config.split.test_failure,
            seed: self.config.seed,
        };
        let (train, test) = dataset::stratified_split(&loaded.profiles, &spec)?;
        dataset::write_profiles_csv(&self.out(artifact_names::TRAIN_PROFILES), &train)?;
        dataset::write_profiles_csv(&self.out(artifact_names::TEST_PROFILES), &test)?;
        Ok((train, test))
    }

    // -- Stage: reason ------------------------------------------------------

    pub fn stage_reason(&self) -> Result<(), PipelineError> {
        let train = dataset::read_profiles_csv(&self.out(artifact_names::TRAIN_PROFILES))?;
        let options = ReasoningOptions {
            temperature: self.config.temperatures.reasoning,
            max_output_tokens: self.config.max_output_tokens,
            checkpoint_every: self.config.checkpoint_every,
            max_inflight: self.config.max_inflight,
        };
        reasoning::generate_all(
            &train.records,
            self.backend.as_ref(),
            &self.sessions(),
            &options,
            &self.out(artifact_names::REASONING_LOGS),
        )?;
        Ok(())
    }

    // -- Stage: extract rules -----------------------------------------------

    pub fn stage_extract_rules(&self) -> Result<Vec<Rule>, PipelineError> {
        let rows = reasoning::read_log_rows(&self.out(artifact_names::REASONING_LOGS))?;
        let mut extracted = Vec::new();
        for row in rows {
            let Some(log) = row.into_log() else {
                continue;
            };
            let actual = log.outcome;
            match rules::extract_rule(
                &log,
                self.backend.as_ref(),
                self.config.temperatures.extraction,
                self.config.max_output_tokens,
            ) {
                Ok(rule) => extracted.push((rule, actual)),
                Err(err) => {
                    log::warn!("rule extraction failed for {}: {err}", log.founder_id);
                }
            }
        }
        if extracted.is_empty() {
            return Err(PipelineError::StageFatal {
                stage: "extract_rules",
                message: "no rules extracted at all".into(),
            });
        }
        rules::write_rules_csv(&self.out(artifact_names::EXTRACTED_RULES), &extracted)?;
        Ok(extracted.into_iter().map(|(rule, _)| rule).collect())
    }

    // -- Stage: compile policy ----------------------------------------------

    pub fn stage_compile_policy(&self) -> Result<DecisionPolicy, PipelineError> {
        let rules = self.load_rules()?;
        let policy = policy::compile_policy(
            &rules,
            self.backend.as_ref(),
            self.config.temperatures.policy,
            self.config.max_output_tokens,
            self.clock.as_ref(),
        )?;
        policy::save_policy(&self.config.out_dir, &policy)?;
        Ok(policy)
    }

    fn load_rules(&self) -> Result<Vec<Rule>, PipelineError> {
        let rows = rules::read_rules_csv(&self.out(artifact_names::EXTRACTED_RULES))?;
        if rows.is_empty() {
            return Err(PipelineError::StageFatal {
                stage: "compile_policy",
                message: "extracted_rules.csv holds no rules".into(),
            });
        }
        Ok(rows.into_iter().map(|(rule, _)| rule).collect())
    }

    // -- Prediction passes ----------------------------------------------------

    fn prediction_options(&self) -> PredictionOptions {
        PredictionOptions {
            temperature: self.config.temperatures.prediction,
            refinement_temperature: self.config.temperatures.refinement,
            max_output_tokens: self.config.max_output_tokens,
        }
    }

    /// One prediction pass over the test set. `two_step` applies the
    /// strict-evaluator refinement to the voted result; `record_memory`
    /// appends the final exchange to conversation memory.
    fn prediction_pass(
        &self,
        policy: &DecisionPolicy,
        two_step: bool,
        record_memory: bool,
    ) -> Result<Vec<PredictionRow>, PipelineError> {
        let test = dataset::read_profiles_csv(&self.out(artifact_names::TEST_PROFILES))?;
        if test.records.is_empty() {
            return Err(PipelineError::StageFatal {
                stage: "predict",
                message: "empty test set".into(),
            });
        }
        let sessions = self.sessions();
        let options = self.prediction_options();
        let k = self.config.stages.ensemble_k;

        let mut rows = Vec::with_capacity(test.records.len());
        for record in &test.records {
            let memory_context = sessions.context_for(&record.id)?;
            let voted = match prediction::predict_ensemble(
                record,
                policy,
                k,
                self.backend.as_ref(),
                &memory_context,
                &options,
            ) {
                Ok(voted) => voted,
                Err(PredictionError::PredictionFailed(k)) => {
                    log::warn!("prediction failed for founder {}", record.id);
                    rows.push(PredictionRow {
                        founder_id: record.id.clone(),
                        actual: record.outcome,
                        predicted: None,
                        refined: false,
                        explanation: format!("error: all {k} candidate replies were unparsable"),
                        candidate_labels: vec![],
                    });
                    continue;
                }
                Err(other) => return Err(other.into()),
            };
            let final_prediction = if two_step {
                prediction::refine_prediction(
                    &voted,
                    record,
                    policy,
                    self.backend.as_ref(),
                    &options,
                )?
            } else {
                voted
            };
            if record_memory {
                sessions.record_exchange(
                    &record.id,
                    &prediction::build_prediction_prompt(record, policy),
                    &format!(
                        "Prediction: {}\nExplanation: {}",
                        final_prediction.label, final_prediction.explanation
                    ),
                    self.backend.as_ref(),
                )?;
            }
            rows.push(PredictionRow {
                founder_id: final_prediction.founder_id.clone(),
                actual: record.outcome,
                predicted: Some(final_prediction.label),
                refined: final_prediction.refined,
                explanation: final_prediction.explanation.clone(),
                candidate_labels: final_prediction
                    .candidates
                    .iter()
                    .map(|c| c.label)
                    .collect(),
            });
        }
        Ok(rows)
    }

    // -- Stage: refine round --------------------------------------------------

    /// One RL round: an initial test pass with the current policy, RL scoring
    /// of its explanations, then policy refinement.
    pub fn stage_refine(&self, round: u32) -> Result<DecisionPolicy, PipelineError> {
        let current = policy::load_latest_policy(&self.config.out_dir)?;
        let initial = self.prediction_pass(&current, false, false)?;
        prediction::write_predictions_csv(
            &self.out(artifact_names::INITIAL_PREDICTIONS),
            &initial,
        )?;

        let mut scores = Vec::new();
        let mut outcomes = Vec::new();
        for row in &initial {
            let Some(predicted) = row.predicted else {
                continue;
            };
            let base = match scoring::judge_base_score(
                &row.explanation,
                self.backend.as_ref(),
                self.config.max_output_tokens,
            ) {
                Ok(base) => base,
                Err(err) => {
                    log::warn!("scoring failed for founder {}: {err}", row.founder_id);
                    continue;
                }
            };
            scores.push(scoring::adjust_score(
                &row.founder_id,
                base,
                row.actual,
                predicted,
                &self.config.rl_rewards,
            )?);
            outcomes.push(PredictionOutcome {
                founder_id: row.founder_id.clone(),
                predicted,
                actual: row.actual,
                explanation: row.explanation.clone(),
            });
        }
        if scores.is_empty() {
            return Err(PipelineError::StageFatal {
                stage: "refine",
                message: format!("round {round}: no scorable predictions"),
            });
        }
        scoring::write_scores_csv(&self.out(artifact_names::RL_SCORES), &scores)?;
        let summary = scoring::summarize_scores(&scores, &outcomes)?;
        std::fs::write(
            self.out(artifact_names::PERFORMANCE_SUMMARY),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;

        let rules = self.load_rules()?;
        let refined = policy::refine_policy(
            &current,
            &rules,
            &summary,
            self.backend.as_ref(),
            self.config.temperatures.refinement,
            self.config.max_output_tokens,
            self.clock.as_ref(),
        )?;
        if refined.version > current.version {
            policy::save_policy(&self.config.out_dir, &refined)?;
        }
        Ok(refined)
    }

    // -- Stage: predict -------------------------------------------------------

    pub fn stage_predict(&self) -> Result<Vec<PredictionRow>, PipelineError> {
        let current = policy::load_latest_policy(&self.config.out_dir)?;
        let rows =
            self.prediction_pass(&current, self.config.stages.two_step, true)?;
        prediction::write_predictions_csv(&self.out(artifact_names::PREDICTIONS), &rows)?;
        Ok(rows)
    }

    // -- Stage: evaluate ------------------------------------------------------

    pub fn stage_evaluate(&self, journal: &RunJournal) -> Result<RunArtifacts, PipelineError> {
        let rows = prediction::read_predictions_csv(&self.out(artifact_names::PREDICTIONS))?;
        let pairs: Vec<_> = rows
            .iter()
            .filter_map(|r| r.predicted.map(|p| (p, r.actual)))
            .collect();
        if pairs.is_empty() {
            return Err(PipelineError::StageFatal {
                stage: "evaluate",
                message: "no evaluable predictions".into(),
            });
        }
        let error_rows = rows.len() - pairs.len();
        if error_rows > 0 {
            log::warn!("{error_rows} founder(s) excluded from evaluation due to errors");
        }
        let cm = evaluation::confusion(&pairs)?;
        let metrics = evaluation::compute_metrics(&cm, self.config.beta)?;
        evaluation::write_metrics_json(&self.out(artifact_names::METRICS_JSON), &cm, &metrics)?;
        std::fs::write(
            self.out(artifact_names::METRICS_TABLE),
            evaluation::render_metrics_table(&cm, &metrics),
        )?;

        self.write_cost_report(journal)?;

        let manifest = RunManifest::collect(
            self.config_hash.clone(),
            &self.config.out_dir,
            &self.manifest_names(),
        )?;
        manifest.save(&self.config.out_dir)?;
        Ok(self.collect_artifacts())
    }

    fn manifest_names(&self) -> Vec<&'static str> {
        use artifact_names::*;
        vec![
            TRAIN_PROFILES,
            TEST_PROFILES,
            REASONING_LOGS,
            EXTRACTED_RULES,
            INITIAL_PREDICTIONS,
            RL_SCORES,
            PERFORMANCE_SUMMARY,
            PREDICTIONS,
            METRICS_JSON,
            METRICS_TABLE,
            COST_REPORT,
        ]
    }

    /// Cost report composed from the journal, so interrupted-and-resumed runs
    /// report the same totals as uninterrupted ones. One fold per stage keeps
    /// `estimated_cost` consistent with [`accumulate_usage`].
    fn write_cost_report(&self, journal: &RunJournal) -> Result<(), PipelineError> {
        let mut report =
            CostReport::new(self.config.cost_rates.prompt, self.config.cost_rates.completion);
        for stage in &journal.completed {
            report = accumulate_usage(
                report,
                crate::gateway::TokenUsage {
                    prompt_tokens: stage.prompt_tokens,
                    completion_tokens: stage.completion_tokens,
                    estimated: stage.estimated,
                },
            );
            // accumulate_usage counts one call per fold; restore the real count.
            report.call_count = report.call_count - 1 + stage.calls;
        }
        let view = CostReportView {
            total_prompt_tokens: report.total_prompt_tokens,
            total_completion_tokens: report.total_completion_tokens,
            call_count: report.call_count,
            estimated_cost: report.estimated_cost,
            estimated: report.estimated,
            calls_by_stage: journal
                .completed
                .iter()
                .map(|s| (s.name.clone(), s.calls))
                .collect(),
        };
        std::fs::write(
            self.out(artifact_names::COST_REPORT),
            serde_json::to_string_pretty(&view).expect("cost report serializes"),
        )?;
        Ok(())
    }

    fn collect_artifacts(&self) -> RunArtifacts {
        use artifact_names::*;
        let mut policies = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&self.config.out_dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    if name.starts_with("policy_v") && name.ends_with(".json") {
                        policies.push(path);
                    }
                }
            }
        }
        policies.sort();
        RunArtifacts {
            out_dir: self.config.out_dir.clone(),
            reasoning_logs: self.out(REASONING_LOGS),
            extracted_rules: self.out(EXTRACTED_RULES),
            policies,
            rl_scores: self.out(RL_SCORES).exists().then(|| self.out(RL_SCORES)),
            predictions: self.out(PREDICTIONS),
            metrics_json: self.out(METRICS_JSON),
            metrics_table: self.out(METRICS_TABLE),
            cost_report: self.out(COST_REPORT),
            manifest: RunManifest::path(&self.config.out_dir),
        }
    }
}

/// Stage-usage view serialized as `cost_report.json`.
#[derive(Debug, Serialize, Deserialize)]
struct CostReportView {
    total_prompt_tokens: u64,
    total_completion_tokens: u64,
    call_count: u64,
    estimated_cost: f64,
    estimated: bool,
    calls_by_stage: std::collections::BTreeMap<String, u64>,
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// One named toggle combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToggleSet {
    pub name: String,
    pub two_step: bool,
    pub ensemble_k: usize,
    pub rl_scoring: bool,
    pub memory_scope: crate::memory::MemoryScope,
    pub refine_rounds: u32,
}

/// Named presets mirroring the single-enhancement comparisons.
pub fn preset_toggle_set(name: &str) -> Option<ToggleSet> {
    use crate::memory::MemoryScope::{Off, Run};
    let mut set = ToggleSet {
        name: name.to_string(),
        two_step: false,
        ensemble_k: 1,
        rl_scoring: false,
        memory_scope: Off,
        refine_rounds: 1,
    };
    match name {
        "baseline" => {}
        "two_step" => set.two_step = true,
        "ensemble" => set.ensemble_k = 3,
        "rl" => set.rl_scoring = true,
        "memory" => set.memory_scope = Run,
        "combined" => {
            set.two_step = true;
            set.ensemble_k = 3;
            set.rl_scoring = true;
            set.memory_scope = Run;
        }
        _ => return None,
    }
    Some(set)
}

/// One row of the ablation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: Option<crate::evaluation::MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Run one pipeline per toggle set (each in its own subdirectory of
/// `<out_dir>/ablate`) and assemble the comparison table. Per-run failures
/// become row-level errors instead of aborting the matrix.
pub fn ablation_matrix(
    base: &RunConfig,
    sets: &[ToggleSet],
) -> Result<AblationTable, PipelineError> {
    if sets.is_empty() {
        return Err(PipelineError::StageFatal {
            stage: "ablate",
            message: "empty toggle list".into(),
        });
    }
    let mut rows = Vec::new();
    for set in sets {
        let mut config = base.clone();
        config.stages.two_step = set.two_step;
        config.stages.ensemble_k = set.ensemble_k;
        config.stages.rl_scoring = set.rl_scoring;
        config.stages.memory_scope = set.memory_scope;
        config.stages.refine_rounds = set.refine_rounds;
        config.out_dir = base.out_dir.join("ablate").join(&set.name);
        std::fs::create_dir_all(&config.out_dir)?;

        let outcome = Pipeline::new(config.clone()).and_then(|p| p.run());
        match outcome {
            Ok(artifacts) => {
                let body = std::fs::read_to_string(&artifacts.metrics_json)?;
                let report: crate::evaluation::MetricsReport =
                    serde_json::from_str(&body).map_err(|e| ArtifactError::Corrupt {
                        path: artifacts.metrics_json.clone(),
                        message: e.to_string(),
                    })?;
                rows.push(AblationRow {
                    name: set.name.clone(),
                    metrics: Some(report),
                    error: None,
                });
            }
            Err(err) => {
                log::warn!("ablation run `{}` failed: {err}", set.name);
                rows.push(AblationRow {
                    name: set.name.clone(),
                    metrics: None,
                    error: Some(err.to_string()),
                });
            }
        }
    }
    Ok(AblationTable { rows })
}

/// Text rendering of the comparison: one configuration per row, metric
/// columns to three decimals.
pub fn render_ablation_table(table: &AblationTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "config", "precision", "recall", "f1", "mcc", "accuracy"
    ));
    for row in &table.rows {
        match (&row.metrics, &row.error) {
            (Some(m), _) => out.push_str(&format!(
                "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}\n",
                row.name, m.precision, m.recall, m.f1, m.mcc, m.accuracy
            )),
            (None, Some(err)) => {
                out.push_str(&format!("{:<12} error: {err}\n", row.name));
            }
            (None, None) => out.push_str(&format!("{:<12} error: unknown\n", row.name)),
        }
    }
    out
}
