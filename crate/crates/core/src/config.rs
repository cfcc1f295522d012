//! TOML experiment configuration.
//!
//! Every section has defaults, so an empty file is a valid configuration;
//! unknown keys are rejected so typos surface as errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anova::FactorialConfig;
use crate::datasetgen::{SplitConfig, WindowConfig};
use crate::evaluation::ZeroPolicy;
use crate::learners::{Hyperparams, ModelKind};
use crate::simcluster::{ChaosProfile, ClusterTopology, Consistency, OpType, SimConstants};
use crate::telemetry::TelemetryConfig;
use crate::tuning::{Metric, TpeConfig};
use crate::workload::WorkloadPlan;
use crate::{Error, Result};

/// One simulated slice deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    /// One-way delay from the load generator to each of the three replica
    /// hosts, ms.
    pub replica_delays_ms: [f64; 3],
    pub inter_replica_ms: f64,
    /// Relative jitter per link, as a fraction of its delay.
    pub jitter_frac: f64,
    pub link_loss: f64,
    pub replica_factor: usize,
    pub tokens: usize,
    pub consistency: Consistency,
    pub chaos: ChaosProfile,
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            name: "fibre".into(),
            replica_delays_ms: [2.0, 5.0, 8.0],
            inter_replica_ms: 1.0,
            jitter_frac: 0.1,
            link_loss: 0.001,
            replica_factor: 2,
            tokens: 256,
            consistency: Consistency::Quorum,
            chaos: ChaosProfile::default(),
        }
    }
}

impl Profile {
    pub fn fibre() -> Profile {
        Profile::default()
    }

    pub fn fabric() -> Profile {
        Profile {
            name: "fabric".into(),
            replica_delays_ms: [10.0, 20.0, 35.0],
            inter_replica_ms: 5.0,
            ..Profile::default()
        }
    }

    pub fn topology(&self) -> ClusterTopology {
        let mut t = ClusterTopology::testbed(self.replica_delays_ms, self.inter_replica_ms);
        for row in &mut t.links {
            for l in row.iter_mut() {
                l.jitter_ms = self.jitter_frac * l.delay_ms;
                l.loss_prob = self.link_loss;
            }
        }
        t.replica_factor = self.replica_factor;
        t.tokens = self.tokens;
        t.consistency = self.consistency;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub profiles: Vec<Profile>,
    pub constants: SimConstants,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        SimulatorSection {
            profiles: vec![Profile::fibre(), Profile::fabric()],
            constants: SimConstants::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub mean_level: f64,
    pub amplitude: f64,
    pub period_s: f64,
    pub row_budget: u64,
    pub ops_per_process_second: f64,
    pub warmup_rows: u64,
    pub horizon_s: Option<f64>,
    /// Operation types to generate a dataset for.
    pub op_types: Vec<OpType>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let p = WorkloadPlan::default();
        WorkloadSection {
            mean_level: p.mean_level,
            amplitude: p.amplitude,
            period_s: p.period_s,
            row_budget: p.row_budget,
            ops_per_process_second: p.ops_per_process_second,
            warmup_rows: p.warmup_rows,
            horizon_s: p.horizon_s,
            op_types: vec![OpType::Write, OpType::Read],
        }
    }
}

impl WorkloadSection {
    pub fn plan(&self, op_type: OpType) -> WorkloadPlan {
        WorkloadPlan {
            mean_level: self.mean_level,
            amplitude: self.amplitude,
            period_s: self.period_s,
            op_type,
            row_budget: self.row_budget,
            ops_per_process_second: self.ops_per_process_second,
            warmup_rows: self.warmup_rows,
            horizon_s: self.horizon_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub window: usize,
    pub stride: usize,
    pub train_frac: Option<f64>,
    pub test_rows: Option<usize>,
    pub include_lagged_target: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let w = WindowConfig::default();
        DatasetSection {
            window: w.window,
            stride: w.stride,
            train_frac: Some(0.8),
            test_rows: None,
            include_lagged_target: w.include_lagged_target,
        }
    }
}

impl DatasetSection {
    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            window: self.window,
            stride: self.stride,
            include_lagged_target: self.include_lagged_target,
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_frac: self.train_frac,
            test_rows: self.test_rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Forest,
            hyperparams: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub n_trials: usize,
    pub width: usize,
    pub metric: Metric,
    pub tpe: TpeConfig,
}

impl Default for TuningSection {
    fn default() -> Self {
        TuningSection {
            n_trials: 50,
            width: 1,
            metric: Metric::Mape,
            tpe: TpeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub repeats: usize,
    pub zero_policy: ZeroPolicy,
    pub models: Vec<ModelKind>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            repeats: 10,
            zero_policy: ZeroPolicy::Exclude,
            models: ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnovaSection {
    pub replicates: usize,
    pub ops_per_run: usize,
    pub op_type: OpType,
    pub ops_per_second: f64,
    pub delay_levels_ms: [f64; 2],
    pub loss_levels: [f64; 2],
    pub token_levels: [usize; 2],
    pub jitter_ms: [f64; 2],
    /// Name of the simulator profile whose topology hosts the experiment.
    pub profile: String,
}

impl Default for AnovaSection {
    fn default() -> Self {
        let f = FactorialConfig::default();
        AnovaSection {
            replicates: f.replicates,
            ops_per_run: f.ops_per_run,
            op_type: f.op_type,
            ops_per_second: f.ops_per_second,
            delay_levels_ms: f.delay_levels_ms,
            loss_levels: f.loss_levels,
            token_levels: f.token_levels,
            jitter_ms: f.jitter_ms,
            profile: "fibre".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub listen: String,
    pub model_dir: Option<PathBuf>,
    pub max_body_bytes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            listen: "127.0.0.1:8080".into(),
            model_dir: None,
            max_body_bytes: 64 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub simulator: SimulatorSection,
    pub workload: WorkloadSection,
    pub telemetry: TelemetryConfig,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub tuning: TuningSection,
    pub evaluation: EvaluationSection,
    pub anova: AnovaSection,
    pub service: ServiceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            simulator: SimulatorSection::default(),
            workload: WorkloadSection::default(),
            telemetry: TelemetryConfig::default(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            tuning: TuningSection::default(),
            evaluation: EvaluationSection::default(),
            anova: AnovaSection::default(),
            service: ServiceSection::default(),
        }
    }
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            cfg_err(&path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Semantic checks with `section.key` paths.
    pub fn validate(&self) -> Result<()> {
        let sim = &self.simulator;
        if sim.profiles.is_empty() {
            return Err(cfg_err("simulator.profiles", "at least one profile is required"));
        }
        for (i, p) in sim.profiles.iter().enumerate() {
            let at = |k: &str| format!("simulator.profiles[{i}].{k}");
            if p.name.is_empty() || p.name.contains(['/', '\\', ' ']) {
                return Err(cfg_err(&at("name"), "must be a non-empty name without spaces or slashes"));
            }
            if sim.profiles[..i].iter().any(|q| q.name == p.name) {
                return Err(cfg_err(&at("name"), format!("duplicate profile `{}`", p.name)));
            }
            if p.replica_delays_ms.iter().any(|d| !(*d >= 0.0)) || !(p.inter_replica_ms >= 0.0) {
                return Err(cfg_err(&at("replica_delays_ms"), "delays must be non-negative"));
            }
            if !(0.0..=1.0).contains(&p.link_loss) {
                return Err(cfg_err(&at("link_loss"), "must lie in [0, 1]"));
            }
            if !(p.jitter_frac >= 0.0) {
                return Err(cfg_err(&at("jitter_frac"), "must be non-negative"));
            }
            p.topology().validate().map_err(|e| cfg_err(&at("replica_factor"), e.to_string()))?;
            p.chaos.validate().map_err(|e| cfg_err(&at("chaos"), e.to_string()))?;
        }
        let c = &sim.constants;
        if !(c.rto_ms > 0.0 && c.abort_timeout_ms > 0.0) {
            return Err(cfg_err("simulator.constants", "rto_ms and abort_timeout_ms must be positive"));
        }
        if self.workload.op_types.is_empty() {
            return Err(cfg_err("workload.op_types", "at least one operation type is required"));
        }
        self.workload
            .plan(OpType::Write)
            .validate()
            .map_err(|e| cfg_err("workload", e.to_string()))?;
        let d = &self.dataset;
        if d.window == 0 {
            return Err(cfg_err("dataset.window", "must be positive"));
        }
        if d.stride == 0 {
            return Err(cfg_err("dataset.stride", "must be positive"));
        }
        match (d.train_frac, d.test_rows) {
            (None, None) => return Err(cfg_err("dataset.train_frac", "set train_frac or test_rows")),
            (Some(f), _) if !(f > 0.0 && f < 1.0) => {
                return Err(cfg_err("dataset.train_frac", "must lie in (0, 1)"));
            }
            _ => {}
        }
        if self.tuning.n_trials == 0 {
            return Err(cfg_err("tuning.n_trials", "must be at least 1"));
        }
        if !(self.tuning.tpe.gamma > 0.0 && self.tuning.tpe.gamma < 1.0) {
            return Err(cfg_err("tuning.tpe.gamma", "must lie in (0, 1)"));
        }
        if self.evaluation.repeats == 0 {
            return Err(cfg_err("evaluation.repeats", "must be at least 1"));
        }
        if self.evaluation.models.is_empty() {
            return Err(cfg_err("evaluation.models", "at least one model kind is required"));
        }
        if self.anova.replicates < 2 {
            return Err(cfg_err("anova.replicates", "must be at least 2"));
        }
        if self.profile(&self.anova.profile).is_none() {
            return Err(cfg_err("anova.profile", format!("no simulator profile named `{}`", self.anova.profile)));
        }
        if self.service.max_body_bytes == 0 {
            return Err(cfg_err("service.max_body_bytes", "must be positive"));
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<&Profile> {
        self.simulator.profiles.iter().find(|p| p.name == name)
    }

    pub fn factorial(&self) -> FactorialConfig {
        let a = &self.anova;
        let profile = self.profile(&a.profile).cloned().unwrap_or_default();
        FactorialConfig {
            replicates: a.replicates,
            ops_per_run: a.ops_per_run,
            op_type: a.op_type,
            ops_per_second: a.ops_per_second,
            delay_levels_ms: a.delay_levels_ms,
            loss_levels: a.loss_levels,
            token_levels: a.token_levels,
            jitter_ms: a.jitter_ms,
            topology: profile.topology(),
            constants: self.simulator.constants.clone(),
        }
    }
}
