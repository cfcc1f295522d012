//! End-to-end stages shared by the CLI, the acceptance suite and tests.

use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Profile};
use crate::datasetgen::{fit_scaler, make_windows, write_csv, Provenance, Scaler, SplitTag, WindowConfig, WindowedDataset};
use crate::evaluation::{evaluate, EvalReport};
use crate::learners::{fit, Hyperparams, ModelKind, TrainedModel};
use crate::rng::{derive_seed, rng_from};
use crate::simcluster::{OpType, SimCluster};
use crate::telemetry::{align_and_merge, clean, collect_application, collect_cluster, collect_network, CleanReport, TelemetryConfig, TimeSeriesTable};
use crate::tuning::{run_study, ModelObjective, SearchSpace, Study, StudyConfig};
use crate::workload::{run_workload, WorkloadTrace};
use crate::{Error, Result};

/// Stable 64-bit tag for a profile name, used in seed derivation.
fn name_tag(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn op_tag(op: OpType) -> u64 {
    match op {
        OpType::Write => 0,
        OpType::Read => 1,
    }
}

pub struct GeneratedDataset {
    pub profile: String,
    pub op_type: OpType,
    pub table: TimeSeriesTable,
    pub trace: WorkloadTrace,
    pub report: CleanReport,
}

impl GeneratedDataset {
    /// `<profile>-<op>`, e.g. `fibre-write`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.profile, self.op_type)
    }
}

/// Simulates one (profile, operation) pair and builds its cleaned table.
pub fn generate(profile: &Profile, op_type: OpType, cfg: &ExperimentConfig, seed: u64) -> Result<GeneratedDataset> {
    let path = [name_tag(&profile.name), op_tag(op_type)];
    let mut cluster = SimCluster::new(
        profile.topology(),
        cfg.simulator.constants.clone(),
        derive_seed(seed, &[0, path[0], path[1]]),
    )?;
    cluster.apply_chaos(profile.chaos)?;
    let plan = cfg.workload.plan(op_type);
    let mut rng = rng_from(seed, &[1, path[0], path[1]]);
    let trace = run_workload(&mut cluster, &plan, &mut rng)?;
    if trace.rows.is_empty() {
        return Err(Error::InsufficientRows { needed: 1, have: 0 });
    }
    let start_s = trace.measured_start_s.floor() as i64;
    let end_s = trace.rows.last().map_or(start_s, |r| r.timestamp_s.floor() as i64) + 1;
    let tcfg = TelemetryConfig {
        seed: derive_seed(seed, &[2, path[0], path[1]]),
        ..cfg.telemetry.clone()
    };
    let app = collect_application(&trace)?;
    let host = collect_cluster(&mut cluster, start_s, end_s, &tcfg);
    let net = collect_network(&cluster, start_s, end_s);
    let merged = align_and_merge(&[app, host, net])?;
    let (table, report) = clean(&merged, 1)?;
    Ok(GeneratedDataset {
        profile: profile.name.clone(),
        op_type,
        table,
        trace,
        report,
    })
}

/// Hex sha256 of the table's CSV rendering.
pub fn table_hash(table: &TimeSeriesTable) -> String {
    let mut buf = Vec::new();
    write_csv(table, &mut buf).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}

/// Split, train-only scaling and windowing of one table.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset_id: String,
    pub scaler: Scaler,
    pub train_table: TimeSeriesTable,
    pub test_table: TimeSeriesTable,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

/// `dataset_id` defaults to the table hash prefix.
pub fn prepare(table: &TimeSeriesTable, cfg: &ExperimentConfig, dataset_id: Option<&str>) -> Result<Prepared> {
    let id = dataset_id.map_or_else(|| table_hash(table)[..16].to_string(), str::to_string);
    let (train_table, test_table) = cfg.dataset.split_config().split(table)?;
    let scaler = fit_scaler(&train_table)?;
    let wcfg = cfg.dataset.window_config();
    let prov = |split| Provenance {
        source_id: id.clone(),
        split,
    };
    let train = make_windows(&scaler.apply(&train_table)?, &wcfg, prov(SplitTag::Train))?;
    let test = make_windows(&scaler.apply(&test_table)?, &wcfg, prov(SplitTag::Test))?;
    Ok(Prepared {
        dataset_id: id,
        scaler,
        train_table,
        test_table,
        train,
        test,
    })
}

/// Test windows of `table` scaled with a persisted model's own scaler, for
/// scoring a model trained elsewhere.
pub fn test_windows_for(model: &TrainedModel, table: &TimeSeriesTable, cfg: &ExperimentConfig) -> Result<WindowedDataset> {
    let (_, test_table) = cfg.dataset.split_config().split(table)?;
    let wcfg = WindowConfig {
        window: model.window,
        include_lagged_target: model.feature_names.len() == model.scaler.n_features() + 1,
        ..cfg.dataset.window_config()
    };
    let prov = Provenance {
        source_id: table_hash(table)[..16].to_string(),
        split: SplitTag::Test,
    };
    make_windows(&model.scaler.apply(&test_table)?, &wcfg, prov)
}

pub fn train(prepared: &Prepared, kind: ModelKind, hp: &Hyperparams, seed: u64) -> Result<TrainedModel> {
    fit(kind, &prepared.train, hp, seed, &prepared.scaler)
}

/// Repeated fits with seeds `base_seed + i`; the data stays fixed.
pub fn repeat_evaluate(
    prepared: &Prepared,
    kinds: &[ModelKind],
    hp: &Hyperparams,
    base_seed: u64,
    repeats: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(kinds.len() * repeats);
    for &kind in kinds {
        for i in 0..repeats {
            let model = train(prepared, kind, hp, base_seed.wrapping_add(i as u64))?;
            out.push(evaluate(&model, &prepared.test, cfg.evaluation.zero_policy)?);
        }
    }
    Ok(out)
}

/// TPE study over the training split only.
pub fn tune(prepared: &Prepared, kind: ModelKind, base: &Hyperparams, cfg: &ExperimentConfig, seed: u64) -> Result<Study> {
    let objective = ModelObjective::new(kind, &prepared.train, &prepared.scaler, cfg.tuning.metric)?;
    let study_cfg = StudyConfig {
        n_trials: cfg.tuning.n_trials,
        seed,
        tpe: cfg.tuning.tpe,
        width: cfg.tuning.width,
    };
    run_study(&objective, &SearchSpace::for_model(kind), base, &study_cfg)
}
