//! Per-second application, cluster and network metrics, merged into one
//! timestamp-aligned table whose last column is the latency target.
//!
//! Feature names come from a fixed schema (see [`APPLICATION_METRICS`],
//! [`CLUSTER_METRICS`], [`NETWORK_METRICS`]); per-node columns carry a
//! `node{i}_` prefix. The schema is a minimal subset of what a host agent
//! would export, restricted to quantities observable from outside the
//! simulator.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::simcluster::{SimCluster, US_PER_S};
use crate::workload::WorkloadTrace;
use crate::{Error, Result};

pub const TARGET_SOURCE: &str = "mean_latency_ms";
pub const TARGET_COLUMN: &str = "target_latency_ms";

pub const APPLICATION_METRICS: [&str; 5] = [
    "ops_per_sec",
    "error_count",
    "rows_per_sec",
    "p95_latency_ms",
    TARGET_SOURCE,
];
pub const CLUSTER_METRICS: [&str; 3] = ["cpu_util", "ram_mb", "interrupts_per_sec"];
pub const NETWORK_METRICS: [&str; 4] = ["bytes_tx", "bytes_rx", "drops", "retransmits"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Application,
    Cluster,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub timestamp_s: i64,
    pub source: Source,
    pub node: Option<usize>,
    /// Absent names are missing measurements.
    pub values: BTreeMap<String, f64>,
}

/// Whether `column` (with any `node{i}_` prefix) belongs to the schema.
pub fn in_schema(column: &str) -> bool {
    let base = match column.strip_prefix("node") {
        Some(rest) => match rest.split_once('_') {
            Some((idx, name)) if idx.chars().all(|c| c.is_ascii_digit()) => name,
            _ => column,
        },
        None => column,
    };
    base == TARGET_COLUMN
        || APPLICATION_METRICS.contains(&base)
        || CLUSTER_METRICS.contains(&base)
        || NETWORK_METRICS.contains(&base)
}

/// Buckets a trace into 1 s application metrics. Buckets without successful
/// ops carry no latency values.
pub fn collect_application(trace: &WorkloadTrace) -> Result<Vec<MetricRecord>> {
    let (Some(first), Some(last)) = (trace.rows.first(), trace.rows.last()) else {
        return Err(Error::InvalidArgument("empty trace".into()));
    };
    let lo = first.timestamp_s.floor() as i64;
    let hi = last.timestamp_s.floor() as i64;
    let mut buckets: Vec<(u64, u64, Vec<f64>)> = vec![(0, 0, Vec::new()); (hi - lo + 1) as usize];
    for r in &trace.rows {
        let b = &mut buckets[(r.timestamp_s.floor() as i64 - lo) as usize];
        b.0 += 1;
        if r.error {
            b.1 += 1;
        } else {
            b.2.push(r.latency_ms);
        }
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(i, (ops, errors, mut lat))| {
            let mut values = BTreeMap::new();
            values.insert("ops_per_sec".to_string(), ops as f64);
            values.insert("error_count".to_string(), errors as f64);
            values.insert("rows_per_sec".to_string(), lat.len() as f64);
            if !lat.is_empty() {
                let mean = lat.iter().sum::<f64>() / lat.len() as f64;
                lat.sort_by(f64::total_cmp);
                let rank = ((0.95 * lat.len() as f64).ceil() as usize).max(1);
                values.insert(TARGET_SOURCE.to_string(), mean);
                values.insert("p95_latency_ms".to_string(), lat[rank - 1]);
            }
            MetricRecord {
                timestamp_s: lo + i as i64,
                source: Source::Application,
                node: None,
                values,
            }
        })
        .collect())
}

/// Host-metric model constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    pub idle_cpu: f64,
    pub ram_base_mb: f64,
    /// MB per op in flight.
    pub c_ram: f64,
    /// Interrupts per message handled.
    pub c_int: f64,
    /// Gaussian noise standard deviation, relative to each metric's scale:
    /// cpu in utilisation units, ram in MB, interrupts per second.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            idle_cpu: 0.02,
            ram_base_mb: 2048.0,
            c_ram: 1.5,
            c_int: 1.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl TelemetryConfig {
    pub fn noise_free(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }
}

/// Per-node CPU, RAM and interrupt metrics for seconds `start_s..end_s`.
pub fn collect_cluster(cluster: &mut SimCluster, start_s: i64, end_s: i64, cfg: &TelemetryConfig) -> Vec<MetricRecord> {
    cluster.settle();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for s in start_s..end_s {
        for node in 0..cluster.node_count() {
            let c = cluster.node_seconds(node).get(s.max(0) as usize).copied().unwrap_or_default();
            let capacity = cluster.topology().nodes[node].cpu_capacity;
            let mut rng = rng_from(cfg.seed, &[0x636c_7573, node as u64, s as u64]);
            let mut noise = |scale: f64| cfg.noise_sigma * scale * normal.sample(&mut rng);
            let cpu = (cfg.idle_cpu + c.work_us / (capacity * US_PER_S as f64) + noise(1.0)).clamp(0.0, 1.0);
            let inflight = c.inflight_us / US_PER_S as f64;
            let ram = cfg.ram_base_mb + cfg.c_ram * inflight + noise(cfg.ram_base_mb * 0.01);
            let interrupts = (cfg.c_int * c.messages as f64 + noise(10.0)).max(0.0);
            let values = BTreeMap::from([
                ("cpu_util".to_string(), cpu),
                ("ram_mb".to_string(), ram),
                ("interrupts_per_sec".to_string(), interrupts),
            ]);
            out.push(MetricRecord {
                timestamp_s: s,
                source: Source::Cluster,
                node: Some(node),
                values,
            });
        }
    }
    out
}

/// Per-node interface counters for seconds `start_s..end_s`.
pub fn collect_network(cluster: &SimCluster, start_s: i64, end_s: i64) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for s in start_s..end_s {
        for node in 0..cluster.node_count() {
            let c = cluster.node_seconds(node).get(s.max(0) as usize).copied().unwrap_or_default();
            let values = BTreeMap::from([
                ("bytes_tx".to_string(), c.bytes_tx as f64),
                ("bytes_rx".to_string(), c.bytes_rx as f64),
                ("drops".to_string(), c.drops as f64),
                ("retransmits".to_string(), c.retransmits as f64),
            ]);
            out.push(MetricRecord {
                timestamp_s: s,
                source: Source::Network,
                node: Some(node),
                values,
            });
        }
    }
    out
}

/// Timestamp-aligned feature table with a single target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesTable {
    pub timestamps: Vec<i64>,
    pub feature_names: Vec<String>,
    /// Row-major features; `NaN` marks a missing value before cleaning.
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub target_name: String,
    /// Columns removed by [`clean`].
    #[serde(default)]
    pub dropped_columns: Vec<String>,
}

impl TimeSeriesTable {
    pub fn new(timestamps: Vec<i64>, feature_names: Vec<String>, features: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if features.len() != timestamps.len() || target.len() != timestamps.len() {
            return Err(Error::LengthMismatch {
                expected: timestamps.len(),
                found: features.len().min(target.len()),
            });
        }
        if let Some(bad) = features.iter().find(|r| r.len() != feature_names.len()) {
            return Err(Error::LengthMismatch {
                expected: feature_names.len(),
                found: bad.len(),
            });
        }
        Ok(TimeSeriesTable {
            timestamps,
            feature_names,
            features,
            target,
            target_name: TARGET_COLUMN.to_string(),
            dropped_columns: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.features.iter().map(|r| r[j]).collect()
    }

    /// Rows `range` as a new table.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TimeSeriesTable {
        TimeSeriesTable {
            timestamps: self.timestamps[range.clone()].to_vec(),
            feature_names: self.feature_names.clone(),
            features: self.features[range.clone()].to_vec(),
            target: self.target[range].to_vec(),
            target_name: self.target_name.clone(),
            dropped_columns: self.dropped_columns.clone(),
        }
    }

    pub fn has_missing(&self) -> bool {
        self.target.iter().any(|v| v.is_nan()) || self.features.iter().flatten().any(|v| v.is_nan())
    }
}

/// Fills `NaN`s: linear in `x` between observed neighbours, nearest observed
/// value at the edges. All-missing columns stay missing.
pub fn interpolate(x: &[i64], ys: &mut [f64]) {
    let observed: Vec<usize> = (0..ys.len()).filter(|&i| !ys[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
        return;
    };
    let (head, last_val) = (ys[first], ys[last]);
    for y in ys[..first].iter_mut() {
        *y = head;
    }
    for y in ys[last + 1..].iter_mut() {
        *y = last_val;
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b == a + 1 {
            continue;
        }
        let (xa, xb) = (x[a] as f64, x[b] as f64);
        let (ya, yb) = (ys[a], ys[b]);
        for i in a + 1..b {
            let f = (x[i] as f64 - xa) / (xb - xa);
            ys[i] = ya + f * (yb - ya);
        }
    }
}

fn column_key(node: Option<usize>, name: &str) -> (i64, usize, String) {
    let rank = APPLICATION_METRICS
        .iter()
        .chain(CLUSTER_METRICS.iter())
        .chain(NETWORK_METRICS.iter())
        .position(|&m| m == name)
        .unwrap_or(usize::MAX);
    (node.map_or(-1, |n| n as i64), rank, name.to_string())
}

fn column_name(node: Option<usize>, name: &str) -> String {
    match node {
        Some(n) => format!("node{n}_{name}"),
        None => name.to_string(),
    }
}

/// Outer-joins metric streams on the integer second. Application
/// `mean_latency_ms` becomes the target; gaps are filled by interpolation.
pub fn align_and_merge(streams: &[Vec<MetricRecord>]) -> Result<TimeSeriesTable> {
    let has_target = streams.iter().flatten().any(|r| {
        r.source == Source::Application && r.values.contains_key(TARGET_SOURCE)
    });
    if !has_target {
        return Err(Error::NoTargetSource);
    }
    let mut keys = BTreeSet::new();
    let mut seconds = BTreeSet::new();
    for r in streams.iter().flatten() {
        seconds.insert(r.timestamp_s);
        for name in r.values.keys() {
            if r.node.is_none() && name == TARGET_SOURCE {
                continue;
            }
            keys.insert(column_key(r.node, name));
        }
    }
    let columns: Vec<(i64, usize, String)> = keys.into_iter().collect();
    let col_index: BTreeMap<(Option<usize>, &str), usize> = columns
        .iter()
        .enumerate()
        .map(|(j, (node, _, name))| ((usize::try_from(*node).ok(), name.as_str()), j))
        .collect();
    let timestamps: Vec<i64> = seconds.into_iter().collect();
    let row_of: BTreeMap<i64, usize> = timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let n = timestamps.len();
    let mut cols = vec![vec![f64::NAN; n]; columns.len()];
    let mut target = vec![f64::NAN; n];
    for r in streams.iter().flatten() {
        let i = row_of[&r.timestamp_s];
        for (name, &v) in &r.values {
            if r.node.is_none() && name == TARGET_SOURCE {
                target[i] = v;
            } else {
                cols[col_index[&(r.node, name.as_str())]][i] = v;
            }
        }
    }
    for c in &mut cols {
        interpolate(&timestamps, c);
    }
    interpolate(&timestamps, &mut target);
    let features = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let names = columns.iter().map(|(node, _, name)| column_name(usize::try_from(*node).ok(), name)).collect();
    TimeSeriesTable::new(timestamps, names, features, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub rows: usize,
    pub dropped_columns: Vec<String>,
}

/// Collapses duplicate seconds (mean), sorts, drops constant columns and
/// interpolates what is still missing. Fails below `min_rows` rows.
pub fn clean(table: &TimeSeriesTable, min_rows: usize) -> Result<(TimeSeriesTable, CleanReport)> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by_key(|&i| table.timestamps[i]);

    let width = table.n_features();
    let mut timestamps = Vec::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut target = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = table.timestamps[order[i]];
        let mut j = i;
        while j < order.len() && table.timestamps[order[j]] == t {
            j += 1;
        }
        let group = &order[i..j];
        let row = (0..width)
            .map(|c| nan_mean(group.iter().map(|&r| table.features[r][c])))
            .collect();
        timestamps.push(t);
        features.push(row);
        target.push(nan_mean(group.iter().map(|&r| table.target[r])));
        i = j;
    }

    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..width {
        let mut vals = features.iter().map(|r| r[c]).filter(|v| !v.is_nan());
        let constant = match vals.next() {
            None => true,
            Some(first) => vals.all(|v| v == first),
        };
        if constant {
            dropped.push(table.feature_names[c].clone());
        } else {
            keep.push(c);
        }
    }
    let mut cols: Vec<Vec<f64>> = keep.iter().map(|&c| features.iter().map(|r| r[c]).collect()).collect();
    for col in &mut cols {
        interpolate(&timestamps, col);
    }
    interpolate(&timestamps, &mut target);
    if target.iter().any(|v| v.is_nan()) {
        return Err(Error::NoTargetSource);
    }
    let n = timestamps.len();
    if n < min_rows {
        return Err(Error::InsufficientRows { needed: min_rows, have: n });
    }
    let mut all_dropped = table.dropped_columns.clone();
    all_dropped.extend(dropped.iter().cloned());
    let out = TimeSeriesTable {
        timestamps,
        feature_names: keep.iter().map(|&c| table.feature_names[c].clone()).collect(),
        features: (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect(),
        target,
        target_name: table.target_name.clone(),
        dropped_columns: all_dropped,
    };
    let report = CleanReport {
        rows: n,
        dropped_columns: dropped,
    };
    Ok((out, report))
}

fn nan_mean(vals: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vals.filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
