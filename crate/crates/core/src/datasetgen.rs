//! Time-ordered splits, z-score scaling and sliding-window tensors.
//!
//! Standard deviations use the population convention (divide by n).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numfmt::{f17, f17_vec, fmt_f64, parse_f64};
use crate::telemetry::{TimeSeriesTable, TARGET_COLUMN};
use crate::{Error, Result};

pub const TIMESTAMP_COLUMN: &str = "timestamp_s";

/// First `ceil(rows * train_frac)` rows train, the rest test.
pub fn time_split(table: &TimeSeriesTable, train_frac: f64) -> Result<(TimeSeriesTable, TimeSeriesTable)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train_frac {train_frac} outside (0,1)")));
    }
    let n = table.len();
    let n_train = ((n as f64) * train_frac).ceil() as usize;
    split_at(table, n_train)
}

/// Reserves the last `test_rows` rows for testing.
pub fn time_split_rows(table: &TimeSeriesTable, test_rows: usize) -> Result<(TimeSeriesTable, TimeSeriesTable)> {
    split_at(table, table.len().saturating_sub(test_rows))
}

fn split_at(table: &TimeSeriesTable, n_train: usize) -> Result<(TimeSeriesTable, TimeSeriesTable)> {
    let n = table.len();
    if n_train == 0 {
        return Err(Error::EmptySplit("train split is empty".into()));
    }
    if n_train >= n {
        return Err(Error::EmptySplit("test split is empty".into()));
    }
    Ok((table.slice(0..n_train), table.slice(n_train..n)))
}

/// How the test split is reserved. The ratio wins when both are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: Option<f64>,
    pub test_rows: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: Some(0.8),
            test_rows: None,
        }
    }
}

impl SplitConfig {
    pub fn split(&self, table: &TimeSeriesTable) -> Result<(TimeSeriesTable, TimeSeriesTable)> {
        match (self.train_frac, self.test_rows) {
            (Some(f), _) => time_split(table, f),
            (None, Some(r)) => time_split_rows(table, r),
            (None, None) => Err(Error::InvalidArgument("split needs train_frac or test_rows".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scaler {
    #[serde(with = "f17_vec")]
    pub feature_mean: Vec<f64>,
    #[serde(with = "f17_vec")]
    pub feature_std: Vec<f64>,
    #[serde(with = "f17")]
    pub target_mean: f64,
    #[serde(with = "f17")]
    pub target_std: f64,
    pub fitted: bool,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    // a column constant within the training split carries no scale
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

/// Fits per-column z-score statistics on the training table only.
pub fn fit_scaler(train: &TimeSeriesTable) -> Result<Scaler> {
    if train.is_empty() {
        return Err(Error::EmptySplit("cannot fit a scaler on zero rows".into()));
    }
    let (feature_mean, feature_std) = (0..train.n_features())
        .map(|j| mean_std(train.features.iter().map(move |r| r[j])))
        .unzip();
    let (target_mean, target_std) = mean_std(train.target.iter().copied());
    Ok(Scaler {
        feature_mean,
        feature_std,
        target_mean,
        target_std,
        fitted: true,
    })
}

impl Scaler {
    fn check(&self, n_features: usize) -> Result<()> {
        if !self.fitted {
            return Err(Error::UnfittedScaler);
        }
        if self.feature_mean.len() != n_features {
            return Err(Error::FeatureMismatch(format!(
                "scaler has {} features, table has {n_features}",
                self.feature_mean.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        self.check(table.n_features())?;
        let mut out = table.clone();
        for row in &mut out.features {
            self.scale_row(row);
        }
        for y in &mut out.target {
            *y = self.scale_target(*y);
        }
        Ok(out)
    }

    pub fn inverse(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        self.check(table.n_features())?;
        let mut out = table.clone();
        for row in &mut out.features {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.feature_std[j] + self.feature_mean[j];
            }
        }
        for y in &mut out.target {
            *y = self.unscale_target(*y);
        }
        Ok(out)
    }

    /// Scales one raw feature row in place.
    pub fn scale_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.feature_mean[j]) / self.feature_std[j];
        }
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn unscale_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub split: SplitTag,
}

/// `m` windows of `w` rows by `n_features` columns, flattened row-major per
/// window, each paired with the target one step past its last row.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Target at each window's last row, for persistence forecasts.
    pub last_target: Vec<f64>,
    /// Timestamp of the row each `y` was taken from.
    pub target_timestamps: Vec<i64>,
    pub window: usize,
    pub stride: usize,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub provenance: Provenance,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Flattened width of one window.
    pub fn width(&self) -> usize {
        self.window * self.n_features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x[i * w..(i + 1) * w]
    }

    /// The first `n` windows.
    pub fn head(&self, n: usize) -> WindowedDataset {
        self.subset(0..n)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        let w = self.width();
        WindowedDataset {
            x: self.x[range.start * w..range.end * w].to_vec(),
            y: self.y[range.clone()].to_vec(),
            last_target: self.last_target[range.clone()].to_vec(),
            target_timestamps: self.target_timestamps[range].to_vec(),
            window: self.window,
            stride: self.stride,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Splits off the time-ordered tail fraction used for validation.
    pub fn validation_split(&self, frac: f64) -> (WindowedDataset, Option<WindowedDataset>) {
        let n = self.len();
        let n_val = ((n as f64) * frac).floor() as usize;
        if n_val == 0 || n_val >= n {
            return (self.clone(), None);
        }
        (self.subset(0..n - n_val), Some(self.subset(n - n_val..n)))
    }

    /// Order-independent content hash.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.window as u64).to_le_bytes());
        h.update((self.n_features as u64).to_le_bytes());
        for v in self.x.iter().chain(&self.y).chain(&self.last_target) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Number of windows for `rows`, window `w` and stride `s`.
pub fn window_count(rows: usize, w: usize, s: usize) -> usize {
    if rows <= w || s == 0 {
        0
    } else {
        (rows - w - 1) / s + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    /// Append the target as an extra input channel.
    pub include_lagged_target: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window: 50,
            stride: 1,
            include_lagged_target: false,
        }
    }
}

/// Window `i` spans rows `[i, i + w)`; its target is the target at row `i + w`.
pub fn make_windows(table: &TimeSeriesTable, cfg: &WindowConfig, provenance: Provenance) -> Result<WindowedDataset> {
    let (w, s) = (cfg.window, cfg.stride);
    if w == 0 || s == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    let rows = table.len();
    if rows <= w {
        return Err(Error::InsufficientRows { needed: w + 1, have: rows });
    }
    let mut names = table.feature_names.clone();
    if cfg.include_lagged_target {
        names.push(table.target_name.clone());
    }
    let f = names.len();
    let m = window_count(rows, w, s);
    let mut x = Vec::with_capacity(m * w * f);
    let mut y = Vec::with_capacity(m);
    let mut last_target = Vec::with_capacity(m);
    let mut ts = Vec::with_capacity(m);
    for k in 0..m {
        let i = k * s;
        for r in i..i + w {
            x.extend_from_slice(&table.features[r]);
            if cfg.include_lagged_target {
                x.push(table.target[r]);
            }
        }
        y.push(table.target[i + w]);
        last_target.push(table.target[i + w - 1]);
        ts.push(table.timestamps[i + w]);
    }
    Ok(WindowedDataset {
        x,
        y,
        last_target,
        target_timestamps: ts,
        window: w,
        stride: s,
        n_features: f,
        feature_names: names,
        provenance,
    })
}

/// Writes `timestamp_s, features..., target_latency_ms` with 17-digit floats.
pub fn write_csv<W: Write>(table: &TimeSeriesTable, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![TIMESTAMP_COLUMN.to_string()];
    header.extend(table.feature_names.iter().cloned());
    header.push(TARGET_COLUMN.to_string());
    wtr.write_record(&header).map_err(csv_err)?;
    for i in 0..table.len() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(table.timestamps[i].to_string());
        rec.extend(table.features[i].iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(table.target[i]));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn export_csv(table: &TimeSeriesTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(table, std::io::BufWriter::new(file))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        line,
        message: e.to_string(),
    }
}

/// Parses a dataset CSV, requiring strictly increasing timestamps.
pub fn read_csv<R: Read>(input: R) -> Result<TimeSeriesTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::NoHeader);
    }
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 2 || cols[0] != TIMESTAMP_COLUMN || cols[cols.len() - 1] != TARGET_COLUMN {
        return Err(Error::Csv {
            line: 1,
            message: format!("header must start with `{TIMESTAMP_COLUMN}` and end with `{TARGET_COLUMN}`"),
        });
    }
    let names: Vec<String> = cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let (mut ts, mut features, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Csv { line, message };
        let t: i64 = rec[0].trim().parse().map_err(|_| bad(format!("bad timestamp `{}`", &rec[0])))?;
        if let Some(&prev) = ts.last() {
            if t <= prev {
                return Err(bad(format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        let mut vals = Vec::with_capacity(names.len());
        for field in rec.iter().skip(1) {
            vals.push(parse_f64(field).ok_or_else(|| bad(format!("bad number `{field}`")))?);
        }
        target.push(vals.pop().expect("target column"));
        ts.push(t);
        features.push(vals);
    }
    TimeSeriesTable::new(ts, names, features, target)
}

pub fn import_csv(path: &Path) -> Result<TimeSeriesTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}
