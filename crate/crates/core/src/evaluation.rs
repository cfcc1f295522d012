//! Regression metrics, evaluation reports and cross-model ranking.
//!
//! MAPE is a ratio everywhere in code; rendered tables show it as percent.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasetgen::WindowedDataset;
use crate::learners::{ModelKind, TrainedModel};
use crate::numfmt::{f17, f17_vec, fmt_f64};
use crate::{Error, Result};

/// How MAPE treats points whose actual value is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "epsilon")]
pub enum ZeroPolicy {
    Error,
    /// Drop the point and count it.
    #[default]
    Exclude,
    /// Divide by `max(|a|, eps)` instead.
    Epsilon(f64),
}


fn check(a: &[f64], p: &[f64]) -> Result<()> {
    if a.len() != p.len() {
        return Err(Error::LengthMismatch { expected: a.len(), found: p.len() });
    }
    if a.is_empty() {
        return Err(Error::EmptySplit("no points to score".into()));
    }
    Ok(())
}

pub fn mae(a: &[f64], p: &[f64]) -> Result<f64> {
    check(a, p)?;
    Ok(a.iter().zip(p).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn mse(a: &[f64], p: &[f64]) -> Result<f64> {
    check(a, p)?;
    Ok(a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f64], p: &[f64]) -> Result<f64> {
    mse(a, p).map(f64::sqrt)
}

/// Strict MAPE: any zero actual is an error.
pub fn mape(a: &[f64], p: &[f64]) -> Result<f64> {
    mape_with(a, p, ZeroPolicy::Error).map(|(m, _)| m)
}

/// MAPE under `policy`; also returns how many points were excluded.
pub fn mape_with(a: &[f64], p: &[f64], policy: ZeroPolicy) -> Result<(f64, usize)> {
    check(a, p)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (i, (x, y)) in a.iter().zip(p).enumerate() {
        let denom = if *x != 0.0 {
            x.abs()
        } else {
            match policy {
                ZeroPolicy::Error => return Err(Error::ZeroActual(i)),
                ZeroPolicy::Exclude => continue,
                ZeroPolicy::Epsilon(eps) => eps.abs(),
            }
        };
        sum += (x - y).abs() / denom;
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptySplit("every actual value is zero".into()));
    }
    Ok((sum / used as f64, a.len() - used))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    #[serde(with = "f17")]
    pub mae: f64,
    #[serde(with = "f17")]
    pub mse: f64,
    #[serde(with = "f17")]
    pub rmse: f64,
    #[serde(with = "f17")]
    pub mape: f64,
    pub mape_excluded: usize,
    #[serde(with = "f17")]
    pub training_time_s: f64,
    pub n_test: usize,
    pub timestamps: Vec<i64>,
    #[serde(with = "f17_vec")]
    pub actual_ms: Vec<f64>,
    #[serde(with = "f17_vec")]
    pub predicted_ms: Vec<f64>,
}

/// Scores `model` on scaled test windows; predictions and actuals are
/// inverse-scaled to milliseconds before any metric is computed.
pub fn evaluate(model: &TrainedModel, test: &WindowedDataset, policy: ZeroPolicy) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test set has no windows".into()));
    }
    let scaled = model.predict_dataset(test)?;
    let predicted_ms: Vec<f64> = scaled.iter().map(|&v| model.scaler.unscale_target(v)).collect();
    let actual_ms: Vec<f64> = test.y.iter().map(|&v| model.scaler.unscale_target(v)).collect();
    let (mape, mape_excluded) = mape_with(&actual_ms, &predicted_ms, policy)?;
    let m = mse(&actual_ms, &predicted_ms)?;
    Ok(EvalReport {
        model_kind: model.kind,
        model_id: model.content_id(),
        dataset_id: test.provenance.source_id.clone(),
        seed: model.seed,
        mae: mae(&actual_ms, &predicted_ms)?,
        mse: m,
        rmse: m.sqrt(),
        mape,
        mape_excluded,
        training_time_s: model.meta.train_time_s,
        n_test: test.len(),
        timestamps: test.target_timestamps.clone(),
        actual_ms,
        predicted_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub model_kind: ModelKind,
    pub runs: usize,
    pub mape_mean: f64,
    /// Population standard deviation across runs.
    pub mape_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub train_time_mean_s: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Groups reports by model kind and ranks by mean MAPE, lowest first.
pub fn compare(reports: &[EvalReport]) -> Result<Vec<RankRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptySplit("no reports to compare".into()))?;
    if let Some(other) = reports.iter().find(|r| r.dataset_id != first.dataset_id) {
        return Err(Error::MixedDatasets(first.dataset_id.clone(), other.dataset_id.clone()));
    }
    let mut groups: BTreeMap<ModelKind, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.model_kind).or_default().push(r);
    }
    let mut rows: Vec<RankRow> = groups
        .into_iter()
        .map(|(kind, rs)| {
            let col = |f: fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mape_mean, mape_std) = mean_std(&col(|r| r.mape));
            let (mae_mean, mae_std) = mean_std(&col(|r| r.mae));
            RankRow {
                model_kind: kind,
                runs: rs.len(),
                mape_mean,
                mape_std,
                mae_mean,
                mae_std,
                rmse_mean: mean_std(&col(|r| r.rmse)).0,
                train_time_mean_s: mean_std(&col(|r| r.training_time_s)).0,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.mape_mean.total_cmp(&b.mape_mean).then(a.model_kind.cmp(&b.model_kind)));
    Ok(rows)
}

pub const REPORT_HEADER: &str = "model,model_id,dataset,seed,n_test,mae_ms,mse_ms2,rmse_ms,mape,mape_excluded,train_time_s";

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], mut out: W) -> Result<()> {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.model_kind,
            r.model_id,
            r.dataset_id,
            r.seed,
            r.n_test,
            fmt_f64(r.mae),
            fmt_f64(r.mse),
            fmt_f64(r.rmse),
            fmt_f64(r.mape),
            r.mape_excluded,
            fmt_f64(r.training_time_s)
        ));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<report>", e))
}

/// Overlay series for actual-vs-predicted plots.
pub fn write_plot_csv<W: Write>(report: &EvalReport, mut out: W) -> Result<()> {
    let mut s = String::from("step,actual_ms,predicted_ms\n");
    for (i, (a, p)) in report.actual_ms.iter().zip(&report.predicted_ms).enumerate() {
        s.push_str(&format!("{i},{},{}\n", fmt_f64(*a), fmt_f64(*p)));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<plot>", e))
}

pub fn write_ranking_csv<W: Write>(rows: &[RankRow], mut out: W) -> Result<()> {
    let mut s = String::from("rank,model,runs,mape_mean,mape_std,mae_mean_ms,mae_std_ms,rmse_mean_ms,train_time_mean_s\n");
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            r.model_kind,
            r.runs,
            fmt_f64(r.mape_mean),
            fmt_f64(r.mape_std),
            fmt_f64(r.mae_mean),
            fmt_f64(r.mae_std),
            fmt_f64(r.rmse_mean),
            fmt_f64(r.train_time_mean_s)
        ));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<ranking>", e))
}

/// Aligned text table, MAPE in percent.
pub fn render_ranking(rows: &[RankRow]) -> String {
    let mut s = format!(
        "{:<5} {:<12} {:>4} {:>18} {:>18} {:>12}\n",
        "rank", "model", "runs", "MAPE % (mean±std)", "MAE ms (mean±std)", "train s"
    );
    for (i, r) in rows.iter().enumerate() {
        let mape = format!("{:.2}±{:.2}", 100.0 * r.mape_mean, 100.0 * r.mape_std);
        let mae = format!("{:.3}±{:.3}", r.mae_mean, r.mae_std);
        s.push_str(&format!(
            "{:<5} {:<12} {:>4} {:>18} {:>18} {:>12.3}\n",
            i + 1,
            r.model_kind.as_str(),
            r.runs,
            mape,
            mae,
            r.train_time_mean_s
        ));
    }
    s
}
