//! Three-way factorial ANOVA of chaos factors on simulated latency.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numfmt::fmt_f64;
use crate::rng::{derive_seed, rng_from};
use crate::simcluster::{ChaosProfile, ClusterTopology, OpRequest, OpType, SimCluster, SimConstants};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Level {
        if i == 0 {
            Level::Low
        } else {
            Level::High
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::High => "high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorialObservation {
    pub delay: Level,
    pub loss: Level,
    pub tokens: Level,
    pub replicate: usize,
    /// Mean operation latency of the run, ms.
    pub response: f64,
}

impl FactorialObservation {
    fn cell(&self) -> usize {
        self.delay.index() * 4 + self.loss.index() * 2 + self.tokens.index()
    }
}

pub const SOURCES: [&str; 7] = [
    "delay",
    "loss",
    "tokens",
    "delay:loss",
    "delay:tokens",
    "loss:tokens",
    "delay:loss:tokens",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub source: String,
    pub ss: f64,
    pub df: usize,
    pub ms: f64,
    /// `None` on the error and total rows.
    pub f: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    /// Seven effect rows, then `Error`, then `Total`.
    pub rows: Vec<AnovaRow>,
    /// Set when every cell is constant; F is then infinite for nonzero
    /// effects and 0 for null ones.
    pub zero_error_variance: bool,
}

impl AnovaTable {
    pub fn row(&self, source: &str) -> Option<&AnovaRow> {
        self.rows.iter().find(|r| r.source == source)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Balanced 2x2x2 ANOVA from cell-mean contrasts.
pub fn three_way_anova(obs: &[FactorialObservation]) -> Result<AnovaTable> {
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); 8];
    for o in obs {
        cells[o.cell()].push(o.response);
    }
    let r = cells[0].len();
    if r < 2 || cells.iter().any(|c| c.len() != r) {
        return Err(Error::UnbalancedDesign(format!(
            "cell sizes {:?}; need equal replicates >= 2",
            cells.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let n = (8 * r) as f64;
    let rf = r as f64;
    let cm: Vec<f64> = cells.iter().map(|c| mean(c.iter().copied())).collect();
    let at = |a: usize, b: usize, c: usize| cm[a * 4 + b * 2 + c];
    let grand = mean(cm.iter().copied());

    // marginal means by factor subset
    let m1 = |f: usize, l: usize| {
        mean((0..8).filter(|&k| bit(k, f) == l).map(|k| cm[k]))
    };
    let m2 = |f: usize, g: usize, l: usize, h: usize| {
        mean((0..8).filter(|&k| bit(k, f) == l && bit(k, g) == h).map(|k| cm[k]))
    };

    let ss_main = |f: usize| (0..2).map(|l| (n / 2.0) * (m1(f, l) - grand).powi(2)).sum::<f64>();
    let ss_pair = |f: usize, g: usize| {
        let mut s = 0.0;
        for l in 0..2 {
            for h in 0..2 {
                let d = m2(f, g, l, h) - m1(f, l) - m1(g, h) + grand;
                s += (n / 4.0) * d * d;
            }
        }
        s
    };
    let mut ss_abc = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                let d = at(a, b, c) - m2(0, 1, a, b) - m2(0, 2, a, c) - m2(1, 2, b, c)
                    + m1(0, a)
                    + m1(1, b)
                    + m1(2, c)
                    - grand;
                ss_abc += rf * d * d;
            }
        }
    }
    let ss = [
        ss_main(0),
        ss_main(1),
        ss_main(2),
        ss_pair(0, 1),
        ss_pair(0, 2),
        ss_pair(1, 2),
        ss_abc,
    ];
    let ss_error: f64 = cells
        .iter()
        .zip(&cm)
        .map(|(c, m)| c.iter().map(|y| (y - m).powi(2)).sum::<f64>())
        .sum();
    let all_mean = mean(obs.iter().map(|o| o.response));
    let ss_total: f64 = obs.iter().map(|o| (o.response - all_mean).powi(2)).sum();
    let df_error = 8 * r - 8;
    let ms_error = ss_error / df_error as f64;
    // tolerate rounding noise relative to the data scale
    let zero_error = ss_error <= 1e-24 * (1.0 + ss_total);

    let mut rows: Vec<AnovaRow> = SOURCES
        .iter()
        .zip(ss)
        .map(|(name, s)| {
            let s = s.max(0.0);
            let (f, p) = if zero_error {
                if s > 1e-12 * (1.0 + ss_total) {
                    (f64::INFINITY, 0.0)
                } else {
                    (0.0, 1.0)
                }
            } else {
                let f = s / ms_error;
                (f, f_upper_tail(f, 1.0, df_error as f64))
            };
            AnovaRow {
                source: name.to_string(),
                ss: s,
                df: 1,
                ms: s,
                f: Some(f),
                p: Some(p),
            }
        })
        .collect();
    rows.push(AnovaRow {
        source: "Error".into(),
        ss: ss_error,
        df: df_error,
        ms: ms_error,
        f: None,
        p: None,
    });
    rows.push(AnovaRow {
        source: "Total".into(),
        ss: ss_total,
        df: 8 * r - 1,
        ms: ss_total / (8 * r - 1) as f64,
        f: None,
        p: None,
    });
    Ok(AnovaTable {
        rows,
        zero_error_variance: zero_error,
    })
}

fn bit(cell: usize, factor: usize) -> usize {
    (cell >> (2 - factor)) & 1
}

/// `P(F(d1, d2) >= x)`.
pub fn f_upper_tail(x: f64, d1: f64, d2: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    let z = d2 / (d2 + d1 * x);
    reg_inc_beta(z, d2 / 2.0, d1 / 2.0).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorialConfig {
    pub replicates: usize,
    pub ops_per_run: usize,
    pub op_type: OpType,
    pub ops_per_second: f64,
    /// Low/high chaos base delay, ms.
    pub delay_levels_ms: [f64; 2],
    pub loss_levels: [f64; 2],
    pub token_levels: [usize; 2],
    /// Uniform per-message jitter applied in every cell, ms.
    pub jitter_ms: [f64; 2],
    pub topology: ClusterTopology,
    pub constants: SimConstants,
}

impl Default for FactorialConfig {
    fn default() -> Self {
        FactorialConfig {
            replicates: 10,
            ops_per_run: 2000,
            op_type: OpType::Write,
            ops_per_second: 50.0,
            delay_levels_ms: [1.0, 10.0],
            loss_levels: [0.01, 0.10],
            token_levels: [32, 256],
            jitter_ms: [1.0, 10.0],
            topology: ClusterTopology::testbed([2.0, 5.0, 8.0], 1.0),
            constants: SimConstants::default(),
        }
    }
}

fn run_cell(cfg: &FactorialConfig, cell: usize, replicate: usize, seed: u64) -> Result<FactorialObservation> {
    let (d, l, t) = (bit(cell, 0), bit(cell, 1), bit(cell, 2));
    let run_seed = derive_seed(seed, &[cell as u64, replicate as u64]);
    let mut topo = cfg.topology.clone();
    topo.tokens = cfg.token_levels[t];
    let mut sim = SimCluster::new(topo, cfg.constants.clone(), run_seed)?;
    sim.apply_chaos(ChaosProfile::new(
        cfg.delay_levels_ms[d],
        cfg.jitter_ms[0],
        cfg.jitter_ms[1],
        cfg.loss_levels[l],
    ))?;
    let mut keys = rng_from(run_seed, &[0]);
    let gap_us = 1e6 / cfg.ops_per_second;
    for i in 0..cfg.ops_per_run {
        let issue = (i as f64 * gap_us).round() as i64;
        sim.submit_op(OpRequest::new(cfg.op_type, keys.random(), issue))?;
    }
    let done = sim.drain();
    if done.is_empty() {
        return Err(Error::InvalidPlan("run produced no operations".into()));
    }
    Ok(FactorialObservation {
        delay: Level::from_index(d),
        loss: Level::from_index(l),
        tokens: Level::from_index(t),
        replicate,
        response: mean(done.iter().map(|e| e.latency_ms())),
    })
}

/// Every cell of the 2x2x2 design times `replicates`, in cell-major order.
pub fn factorial_experiment(cfg: &FactorialConfig, seed: u64) -> Result<Vec<FactorialObservation>> {
    if cfg.replicates < 2 {
        return Err(Error::InvalidArgument("replicates must be at least 2".into()));
    }
    if cfg.ops_per_run == 0 || !(cfg.ops_per_second > 0.0) {
        return Err(Error::InvalidArgument("ops_per_run and ops_per_second must be positive".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..8)
        .flat_map(|c| (0..cfg.replicates).map(move |r| (c, r)))
        .collect();
    jobs.into_par_iter()
        .map(|(c, r)| {
            run_cell(cfg, c, r, seed).map_err(|e| Error::Cell {
                cell: format!(
                    "delay={} loss={} tokens={} replicate={r}",
                    Level::from_index(bit(c, 0)),
                    Level::from_index(bit(c, 1)),
                    Level::from_index(bit(c, 2))
                ),
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn write_observations_csv<W: Write>(obs: &[FactorialObservation], mut out: W) -> Result<()> {
    let mut s = String::from("delay,loss,tokens,replicate,mean_latency_ms\n");
    for o in obs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            o.delay,
            o.loss,
            o.tokens,
            o.replicate,
            fmt_f64(o.response)
        ));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<observations>", e))
}

pub fn write_table_csv<W: Write>(table: &AnovaTable, mut out: W) -> Result<()> {
    let mut s = String::from("source,SS,df,MS,F,p\n");
    for r in &table.rows {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.source,
            fmt_f64(r.ss),
            r.df,
            fmt_f64(r.ms),
            opt(r.f),
            opt(r.p)
        ));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<anova>", e))
}

/// Aligned text rendering.
pub fn render_table(table: &AnovaTable) -> String {
    let mut s = format!(
        "{:<18} {:>14} {:>5} {:>14} {:>12} {:>10}\n",
        "source", "SS", "df", "MS", "F", "p"
    );
    for r in &table.rows {
        let f = match r.f {
            Some(f) if f.is_infinite() => "inf".to_string(),
            Some(f) => format!("{f:.3}"),
            None => String::new(),
        };
        let p = r.p.map(|p| format!("{p:.4}")).unwrap_or_default();
        s.push_str(&format!(
            "{:<18} {:>14.4} {:>5} {:>14.4} {:>12} {:>10}\n",
            r.source, r.ss, r.df, r.ms, f, p
        ));
    }
    if table.zero_error_variance {
        s.push_str("note: zero within-cell variance; F is infinite for nonzero effects\n");
    }
    s
}
