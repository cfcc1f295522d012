//! Sinusoidally modulated Poisson workload and the flat-rate sensor probe.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::simcluster::{CompletionEvent, OpOrigin, OpRequest, OpType, SimCluster, US_PER_MS, US_PER_S};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadPlan {
    /// Mean number of client processes.
    pub mean_level: f64,
    /// Sinusoid amplitude in processes.
    pub amplitude: f64,
    pub period_s: f64,
    pub op_type: OpType,
    /// Successful non-warm-up completions to collect.
    pub row_budget: u64,
    pub ops_per_process_second: f64,
    pub warmup_rows: u64,
    /// Optional cap on simulated time for the measured phase.
    pub horizon_s: Option<f64>,
}

impl Default for WorkloadPlan {
    fn default() -> Self {
        WorkloadPlan {
            mean_level: 22.5,
            amplitude: 22.5,
            period_s: 600.0,
            op_type: OpType::Write,
            row_budget: 500_000,
            ops_per_process_second: 2.0,
            warmup_rows: 5_000,
            horizon_s: None,
        }
    }
}

impl WorkloadPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPlan(m.to_string()));
        if !(self.amplitude >= 0.0 && self.mean_level >= self.amplitude) {
            return bad("need mean_level >= amplitude >= 0");
        }
        if !(self.mean_level > 0.0) {
            return bad("mean_level must be positive");
        }
        if self.row_budget == 0 {
            return bad("row_budget must be positive");
        }
        if !(self.period_s > 0.0) {
            return bad("period_s must be positive");
        }
        if !(self.ops_per_process_second > 0.0) {
            return bad("ops_per_process_second must be positive");
        }
        if let Some(h) = self.horizon_s {
            if !(h > 0.0) {
                return bad("horizon_s must be positive");
            }
        }
        Ok(())
    }

    pub fn peak_rate(&self) -> f64 {
        (self.mean_level + self.amplitude) * self.ops_per_process_second
    }
}

/// Number of active client processes at time `t` seconds.
pub fn rate_at(plan: &WorkloadPlan, t: f64) -> f64 {
    plan.mean_level + plan.amplitude * (2.0 * PI * t / plan.period_s).sin()
}

/// Process count shown in the trace panel: `floor(rate_at(t))`, never negative.
pub fn process_count_at(plan: &WorkloadPlan, t: f64) -> u32 {
    rate_at(plan, t).floor().max(0.0) as u32
}

/// Lazy inhomogeneous Poisson arrivals by thinning against the peak rate.
#[derive(Debug)]
pub struct Arrivals<'a> {
    plan: &'a WorkloadPlan,
    t: f64,
    lambda_max: f64,
    rng: &'a mut SimRng,
}

impl<'a> Arrivals<'a> {
    pub fn new(plan: &'a WorkloadPlan, start_s: f64, rng: &'a mut SimRng) -> Self {
        Arrivals {
            plan,
            t: start_s,
            lambda_max: plan.peak_rate(),
            rng,
        }
    }
}

impl Iterator for Arrivals<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if !(self.lambda_max > 0.0) {
            return None;
        }
        loop {
            let u: f64 = self.rng.random();
            self.t += -(1.0 - u).ln() / self.lambda_max;
            let accept: f64 = self.rng.random();
            let lambda = rate_at(self.plan, self.t).max(0.0) * self.plan.ops_per_process_second;
            if accept * self.lambda_max < lambda {
                return Some(self.t);
            }
        }
    }
}

/// Arrival times in `[0, horizon_s)`, strictly increasing.
pub fn arrival_schedule(plan: &WorkloadPlan, horizon_s: f64, rng: &mut SimRng) -> Vec<f64> {
    Arrivals::new(plan, 0.0, rng)
        .take_while(|&t| t < horizon_s)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Issue time in seconds.
    pub timestamp_s: f64,
    pub op_type: OpType,
    pub latency_ms: f64,
    pub error: bool,
    pub retransmissions: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub origin: OpOrigin,
    pub rows: Vec<TraceRow>,
    /// `(second, process_count)`; empty for sensor traces.
    pub process_counts: Vec<(i64, u32)>,
    /// Simulated time at which the measured phase began.
    pub measured_start_s: f64,
}

impl WorkloadTrace {
    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| !r.error).count()
    }

    fn push(&mut self, ev: &CompletionEvent) {
        self.rows.push(TraceRow {
            timestamp_s: ev.issue_time_us as f64 / US_PER_S as f64,
            op_type: ev.op_type,
            latency_ms: ev.latency_ms(),
            error: ev.error,
            retransmissions: ev.retransmissions,
        });
    }

    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    }

    /// `timestamp_s,op_type,latency_ms,error`
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "timestamp_s,op_type,latency_ms,error")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.6},{},{:.3},{}",
                r.timestamp_s, r.op_type, r.latency_ms, r.error
            )?;
        }
        Ok(())
    }

    /// `second,process_count`
    pub fn write_process_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "second,process_count")?;
        for (s, c) in &self.process_counts {
            writeln!(out, "{s},{c}")?;
        }
        Ok(())
    }
}

/// Flat-rate probe: one read every `interval_s` starting at `start_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub start_s: f64,
    pub interval_s: f64,
    pub duration_s: f64,
}

impl ProbePlan {
    pub fn schedule_us(&self) -> Result<Vec<i64>> {
        if !(self.interval_s > 0.0) {
            return Err(Error::InvalidPlan("probe interval must be positive".into()));
        }
        let n = (self.duration_s / self.interval_s + 1e-9).floor().max(0.0) as u64;
        Ok((0..n)
            .map(|k| ((self.start_s + k as f64 * self.interval_s) * US_PER_S as f64).round() as i64)
            .collect())
    }
}

/// Probe keys live in their own namespace so a probe op's randomness never
/// depends on the concurrent workload.
const PROBE_KEY_BASE: u64 = 1 << 62;

struct Driver<'c> {
    cluster: &'c mut SimCluster,
    probes: VecDeque<i64>,
    probes_outstanding: usize,
    next_key: u64,
    next_probe_key: u64,
    trace: WorkloadTrace,
    probe_trace: WorkloadTrace,
}

impl Driver<'_> {
    /// Advances to `until`, submitting every probe due on the way. Returns the
    /// workload-origin completions.
    fn advance(&mut self, until: i64) -> Result<Vec<CompletionEvent>> {
        let mut out = Vec::new();
        while self.probes.front().is_some_and(|&p| p <= until) {
            let p = self.probes.pop_front().expect("front");
            let evs = self.cluster.advance(p);
            self.route(evs, &mut out);
            let key = self.next_probe_key;
            self.next_probe_key += 1;
            self.cluster
                .submit_op(OpRequest::new(OpType::Read, key, p).with_origin(OpOrigin::Sensor))?;
            self.probes_outstanding += 1;
        }
        let evs = self.cluster.advance(until);
        self.route(evs, &mut out);
        Ok(out)
    }

    fn route(&mut self, evs: Vec<CompletionEvent>, out: &mut Vec<CompletionEvent>) {
        for ev in evs {
            match ev.origin {
                OpOrigin::Sensor => {
                    self.probe_trace.push(&ev);
                    self.probes_outstanding -= 1;
                }
                OpOrigin::Workload => out.push(ev),
            }
        }
    }

    fn key(&mut self) -> u64 {
        self.next_key += 1;
        self.next_key
    }

    fn submit(&mut self, op_type: OpType, t: i64) -> Result<()> {
        let key = self.key();
        self.cluster.submit_op(OpRequest::new(op_type, key, t))?;
        Ok(())
    }

    /// Steps event by event until `done` holds or the queue runs dry.
    fn run_until(&mut self, mut done: impl FnMut(&[CompletionEvent]) -> bool) -> Result<()> {
        loop {
            let next = match (self.cluster.next_event_time(), self.probes.front()) {
                (Some(e), Some(&p)) => e.min(p),
                (Some(e), None) => e,
                (None, Some(&p)) => p,
                (None, None) => return Ok(()),
            };
            let evs = self.advance(next)?;
            if done(&evs) {
                return Ok(());
            }
        }
    }

    fn finish_probes(&mut self) -> Result<()> {
        while !self.probes.is_empty() || self.probes_outstanding > 0 {
            let before = self.probes.len() + self.probes_outstanding;
            self.run_until(|_| true)?;
            if self.cluster.next_event_time().is_none() && self.probes.is_empty() {
                break;
            }
            debug_assert!(self.probes.len() + self.probes_outstanding <= before);
        }
        Ok(())
    }
}

fn new_driver<'c>(cluster: &'c mut SimCluster, probe: Option<&ProbePlan>) -> Result<Driver<'c>> {
    let probes = match probe {
        Some(p) => p.schedule_us()?.into_iter().filter(|&t| t >= cluster.now_us()).collect(),
        None => VecDeque::new(),
    };
    Ok(Driver {
        cluster,
        probes,
        probes_outstanding: 0,
        next_key: 0,
        next_probe_key: PROBE_KEY_BASE,
        trace: WorkloadTrace::default(),
        probe_trace: WorkloadTrace {
            origin: OpOrigin::Sensor,
            ..WorkloadTrace::default()
        },
    })
}

/// Runs warm-up then the measured phase until `row_budget` successful
/// completions (or the horizon) are reached.
pub fn run_workload(cluster: &mut SimCluster, plan: &WorkloadPlan, rng: &mut SimRng) -> Result<WorkloadTrace> {
    run_workload_with_probe(cluster, plan, None, rng).map(|(t, _)| t)
}

/// As [`run_workload`], interleaving a sensor probe whose schedule is fixed
/// in absolute time and independent of the plan.
pub fn run_workload_with_probe(
    cluster: &mut SimCluster,
    plan: &WorkloadPlan,
    probe: Option<&ProbePlan>,
    rng: &mut SimRng,
) -> Result<(WorkloadTrace, WorkloadTrace)> {
    plan.validate()?;
    let start_s = cluster.now_us() as f64 / US_PER_S as f64;
    let mut arrivals = Arrivals::new(plan, start_s, rng);
    let mut d = new_driver(cluster, probe)?;

    // warm-up
    let mut warm_submitted = 0u64;
    while warm_submitted < plan.warmup_rows {
        let t = to_us(arrivals.next().expect("positive rate"));
        d.advance(t)?;
        d.submit(plan.op_type, t)?;
        warm_submitted += 1;
    }
    let mut warm_done = 0u64;
    if plan.warmup_rows > 0 {
        d.run_until(|evs| {
            warm_done += evs.len() as u64;
            warm_done >= plan.warmup_rows
        })?;
    }
    let measured_start = d.cluster.now_us();
    d.trace.measured_start_s = measured_start as f64 / US_PER_S as f64;
    let horizon_us = plan
        .horizon_s
        .map(|h| measured_start + (h * US_PER_S as f64).round() as i64);

    let mut successes = 0u64;
    let mut pending = 0u64;
    while let Some(t) = arrivals.next().map(to_us) {
        if t < measured_start {
            continue;
        }
        if horizon_us.is_some_and(|h| t >= h) {
            break;
        }
        for ev in d.advance(t)? {
            pending -= 1;
            successes += u64::from(!ev.error);
            d.trace.push(&ev);
        }
        if successes >= plan.row_budget && pending == 0 {
            break;
        }
        if successes + pending < plan.row_budget {
            d.submit(plan.op_type, t)?;
            pending += 1;
        }
    }
    // outstanding ops
    let mut trace_events = Vec::new();
    if pending > 0 {
        d.run_until(|evs| {
            pending -= evs.len() as u64;
            trace_events.extend_from_slice(evs);
            pending == 0
        })?;
    }
    for ev in &trace_events {
        d.trace.push(ev);
    }
    d.finish_probes()?;

    let mut trace = d.trace;
    let mut probe_trace = d.probe_trace;
    trace.sort();
    probe_trace.sort();
    let last = trace.rows.last().map_or(0.0, |r| r.timestamp_s);
    trace.process_counts = (0..=last.ceil() as i64)
        .map(|s| (s, process_count_at(plan, s as f64)))
        .collect();
    Ok((trace, probe_trace))
}

/// Flat probe against `cluster` starting at its current time.
pub fn sensor_probe(cluster: &mut SimCluster, interval_s: f64, duration_s: f64) -> Result<WorkloadTrace> {
    let plan = ProbePlan {
        start_s: cluster.now_us() as f64 / US_PER_S as f64,
        interval_s,
        duration_s,
    };
    let mut d = new_driver(cluster, Some(&plan))?;
    d.finish_probes()?;
    let mut trace = d.probe_trace;
    trace.sort();
    Ok(trace)
}

fn to_us(t_s: f64) -> i64 {
    (t_s * US_PER_MS * 1_000.0).round() as i64
}
