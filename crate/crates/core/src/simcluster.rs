//! Discrete-event simulator of a quorum-replicated key-value store.
//!
//! A load-generator node acts as coordinator: every operation fans out to the
//! replicas that own its key, each replica services the request and replies,
//! and the operation completes when the consistency level's order statistic
//! of replies has arrived. Links add a base delay, uniform jitter and
//! independent per-attempt loss; a lost message is retransmitted after an
//! exponentially backed-off RTO until the retry cap is hit.
//!
//! The clock is integer microseconds. Every message draws from its own
//! derived random stream, so changing one message's fate never shifts the
//! randomness seen by any other message.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, SimRng};
use crate::{Error, Result};

pub const US_PER_MS: f64 = 1_000.0;
pub const US_PER_S: i64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consistency {
    One,
    Quorum,
    All,
}

impl Consistency {
    /// Number of replica acknowledgements required.
    pub fn required(self, replica_factor: usize) -> usize {
        match self {
            Consistency::One => 1,
            Consistency::Quorum => replica_factor / 2 + 1,
            Consistency::All => replica_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    Write,
    Read,
}

impl OpType {
    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Write => "write",
            OpType::Read => "read",
        }
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OpType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "write" | "w" => Ok(OpType::Write),
            "read" | "r" => Ok(OpType::Read),
            other => Err(Error::InvalidArgument(format!("unknown op type `{other}`"))),
        }
    }
}

/// Who issued an operation; sensor probes are tracked separately from the
/// workload so their traces can be split after a shared run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OpOrigin {
    #[default]
    Workload,
    Sensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    /// Write service time at zero load.
    pub base_service_us: f64,
    /// Read service time at zero load.
    pub read_service_us: f64,
    /// Cores; CPU utilisation is work over `cpu_capacity` core-seconds.
    pub cpu_capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// One-way propagation delay.
    pub delay_ms: f64,
    /// Link-level jitter, uniform on `[0, jitter_ms]`.
    pub jitter_ms: f64,
    pub loss_prob: f64,
}

impl LinkSpec {
    pub const fn ideal(delay_ms: f64) -> Self {
        LinkSpec {
            delay_ms,
            jitter_ms: 0.0,
            loss_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub nodes: Vec<NodeSpec>,
    /// `links[from][to]`; the diagonal is unused.
    pub links: Vec<Vec<LinkSpec>>,
    pub replica_factor: usize,
    pub tokens: usize,
    pub consistency: Consistency,
    pub loadgen_node: usize,
}

impl ClusterTopology {
    /// Three replica hosts plus a separate load generator, quorum writes at
    /// replica factor 2 over 256 tokens. Link delays are uncalibrated
    /// placeholders in the 1-40 ms range.
    pub fn testbed(replica_delays_ms: [f64; 3], inter_replica_ms: f64) -> Self {
        let nodes = (0..4)
            .map(|id| NodeSpec {
                id,
                base_service_us: 400.0,
                read_service_us: 600.0,
                cpu_capacity: 4.0,
            })
            .collect();
        let mut links = vec![vec![LinkSpec::ideal(0.0); 4]; 4];
        for (r, &d) in replica_delays_ms.iter().enumerate() {
            let link = LinkSpec {
                delay_ms: d,
                jitter_ms: 0.1 * d,
                loss_prob: 0.001,
            };
            links[3][r] = link;
            links[r][3] = link;
        }
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    links[a][b] = LinkSpec {
                        delay_ms: inter_replica_ms,
                        jitter_ms: 0.1 * inter_replica_ms,
                        loss_prob: 0.001,
                    };
                }
            }
        }
        ClusterTopology {
            nodes,
            links,
            replica_factor: 2,
            tokens: 256,
            consistency: Consistency::Quorum,
            loadgen_node: 3,
        }
    }

    /// Fully connected topology with identical ideal links; node `n` is the
    /// load generator and nodes `0..n` host replicas.
    pub fn uniform(replicas: usize, replica_factor: usize, delay_ms: f64, service_us: f64) -> Self {
        let n = replicas + 1;
        let nodes = (0..n)
            .map(|id| NodeSpec {
                id,
                base_service_us: service_us,
                read_service_us: service_us,
                cpu_capacity: 4.0,
            })
            .collect();
        ClusterTopology {
            nodes,
            links: vec![vec![LinkSpec::ideal(delay_ms); n]; n],
            replica_factor,
            tokens: 256,
            consistency: Consistency::Quorum,
            loadgen_node: replicas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let bad = |m: String| Err(Error::InvalidTopology(m));
        if n == 0 {
            return bad("topology has no nodes".into());
        }
        if self.replica_factor < 1 {
            return bad("replica_factor must be at least 1".into());
        }
        if self.replica_factor > n {
            return bad("replica_factor exceeds node count".into());
        }
        if self.replica_factor > n - 1 {
            return bad("replica_factor exceeds replica-eligible node count".into());
        }
        if self.tokens < 1 {
            return bad("tokens must be at least 1".into());
        }
        if self.loadgen_node >= n {
            return bad(format!("loadgen_node {} is not a node", self.loadgen_node));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node at position {i} has id {}", node.id));
            }
            if !(node.base_service_us >= 0.0 && node.read_service_us >= 0.0) {
                return bad(format!("node {i} has a negative service time"));
            }
            if !(node.cpu_capacity > 0.0) {
                return bad(format!("node {i} cpu_capacity must be positive"));
            }
        }
        if self.links.len() != n || self.links.iter().any(|row| row.len() != n) {
            return bad(format!("links must be a {n}x{n} matrix"));
        }
        for (a, row) in self.links.iter().enumerate() {
            for (b, l) in row.iter().enumerate() {
                if !(l.delay_ms >= 0.0 && l.jitter_ms >= 0.0) {
                    return bad(format!("link {a}->{b} has a negative delay"));
                }
                if !(0.0..=1.0).contains(&l.loss_prob) {
                    return bad(format!("link {a}->{b} loss probability outside [0,1]"));
                }
            }
        }
        Ok(())
    }

    fn replica_hosts(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| i != self.loadgen_node)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ChaosProfile {
    pub delay_base_ms: f64,
    pub jitter_low_ms: f64,
    pub jitter_high_ms: f64,
    pub loss_prob: f64,
}

impl ChaosProfile {
    pub fn new(delay_base_ms: f64, jitter_low_ms: f64, jitter_high_ms: f64, loss_prob: f64) -> Self {
        ChaosProfile {
            delay_base_ms,
            jitter_low_ms,
            jitter_high_ms,
            loss_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay_base_ms >= 0.0 && self.jitter_low_ms >= 0.0) {
            return Err(Error::InvalidChaos("delays must be non-negative".into()));
        }
        if !(self.jitter_low_ms <= self.jitter_high_ms) {
            return Err(Error::InvalidChaos("jitter_low exceeds jitter_high".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(Error::InvalidChaos("loss_prob outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Tunable simulator constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConstants {
    pub rto_ms: f64,
    pub max_retries: u32,
    pub c_load: f64,
    pub c_token_ms: f64,
    pub abort_timeout_ms: f64,
    pub header_bytes: u64,
    pub payload_bytes: u64,
}

impl Default for SimConstants {
    fn default() -> Self {
        SimConstants {
            rto_ms: 200.0,
            max_retries: 3,
            c_load: 0.02,
            c_token_ms: 0.01,
            abort_timeout_ms: 5_000.0,
            header_bytes: 64,
            payload_bytes: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRequest {
    pub op_type: OpType,
    pub key: u64,
    pub issue_time_us: i64,
    #[serde(default)]
    pub origin: OpOrigin,
}

impl OpRequest {
    pub fn new(op_type: OpType, key: u64, issue_time_us: i64) -> Self {
        OpRequest {
            op_type,
            key,
            issue_time_us,
            origin: OpOrigin::Workload,
        }
    }

    pub fn with_origin(mut self, origin: OpOrigin) -> Self {
        self.origin = origin;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionEvent {
    pub op_id: u64,
    pub origin: OpOrigin,
    pub op_type: OpType,
    pub key: u64,
    pub issue_time_us: i64,
    pub completion_time_us: i64,
    pub latency_us: i64,
    pub error: bool,
    pub retransmissions: u32,
    /// Bytes sent per node for this operation, retransmissions included.
    pub bytes_tx: Vec<u64>,
    /// Bytes delivered per node for this operation up to completion.
    pub bytes_rx: Vec<u64>,
}

impl CompletionEvent {
    pub fn latency_ms(&self) -> f64 {
        self.latency_us as f64 / US_PER_MS
    }
}

/// Outcome of sending one message across a link.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageDelay {
    /// Time from first send to delivery, or to giving up when `failed`.
    pub delay_ms: f64,
    pub retransmissions: u32,
    /// Retry cap exhausted; the message never arrived.
    pub failed: bool,
    /// Send offset of every attempt relative to the first send.
    pub attempt_offsets_ms: Vec<f64>,
}

/// Samples the delivery delay of one message.
///
/// Each attempt costs `delay_base + link delay + U(jitter_low, jitter_high) +
/// U(0, link jitter)`; the k-th loss (k from 0) adds a wait of `RTO * 2^k`
/// before the next attempt. Loss per attempt combines link and chaos loss
/// independently.
pub fn sample_message_delay(
    link: &LinkSpec,
    chaos: &ChaosProfile,
    constants: &SimConstants,
    rng: &mut SimRng,
) -> MessageDelay {
    let loss = 1.0 - (1.0 - link.loss_prob) * (1.0 - chaos.loss_prob);
    let mut elapsed = 0.0;
    let mut retransmissions = 0u32;
    let mut offsets = Vec::with_capacity(2);
    loop {
        offsets.push(elapsed);
        let u_jitter: f64 = rng.random();
        let u_link: f64 = rng.random();
        let u_loss: f64 = rng.random();
        let attempt = chaos.delay_base_ms
            + link.delay_ms
            + chaos.jitter_low_ms
            + (chaos.jitter_high_ms - chaos.jitter_low_ms) * u_jitter
            + link.jitter_ms * u_link;
        elapsed += attempt;
        if u_loss >= loss {
            return MessageDelay {
                delay_ms: elapsed,
                retransmissions,
                failed: false,
                attempt_offsets_ms: offsets,
            };
        }
        if retransmissions == constants.max_retries {
            return MessageDelay {
                delay_ms: elapsed,
                retransmissions,
                failed: true,
                attempt_offsets_ms: offsets,
            };
        }
        elapsed += constants.rto_ms * f64::powi(2.0, retransmissions as i32);
        retransmissions += 1;
    }
}

/// The k-th smallest replica latency, where k is set by the consistency level.
pub fn quorum_latency(
    replica_latencies: &[f64],
    replica_factor: usize,
    consistency: Consistency,
) -> Result<f64> {
    if replica_latencies.len() != replica_factor {
        return Err(Error::LengthMismatch {
            expected: replica_factor,
            found: replica_latencies.len(),
        });
    }
    if replica_factor == 0 {
        return Err(Error::InvalidArgument("replica_factor must be at least 1".into()));
    }
    let mut sorted = replica_latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[consistency.required(replica_factor) - 1])
}

/// Per-node counters for one second (or a whole run).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counters {
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub bytes_lost: u64,
    pub drops: u64,
    pub retransmits: u64,
    pub messages: u64,
    pub work_us: f64,
    /// Integral of ops in flight over time, in op-microseconds.
    pub inflight_us: f64,
}

impl Counters {
    fn add(&mut self, o: &Counters) {
        self.bytes_tx += o.bytes_tx;
        self.bytes_rx += o.bytes_rx;
        self.bytes_lost += o.bytes_lost;
        self.drops += o.drops;
        self.retransmits += o.retransmits;
        self.messages += o.messages;
        self.work_us += o.work_us;
        self.inflight_us += o.inflight_us;
    }
}

#[derive(Debug, Clone, Default)]
struct NodeState {
    per_second: Vec<Counters>,
    in_flight: u32,
    inflight_since_us: i64,
}

impl NodeState {
    fn bucket(&mut self, t_us: i64) -> &mut Counters {
        let s = t_us.max(0) / US_PER_S;
        let s = s as usize;
        if self.per_second.len() <= s {
            self.per_second.resize(s + 1, Counters::default());
        }
        &mut self.per_second[s]
    }

    fn settle_inflight(&mut self, now: i64) {
        let mut t = self.inflight_since_us;
        let level = self.in_flight as f64;
        if level > 0.0 {
            while t < now {
                let next = ((t / US_PER_S) + 1) * US_PER_S;
                let end = next.min(now);
                self.bucket(t).inflight_us += level * (end - t) as f64;
                t = end;
            }
        }
        self.inflight_since_us = now;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Issue { op: u64 },
    RequestArrive { op: u64, slot: u8, node: u16, op_type: OpType, stream: u64 },
    ServiceDone { op: u64, slot: u8, node: u16, op_type: OpType, stream: u64 },
    ReplyArrive { op: u64, slot: u8, op_type: OpType },
    Timeout { op: u64 },
}

#[derive(Debug, Clone)]
struct OpState {
    req: OpRequest,
    replicas: Vec<usize>,
    required: usize,
    replies: usize,
    done: bool,
    retransmissions: u32,
    bytes_tx: Vec<u64>,
    bytes_rx: Vec<u64>,
    /// Replicas still involved (request not yet failed and op not done).
    involved: Vec<bool>,
}

/// A seeded simulator instance. Not safe for concurrent mutation; separate
/// instances are fully independent.
#[derive(Debug, Clone)]
pub struct SimCluster {
    topology: ClusterTopology,
    constants: SimConstants,
    chaos: ChaosProfile,
    seed: u64,
    now_us: i64,
    seq: u64,
    next_op: u64,
    queue: BinaryHeap<Reverse<(i64, u64, EventKind)>>,
    ops: BTreeMap<u64, OpState>,
    nodes: Vec<NodeState>,
    ring: Vec<(u64, usize)>,
    pending: Vec<CompletionEvent>,
}

/// Builds a simulator. Identical `(topology, constants, seed)` give identical
/// behaviour under identical calls.
pub fn build_cluster(topology: ClusterTopology, seed: u64) -> Result<SimCluster> {
    SimCluster::new(topology, SimConstants::default(), seed)
}

impl SimCluster {
    pub fn new(topology: ClusterTopology, constants: SimConstants, seed: u64) -> Result<Self> {
        topology.validate()?;
        let ring = build_ring(&topology, seed);
        let n = topology.nodes.len();
        Ok(SimCluster {
            nodes: vec![NodeState::default(); n],
            topology,
            constants,
            chaos: ChaosProfile::default(),
            seed,
            now_us: 0,
            seq: 0,
            next_op: 0,
            queue: BinaryHeap::new(),
            ops: BTreeMap::new(),
            ring,
            pending: Vec::new(),
        })
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topology
    }

    pub fn constants(&self) -> &SimConstants {
        &self.constants
    }

    pub fn chaos(&self) -> &ChaosProfile {
        &self.chaos
    }

    pub fn now_us(&self) -> i64 {
        self.now_us
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn ops_in_flight(&self) -> usize {
        self.ops.len()
    }

    /// Replica set owning `key`: walk the token ring clockwise from the key's
    /// position collecting distinct hosts.
    pub fn replicas_for(&self, key: u64) -> Vec<usize> {
        let rf = self.topology.replica_factor;
        let pos = hash64(key ^ 0xA5A5_A5A5_5A5A_5A5A);
        let start = self.ring.partition_point(|&(p, _)| p < pos);
        let mut out = Vec::with_capacity(rf);
        for i in 0..self.ring.len() {
            let node = self.ring[(start + i) % self.ring.len()].1;
            if !out.contains(&node) {
                out.push(node);
                if out.len() == rf {
                    break;
                }
            }
        }
        out
    }

    /// Service time at `node` for an op of type `op_type`, in microseconds.
    pub fn service_time_us(&self, node: usize, op_type: OpType) -> f64 {
        let spec = &self.topology.nodes[node];
        let base = match op_type {
            OpType::Write => spec.base_service_us,
            OpType::Read => spec.read_service_us,
        };
        let load = self.nodes[node].in_flight as f64;
        base * (1.0 + self.constants.c_load * load)
            + self.constants.c_token_ms * US_PER_MS * (self.topology.tokens as f64).log2()
    }

    /// Switches every later message sample to `profile`. Messages already in
    /// flight keep the delays they were sampled with.
    pub fn apply_chaos(&mut self, profile: ChaosProfile) -> Result<()> {
        profile.validate()?;
        self.chaos = profile;
        Ok(())
    }

    pub fn submit_op(&mut self, op: OpRequest) -> Result<u64> {
        if op.issue_time_us < self.now_us {
            return Err(Error::InvalidArgument(format!(
                "issue time {} us precedes simulated time {} us",
                op.issue_time_us, self.now_us
            )));
        }
        let id = self.next_op;
        self.next_op += 1;
        let replicas = self.replicas_for(op.key);
        let n = self.nodes.len();
        let rf = replicas.len();
        self.ops.insert(
            id,
            OpState {
                req: op,
                required: self.topology.consistency.required(rf),
                involved: vec![true; rf],
                replicas,
                replies: 0,
                done: false,
                retransmissions: 0,
                bytes_tx: vec![0; n],
                bytes_rx: vec![0; n],
            },
        );
        self.push(op.issue_time_us, EventKind::Issue { op: id });
        Ok(id)
    }

    /// Processes every event up to and including `until_us` and returns the
    /// operations that completed in that span, in completion order.
    pub fn advance(&mut self, until_us: i64) -> Vec<CompletionEvent> {
        while let Some(Reverse((t, _, _))) = self.queue.peek() {
            if *t > until_us {
                break;
            }
            let Reverse((t, _, kind)) = self.queue.pop().expect("peeked");
            self.now_us = t;
            self.handle(kind);
        }
        if until_us > self.now_us {
            self.now_us = until_us;
        }
        std::mem::take(&mut self.pending)
    }

    /// Runs until the event queue is empty.
    pub fn drain(&mut self) -> Vec<CompletionEvent> {
        let mut out = Vec::new();
        while let Some(Reverse((t, _, _))) = self.queue.peek() {
            let t = *t;
            out.extend(self.advance(t));
        }
        out
    }

    pub fn next_event_time(&self) -> Option<i64> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Per-second counters for `node`, indexed by simulated second.
    pub fn node_seconds(&self, node: usize) -> &[Counters] {
        &self.nodes[node].per_second
    }

    /// Whole-run counters for `node`.
    pub fn node_totals(&self, node: usize) -> Counters {
        let mut acc = Counters::default();
        for c in &self.nodes[node].per_second {
            acc.add(c);
        }
        acc
    }

    /// Bytes sent but neither delivered nor lost yet.
    pub fn bytes_in_flight(&self) -> u64 {
        let (mut tx, mut rx, mut lost) = (0u64, 0u64, 0u64);
        for i in 0..self.nodes.len() {
            let c = self.node_totals(i);
            tx += c.bytes_tx;
            rx += c.bytes_rx;
            lost += c.bytes_lost;
        }
        tx - rx - lost
    }

    /// Settles time-integrated counters up to the current clock.
    pub fn settle(&mut self) {
        let now = self.now_us;
        for node in &mut self.nodes {
            node.settle_inflight(now);
        }
    }

    fn push(&mut self, t: i64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse((t, self.seq, kind)));
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Issue { op } => self.on_issue(op),
            EventKind::RequestArrive {
                op,
                slot,
                node,
                op_type,
                stream,
            } => self.on_request_arrive(op, slot, node as usize, op_type, stream),
            EventKind::ServiceDone {
                op,
                slot,
                node,
                op_type,
                stream,
            } => self.on_service_done(op, slot, node as usize, op_type, stream),
            EventKind::ReplyArrive { op, slot, op_type } => {
                self.on_reply_arrive(op, slot as usize, op_type)
            }
            EventKind::Timeout { op } => self.on_timeout(op),
        }
    }

    fn change_inflight(&mut self, node: usize, delta: i32) {
        let now = self.now_us;
        let st = &mut self.nodes[node];
        st.settle_inflight(now);
        st.in_flight = (st.in_flight as i64 + delta as i64).max(0) as u32;
    }

    fn on_issue(&mut self, op: u64) {
        let now = self.now_us;
        let coord = self.topology.loadgen_node;
        let (replicas, op_type, stream) = {
            let st = &self.ops[&op];
            (st.replicas.clone(), st.req.op_type, self.op_stream(&st.req))
        };
        self.change_inflight(coord, 1);
        for &r in &replicas {
            self.change_inflight(r, 1);
        }
        let abort = (self.constants.abort_timeout_ms * US_PER_MS).round() as i64;
        self.push(now + abort, EventKind::Timeout { op });
        let bytes = self.request_bytes(op_type);
        for (slot, &r) in replicas.iter().enumerate() {
            if let Some(arrival) = self.send(op, coord, r, bytes, stream, 2 * slot as u64) {
                let ev = EventKind::RequestArrive {
                    op,
                    slot: slot as u8,
                    node: r as u16,
                    op_type,
                    stream,
                };
                self.push(arrival, ev);
            } else {
                self.replica_failed(op, slot);
            }
        }
    }

    // Replicas keep servicing requests after the coordinator has completed
    // or abandoned the op; only the op bookkeeping is skipped.
    fn on_request_arrive(&mut self, op: u64, slot: u8, node: usize, op_type: OpType, stream: u64) {
        let service = self.service_time_us(node, op_type);
        let bytes = self.request_bytes(op_type);
        self.deliver(op, node, bytes);
        let now = self.now_us;
        self.nodes[node].bucket(now).work_us += service;
        let ev = EventKind::ServiceDone {
            op,
            slot,
            node: node as u16,
            op_type,
            stream,
        };
        self.push(now + service.round() as i64, ev);
    }

    fn on_service_done(&mut self, op: u64, slot: u8, node: usize, op_type: OpType, stream: u64) {
        let coord = self.topology.loadgen_node;
        let bytes = self.reply_bytes(op_type);
        match self.send(op, node, coord, bytes, stream, 2 * slot as u64 + 1) {
            Some(arrival) => self.push(arrival, EventKind::ReplyArrive { op, slot, op_type }),
            None => self.replica_failed(op, slot as usize),
        }
    }

    fn on_reply_arrive(&mut self, op: u64, slot: usize, op_type: OpType) {
        let coord = self.topology.loadgen_node;
        let bytes = self.reply_bytes(op_type);
        self.deliver(op, coord, bytes);
        let (complete, replica) = {
            let Some(st) = self.ops.get_mut(&op) else { return };
            if st.done {
                return;
            }
            st.replies += 1;
            st.involved[slot] = false;
            (st.replies >= st.required, st.replicas[slot])
        };
        self.change_inflight(replica, -1);
        if complete {
            self.finish(op, false);
        }
    }

    fn on_timeout(&mut self, op: u64) {
        if self.ops.get(&op).is_some_and(|st| !st.done) {
            self.finish(op, true);
        }
    }

    fn replica_failed(&mut self, op: u64, slot: usize) {
        let replica = {
            let Some(st) = self.ops.get_mut(&op) else { return };
            if st.done || !st.involved[slot] {
                return;
            }
            st.involved[slot] = false;
            st.replicas[slot]
        };
        self.change_inflight(replica, -1);
    }

    fn finish(&mut self, op: u64, error: bool) {
        let now = self.now_us;
        let coord = self.topology.loadgen_node;
        let (stale, ev) = {
            let st = self.ops.get_mut(&op).expect("live op");
            st.done = true;
            let stale: Vec<usize> = st
                .involved
                .iter()
                .enumerate()
                .filter(|(_, &inv)| inv)
                .map(|(i, _)| st.replicas[i])
                .collect();
            let ev = CompletionEvent {
                op_id: op,
                origin: st.req.origin,
                op_type: st.req.op_type,
                key: st.req.key,
                issue_time_us: st.req.issue_time_us,
                completion_time_us: now,
                latency_us: now - st.req.issue_time_us,
                error,
                retransmissions: st.retransmissions,
                bytes_tx: st.bytes_tx.clone(),
                bytes_rx: st.bytes_rx.clone(),
            };
            st.involved.iter_mut().for_each(|v| *v = false);
            (stale, ev)
        };
        for r in stale {
            self.change_inflight(r, -1);
        }
        self.change_inflight(coord, -1);
        self.pending.push(ev);
        self.ops.remove(&op);
    }

    fn request_bytes(&self, op_type: OpType) -> u64 {
        match op_type {
            OpType::Write => self.constants.header_bytes + self.constants.payload_bytes,
            OpType::Read => self.constants.header_bytes,
        }
    }

    fn reply_bytes(&self, op_type: OpType) -> u64 {
        match op_type {
            OpType::Write => self.constants.header_bytes,
            OpType::Read => self.constants.header_bytes + self.constants.payload_bytes,
        }
    }

    /// Samples and accounts one message; returns its arrival time unless the
    /// retry cap was exhausted.
    /// Random stream base for an op: a function of the seed and the op's
    /// identity, never of how many messages preceded it.
    fn op_stream(&self, req: &OpRequest) -> u64 {
        let origin = match req.origin {
            OpOrigin::Workload => 0,
            OpOrigin::Sensor => 1,
        };
        crate::rng::derive_seed(self.seed, &[0x006d_7367, origin, req.key, req.issue_time_us as u64])
    }

    fn send(&mut self, op: u64, from: usize, to: usize, bytes: u64, stream: u64, msg: u64) -> Option<i64> {
        let mut rng = rng_from(stream, &[msg]);
        let link = self.topology.links[from][to];
        let sample = sample_message_delay(&link, &self.chaos, &self.constants, &mut rng);
        let now = self.now_us;
        let attempts = sample.attempt_offsets_ms.len();
        for (i, &off) in sample.attempt_offsets_ms.iter().enumerate() {
            let t = now + (off * US_PER_MS).round() as i64;
            let lost = i + 1 < attempts || sample.failed;
            let b = self.nodes[from].bucket(t);
            b.bytes_tx += bytes;
            b.messages += 1;
            if i > 0 {
                b.retransmits += 1;
            }
            if lost {
                b.bytes_lost += bytes;
                b.drops += 1;
            }
        }
        if let Some(st) = self.ops.get_mut(&op) {
            st.retransmissions += sample.retransmissions;
            st.bytes_tx[from] += bytes * attempts as u64;
        }
        if sample.failed {
            None
        } else {
            Some(now + (sample.delay_ms * US_PER_MS).round() as i64)
        }
    }

    fn deliver(&mut self, op: u64, node: usize, bytes: u64) {
        let now = self.now_us;
        let b = self.nodes[node].bucket(now);
        b.bytes_rx += bytes;
        b.messages += 1;
        if let Some(st) = self.ops.get_mut(&op) {
            if !st.done {
                st.bytes_rx[node] += bytes;
            }
        }
    }
}

fn hash64(x: u64) -> u64 {
    crate::rng::derive_seed(x, &[])
}

fn build_ring(topology: &ClusterTopology, seed: u64) -> Vec<(u64, usize)> {
    let mut ring = Vec::new();
    for node in topology.replica_hosts() {
        for t in 0..topology.tokens {
            ring.push((crate::rng::derive_seed(seed, &[0x7269_6e67, node as u64, t as u64]), node));
        }
    }
    ring.sort_unstable();
    ring
}

/// Writes completions as `completion_time_us,op_type,latency_us,error,retransmissions`.
pub fn write_trace_csv<W: Write>(mut out: W, events: &[CompletionEvent]) -> std::io::Result<()> {
    writeln!(out, "completion_time_us,op_type,latency_us,error,retransmissions")?;
    for e in events {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.completion_time_us, e.op_type, e.latency_us, e.error, e.retransmissions
        )?;
    }
    Ok(())
}
