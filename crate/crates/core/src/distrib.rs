//! Coordinator/worker simulation with a real wire format.
//!
//! # Wire layout (version 1, all integers little-endian)
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `b"VCMM"`                         |
//! | 4      | 2    | format version (`u16`)                  |
//! | 6      | 1    | message kind (`u8`, see [`MessageKind`])|
//! | 7      | 1    | reserved, zero                          |
//! | 8      | 4    | fixed length `(p+1)Q` (`u32`)           |
//! | 12     | 4    | random-effect length `q` (`u32`)        |
//! | 16     | 8    | rows behind the message `n_k` (`u64`)   |
//! | 24     | 4    | partition id (`u32`)                    |
//! | 28     | 8 L  | payload, `L` little-endian `f64`         |
//! | 28+8L  | 4    | CRC-32 of header and payload (`u32`)     |
//!
//! `L` is fixed by the kind and the two lengths:
//!
//! * `SUFFSTATS`: `a`, `b`, lower triangle of `C` (row by row), `d`,
//!   row-major `B`, lower triangle of `H`;
//! * `THETA_BROADCAST`: `beta`, `alpha`, `s2`;
//! * `SCORE`: unpenalized node score `(g_beta, g_alpha)`;
//! * `SCALAR_RSS`: the node residual sum of squares;
//! * `PIVOT_HESSIAN`: lower triangle of the node's `[[C, B], [B^T, H]]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::estimator::{
    fit_summaries, onestep_update, pivot_hessian, FitConfig, FitResult, Method, OneStep, VarianceUpdate,
};
use crate::model::{validate_partition, ModelDims, ModelParams, Partition};
use crate::spline::TensorSplineBasis;
use crate::suffstats::{compute_local, local_residual_ss, local_score, ScoreVector, SuffStats};

pub const MAGIC: [u8; 4] = *b"VCMM";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;
pub const CHECKSUM_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    SuffStats = 1,
    ThetaBroadcast = 2,
    Score = 3,
    ScalarRss = 4,
    PivotHessian = 5,
}

impl MessageKind {
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => MessageKind::SuffStats,
            2 => MessageKind::ThetaBroadcast,
            3 => MessageKind::Score,
            4 => MessageKind::ScalarRss,
            5 => MessageKind::PivotHessian,
            other => return Err(VcmmError::Wire(format!("unknown message kind {other}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::SuffStats => "SUFFSTATS",
            MessageKind::ThetaBroadcast => "THETA_BROADCAST",
            MessageKind::Score => "SCORE",
            MessageKind::ScalarRss => "SCALAR_RSS",
            MessageKind::PivotHessian => "PIVOT_HESSIAN",
        }
    }

    /// Payload scalars for a message of this kind.
    pub fn payload_len(&self, fixed_len: usize, n_random: usize) -> usize {
        let d = fixed_len + n_random;
        match self {
            MessageKind::SuffStats => SuffStats::scalar_count(fixed_len, n_random),
            MessageKind::ThetaBroadcast => d + 1,
            MessageKind::Score => d,
            MessageKind::ScalarRss => 1,
            MessageKind::PivotHessian => d * (d + 1) / 2,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub fixed_len: usize,
    pub n_random: usize,
    pub n_rows: u64,
    pub partition_id: u32,
    pub payload: Vec<f64>,
}

fn push_lower(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

fn read_lower(vals: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = vals[k];
            m[(j, i)] = vals[k];
            k += 1;
        }
    }
    m
}

impl WireMessage {
    fn new(
        kind: MessageKind,
        fixed_len: usize,
        n_random: usize,
        n_rows: u64,
        partition_id: u32,
        payload: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(payload.len(), kind.payload_len(fixed_len, n_random));
        Self { kind, fixed_len, n_random, n_rows, partition_id, payload }
    }

    pub fn from_suffstats(stats: &SuffStats, partition_id: u32) -> Self {
        let (f, q) = (stats.fixed_len(), stats.n_random());
        let mut p = Vec::with_capacity(SuffStats::scalar_count(f, q));
        p.push(stats.yy);
        p.extend(stats.xy.iter());
        push_lower(&mut p, &stats.xx);
        p.extend(stats.zy.iter());
        for i in 0..f {
            for j in 0..q {
                p.push(stats.xz[(i, j)]);
            }
        }
        push_lower(&mut p, &stats.zz);
        Self::new(MessageKind::SuffStats, f, q, stats.n, partition_id, p)
    }

    pub fn to_suffstats(&self) -> Result<SuffStats> {
        self.expect_kind(MessageKind::SuffStats)?;
        let (f, q) = (self.fixed_len, self.n_random);
        let p = &self.payload;
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &p[at..at + len];
            at += len;
            s
        };
        let yy = take(1)[0];
        let xy = DVector::from_column_slice(take(f));
        let xx = read_lower(take(f * (f + 1) / 2), f);
        let zy = DVector::from_column_slice(take(q));
        let xz = DMatrix::from_row_slice(f, q, take(f * q));
        let zz = read_lower(take(q * (q + 1) / 2), q);
        Ok(SuffStats { yy, xy, xx, zy, xz, zz, n: self.n_rows })
    }

    pub fn theta_broadcast(theta: &ModelParams) -> Self {
        let mut p: Vec<f64> = theta.beta.iter().chain(theta.alpha.iter()).copied().collect();
        p.push(theta.sigma2_eps());
        Self::new(MessageKind::ThetaBroadcast, theta.beta.len(), theta.alpha.len(), 0, u32::MAX, p)
    }

    /// `(beta, alpha, s2)` from a theta message.
    pub fn to_theta(&self) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        self.expect_kind(MessageKind::ThetaBroadcast)?;
        let (f, q) = (self.fixed_len, self.n_random);
        Ok((
            DVector::from_column_slice(&self.payload[..f]),
            DVector::from_column_slice(&self.payload[f..f + q]),
            self.payload[f + q],
        ))
    }

    pub fn score(score: &ScoreVector, n_rows: u64, partition_id: u32) -> Self {
        let p: Vec<f64> = score.g_beta.iter().chain(score.g_alpha.iter()).copied().collect();
        Self::new(MessageKind::Score, score.g_beta.len(), score.g_alpha.len(), n_rows, partition_id, p)
    }

    pub fn to_score(&self) -> Result<ScoreVector> {
        self.expect_kind(MessageKind::Score)?;
        Ok(ScoreVector::from_stacked(&DVector::from_column_slice(&self.payload), self.fixed_len, false))
    }

    pub fn scalar_rss(rss: f64, fixed_len: usize, n_random: usize, n_rows: u64, partition_id: u32) -> Self {
        Self::new(MessageKind::ScalarRss, fixed_len, n_random, n_rows, partition_id, vec![rss])
    }

    pub fn to_scalar(&self) -> Result<f64> {
        self.expect_kind(MessageKind::ScalarRss)?;
        Ok(self.payload[0])
    }

    pub fn pivot_hessian(stats: &SuffStats, partition_id: u32) -> Self {
        let mut p = Vec::new();
        push_lower(&mut p, &stats.gram());
        Self::new(MessageKind::PivotHessian, stats.fixed_len(), stats.n_random(), stats.n, partition_id, p)
    }

    pub fn to_gram(&self) -> Result<DMatrix<f64>> {
        self.expect_kind(MessageKind::PivotHessian)?;
        Ok(read_lower(&self.payload, self.fixed_len + self.n_random))
    }

    fn expect_kind(&self, kind: MessageKind) -> Result<()> {
        if self.kind != kind {
            return Err(VcmmError::Wire(format!("expected {kind} message, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len() + CHECKSUM_LEN
    }
}

pub fn serialize(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(msg.kind as u8);
    out.push(0);
    out.extend_from_slice(&(msg.fixed_len as u32).to_le_bytes());
    out.extend_from_slice(&(msg.n_random as u32).to_le_bytes());
    out.extend_from_slice(&msg.n_rows.to_le_bytes());
    out.extend_from_slice(&msg.partition_id.to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn deserialize(bytes: &[u8]) -> Result<WireMessage> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(VcmmError::Wire(format!("message truncated: {} bytes", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(VcmmError::Wire("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(VcmmError::Wire(format!("unsupported format version {version}")));
    }
    let kind = MessageKind::from_code(bytes[6])?;
    if bytes[7] != 0 {
        return Err(VcmmError::Wire("reserved byte must be zero".into()));
    }
    let fixed_len = le_u32(&bytes[8..12]) as usize;
    let n_random = le_u32(&bytes[12..16]) as usize;
    let n_rows = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let partition_id = le_u32(&bytes[24..28]);
    // Lengths come from untrusted bytes, so size the payload in u128 first.
    let (f, q) = (fixed_len as u128, n_random as u128);
    let wide = match kind {
        MessageKind::SuffStats | MessageKind::PivotHessian => {
            let d = f + q;
            let tri = d * (d + 1) / 2;
            if kind == MessageKind::SuffStats {
                tri + f + q + 1
            } else {
                tri
            }
        }
        MessageKind::ThetaBroadcast => f + q + 1,
        MessageKind::Score => f + q,
        MessageKind::ScalarRss => 1,
    };
    let expected_wide = HEADER_LEN as u128 + 8 * wide + CHECKSUM_LEN as u128;
    if bytes.len() as u128 != expected_wide {
        return Err(VcmmError::Wire(format!("{kind} message should be {expected_wide} bytes, found {}", bytes.len())));
    }
    let len = kind.payload_len(fixed_len, n_random);
    debug_assert_eq!(len as u128, wide);
    let body = &bytes[HEADER_LEN..HEADER_LEN + 8 * len];
    let stored = le_u32(&bytes[HEADER_LEN + 8 * len..]);
    let computed = crc32fast::hash(&bytes[..HEADER_LEN + 8 * len]);
    if stored != computed {
        return Err(VcmmError::Checksum { stored, computed });
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(WireMessage { kind, fixed_len, n_random, n_rows, partition_id, payload })
}

pub fn write_message(path: &Path, msg: &WireMessage) -> Result<()> {
    std::fs::write(path, serialize(msg))?;
    Ok(())
}

pub fn read_message(path: &Path) -> Result<WireMessage> {
    deserialize(&std::fs::read(path)?)
}

/// Human-readable dump of a message.
pub fn describe(msg: &WireMessage) -> String {
    let mut s = format!(
        "kind: {}\nversion: {}\nfixed_len: {}\nn_random: {}\nn_rows: {}\npartition_id: {}\npayload_scalars: {}\nencoded_bytes: {}\n",
        msg.kind,
        FORMAT_VERSION,
        msg.fixed_len,
        msg.n_random,
        msg.n_rows,
        msg.partition_id,
        msg.payload.len(),
        msg.encoded_len()
    );
    let shown = msg.payload.len().min(12);
    s.push_str("payload_head:");
    for v in &msg.payload[..shown] {
        s.push_str(&format!(" {v:.6e}"));
    }
    if msg.payload.len() > shown {
        s.push_str(" ...");
    }
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Summary,
    Onestep,
}

impl std::str::FromStr for ProtocolMode {
    type Err = VcmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(ProtocolMode::Summary),
            "onestep" => Ok(ProtocolMode::Onestep),
            other => Err(VcmmError::InvalidSpec(format!("unknown protocol mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upstream,
    Downstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub node: u32,
    pub kind: MessageKind,
    pub direction: Direction,
    pub scalars: usize,
    pub bytes: usize,
}

/// Every message that crossed the coordinator boundary, counted in 64-bit
/// scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub mode: ProtocolMode,
    pub n_params: usize,
    pub n_nodes: usize,
    pub pivot: Option<u32>,
    pub entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new(mode: ProtocolMode, n_params: usize, n_nodes: usize) -> Self {
        Self { mode, n_params, n_nodes, pivot: None, entries: Vec::new() }
    }

    pub fn log(&mut self, round: u32, node: u32, direction: Direction, msg: &WireMessage) {
        self.entries.push(LedgerEntry {
            round,
            node,
            kind: msg.kind,
            direction,
            scalars: msg.payload.len(),
            bytes: msg.encoded_len(),
        });
    }

    fn is_exempt(e: &LedgerEntry) -> bool {
        e.kind == MessageKind::PivotHessian
    }

    /// Upstream scalars per node, excluding the budget-exempt pivot Hessian.
    pub fn upstream_by_node(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if e.direction == Direction::Upstream && !Self::is_exempt(e) {
                *out.entry(e.node).or_insert(0) += e.scalars;
            }
        }
        out
    }

    pub fn upstream_bytes_by_node(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if e.direction == Direction::Upstream {
                *out.entry(e.node).or_insert(0) += e.bytes;
            }
        }
        out
    }

    fn total(&self, keep: impl Fn(&LedgerEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| keep(e)).map(|e| e.scalars).sum()
    }

    pub fn upstream_total(&self) -> usize {
        self.total(|e| e.direction == Direction::Upstream && !Self::is_exempt(e))
    }

    pub fn exempt_total(&self) -> usize {
        self.total(Self::is_exempt)
    }

    pub fn downstream_total(&self) -> usize {
        self.total(|e| e.direction == Direction::Downstream)
    }

    /// Every logged scalar in both directions, exempt messages included.
    pub fn total_inclusive(&self) -> usize {
        self.total(|_| true)
    }

    /// Tab-separated dump, one row per message.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("round\tnode\tdirection\tkind\tscalars\tbytes\n");
        for e in &self.entries {
            let dir = match e.direction {
                Direction::Upstream => "up",
                Direction::Downstream => "down",
            };
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", e.round, e.node, dir, e.kind, e.scalars, e.bytes));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBudget {
    pub node: u32,
    pub used: usize,
    pub cap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub c: f64,
    pub n_params: usize,
    pub n_nodes: usize,
    pub nodes: Vec<NodeBudget>,
    pub upstream_total: usize,
    pub total_cap: f64,
    /// `total_cap - upstream_total`; negative when over budget.
    pub margin: f64,
    pub pass: bool,
    pub downstream_total: usize,
    pub exempt_total: usize,
    pub inclusive_total: usize,
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "budget: c = {}, d = {}, k = {}", self.c, self.n_params, self.n_nodes)?;
        for n in &self.nodes {
            writeln!(f, "  node {}: {} / {} scalars {}", n.node, n.used, n.cap, if n.pass { "pass" } else { "FAIL" })?;
        }
        writeln!(
            f,
            "  upstream total: {} / {} (margin {}) {}",
            self.upstream_total,
            self.total_cap,
            self.margin,
            if self.pass { "pass" } else { "FAIL" }
        )?;
        writeln!(f, "  pivot Hessian (exempt): {}", self.exempt_total)?;
        writeln!(f, "  downstream: {}", self.downstream_total)?;
        write!(f, "  inclusive total: {}", self.inclusive_total)
    }
}

/// Checks upstream traffic against `c d` scalars per node and `c d k` in
/// total. Downstream broadcasts and the pivot Hessian are reported but not
/// charged.
pub fn budget_check(ledger: &CommLedger, c: f64) -> BudgetReport {
    let d = ledger.n_params as f64;
    let cap = c * d;
    let nodes: Vec<NodeBudget> = ledger
        .upstream_by_node()
        .into_iter()
        .map(|(node, used)| NodeBudget { node, used, cap, pass: used as f64 <= cap })
        .collect();
    let upstream_total = ledger.upstream_total();
    let total_cap = cap * ledger.n_nodes as f64;
    let margin = total_cap - upstream_total as f64;
    BudgetReport {
        c,
        n_params: ledger.n_params,
        n_nodes: ledger.n_nodes,
        pass: nodes.iter().all(|n| n.pass) && margin >= 0.0,
        nodes,
        upstream_total,
        total_cap,
        margin,
        downstream_total: ledger.downstream_total(),
        exempt_total: ledger.exempt_total(),
        inclusive_total: ledger.total_inclusive(),
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    pub fit: FitConfig,
    pub budget_c: f64,
}

impl ProtocolConfig {
    pub fn new(mode: ProtocolMode, fit: FitConfig) -> Self {
        Self { mode, fit, budget_c: 8.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub fit: FitResult,
    pub ledger: CommLedger,
    pub budget: BudgetReport,
}

enum Command {
    Summary,
    Pilot(u64),
    PivotHessian,
    Score(Vec<u8>),
    Rss(Vec<u8>),
}

type Reply = std::result::Result<Vec<u8>, String>;

struct Worker<'a> {
    part: &'a Partition,
    basis: &'a TensorSplineBasis,
    dims: &'a ModelDims,
    init: &'a ModelParams,
    cfg: &'a FitConfig,
    stats: Option<SuffStats>,
}

impl Worker<'_> {
    fn stats(&mut self) -> Result<&SuffStats> {
        if self.stats.is_none() {
            validate_partition(self.part, self.dims)?;
            self.stats = Some(compute_local(self.part, self.basis)?);
        }
        Ok(self.stats.as_ref().expect("just computed"))
    }

    fn theta_from(&self, bytes: &[u8]) -> Result<ModelParams> {
        let (beta, alpha, s2) = deserialize(bytes)?.to_theta()?;
        let mut theta = self.init.clone();
        theta.beta = beta;
        theta.alpha = alpha;
        theta.variance.sigma2_eps = s2;
        Ok(theta)
    }

    fn handle(&mut self, cmd: Command) -> Result<Vec<u8>> {
        let id = self.part.id;
        let msg = match cmd {
            Command::Summary => WireMessage::from_suffstats(self.stats()?, id),
            Command::Pilot(n_total) => {
                let (init, cfg) = (self.init, self.cfg);
                let pilot = OneStep::pilot(self.stats()?, n_total, init, cfg)?;
                let mut msg = WireMessage::theta_broadcast(&pilot.params);
                msg.partition_id = id;
                msg.n_rows = self.part.n_rows() as u64;
                msg
            }
            Command::PivotHessian => WireMessage::pivot_hessian(self.stats()?, id),
            Command::Score(bytes) => {
                let theta = self.theta_from(&bytes)?;
                validate_partition(self.part, self.dims)?;
                WireMessage::score(&local_score(self.part, self.basis, &theta)?, self.part.n_rows() as u64, id)
            }
            Command::Rss(bytes) => {
                let theta = self.theta_from(&bytes)?;
                let rss = local_residual_ss(self.part, self.basis, &theta)?;
                let n = self.part.n_rows() as u64;
                WireMessage::scalar_rss(rss, theta.beta.len(), theta.alpha.len(), n, id)
            }
        };
        Ok(serialize(&msg))
    }
}

struct Link {
    id: u32,
    tx: mpsc::Sender<Command>,
    rx: mpsc::Receiver<Reply>,
}

impl Link {
    fn request(&self, cmd: Command, expect: MessageKind) -> Result<WireMessage> {
        self.tx.send(cmd).map_err(|_| VcmmError::WorkerFailed(self.id, "worker channel closed".into()))?;
        let reply = self.rx.recv().map_err(|_| VcmmError::WorkerFailed(self.id, "worker exited".into()))?;
        let bytes = reply.map_err(|e| VcmmError::WorkerFailed(self.id, e))?;
        let msg = deserialize(&bytes).map_err(|e| VcmmError::WorkerFailed(self.id, e.to_string()))?;
        if msg.kind != expect || msg.partition_id != self.id {
            return Err(VcmmError::WorkerFailed(
                self.id,
                format!("unexpected {} reply from partition {}", msg.kind, msg.partition_id),
            ));
        }
        Ok(msg)
    }
}

/// Sends the same command to every worker before collecting any reply, so
/// workers compute concurrently; replies come back in worker order.
fn fan_out(
    links: &[Link],
    make: impl Fn() -> Command,
    expect: MessageKind,
    round: u32,
    ledger: &mut CommLedger,
) -> Result<Vec<WireMessage>> {
    for l in links {
        l.tx.send(make()).map_err(|_| VcmmError::WorkerFailed(l.id, "worker channel closed".into()))?;
    }
    let mut out = Vec::with_capacity(links.len());
    for l in links {
        let reply = l.rx.recv().map_err(|_| VcmmError::WorkerFailed(l.id, "worker exited".into()))?;
        let bytes = reply.map_err(|e| VcmmError::WorkerFailed(l.id, e))?;
        let msg = deserialize(&bytes).map_err(|e| VcmmError::WorkerFailed(l.id, e.to_string()))?;
        if msg.kind != expect || msg.partition_id != l.id {
            return Err(VcmmError::WorkerFailed(l.id, format!("unexpected {} reply", msg.kind)));
        }
        ledger.log(round, l.id, Direction::Upstream, &msg);
        out.push(msg);
    }
    Ok(out)
}

fn broadcast(links: &[Link], theta: &ModelParams, round: u32, ledger: &mut CommLedger) -> Vec<u8> {
    let msg = WireMessage::theta_broadcast(theta);
    for l in links {
        ledger.log(round, l.id, Direction::Downstream, &msg);
    }
    serialize(&msg)
}

/// Runs the estimator behind a message boundary: one worker thread per
/// partition, all traffic serialized through the wire format and logged.
///
/// `init` supplies the penalty, the variance structure and the starting
/// values; `basis` is shared by all workers.
pub fn run_protocol(
    partitions: &[Partition],
    basis: &TensorSplineBasis,
    dims: &ModelDims,
    init: &ModelParams,
    cfg: &ProtocolConfig,
) -> Result<ProtocolOutput> {
    cfg.fit.validate()?;
    if partitions.is_empty() {
        return Err(VcmmError::InvalidSpec("no partitions supplied".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for p in partitions {
        if !seen.insert(p.id) {
            return Err(VcmmError::InvalidSpec(format!("duplicate partition id {}", p.id)));
        }
    }
    if cfg.mode == ProtocolMode::Onestep && cfg.fit.method != Method::Onestep {
        return Err(VcmmError::InvalidSpec(format!(
            "onestep mode runs the onestep method, not `{}`",
            cfg.fit.method.label()
        )));
    }
    let n_params = dims.param_len();

    std::thread::scope(|scope| {
        let links: Vec<Link> = partitions
            .iter()
            .map(|part| {
                let (cmd_tx, cmd_rx) = mpsc::channel::<Command>();
                let (rep_tx, rep_rx) = mpsc::channel::<Reply>();
                let fit_cfg = &cfg.fit;
                scope.spawn(move || {
                    let mut worker = Worker { part, basis, dims, init, cfg: fit_cfg, stats: None };
                    for cmd in cmd_rx {
                        let reply = worker.handle(cmd).map_err(|e| e.to_string());
                        if rep_tx.send(reply).is_err() {
                            break;
                        }
                    }
                });
                Link { id: part.id, tx: cmd_tx, rx: rep_rx }
            })
            .collect();

        let mut ledger = CommLedger::new(cfg.mode, n_params, partitions.len());
        let fit = match cfg.mode {
            ProtocolMode::Summary => {
                let msgs = fan_out(&links, || Command::Summary, MessageKind::SuffStats, 1, &mut ledger)?;
                let stats = msgs.iter().map(WireMessage::to_suffstats).collect::<Result<Vec<_>>>()?;
                fit_summaries(&stats, init, &cfg.fit)?
            }
            ProtocolMode::Onestep => {
                let n_total = partitions.iter().map(|p| p.n_rows() as u64).sum();
                run_onestep(&links, n_total, init, &cfg.fit, &mut ledger)?
            }
        };
        let budget = budget_check(&ledger, cfg.budget_c);
        if !budget.pass {
            log::warn!("communication budget exceeded: {} > {}", budget.upstream_total, budget.total_cap);
        }
        Ok(ProtocolOutput { fit, ledger, budget })
    })
}

fn run_onestep(
    links: &[Link],
    n_total: u64,
    init: &ModelParams,
    cfg: &FitConfig,
    ledger: &mut CommLedger,
) -> Result<FitResult> {
    let start = Instant::now();
    let pivot = links.get(cfg.pivot_node).ok_or_else(|| {
        VcmmError::InvalidSpec(format!("pivot node {} does not exist ({} nodes)", cfg.pivot_node, links.len()))
    })?;
    ledger.pivot = Some(pivot.id);

    let pilot_msg = pivot.request(Command::Pilot(n_total), MessageKind::ThetaBroadcast)?;
    ledger.log(1, pivot.id, Direction::Upstream, &pilot_msg);
    let hess_msg = pivot.request(Command::PivotHessian, MessageKind::PivotHessian)?;
    ledger.log(1, pivot.id, Direction::Upstream, &hess_msg);

    let (beta, alpha, s2) = pilot_msg.to_theta()?;
    let mut pilot = init.clone();
    pilot.beta = beta;
    pilot.alpha = alpha;
    pilot.variance.sigma2_eps = s2;
    if cfg.variance_update == VarianceUpdate::Iterate {
        pilot.variance.sigma_alpha = init.variance.sigma_alpha.project(&pilot.alpha);
    }

    let theta0 = broadcast(links, &pilot, 2, ledger);
    let score_msgs = fan_out(links, || Command::Score(theta0.clone()), MessageKind::Score, 2, ledger)?;
    let scores = score_msgs.iter().map(WireMessage::to_score).collect::<Result<Vec<_>>>()?;
    let reported: u64 = score_msgs.iter().map(|m| m.n_rows).sum();
    if reported != n_total {
        return Err(VcmmError::InvalidSpec(format!("nodes reported {reported} rows, expected {n_total}")));
    }

    let score = OneStep::global_score(&scores, &pilot)?;
    let gram = hess_msg.to_gram()?;
    let k1 = pivot_hessian(&gram, hess_msg.n_rows, n_total, &pilot)?;
    let updated = onestep_update(&pilot, &score, &k1, cfg.svd_mode)?;

    let theta1 = broadcast(links, &updated, 3, ledger);
    let rss_msgs = fan_out(links, || Command::Rss(theta1.clone()), MessageKind::ScalarRss, 3, ledger)?;
    let rss_total: f64 = rss_msgs.iter().map(|m| m.payload[0]).sum();
    // Nodes do not send `a`; it only scales the negative-residual tolerance,
    // so the residual total stands in for it.
    let params = OneStep::finish(&updated, rss_total, rss_total, n_total, cfg)?;
    OneStep::summarize(&score, &gram, hess_msg.n_rows, n_total, rss_total, params, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(rng: &mut ChaCha8Rng, f: usize, q: usize) -> SuffStats {
        let mut s = SuffStats::zeros(f, q);
        s.yy = rng.random();
        s.xy = DVector::from_fn(f, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(f + q, f + q, |_, _| rng.random_range(-1.0..1.0));
        let g = &a * a.transpose();
        s.xx = g.view((0, 0), (f, f)).into_owned();
        s.xz = g.view((0, f), (f, q)).into_owned();
        s.zz = g.view((f, f), (q, q)).into_owned();
        s.zy = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
        s.n = rng.random_range(1..1_000_000);
        s
    }

    #[test]
    fn suffstats_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_stats(&mut rng, 12, 5);
        let msg = WireMessage::from_suffstats(&s, 3);
        assert_eq!(msg.payload.len(), 171);
        let bytes = serialize(&msg);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 171 + CHECKSUM_LEN);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, msg);
        let s2 = back.to_suffstats().unwrap();
        assert_eq!(s2, s);
    }

    #[test]
    fn empty_stats_round_trip() {
        let s = SuffStats::zeros(4, 2);
        let bytes = serialize(&WireMessage::from_suffstats(&s, 0));
        let msg = deserialize(&bytes).unwrap();
        assert!(msg.payload.iter().all(|&v| v == 0.0));
        assert_eq!(msg.to_suffstats().unwrap(), s);
    }

    #[test]
    fn header_errors() {
        let s = SuffStats::zeros(2, 1);
        let bytes = serialize(&WireMessage::from_suffstats(&s, 0));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad), Err(VcmmError::Wire(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(deserialize(&bad), Err(VcmmError::Wire(_))));
        assert!(matches!(deserialize(&bytes[..bytes.len() - 1]), Err(VcmmError::Wire(_))));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 3] ^= 0x10;
        assert!(matches!(deserialize(&bad), Err(VcmmError::Checksum { .. })));
    }

    #[test]
    fn other_kinds_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_stats(&mut rng, 6, 3);
        let hess = WireMessage::pivot_hessian(&s, 1);
        assert_eq!(hess.payload.len(), 45);
        assert_eq!(deserialize(&serialize(&hess)).unwrap().to_gram().unwrap(), s.gram());
        let score = ScoreVector::from_stacked(&DVector::from_fn(9, |i, _| i as f64), 6, false);
        let msg = deserialize(&serialize(&WireMessage::score(&score, 10, 2))).unwrap();
        assert_eq!(msg.to_score().unwrap(), score);
        let rss = deserialize(&serialize(&WireMessage::scalar_rss(3.5, 6, 3, 10, 2))).unwrap();
        assert_eq!(rss.to_scalar().unwrap(), 3.5);
        assert!(rss.to_score().is_err());
    }

    #[test]
    fn empty_ledger_passes() {
        let ledger = CommLedger::new(ProtocolMode::Onestep, 10, 4);
        let report = budget_check(&ledger, 8.0);
        assert!(report.pass);
        assert_eq!(report.upstream_total, 0);
    }

    #[test]
    fn summary_payload_overruns_budget_at_d_100() {
        let mut ledger = CommLedger::new(ProtocolMode::Summary, 100, 4);
        let s = SuffStats::zeros(80, 20);
        for id in 0..4 {
            ledger.log(1, id, Direction::Upstream, &WireMessage::from_suffstats(&s, id));
        }
        let report = budget_check(&ledger, 8.0);
        assert!(!report.pass);
        assert!(report.nodes.iter().all(|n| !n.pass));
    }
}
