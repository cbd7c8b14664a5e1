//! Sharded pipeline simulator.
//!
//! An encrypted model is cut into contiguous layer ranges, each hosted by a
//! simulated worker node. Workers only ever see framed bytes: the client sends
//! ciphertext ids to the first shard, activations travel shard to shard, and
//! the last shard returns the next ciphertext id. A seeded virtual clock
//! orders deliveries, so a run is a pure function of its inputs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EeError, Result};
use crate::exec::Exec;
use crate::model::{argmax, Domain, ModelBundle, ModelConfig, TokenSeq};
use crate::tensor::Tensor2;

pub const FRAME_MAGIC: &[u8; 4] = b"EEFR";
pub const TOKEN_MAGIC: &[u8; 4] = b"EETK";
pub const FRAME_VERSION: u8 = 1;
const ACT_HEADER: usize = 4 + 1 + 8 + 2 + 4 + 4;
const TOK_HEADER: usize = 4 + 1 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_shards: usize,
    /// Inclusive `(first_layer, last_layer)` per shard.
    pub ranges: Vec<(usize, usize)>,
    /// Node id hosting each shard at the start of a run.
    pub placement: Vec<u32>,
}

/// Balanced contiguous split; earlier shards take the remainder.
pub fn plan_shards(config: &ModelConfig, n: usize) -> Result<ShardPlan> {
    config.validate()?;
    if n == 0 || n > config.n_layers {
        return Err(EeError::Config(format!(
            "cannot split {} layers into {n} shards",
            config.n_layers
        )));
    }
    let base = config.n_layers / n;
    let extra = config.n_layers % n;
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        ranges.push((start, start + len - 1));
        start += len;
    }
    Ok(ShardPlan {
        n_shards: n,
        ranges,
        placement: (0..n as u32).collect(),
    })
}

impl ShardPlan {
    pub fn layers(&self, shard: usize) -> Range<usize> {
        let (a, b) = self.ranges[shard];
        a..b + 1
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(EeError::Config(m));
        if self.n_shards == 0 || self.ranges.len() != self.n_shards || self.placement.len() != self.n_shards {
            return bad(format!(
                "plan has {} shards, {} ranges, {} placements",
                self.n_shards,
                self.ranges.len(),
                self.placement.len()
            ));
        }
        let mut next = 0;
        for &(a, b) in &self.ranges {
            if a != next || b < a {
                return bad(format!("range ({a}, {b}) does not continue at layer {next}"));
            }
            next = b + 1;
        }
        if next != config.n_layers {
            return bad(format!("plan covers {next} layers, model has {}", config.n_layers));
        }
        let mut nodes = self.placement.clone();
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.len() != self.n_shards {
            return bad("two shards placed on one node".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationFrame {
    pub request_id: u64,
    /// Shard that produced the activations.
    pub shard_index: u16,
    pub seq_len: u32,
    pub d_model: u32,
    pub payload: Vec<f64>,
}

/// Ciphertext ids in flight between the client and the end shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrame {
    pub request_id: u64,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Activation(ActivationFrame),
    Tokens(TokenFrame),
}

pub fn encode_frame(f: &ActivationFrame) -> Vec<u8> {
    assert_eq!(
        f.payload.len(),
        f.seq_len as usize * f.d_model as usize,
        "payload does not match frame dimensions"
    );
    let mut out = Vec::with_capacity(ACT_HEADER + 8 * f.payload.len() + 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&f.request_id.to_le_bytes());
    out.extend_from_slice(&f.shard_index.to_le_bytes());
    out.extend_from_slice(&f.seq_len.to_le_bytes());
    out.extend_from_slice(&f.d_model.to_le_bytes());
    let start = out.len();
    for v in &f.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_token_frame(f: &TokenFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(TOK_HEADER + 4 * f.ids.len() + 4);
    out.extend_from_slice(TOKEN_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&f.request_id.to_le_bytes());
    out.extend_from_slice(&(f.ids.len() as u32).to_le_bytes());
    let start = out.len();
    for id in &f.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}
fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Total encoded length of the frame whose header starts `bytes`.
pub fn frame_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 5 {
        return Err(EeError::format(bytes.len(), "truncated frame header"));
    }
    if bytes[4] != FRAME_VERSION {
        return Err(EeError::Version {
            found: bytes[4] as u32,
            expected: FRAME_VERSION as u32,
        });
    }
    let magic = &bytes[..4];
    if magic == FRAME_MAGIC {
        if bytes.len() < ACT_HEADER {
            return Err(EeError::format(bytes.len(), "truncated frame header"));
        }
        let n = le_u32(bytes, 15) as usize * le_u32(bytes, 19) as usize;
        Ok(ACT_HEADER + 8 * n + 4)
    } else if magic == TOKEN_MAGIC {
        if bytes.len() < TOK_HEADER {
            return Err(EeError::format(bytes.len(), "truncated frame header"));
        }
        Ok(TOK_HEADER + 4 * le_u32(bytes, 13) as usize + 4)
    } else {
        Err(EeError::format(0, "unknown frame magic"))
    }
}

fn check_body(bytes: &[u8], header: usize) -> Result<&[u8]> {
    let want = frame_len(bytes)?;
    if bytes.len() != want {
        return Err(EeError::format(
            bytes.len().min(want),
            format!("frame is {} bytes, header implies {want}", bytes.len()),
        ));
    }
    let body = &bytes[header..want - 4];
    let stored = le_u32(bytes, want - 4);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(EeError::Integrity(format!(
            "frame checksum {stored:08x} does not match payload {actual:08x}"
        )));
    }
    Ok(body)
}

pub fn decode_frame(bytes: &[u8]) -> Result<ActivationFrame> {
    match decode_any(bytes)? {
        Frame::Activation(f) => Ok(f),
        Frame::Tokens(_) => Err(EeError::format(0, "expected an activation frame, got a token frame")),
    }
}

pub fn decode_token_frame(bytes: &[u8]) -> Result<TokenFrame> {
    match decode_any(bytes)? {
        Frame::Tokens(f) => Ok(f),
        Frame::Activation(_) => Err(EeError::format(0, "expected a token frame, got an activation frame")),
    }
}

pub fn decode_any(bytes: &[u8]) -> Result<Frame> {
    frame_len(bytes)?;
    if &bytes[..4] == FRAME_MAGIC {
        let body = check_body(bytes, ACT_HEADER)?;
        Ok(Frame::Activation(ActivationFrame {
            request_id: le_u64(bytes, 5),
            shard_index: le_u16(bytes, 13),
            seq_len: le_u32(bytes, 15),
            d_model: le_u32(bytes, 19),
            payload: body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }))
    } else {
        let body = check_body(bytes, TOK_HEADER)?;
        Ok(Frame::Tokens(TokenFrame {
            request_id: le_u64(bytes, 5),
            ids: body
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }))
    }
}

/// Write one encoded frame to a byte stream.
pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    w.write_all(frame)
        .and_then(|_| w.flush())
        .map_err(|e| EeError::io("<stream>", e))
}

/// Read exactly one frame from a byte stream; the header says how long it is.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let io = |e| EeError::io("<stream>", e);
    let mut buf = vec![0u8; 5];
    r.read_exact(&mut buf).map_err(io)?;
    let header = if &buf[..4] == FRAME_MAGIC { ACT_HEADER } else { TOK_HEADER };
    buf.resize(header, 0);
    r.read_exact(&mut buf[5..]).map_err(io)?;
    let total = frame_len(&buf)?;
    buf.resize(total, 0);
    r.read_exact(&mut buf[header..]).map_err(io)?;
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub node: u32,
    /// Decoding step at whose start the node crashes.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub seed: u64,
    /// Per-hop delivery delay, uniform over this inclusive range.
    pub latency_us: (u64, u64),
    pub failures: Vec<Failure>,
    /// Idle nodes available for reassignment, ids after the shard nodes.
    pub n_spares: usize,
    pub detect_timeout_us: u64,
    /// Flip one payload bit of the n-th transmitted frame.
    pub corrupt_frame: Option<u64>,
}

impl BrokerConfig {
    pub fn new(seed: u64) -> Self {
        BrokerConfig {
            seed,
            latency_us: (100, 2_000),
            failures: Vec::new(),
            n_spares: 1,
            detect_timeout_us: 50_000,
            corrupt_frame: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Tokens,
    Activation,
    Reassign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Client,
    Broker,
    Node(u32),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Client => f.write_str("client"),
            Endpoint::Broker => f.write_str("broker"),
            Endpoint::Node(n) => write!(f, "node-{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: u64,
    pub time_us: u64,
    pub step: usize,
    pub kind: EntryKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub request_id: u64,
    /// Sending shard for activations, reassigned shard for reassignments.
    pub shard_index: Option<u16>,
    pub seq_len: usize,
    pub d_model: Option<usize>,
    pub byte_len: usize,
    pub sha256: String,
    pub note: Option<String>,
    /// Raw frame as sent; kept in memory only.
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub plan: ShardPlan,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serialises"));
            s.push('\n');
        }
        s
    }

    /// sha256 of the JSON Lines form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn reassignments(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Reassign)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| EeError::io(path, e))
    }

    /// Metadata only; raw frame bytes are not stored on disk.
    pub fn load_jsonl(path: impl AsRef<Path>, plan: ShardPlan) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EeError::io(path, e))?;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for line in text.lines() {
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(line).map_err(|e| EeError::format(offset, e.to_string()))?);
            }
            offset += line.len() + 1;
        }
        Ok(Transcript { plan, entries })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub output: TokenSeq,
    pub transcript: Transcript,
}

struct Worker<'m> {
    node: u32,
    model: &'m ModelBundle,
    plan: &'m ShardPlan,
}

impl Worker<'_> {
    /// Process one inbound frame for `shard`, returning the outbound frame.
    fn handle(&self, shard: usize, inbound: &[u8]) -> Result<Vec<u8>> {
        let cfg = self.model.config();
        let (request_id, h) = match decode_any(inbound)? {
            Frame::Tokens(t) if shard == 0 => {
                let h = self.model.embed(&TokenSeq::ciphertext(t.ids))?;
                (t.request_id, h)
            }
            Frame::Activation(a) if shard > 0 && a.shard_index as usize == shard - 1 => {
                if a.d_model as usize != cfg.d_model {
                    return Err(EeError::Shape(format!(
                        "node-{} got width {}, model has {}",
                        self.node, a.d_model, cfg.d_model
                    )));
                }
                (a.request_id, Tensor2::new(a.seq_len as usize, a.d_model as usize, a.payload)?)
            }
            _ => {
                return Err(EeError::Pipeline(format!(
                    "node-{} hosting shard {shard} got an unexpected frame",
                    self.node
                )))
            }
        };
        let h = self.model.run_layers(h, self.plan.layers(shard))?;
        if shard + 1 == self.plan.n_shards {
            let last = h.select_rows(h.rows() - 1..h.rows());
            let logits = self.model.head(&last)?;
            Ok(encode_token_frame(&TokenFrame {
                request_id,
                ids: vec![argmax(logits.data()) as u32],
            }))
        } else {
            Ok(encode_frame(&ActivationFrame {
                request_id,
                shard_index: shard as u16,
                seq_len: h.rows() as u32,
                d_model: h.cols() as u32,
                payload: h.into_data(),
            }))
        }
    }
}

struct Sim<'a> {
    rng: ChaCha8Rng,
    broker: &'a BrokerConfig,
    clock: u64,
    seq: u64,
    sent: u64,
    queue: BinaryHeap<Reverse<(u64, u64, usize)>>,
    inflight: Vec<Option<(Endpoint, Vec<u8>)>>,
    entries: Vec<TranscriptEntry>,
}

impl Sim<'_> {
    fn send(&mut self, step: usize, from: Endpoint, to: Endpoint, mut bytes: Vec<u8>) -> Result<()> {
        let (lo, hi) = self.broker.latency_us;
        let delay = self.rng.random_range(lo..=hi);
        let frame = decode_any(&bytes)?;
        let (kind, request_id, shard_index, seq_len, d_model) = match &frame {
            Frame::Tokens(t) => (EntryKind::Tokens, t.request_id, None, t.ids.len(), None),
            Frame::Activation(a) => (
                EntryKind::Activation,
                a.request_id,
                Some(a.shard_index),
                a.seq_len as usize,
                Some(a.d_model as usize),
            ),
        };
        self.entries.push(TranscriptEntry {
            index: self.entries.len() as u64,
            time_us: self.clock,
            step,
            kind,
            from,
            to,
            request_id,
            shard_index,
            seq_len,
            d_model,
            byte_len: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            note: None,
            bytes: bytes.clone(),
        });
        if self.broker.corrupt_frame == Some(self.sent) {
            let at = bytes.len() - 5;
            bytes[at] ^= 1;
        }
        self.sent += 1;
        self.inflight.push(Some((to, bytes)));
        self.queue
            .push(Reverse((self.clock + delay, self.seq, self.inflight.len() - 1)));
        self.seq += 1;
        Ok(())
    }

    fn next(&mut self) -> Option<(Endpoint, Vec<u8>)> {
        let Reverse((t, _, i)) = self.queue.pop()?;
        self.clock = t;
        self.inflight[i].take()
    }

    fn note(&mut self, step: usize, shard: usize, from: u32, to: u32) {
        self.clock += self.broker.detect_timeout_us;
        self.entries.push(TranscriptEntry {
            index: self.entries.len() as u64,
            time_us: self.clock,
            step,
            kind: EntryKind::Reassign,
            from: Endpoint::Node(from),
            to: Endpoint::Node(to),
            request_id: step as u64,
            shard_index: Some(shard as u16),
            seq_len: 0,
            d_model: None,
            byte_len: 0,
            sha256: String::new(),
            note: Some(format!("node-{from} unresponsive, shard {shard} moved to node-{to}")),
            bytes: Vec::new(),
        });
    }
}

/// Decode `n_new` tokens through the sharded pipeline. Each step is one
/// request (`request_id` = step) that runs the full prefix through every
/// shard.
pub fn run_pipeline(
    enc_model: &ModelBundle,
    plan: &ShardPlan,
    broker: &BrokerConfig,
    prompt: &TokenSeq,
    n_new: usize,
) -> Result<PipelineRun> {
    Domain::Ciphertext.expect(enc_model.domain())?;
    Domain::Ciphertext.expect(prompt.domain)?;
    let cfg = enc_model.config();
    plan.validate(cfg)?;
    if prompt.is_empty() {
        return Err(EeError::Shape("empty prompt".into()));
    }
    prompt.check_range(cfg.vocab_size)?;
    if prompt.len() + n_new.saturating_sub(1) > cfg.max_seq_len {
        return Err(EeError::Shape(format!(
            "prompt of {} plus {n_new} new tokens exceeds max_seq_len {}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    let n_nodes = plan.placement.iter().max().map_or(0, |&m| m as usize + 1) + broker.n_spares;
    if let Some(f) = broker.failures.iter().find(|f| f.node as usize >= n_nodes) {
        return Err(EeError::Config(format!("failure names node-{} of {n_nodes}", f.node)));
    }
    let (lo, hi) = broker.latency_us;
    if lo > hi {
        return Err(EeError::Config(format!("latency range ({lo}, {hi}) is empty")));
    }

    let mut assignment = plan.placement.clone();
    let mut crashed = vec![false; n_nodes];
    let mut sim = Sim {
        rng: ChaCha8Rng::seed_from_u64(broker.seed),
        broker,
        clock: 0,
        seq: 0,
        sent: 0,
        queue: BinaryHeap::new(),
        inflight: Vec::new(),
        entries: Vec::new(),
    };
    let mut seq = prompt.clone();
    for step in 0..n_new {
        for f in broker.failures.iter().filter(|f| f.step == step) {
            crashed[f.node as usize] = true;
        }
        let first = Endpoint::Node(assignment[0]);
        sim.send(step, Endpoint::Client, first, encode_token_frame(&TokenFrame {
            request_id: step as u64,
            ids: seq.ids.clone(),
        }))?;
        let mut hop = 0usize;
        while let Some((to, bytes)) = sim.next() {
            let node = match to {
                Endpoint::Client => {
                    let t = decode_token_frame(&bytes)?;
                    seq.ids.extend_from_slice(&t.ids);
                    break;
                }
                Endpoint::Node(n) => n,
                Endpoint::Broker => unreachable!("nothing is addressed to the broker"),
            };
            let shard = hop;
            if crashed[node as usize] {
                let busy = |n: &u32| assignment.contains(n) || crashed[*n as usize];
                let spare = (0..n_nodes as u32).find(|n| !busy(n)).ok_or_else(|| {
                    EeError::Pipeline(format!("node-{node} failed and no spare is available for shard {shard}"))
                })?;
                assignment[shard] = spare;
                sim.note(step, shard, node, spare);
                sim.inflight.push(Some((Endpoint::Node(spare), bytes)));
                let idx = sim.inflight.len() - 1;
                sim.queue.push(Reverse((sim.clock, sim.seq, idx)));
                sim.seq += 1;
                continue;
            }
            let worker = Worker { node, model: enc_model, plan };
            let out = worker.handle(shard, &bytes)?;
            let dest = if shard + 1 == plan.n_shards {
                Endpoint::Client
            } else {
                Endpoint::Node(assignment[shard + 1])
            };
            sim.send(step, Endpoint::Node(node), dest, out)?;
            hop += 1;
        }
    }
    Ok(PipelineRun {
        output: seq,
        transcript: Transcript {
            plan: plan.clone(),
            entries: sim.entries,
        },
    })
}

/// Independent pipelines, one per prompt, each with its own broker seed
/// `broker.seed + i`.
pub fn run_pipelines(
    enc_model: &ModelBundle,
    plan: &ShardPlan,
    broker: &BrokerConfig,
    prompts: &[TokenSeq],
    n_new: usize,
    exec: Exec,
) -> Vec<Result<PipelineRun>> {
    exec.map_range(prompts.len(), |i| {
        let b = BrokerConfig {
            seed: broker.seed.wrapping_add(i as u64),
            ..broker.clone()
        };
        run_pipeline(enc_model, plan, &b, &prompts[i], n_new)
    })
}

pub struct PlaintextContext<'a> {
    pub prompt: &'a TokenSeq,
    /// Generated ids only, in decoding order.
    pub output: &'a [u32],
    pub model: &'a ModelBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub passed: bool,
    pub offending_frames: Vec<u64>,
    pub findings: Vec<String>,
    pub warnings: Vec<String>,
}

fn contains_run(hay: &[u32], needle: &[u32]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Scan a transcript for plaintext leaking onto the wire.
///
/// Flags a frame when (a) a token frame contains the plaintext prompt or the
/// plaintext output as a contiguous run (runs shorter than two ids are not
/// searched), (b) the ids sent to the first shard equal the plaintext prefix
/// of that step, or (c) an activation payload equals, bit for bit, the
/// plaintext model's activations at the same point.
pub fn audit_blindness(transcript: &Transcript, ctx: &PlaintextContext<'_>) -> AuditResult {
    let mut r = AuditResult {
        passed: true,
        offending_frames: Vec::new(),
        findings: Vec::new(),
        warnings: Vec::new(),
    };
    if transcript.entries.is_empty() {
        r.warnings.push("empty transcript, nothing to audit".into());
        return r;
    }
    if ctx.model.domain() != Domain::Plaintext {
        r.warnings.push("reference model is not plaintext; activation check skipped".into());
    }
    let prefix = |step: usize| -> Vec<u32> {
        let mut p = ctx.prompt.ids.clone();
        p.extend_from_slice(&ctx.output[..step.min(ctx.output.len())]);
        p
    };
    let mut missing_bytes = false;
    for e in &transcript.entries {
        if e.kind == EntryKind::Reassign {
            continue;
        }
        if e.bytes.is_empty() {
            missing_bytes = true;
            continue;
        }
        let mut flag = |why: String| {
            if r.offending_frames.last() != Some(&e.index) {
                r.offending_frames.push(e.index);
            }
            r.findings.push(format!("frame {}: {why}", e.index));
        };
        match decode_any(&e.bytes) {
            Ok(Frame::Tokens(t)) => {
                for (name, run) in [("prompt", ctx.prompt.ids.as_slice()), ("output", ctx.output)] {
                    if run.len() >= 2 && contains_run(&t.ids, run) {
                        flag(format!("token ids contain the plaintext {name}"));
                    }
                }
                if e.from == Endpoint::Client && t.ids == prefix(e.step) {
                    flag("first-shard input equals the plaintext ids".into());
                }
            }
            Ok(Frame::Activation(a)) => {
                if ctx.model.domain() != Domain::Plaintext {
                    continue;
                }
                let shard = a.shard_index as usize;
                if shard >= transcript.plan.n_shards {
                    continue;
                }
                let plain = ctx
                    .model
                    .embed(&TokenSeq::plaintext(prefix(e.step)))
                    .and_then(|h| ctx.model.run_layers(h, 0..transcript.plan.ranges[shard].1 + 1));
                if let Ok(h) = plain {
                    let same = h.data().len() == a.payload.len()
                        && h.data().iter().zip(&a.payload).all(|(x, y)| x.to_bits() == y.to_bits());
                    if same {
                        flag(format!("activations after shard {shard} equal the plaintext activations"));
                    }
                }
            }
            Err(err) => r.warnings.push(format!("frame {} undecodable: {err}", e.index)),
        }
    }
    if missing_bytes {
        r.warnings.push("some frames carry no raw bytes; only metadata was checked".into());
    }
    r.passed = r.offending_frames.is_empty();
    r
}
