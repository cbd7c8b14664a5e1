//! Search over candidate decryption maps: exhaustive enumeration, best of M
//! uniform draws, and 2-swap hill climbing with restarts.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{AttackConfig, LossBreakdown, LossModel};
use crate::error::{EeError, Result};
use crate::tensor::PermTable;

/// Largest vocabulary brute force will enumerate (9! = 362 880 candidates).
pub const BRUTE_FORCE_MAX_VOCAB: usize = 9;

/// Candidates drawn per batch in random sampling.
const SAMPLE_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BruteForce,
    RandomSampling,
    HillClimb,
}

/// An accepted improvement: `eval` is the 1-based evaluation count at which
/// `loss` was first reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub eval: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    pub method: Method,
    pub perm: PermTable,
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub evals_used: u64,
    pub trace: Vec<TracePoint>,
    /// Hill climbing only: the winning run ended after a full sweep of swaps
    /// without improvement rather than by running out of budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certified_local_optimum: Option<bool>,
    pub seed: u64,
    pub budget: u64,
}

impl AttackState {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("state serialises");
        std::fs::write(path, text).map_err(|e| EeError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| EeError::format(0, e.to_string()))
    }
}

/// Fraction of corpus tokens `perm` decrypts correctly, weighted by how often
/// each ciphertext id occurs.
pub fn recovery_rate(perm: &PermTable, truth: &PermTable, cfg: &AttackConfig) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in cfg.corpus.pairs() {
        for &t in p.input_ids.iter().chain(&p.output_ids) {
            total += 1;
            hit += usize::from(perm.apply(t as usize) == truth.apply(t as usize));
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Best candidate of one independent search segment.
struct Segment {
    perm: PermTable,
    breakdown: LossBreakdown,
    evals: u64,
    trace: Vec<TracePoint>,
    certified: Option<bool>,
}

/// Lower loss wins, then the lexicographically smaller map.
fn better(a: &Segment, b: &Segment) -> bool {
    match a.breakdown.total.partial_cmp(&b.breakdown.total) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.perm < b.perm,
        _ => false,
    }
}

/// Concatenate segments in order: keep the best, and rebuild one running
/// minimum trace with global evaluation counts.
fn merge(segments: Vec<Segment>, method: Method, cfg: &AttackConfig) -> AttackState {
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut offset = 0;
    let mut best: Option<Segment> = None;
    for seg in segments {
        for t in &seg.trace {
            if trace.last().is_none_or(|last| t.loss < last.loss) {
                trace.push(TracePoint {
                    eval: offset + t.eval,
                    loss: t.loss,
                });
            }
        }
        offset += seg.evals;
        if best.as_ref().is_none_or(|b| better(&seg, b)) {
            best = Some(seg);
        }
    }
    let best = best.expect("at least one segment");
    AttackState {
        method,
        loss: best.breakdown.total,
        perm: best.perm,
        breakdown: best.breakdown,
        evals_used: offset,
        trace,
        certified_local_optimum: best.certified,
        seed: cfg.seed,
        budget: cfg.budget,
    }
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Step `v` to its lexicographic successor; false after the last one.
fn next_permutation(v: &mut [u32]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Exact minimiser by enumerating every permutation in lexicographic order.
pub fn brute_force(cfg: &AttackConfig) -> Result<AttackState> {
    let n = cfg.vocab_size();
    if n > BRUTE_FORCE_MAX_VOCAB {
        return Err(EeError::Refused(format!(
            "brute force over |V| = {n} needs |V|! = {} evaluations; limit is |V| <= {BRUTE_FORCE_MAX_VOCAB}",
            (1..=n as u128).product::<u128>()
        )));
    }
    let total = factorial(n);
    if total > cfg.budget {
        return Err(EeError::Precondition(format!(
            "budget {} is below the {total} candidates of |V| = {n}",
            cfg.budget
        )));
    }
    let lm = LossModel::new(cfg)?;
    // one segment per leading element, each enumerated in order
    let segments = cfg.exec.map_range(n, |first| -> Result<Segment> {
        let mut map: Vec<u32> = std::iter::once(first as u32)
            .chain((0..n as u32).filter(|&x| x != first as u32))
            .collect();
        let mut best: Option<(PermTable, LossBreakdown)> = None;
        let mut trace = Vec::new();
        let mut evals = 0;
        loop {
            let perm = PermTable::new(map.clone()).expect("enumerated permutation");
            let b = lm.eval(&perm)?;
            evals += 1;
            if best.as_ref().is_none_or(|(_, bb)| b.total < bb.total) {
                trace.push(TracePoint { eval: evals, loss: b.total });
                best = Some((perm, b));
            }
            if !next_permutation(&mut map[1..]) {
                break;
            }
        }
        let (perm, breakdown) = best.expect("non-empty segment");
        Ok(Segment {
            perm,
            breakdown,
            evals,
            trace,
            certified: None,
        })
    });
    let segments = segments.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(merge(segments, Method::BruteForce, cfg))
}

/// Best of `m` uniform draws from the seeded stream; earlier draws win ties.
pub fn random_sampling(cfg: &AttackConfig, m: u64) -> Result<AttackState> {
    if m == 0 {
        return Err(EeError::Precondition("random sampling needs M >= 1".into()));
    }
    if m > cfg.budget {
        return Err(EeError::Precondition(format!(
            "M = {m} exceeds budget {}",
            cfg.budget
        )));
    }
    let lm = LossModel::new(cfg)?;
    let n = cfg.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(PermTable, LossBreakdown)> = None;
    let mut trace = Vec::new();
    let mut done = 0u64;
    while done < m {
        let batch = (m - done).min(SAMPLE_BATCH as u64) as usize;
        let draws: Vec<PermTable> = (0..batch).map(|_| PermTable::random(n, &mut rng)).collect();
        let losses = cfg.exec.map(&draws, |p| lm.eval(p));
        for (perm, b) in draws.into_iter().zip(losses) {
            let b = b?;
            done += 1;
            if best.as_ref().is_none_or(|(_, bb)| b.total < bb.total) {
                trace.push(TracePoint { eval: done, loss: b.total });
                best = Some((perm, b));
            }
        }
    }
    let (perm, breakdown) = best.expect("m >= 1");
    Ok(AttackState {
        method: Method::RandomSampling,
        loss: breakdown.total,
        perm,
        breakdown,
        evals_used: m,
        trace,
        certified_local_optimum: None,
        seed: cfg.seed,
        budget: cfg.budget,
    })
}

/// Seed of restart `k`, via SplitMix64 so neighbouring restarts decorrelate.
pub fn restart_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hill climbing from random starts. The budget is split evenly across
/// restarts, earlier restarts taking the remainder.
pub fn hill_climb(cfg: &AttackConfig, restarts: usize) -> Result<AttackState> {
    hill_climb_inner(cfg, restarts, None)
}

/// Single-run hill climbing from a given start.
pub fn hill_climb_from(cfg: &AttackConfig, start: &PermTable) -> Result<AttackState> {
    hill_climb_inner(cfg, 1, Some(start))
}

fn hill_climb_inner(cfg: &AttackConfig, restarts: usize, start: Option<&PermTable>) -> Result<AttackState> {
    if restarts == 0 {
        return Err(EeError::Precondition("hill climbing needs at least one restart".into()));
    }
    if cfg.budget < restarts as u64 {
        return Err(EeError::Precondition(format!(
            "budget {} cannot cover {restarts} restarts",
            cfg.budget
        )));
    }
    let lm = LossModel::new(cfg)?;
    let n = cfg.vocab_size();
    if let Some(s) = start {
        if s.len() != n {
            return Err(EeError::Shape(format!("start of size {} for vocabulary of {n}", s.len())));
        }
    }
    let per = cfg.budget / restarts as u64;
    let extra = cfg.budget % restarts as u64;
    let segments = cfg.exec.map_range(restarts, |k| -> Result<Segment> {
        let budget = per + u64::from((k as u64) < extra);
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, k as u64));
        let mut perm = match start {
            Some(s) => s.clone(),
            None => PermTable::random(n, &mut rng),
        };
        let mut current = lm.eval(&perm)?;
        let mut evals = 1u64;
        let mut trace = vec![TracePoint { eval: 1, loss: current.total }];
        let mut swaps: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        swaps.shuffle(&mut rng);
        // untried swaps since the last improvement are swaps[next..]
        let mut next = 0;
        let certified = loop {
            if next == swaps.len() {
                break true;
            }
            if evals >= budget {
                break false;
            }
            let (i, j) = swaps[next];
            next += 1;
            perm.swap(i, j);
            let b = lm.eval(&perm)?;
            evals += 1;
            if b.total < current.total {
                current = b;
                trace.push(TracePoint { eval: evals, loss: b.total });
                swaps.shuffle(&mut rng);
                next = 0;
            } else {
                perm.swap(i, j);
            }
        };
        Ok(Segment {
            perm,
            breakdown: current,
            evals,
            trace,
            certified: Some(certified),
        })
    });
    let segments = segments.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(merge(segments, Method::HillClimb, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_permutation_walks_lexicographically() {
        let mut v = vec![0u32, 1, 2];
        let mut seen = vec![v.clone()];
        while next_permutation(&mut v) {
            seen.push(v.clone());
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seen.last().unwrap(), &vec![2, 1, 0]);
    }

    #[test]
    fn restart_seeds_differ() {
        let s: Vec<u64> = (0..5).map(|k| restart_seed(42, k)).collect();
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
    }
}
