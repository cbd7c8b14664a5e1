//! The attack objective over candidate decryption maps.
//!
//! A candidate `perm` maps ciphertext ids to guessed plaintext ids. Its loss
//! is a weighted sum of
//!
//! * unigram and bigram L1 distances between the decrypted corpus and
//!   reference language statistics,
//! * a consistency penalty: the fraction of pairs where running the known
//!   plaintext model on the decrypted prompt does not reproduce the decrypted
//!   response,
//! * an optional judge term, `(10 - rating) / 10` averaged over pairs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::TranscriptCorpus;
use super::judge::{Judge, MAX_RATING};
use crate::error::{EeError, Result};
use crate::exec::Exec;
use crate::model::{argmax, Domain, ModelBundle, TokenSeq};
use crate::tensor::PermTable;

const PROB_TOL: f64 = 1e-9;

/// Plaintext-domain greedy model `f` consulted by the consistency penalty.
pub trait Oracle: Send + Sync {
    /// Does greedy decoding of `input` continue with exactly `output`?
    fn matches(&self, input: &[u32], output: &[u32]) -> Result<bool>;
}

const CACHE_LIMIT: usize = 1 << 18;

/// Oracle backed by a plaintext model, memoising each prompt's greedy
/// continuation as far as it has been decoded.
pub struct ModelOracle {
    model: ModelBundle,
    cache: Mutex<HashMap<Vec<u32>, Vec<u32>>>,
}

impl ModelOracle {
    pub fn new(model: ModelBundle) -> Result<Self> {
        Domain::Plaintext.expect(model.domain())?;
        Ok(ModelOracle {
            model,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }
}

impl Oracle for ModelOracle {
    fn matches(&self, input: &[u32], output: &[u32]) -> Result<bool> {
        let known = self.cache.lock().get(input).cloned().unwrap_or_default();
        let shared = known.len().min(output.len());
        if known[..shared] != output[..shared] {
            return Ok(false);
        }
        if known.len() >= output.len() {
            return Ok(true);
        }
        let mut seq = TokenSeq::plaintext(input.to_vec());
        seq.ids.extend_from_slice(&known);
        let mut generated = known;
        let mut ok = true;
        for &want in &output[generated.len()..] {
            if seq.len() > self.model.config().max_seq_len {
                return Err(EeError::Shape(format!(
                    "pair needs {} positions, model has {}",
                    seq.len(),
                    self.model.config().max_seq_len
                )));
            }
            let next = argmax(&self.model.last_logits(&seq)?) as u32;
            generated.push(next);
            seq.ids.push(next);
            if next != want {
                ok = false;
                break;
            }
        }
        let mut cache = self.cache.lock();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        let slot = cache.entry(input.to_vec()).or_default();
        if generated.len() > slot.len() {
            *slot = generated;
        }
        Ok(ok)
    }
}

/// Sparse conditional next-token distributions, `row[prev][next]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BigramTable {
    pub rows: BTreeMap<u32, BTreeMap<u32, f64>>,
}

impl BigramTable {
    /// Conditional distributions estimated from plaintext sequences.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut counts: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
        for s in seqs {
            for w in s.windows(2) {
                *counts.entry(w[0]).or_default().entry(w[1]).or_default() += 1.0;
            }
        }
        for row in counts.values_mut() {
            let total: f64 = row.values().sum();
            row.values_mut().for_each(|v| *v /= total);
        }
        BigramTable { rows: counts }
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        for (a, row) in &self.rows {
            if *a as usize >= vocab || row.keys().any(|&b| b as usize >= vocab) {
                return Err(EeError::Config("bigram table id out of vocabulary".into()));
            }
            let total: f64 = row.values().sum();
            if (total - 1.0).abs() > PROB_TOL || row.values().any(|&p| p < 0.0) {
                return Err(EeError::Config(format!(
                    "bigram row {a} sums to {total}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Unigram distribution of plaintext sequences over `vocab` ids.
pub fn unigram_from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [u32]>, vocab: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab];
    let mut n = 0.0;
    for s in seqs {
        for &t in s {
            counts[t as usize] += 1.0;
            n += 1.0;
        }
    }
    if n > 0.0 {
        counts.iter_mut().for_each(|c| *c /= n);
    }
    counts
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub unigram: f64,
    pub bigram: f64,
    pub consistency: f64,
    #[serde(default)]
    pub judge: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unigram: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bigram: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
}

pub struct AttackConfig {
    pub corpus: TranscriptCorpus,
    pub ref_unigram: Option<Vec<f64>>,
    pub ref_bigram: Option<BigramTable>,
    pub oracle: Option<Arc<dyn Oracle>>,
    pub judge: Option<Arc<dyn Judge>>,
    /// Number of pairs the judge sees; `None` rates every pair.
    pub judge_sample: Option<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Maximum number of loss evaluations.
    pub budget: u64,
    pub exec: Exec,
}

impl AttackConfig {
    /// Config with no loss terms enabled yet; set weights and references next.
    pub fn new(corpus: TranscriptCorpus) -> Self {
        AttackConfig {
            corpus,
            ref_unigram: None,
            ref_bigram: None,
            oracle: None,
            judge: None,
            judge_sample: None,
            weights: LossWeights::default(),
            seed: 0,
            budget: 1_000_000,
            exec: Exec::default(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.corpus.vocab_size()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let all = [w.unigram, w.bigram, w.consistency, w.judge];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(EeError::Config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        if all.iter().all(|&x| x == 0.0) {
            return Err(EeError::Config("no loss component enabled".into()));
        }
        let v = self.vocab_size();
        if let Some(u) = &self.ref_unigram {
            let total: f64 = u.iter().sum();
            if u.len() != v || (total - 1.0).abs() > PROB_TOL || u.iter().any(|&p| p < 0.0) {
                return Err(EeError::Config(format!(
                    "reference unigram must be a distribution over {v} ids (len {}, sum {total})",
                    u.len()
                )));
            }
        }
        if let Some(b) = &self.ref_bigram {
            b.validate(v)?;
        }
        let missing = |what: &str| Err(EeError::Config(format!("{what} weight set without {what} reference")));
        if w.unigram > 0.0 && self.ref_unigram.is_none() {
            return missing("unigram");
        }
        if w.bigram > 0.0 && self.ref_bigram.is_none() {
            return missing("bigram");
        }
        if w.consistency > 0.0 && self.oracle.is_none() {
            return Err(EeError::Config("consistency weight set without an oracle model".into()));
        }
        if w.judge > 0.0 && self.judge.is_none() {
            return Err(EeError::Config("judge weight set without a judge".into()));
        }
        Ok(())
    }
}

/// Corpus statistics in the ciphertext domain, computed once per attack.
pub(crate) struct LossModel<'a> {
    cfg: &'a AttackConfig,
    uni_counts: Vec<(u32, f64)>,
    uni_total: f64,
    bi_counts: BTreeMap<u32, Vec<(u32, f64)>>,
    bi_total: f64,
    judge_pairs: Vec<usize>,
}

impl<'a> LossModel<'a> {
    pub(crate) fn new(cfg: &'a AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.vocab_size();
        let mut uni = vec![0.0; v];
        let mut bi: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
        for p in cfg.corpus.pairs() {
            let seq: Vec<u32> = p.input_ids.iter().chain(&p.output_ids).copied().collect();
            for &t in &seq {
                uni[t as usize] += 1.0;
            }
            for w in seq.windows(2) {
                *bi.entry(w[0]).or_default().entry(w[1]).or_default() += 1.0;
            }
        }
        let uni_total = uni.iter().sum();
        let uni_counts = uni
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0.0)
            .map(|(t, c)| (t as u32, c))
            .collect();
        let bi_total = bi.values().flat_map(|r| r.values()).sum();
        let bi_counts = bi
            .into_iter()
            .map(|(a, row)| (a, row.into_iter().collect()))
            .collect();
        let mut judge_pairs: Vec<usize> = (0..cfg.corpus.pairs().len()).collect();
        if let Some(k) = cfg.judge_sample {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006a_7564_6765);
            judge_pairs.shuffle(&mut rng);
            judge_pairs.truncate(k.max(1));
            judge_pairs.sort_unstable();
        }
        Ok(LossModel {
            cfg,
            uni_counts,
            uni_total,
            bi_counts,
            bi_total,
            judge_pairs,
        })
    }

    fn check(&self, perm: &PermTable) -> Result<()> {
        if perm.len() != self.cfg.vocab_size() {
            return Err(EeError::Shape(format!(
                "candidate of size {} for vocabulary of {}",
                perm.len(),
                self.cfg.vocab_size()
            )));
        }
        Ok(())
    }

    pub(crate) fn unigram(&self, perm: &PermTable) -> Result<f64> {
        let reference = self
            .cfg
            .ref_unigram
            .as_ref()
            .ok_or_else(|| EeError::Config("no reference unigram".into()))?;
        let mut l1 = 0.0;
        let mut covered = 0.0;
        for &(c, n) in &self.uni_counts {
            let r = reference[perm.apply(c as usize)];
            l1 += (n / self.uni_total - r).abs();
            covered += r;
        }
        // reference mass on ids the decrypted corpus never produces
        Ok(l1 + (1.0 - covered).max(0.0))
    }

    pub(crate) fn bigram(&self, perm: &PermTable) -> Result<f64> {
        let reference = self
            .cfg
            .ref_bigram
            .as_ref()
            .ok_or_else(|| EeError::Config("no reference bigram table".into()))?;
        if self.bi_total == 0.0 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for (&a, row) in &self.bi_counts {
            let ctx: f64 = row.iter().map(|(_, n)| n).sum();
            let dist = match reference.rows.get(&(perm.apply(a as usize) as u32)) {
                None => 2.0,
                Some(r) => {
                    let mut l1 = 0.0;
                    let mut covered = 0.0;
                    for &(b, n) in row {
                        let rb = r.get(&(perm.apply(b as usize) as u32)).copied().unwrap_or(0.0);
                        l1 += (n / ctx - rb).abs();
                        covered += rb;
                    }
                    l1 + (1.0 - covered).max(0.0)
                }
            };
            acc += ctx / self.bi_total * dist;
        }
        Ok(acc)
    }

    pub(crate) fn consistency(&self, perm: &PermTable) -> Result<f64> {
        let oracle = self
            .cfg
            .oracle
            .as_ref()
            .ok_or_else(|| EeError::Config("no oracle model".into()))?;
        let pairs = self.cfg.corpus.pairs();
        let mut bad = 0usize;
        for p in pairs {
            let input = perm.apply_ids(&p.input_ids);
            let output = perm.apply_ids(&p.output_ids);
            if !oracle.matches(&input, &output)? {
                bad += 1;
            }
        }
        Ok(bad as f64 / pairs.len() as f64)
    }

    pub(crate) fn judge(&self, perm: &PermTable) -> Result<f64> {
        let judge = self
            .cfg
            .judge
            .as_ref()
            .ok_or_else(|| EeError::Config("no judge".into()))?;
        let pairs = self.cfg.corpus.pairs();
        let mut acc = 0.0;
        for &i in &self.judge_pairs {
            let p = &pairs[i];
            let r = judge.rate(&perm.apply_ids(&p.input_ids), &perm.apply_ids(&p.output_ids))?;
            acc += (MAX_RATING - r.min(MAX_RATING)) as f64 / MAX_RATING as f64;
        }
        Ok(acc / self.judge_pairs.len() as f64)
    }

    pub(crate) fn eval(&self, perm: &PermTable) -> Result<LossBreakdown> {
        self.check(perm)?;
        let w = self.cfg.weights;
        let mut b = LossBreakdown::default();
        if w.unigram > 0.0 {
            let v = self.unigram(perm)?;
            b.unigram = Some(v);
            b.total += w.unigram * v;
        }
        if w.bigram > 0.0 {
            let v = self.bigram(perm)?;
            b.bigram = Some(v);
            b.total += w.bigram * v;
        }
        if w.consistency > 0.0 {
            let v = self.consistency(perm)?;
            b.consistency = Some(v);
            b.total += w.consistency * v;
        }
        if w.judge > 0.0 {
            let v = self.judge(perm)?;
            b.judge = Some(v);
            b.total += w.judge * v;
        }
        Ok(b)
    }
}

/// Weighted objective for one candidate.
pub fn total_loss(perm: &PermTable, cfg: &AttackConfig) -> Result<LossBreakdown> {
    LossModel::new(cfg)?.eval(perm)
}

fn with_single<T>(
    corpus: &TranscriptCorpus,
    setup: impl FnOnce(&mut AttackConfig),
    f: impl FnOnce(&LossModel, ) -> Result<T>,
) -> Result<T> {
    let mut cfg = AttackConfig::new(corpus.clone());
    cfg.exec = Exec::Sequential;
    setup(&mut cfg);
    let lm = LossModel::new(&cfg)?;
    f(&lm)
}

/// L1 distance between the decrypted unigram distribution and `reference`.
pub fn unigram_loss(perm: &PermTable, corpus: &TranscriptCorpus, reference: Option<&[f64]>) -> Result<f64> {
    let reference = reference.ok_or_else(|| EeError::Config("no reference unigram".into()))?;
    with_single(
        corpus,
        |c| {
            c.ref_unigram = Some(reference.to_vec());
            c.weights.unigram = 1.0;
        },
        |lm| {
            lm.check(perm)?;
            lm.unigram(perm)
        },
    )
}

/// Context-weighted L1 distance between decrypted next-token distributions
/// and `reference`. Contexts missing from the reference count as distance 2.
pub fn bigram_loss(perm: &PermTable, corpus: &TranscriptCorpus, reference: Option<&BigramTable>) -> Result<f64> {
    let reference = reference.ok_or_else(|| EeError::Config("no reference bigram table".into()))?;
    with_single(
        corpus,
        |c| {
            c.ref_bigram = Some(reference.clone());
            c.weights.bigram = 1.0;
        },
        |lm| {
            lm.check(perm)?;
            lm.bigram(perm)
        },
    )
}

/// Fraction of pairs whose decrypted response is not what the oracle
/// generates for the decrypted prompt.
pub fn consistency_penalty(
    perm: &PermTable,
    corpus: &TranscriptCorpus,
    oracle: Option<Arc<dyn Oracle>>,
) -> Result<f64> {
    let oracle = oracle.ok_or_else(|| EeError::Config("no oracle model".into()))?;
    with_single(
        corpus,
        |c| {
            c.oracle = Some(oracle);
            c.weights.consistency = 1.0;
        },
        |lm| {
            lm.check(perm)?;
            lm.consistency(perm)
        },
    )
}

/// Mean `(10 - rating) / 10` over the judged pairs.
pub fn judge_loss(perm: &PermTable, corpus: &TranscriptCorpus, judge: Arc<dyn Judge>) -> Result<f64> {
    with_single(
        corpus,
        |c| {
            c.judge = Some(judge);
            c.weights.judge = 1.0;
        },
        |lm| {
            lm.check(perm)?;
            lm.judge(perm)
        },
    )
}
