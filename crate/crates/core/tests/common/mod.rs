#![allow(dead_code)]

use std::collections::BTreeMap;

use eecrypt::attack::{Pair, TranscriptCorpus};
use eecrypt::{init_model_with_std, keygen, EEKey, ModelBundle, ModelConfig, PermTable, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A toy victim: plaintext model, key, and the ciphertext corpus an observer
/// would collect from the encrypted endpoint.
pub struct Victim {
    pub model: ModelBundle,
    pub key: EEKey,
    pub corpus: TranscriptCorpus,
    pub plain_prompts: Vec<TokenSeq>,
}

impl Victim {
    /// Map from ciphertext ids back to plaintext ids.
    pub fn truth(&self) -> PermTable {
        self.key.vocab_perm().inverse()
    }
}

pub fn attack_config(vocab: usize, layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig::new(vocab, d_model, layers, 2, 2 * d_model, 16)
}

pub fn random_prompts(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenSeq::plaintext((0..len).map(|_| rng.random_range(0..vocab as u32)).collect::<Vec<_>>()))
        .collect()
}

pub fn victim(cfg: &ModelConfig, model_seed: u64, key_seed: u64, n_pairs: usize, in_len: usize, n_new: usize) -> Victim {
    let model = init_model_with_std(cfg, model_seed, 1.0).unwrap();
    let key = keygen(cfg, key_seed).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let plain_prompts = random_prompts(cfg.vocab_size, n_pairs, in_len, model_seed ^ key_seed ^ 0x5eed);
    let enc_prompts: Vec<TokenSeq> = plain_prompts.iter().map(|p| key.encrypt_tokens(p).unwrap()).collect();
    let corpus = TranscriptCorpus::from_encrypted_model(&enc, &enc_prompts, n_new).unwrap();
    Victim {
        model,
        key,
        corpus,
        plain_prompts,
    }
}

pub fn all_perms(n: usize) -> Vec<PermTable> {
    fn rec(prefix: &mut Vec<u32>, used: &mut Vec<bool>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i as u32);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out.into_iter().map(|m| PermTable::new(m).unwrap()).collect()
}

fn decrypt(perm: &PermTable, ids: &[u32]) -> Vec<u32> {
    ids.iter().map(|&t| perm.as_slice()[t as usize]).collect()
}

fn joined(perm: &PermTable, p: &Pair) -> Vec<u32> {
    decrypt(perm, &p.input_ids)
        .into_iter()
        .chain(decrypt(perm, &p.output_ids))
        .collect()
}

/// Full-vocabulary L1 between the decrypted token histogram and `reference`.
pub fn naive_unigram(perm: &PermTable, corpus: &TranscriptCorpus, reference: &[f64]) -> f64 {
    let mut hist = vec![0.0; reference.len()];
    let mut n = 0.0;
    for p in corpus.pairs() {
        for t in joined(perm, p) {
            hist[t as usize] += 1.0;
            n += 1.0;
        }
    }
    hist.iter().zip(reference).map(|(h, r)| (h / n - r).abs()).sum()
}

/// Context-weighted L1 over decrypted next-token distributions; a context
/// the reference never saw costs 2.
pub fn naive_bigram(perm: &PermTable, corpus: &TranscriptCorpus, reference: &BTreeMap<u32, BTreeMap<u32, f64>>) -> f64 {
    let v = corpus.vocab_size();
    let mut counts = vec![vec![0.0; v]; v];
    let mut total = 0.0;
    for p in corpus.pairs() {
        let s = joined(perm, p);
        for w in s.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (a, row) in counts.iter().enumerate() {
        let ctx: f64 = row.iter().sum();
        if ctx == 0.0 {
            continue;
        }
        let d = match reference.get(&(a as u32)) {
            None => 2.0,
            Some(r) => (0..v)
                .map(|b| (row[b] / ctx - r.get(&(b as u32)).copied().unwrap_or(0.0)).abs())
                .sum(),
        };
        acc += ctx / total * d;
    }
    acc
}

/// Fraction of pairs whose decrypted output is not what the plaintext model
/// greedily produces for the decrypted input.
pub fn naive_consistency(perm: &PermTable, corpus: &TranscriptCorpus, model: &ModelBundle) -> f64 {
    let bad = corpus
        .pairs()
        .iter()
        .filter(|p| {
            let input = TokenSeq::plaintext(decrypt(perm, &p.input_ids));
            let out = model.greedy_decode(&input, p.output_ids.len()).unwrap();
            out.ids[input.len()..] != decrypt(perm, &p.output_ids)[..]
        })
        .count();
    bad as f64 / corpus.pairs().len() as f64
}
