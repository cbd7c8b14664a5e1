//! Equivariant encryption keys and the offline model transform.
//!
//! A key is a bundle of permutations: one over the vocabulary, one over the
//! residual stream (shared by every layer, since residual additions tie all
//! interfaces together), one over each FFN hidden layer, and per attention
//! head one over the shared query/key axis and one over the value axis.
//!
//! Writing `Π` for the permutation matrix with `Π[map[i], i] = 1`, a linear
//! weight `W` (out × in) becomes `Π_out · W · Π_inᵀ`. Every normalisation and
//! activation in the model commutes with feature permutations, so the
//! transformed model computes `Π_r h` wherever the original computes `h`, and
//! its logits are the original logits with columns permuted by the
//! vocabulary table.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::split_prefixed;
use crate::error::{EeError, Result};
use crate::exec::Exec;
use crate::model::{Domain, LayerWeights, ModelBundle, ModelConfig, NormWeights, TokenSeq, Weights};
use crate::tensor::{PermTable, Tensor2};

pub const KEY_MAGIC: &[u8; 8] = b"EEKEY001";
pub const KEY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EEKey {
    pub version: u32,
    pub seed: u64,
    pub model_fingerprint: String,
    vocab_perm: PermTable,
    resid_perm: PermTable,
    ffn_perms: Vec<PermTable>,
    qk_perms: Vec<Vec<PermTable>>,
    v_perms: Vec<Vec<PermTable>>,
}

/// Dimensions a key is built for, derived from a [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TableSizes {
    vocab: usize,
    d_model: usize,
    d_ff: usize,
    d_head: usize,
    n_layers: usize,
    n_heads: usize,
}

impl TableSizes {
    fn total_entries(&self) -> usize {
        self.vocab
            + self.d_model
            + self.n_layers * self.d_ff
            + 2 * self.n_layers * self.n_heads * self.d_head
    }
}

/// Fresh key with every table drawn by seeded Fisher-Yates.
pub fn keygen(config: &ModelConfig, seed: u64) -> Result<EEKey> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_perm = PermTable::random(config.vocab_size, &mut rng);
    let resid_perm = PermTable::random(config.d_model, &mut rng);
    let ffn_perms = (0..config.n_layers)
        .map(|_| PermTable::random(config.d_ff, &mut rng))
        .collect();
    let mut per_head = || -> Vec<Vec<PermTable>> {
        (0..config.n_layers)
            .map(|_| {
                (0..config.n_heads)
                    .map(|_| PermTable::random(config.d_head, &mut rng))
                    .collect()
            })
            .collect()
    };
    let qk_perms = per_head();
    let v_perms = per_head();
    Ok(EEKey {
        version: KEY_VERSION,
        seed,
        model_fingerprint: config.fingerprint(),
        vocab_perm,
        resid_perm,
        ffn_perms,
        qk_perms,
        v_perms,
    })
}

impl EEKey {
    /// The reserved all-identity key. Encrypting with it changes nothing.
    pub fn identity(config: &ModelConfig) -> Result<EEKey> {
        config.validate()?;
        let per_head = || {
            vec![vec![PermTable::identity(config.d_head); config.n_heads]; config.n_layers]
        };
        Ok(EEKey {
            version: KEY_VERSION,
            seed: 0,
            model_fingerprint: config.fingerprint(),
            vocab_perm: PermTable::identity(config.vocab_size),
            resid_perm: PermTable::identity(config.d_model),
            ffn_perms: vec![PermTable::identity(config.d_ff); config.n_layers],
            qk_perms: per_head(),
            v_perms: per_head(),
        })
    }

    /// Replace the vocabulary table, keeping the feature tables.
    pub fn with_vocab_perm(mut self, perm: PermTable) -> Result<EEKey> {
        if perm.len() != self.vocab_perm.len() {
            return Err(EeError::Shape(format!(
                "vocabulary table of {} for vocabulary of {}",
                perm.len(),
                self.vocab_perm.len()
            )));
        }
        self.vocab_perm = perm;
        Ok(self)
    }

    pub fn vocab_perm(&self) -> &PermTable {
        &self.vocab_perm
    }

    pub fn resid_perm(&self) -> &PermTable {
        &self.resid_perm
    }

    pub fn ffn_perms(&self) -> &[PermTable] {
        &self.ffn_perms
    }

    pub fn qk_perms(&self) -> &[Vec<PermTable>] {
        &self.qk_perms
    }

    pub fn v_perms(&self) -> &[Vec<PermTable>] {
        &self.v_perms
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self.tables().all(PermTable::is_identity)
    }

    fn tables(&self) -> impl Iterator<Item = &PermTable> {
        std::iter::once(&self.vocab_perm)
            .chain(std::iter::once(&self.resid_perm))
            .chain(self.ffn_perms.iter())
            .chain(self.qk_perms.iter().flatten())
            .chain(self.v_perms.iter().flatten())
    }

    fn sizes(&self) -> TableSizes {
        TableSizes {
            vocab: self.vocab_perm.len(),
            d_model: self.resid_perm.len(),
            d_ff: self.ffn_perms.first().map_or(0, PermTable::len),
            d_head: self
                .qk_perms
                .first()
                .and_then(|h| h.first())
                .map_or(0, PermTable::len),
            n_layers: self.ffn_perms.len(),
            n_heads: self.qk_perms.first().map_or(0, Vec::len),
        }
    }

    pub fn check_pairing(&self, config: &ModelConfig) -> Result<()> {
        let fp = config.fingerprint();
        if fp != self.model_fingerprint {
            return Err(EeError::Pairing(format!(
                "key was generated for model {}, this model is {}",
                self.model_fingerprint, fp
            )));
        }
        Ok(())
    }

    pub fn encrypt_tokens(&self, s: &TokenSeq) -> Result<TokenSeq> {
        Domain::Plaintext.expect(s.domain)?;
        s.check_range(self.vocab_size())?;
        Ok(TokenSeq::ciphertext(self.vocab_perm.apply_ids(&s.ids)))
    }

    pub fn decrypt_tokens(&self, s: &TokenSeq) -> Result<TokenSeq> {
        Domain::Ciphertext.expect(s.domain)?;
        s.check_range(self.vocab_size())?;
        Ok(TokenSeq::plaintext(self.vocab_perm.inverse().apply_ids(&s.ids)))
    }

    /// Un-permute the vocabulary columns of ciphertext-domain logits.
    pub fn decrypt_logits(&self, logits: &Tensor2) -> Result<Tensor2> {
        if logits.cols() != self.vocab_size() {
            return Err(EeError::Shape(format!(
                "logits have {} columns, key vocabulary is {}",
                logits.cols(),
                self.vocab_size()
            )));
        }
        Ok(logits.permute_cols(&self.vocab_perm.inverse()))
    }

    /// The offline transform. Shapes, tensor set and layer order are unchanged.
    pub fn encrypt_model(&self, m: &ModelBundle) -> Result<ModelBundle> {
        Domain::Plaintext.expect(m.domain())?;
        self.check_pairing(m.config())?;
        let w = m.weights();
        let r = &self.resid_perm;
        let norm = |n: &NormWeights| NormWeights {
            gamma: n.gamma.permute_cols(r),
            beta: n.beta.as_ref().map(|b| b.permute_cols(r)),
        };
        let layers = w
            .layers
            .iter()
            .enumerate()
            .map(|(l, lw)| {
                let qk = PermTable::block_diagonal(&self.qk_perms[l]);
                let vv = PermTable::block_diagonal(&self.v_perms[l]);
                let f = &self.ffn_perms[l];
                LayerWeights {
                    attn_norm: norm(&lw.attn_norm),
                    wq: lw.wq.permuted(Some(&qk), Some(r)),
                    bq: lw.bq.permute_cols(&qk),
                    wk: lw.wk.permuted(Some(&qk), Some(r)),
                    bk: lw.bk.permute_cols(&qk),
                    wv: lw.wv.permuted(Some(&vv), Some(r)),
                    bv: lw.bv.permute_cols(&vv),
                    wo: lw.wo.permuted(Some(r), Some(&vv)),
                    bo: lw.bo.permute_cols(r),
                    ffn_norm: norm(&lw.ffn_norm),
                    w1: lw.w1.permuted(Some(f), Some(r)),
                    b1: lw.b1.permute_cols(f),
                    w2: lw.w2.permuted(Some(r), Some(f)),
                    b2: lw.b2.permute_cols(r),
                }
            })
            .collect();
        let weights = Weights {
            tok_emb: w.tok_emb.permuted(Some(&self.vocab_perm), Some(r)),
            pos_emb: w.pos_emb.permute_cols(r),
            layers,
            final_norm: norm(&w.final_norm),
            lm_head_w: w.lm_head_w.permuted(Some(&self.vocab_perm), Some(r)),
            lm_head_b: w.lm_head_b.permute_cols(&self.vocab_perm),
        };
        Ok(ModelBundle::new_unchecked(
            m.config().clone(),
            Domain::Ciphertext,
            weights,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub n_prompts: usize,
    pub max_abs_logit_diff: f64,
    pub token_match: bool,
    pub recoverability_ok: bool,
    pub tolerance: f64,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.token_match && self.recoverability_ok && self.max_abs_logit_diff <= self.tolerance
    }
}

/// Run the plaintext and encrypted pipelines side by side on every prompt.
pub fn verify_equivariance(
    m: &ModelBundle,
    key: &EEKey,
    prompts: &[TokenSeq],
    n_new: usize,
    tol: f64,
    exec: Exec,
) -> Result<EquivarianceReport> {
    let enc = key.encrypt_model(m)?;
    let per_prompt = exec.map(prompts, |p| -> Result<(f64, bool, bool)> {
        let c = key.encrypt_tokens(p)?;
        let recovered = key.decrypt_tokens(&c)? == *p;
        let vi = m.forward(p)?;
        let ee = key.decrypt_logits(&enc.forward(&c)?)?;
        let diff = vi.max_abs_diff(&ee);
        let vi_out = m.greedy_decode(p, n_new)?;
        let ee_out = key.decrypt_tokens(&enc.greedy_decode(&c, n_new)?)?;
        Ok((diff, vi_out == ee_out, recovered))
    });
    let mut report = EquivarianceReport {
        n_prompts: prompts.len(),
        max_abs_logit_diff: 0.0,
        token_match: true,
        recoverability_ok: true,
        tolerance: tol,
    };
    for r in per_prompt {
        let (diff, tokens_ok, recovered) = r?;
        report.max_abs_logit_diff = report.max_abs_logit_diff.max(diff);
        report.token_match &= tokens_ok;
        report.recoverability_ok &= recovered;
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyHeader {
    version: u32,
    seed: u64,
    model_fingerprint: String,
    sizes: TableSizes,
}

pub fn encode_key(key: &EEKey) -> Vec<u8> {
    let header = KeyHeader {
        version: key.version,
        seed: key.seed,
        model_fingerprint: key.model_fingerprint.clone(),
        sizes: key.sizes(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut tables = Vec::with_capacity(key.sizes().total_entries() * 4);
    for t in key.tables() {
        for &m in t.as_slice() {
            tables.extend_from_slice(&m.to_le_bytes());
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(KEY_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&tables);
    out.extend_from_slice(&crc32fast::hash(&tables).to_le_bytes());
    out
}

pub fn decode_key(bytes: &[u8]) -> Result<EEKey> {
    let (header_bytes, body_start) = split_prefixed(bytes, KEY_MAGIC)?;
    let header: KeyHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| EeError::format(12, format!("malformed key header: {e}")))?;
    if header.version != KEY_VERSION {
        return Err(EeError::Version {
            found: header.version,
            expected: KEY_VERSION,
        });
    }
    let s = header.sizes;
    let table_len = s.total_entries() * 4;
    let body = &bytes[body_start..];
    if body.len() != table_len + 4 {
        return Err(EeError::format(
            body_start + body.len().min(table_len),
            format!("expected {} table bytes plus CRC32, found {}", table_len, body.len()),
        ));
    }
    let (tables, crc) = body.split_at(table_len);
    if crc32fast::hash(tables) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(EeError::Integrity("key table CRC32 mismatch".into()));
    }
    let mut ids = tables
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()));
    let mut next = |n: usize| -> Result<PermTable> {
        PermTable::new(ids.by_ref().take(n).collect())
            .map_err(|e| EeError::Integrity(format!("invalid key table: {e}")))
    };
    let vocab_perm = next(s.vocab)?;
    let resid_perm = next(s.d_model)?;
    let ffn_perms = (0..s.n_layers).map(|_| next(s.d_ff)).collect::<Result<_>>()?;
    let mut per_head = || -> Result<Vec<Vec<PermTable>>> {
        (0..s.n_layers)
            .map(|_| (0..s.n_heads).map(|_| next(s.d_head)).collect())
            .collect()
    };
    let qk_perms = per_head()?;
    let v_perms = per_head()?;
    Ok(EEKey {
        version: header.version,
        seed: header.seed,
        model_fingerprint: header.model_fingerprint,
        vocab_perm,
        resid_perm,
        ffn_perms,
        qk_perms,
        v_perms,
    })
}

pub fn save_key(key: &EEKey, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_key(key)).map_err(|e| EeError::io(path, e))
}

pub fn load_key(path: impl AsRef<Path>) -> Result<EEKey> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EeError::io(path, e))?;
    decode_key(&bytes)
}
