//! A small pre-norm decoder-only transformer used as the plaintext reference
//! and, after transformation, as the ciphertext-domain model.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EeError, Result};
use crate::tensor::{
    self, layer_norm, linear, rms_norm, softmax_in_place, ActKind, Tensor2, LAYER_NORM_EPS,
    RMS_NORM_EPS,
};

pub const INIT_STD: f64 = 0.02;

/// Which side of the key a value lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Plaintext,
    Ciphertext,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Plaintext => "plaintext",
            Domain::Ciphertext => "ciphertext",
        })
    }
}

impl Domain {
    pub fn expect(self, actual: Domain) -> Result<()> {
        if self == actual {
            Ok(())
        } else {
            Err(EeError::Domain {
                expected: self,
                actual,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(alias = "layer_norm")]
    LayerNorm,
    #[serde(alias = "rms_norm")]
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosKind {
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub act_kind: ActKind,
    #[serde(default = "default_pos_kind")]
    pub pos_kind: PosKind,
    /// Overrides the per-kind default epsilon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_eps: Option<f64>,
}

fn default_pos_kind() -> PosKind {
    PosKind::LearnedAbsolute
}

impl ModelConfig {
    /// LayerNorm + GeLU config with `d_head = d_model / n_heads`; call
    /// [`validate`](Self::validate) before use.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_head: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff,
            max_seq_len,
            norm_kind: NormKind::LayerNorm,
            act_kind: ActKind::Gelu,
            pos_kind: PosKind::LearnedAbsolute,
            norm_eps: None,
        }
    }

    pub fn with_norm(mut self, kind: NormKind) -> Self {
        self.norm_kind = kind;
        self
    }

    pub fn with_act(mut self, kind: ActKind) -> Self {
        self.act_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EeError::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_seq_len < 1 {
            return fail("max_seq_len must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if let Some(eps) = self.norm_eps {
            if !(eps >= 0.0 && eps.is_finite()) {
                return fail(format!("norm_eps must be finite and >= 0, got {eps}"));
            }
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.norm_eps.unwrap_or(match self.norm_kind {
            NormKind::LayerNorm => LAYER_NORM_EPS,
            NormKind::RmsNorm => RMS_NORM_EPS,
        })
    }

    /// Hex digest identifying this exact architecture.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&canonical)[..16])
    }
}

/// Token ids tagged with the domain they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub domain: Domain,
}

impl TokenSeq {
    pub fn plaintext(ids: impl Into<Vec<u32>>) -> Self {
        TokenSeq {
            ids: ids.into(),
            domain: Domain::Plaintext,
        }
    }

    pub fn ciphertext(ids: impl Into<Vec<u32>>) -> Self {
        TokenSeq {
            ids: ids.into(),
            domain: Domain::Ciphertext,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_range(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(EeError::Range { id, vocab_size }),
            None => Ok(()),
        }
    }
}

/// Gain (and, for LayerNorm, offset) of one normalisation site.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gamma: Tensor2,
    pub beta: Option<Tensor2>,
}

impl NormWeights {
    fn apply(&self, x: &Tensor2, kind: NormKind, eps: f64) -> Result<Tensor2> {
        match kind {
            NormKind::LayerNorm => {
                let beta = self
                    .beta
                    .as_ref()
                    .ok_or_else(|| EeError::Config("layer norm without offset".into()))?;
                layer_norm(x, self.gamma.data(), beta.data(), eps)
            }
            NormKind::RmsNorm => rms_norm(x, self.gamma.data(), eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormWeights,
    pub wq: Tensor2,
    pub bq: Tensor2,
    pub wk: Tensor2,
    pub bk: Tensor2,
    pub wv: Tensor2,
    pub bv: Tensor2,
    pub wo: Tensor2,
    pub bo: Tensor2,
    pub ffn_norm: NormWeights,
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

/// All parameters. Linear weights are stored (out_features × in_features).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Tensor2,
    pub pos_emb: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    pub lm_head_w: Tensor2,
    pub lm_head_b: Tensor2,
}

impl Weights {
    /// Every tensor with its container name and the shape the config implies,
    /// in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        fn norm<'a>(out: &mut Vec<(String, &'a Tensor2)>, prefix: String, n: &'a NormWeights) {
            out.push((format!("{prefix}.gamma"), &n.gamma));
            if let Some(b) = &n.beta {
                out.push((format!("{prefix}.beta"), b));
            }
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            norm(&mut out, format!("{p}.attn_norm"), &lw.attn_norm);
            for (name, t) in [
                ("attn.wq", &lw.wq),
                ("attn.bq", &lw.bq),
                ("attn.wk", &lw.wk),
                ("attn.bk", &lw.bk),
                ("attn.wv", &lw.wv),
                ("attn.bv", &lw.bv),
                ("attn.wo", &lw.wo),
                ("attn.bo", &lw.bo),
            ] {
                out.push((format!("{p}.{name}"), t));
            }
            norm(&mut out, format!("{p}.ffn_norm"), &lw.ffn_norm);
            for (name, t) in [
                ("ffn.w1", &lw.w1),
                ("ffn.b1", &lw.b1),
                ("ffn.w2", &lw.w2),
                ("ffn.b2", &lw.b2),
            ] {
                out.push((format!("{p}.{name}"), t));
            }
        }
        norm(&mut out, "final_norm".into(), &self.final_norm);
        out.push(("lm_head.w".into(), &self.lm_head_w));
        out.push(("lm_head.b".into(), &self.lm_head_b));
        out
    }

    /// Rebuild from named tensors, checking every shape against `config`.
    pub fn from_named(config: &ModelConfig, mut map: BTreeMap<String, Tensor2>) -> Result<Self> {
        let mut take = |name: String, shape: (usize, usize)| -> Result<Tensor2> {
            let t = map
                .remove(&name)
                .ok_or_else(|| EeError::Integrity(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(EeError::Integrity(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let has_beta = config.norm_kind == NormKind::LayerNorm;
        let norm = |take: &mut dyn FnMut(String, (usize, usize)) -> Result<Tensor2>,
                        prefix: &str|
         -> Result<NormWeights> {
            Ok(NormWeights {
                gamma: take(format!("{prefix}.gamma"), (1, d))?,
                beta: if has_beta {
                    Some(take(format!("{prefix}.beta"), (1, d))?)
                } else {
                    None
                },
            })
        };
        let tok_emb = take("tok_emb".into(), (v, d))?;
        let pos_emb = take("pos_emb".into(), (config.max_seq_len, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            layers.push(LayerWeights {
                attn_norm: norm(&mut take, &format!("{p}.attn_norm"))?,
                wq: take(format!("{p}.attn.wq"), (d, d))?,
                bq: take(format!("{p}.attn.bq"), (1, d))?,
                wk: take(format!("{p}.attn.wk"), (d, d))?,
                bk: take(format!("{p}.attn.bk"), (1, d))?,
                wv: take(format!("{p}.attn.wv"), (d, d))?,
                bv: take(format!("{p}.attn.bv"), (1, d))?,
                wo: take(format!("{p}.attn.wo"), (d, d))?,
                bo: take(format!("{p}.attn.bo"), (1, d))?,
                ffn_norm: norm(&mut take, &format!("{p}.ffn_norm"))?,
                w1: take(format!("{p}.ffn.w1"), (f, d))?,
                b1: take(format!("{p}.ffn.b1"), (1, f))?,
                w2: take(format!("{p}.ffn.w2"), (d, f))?,
                b2: take(format!("{p}.ffn.b2"), (1, d))?,
            });
        }
        let final_norm = norm(&mut take, "final_norm")?;
        let lm_head_w = take("lm_head.w".into(), (v, d))?;
        let lm_head_b = take("lm_head.b".into(), (1, v))?;
        if let Some(extra) = map.keys().next() {
            return Err(EeError::Integrity(format!("unexpected tensor {extra}")));
        }
        Ok(Weights {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head_w,
            lm_head_b,
        })
    }
}

/// Config, domain tag and weights. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    domain: Domain,
    weights: Weights,
}

impl ModelBundle {
    pub fn from_parts(config: ModelConfig, domain: Domain, weights: Weights) -> Result<Self> {
        config.validate()?;
        // round-trips through the shape checks
        let named: BTreeMap<String, Tensor2> = weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Weights::from_named(&config, named)?;
        Ok(ModelBundle {
            config,
            domain,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    pub(crate) fn new_unchecked(config: ModelConfig, domain: Domain, weights: Weights) -> Self {
        ModelBundle {
            config,
            domain,
            weights,
        }
    }

    fn check_tokens(&self, tokens: &TokenSeq) -> Result<()> {
        self.domain.expect(tokens.domain)?;
        if tokens.is_empty() {
            return Err(EeError::Shape("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(EeError::Shape(format!(
                "sequence of {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        tokens.check_range(self.config.vocab_size)
    }

    /// Token plus positional embedding, the residual stream entering layer 0.
    pub fn embed(&self, tokens: &TokenSeq) -> Result<Tensor2> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let w = &self.weights;
        let mut h = Tensor2::zeros(tokens.len(), d);
        for (t, &id) in tokens.ids.iter().enumerate() {
            let e = w.tok_emb.row(id as usize);
            let p = w.pos_emb.row(t);
            for ((o, a), b) in h.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        Ok(h)
    }

    /// Apply layers `range` to the residual stream `h`.
    pub fn run_layers(&self, mut h: Tensor2, range: std::ops::Range<usize>) -> Result<Tensor2> {
        if range.end > self.config.n_layers || h.cols() != self.config.d_model {
            return Err(EeError::Shape(format!(
                "layers {range:?} on {:?} activations for {} layers of width {}",
                h.shape(),
                self.config.n_layers,
                self.config.d_model
            )));
        }
        for l in range {
            h = self.block(&self.weights.layers[l], h)?;
        }
        Ok(h)
    }

    fn block(&self, lw: &LayerWeights, mut h: Tensor2) -> Result<Tensor2> {
        let cfg = &self.config;
        let eps = cfg.eps();
        let a = lw.attn_norm.apply(&h, cfg.norm_kind, eps)?;
        let q = linear(&a, &lw.wq, Some(&lw.bq))?;
        let k = linear(&a, &lw.wk, Some(&lw.bk))?;
        let v = linear(&a, &lw.wv, Some(&lw.bv))?;
        let ctx = causal_attention(&q, &k, &v, cfg.n_heads, cfg.d_head);
        h.add_assign(&linear(&ctx, &lw.wo, Some(&lw.bo))?);

        let b = lw.ffn_norm.apply(&h, cfg.norm_kind, eps)?;
        let f = tensor::activate(cfg.act_kind, &linear(&b, &lw.w1, Some(&lw.b1))?);
        h.add_assign(&linear(&f, &lw.w2, Some(&lw.b2))?);
        Ok(h)
    }

    /// Final norm and output projection for every row of `h`.
    pub fn head(&self, h: &Tensor2) -> Result<Tensor2> {
        let hn = self
            .weights
            .final_norm
            .apply(h, self.config.norm_kind, self.config.eps())?;
        linear(&hn, &self.weights.lm_head_w, Some(&self.weights.lm_head_b))
    }

    /// Per-position logits, `seq_len × vocab_size`.
    pub fn forward(&self, tokens: &TokenSeq) -> Result<Tensor2> {
        let h = self.embed(tokens)?;
        let h = self.run_layers(h, 0..self.config.n_layers)?;
        self.head(&h)
    }

    /// Logits of the last position only. Bit-identical to the last row of
    /// [`forward`](Self::forward); rows of the head never interact.
    pub fn last_logits(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        let h = self.embed(tokens)?;
        let h = self.run_layers(h, 0..self.config.n_layers)?;
        let last = h.select_rows(h.rows() - 1..h.rows());
        Ok(self.head(&last)?.into_data())
    }

    fn check_decode_len(&self, prompt: &TokenSeq, n_new: usize) -> Result<()> {
        let needed = (prompt.len() + n_new).saturating_sub(1).max(prompt.len());
        if needed > self.config.max_seq_len {
            return Err(EeError::Shape(format!(
                "prompt of {} plus {} new tokens exceeds max_seq_len {}",
                prompt.len(),
                n_new,
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Greedy decoding without a cache: each step re-runs the full prefix.
    /// Returns prompt followed by `n_new` generated ids.
    pub fn greedy_decode(&self, prompt: &TokenSeq, n_new: usize) -> Result<TokenSeq> {
        self.check_tokens(prompt)?;
        self.check_decode_len(prompt, n_new)?;
        let mut seq = prompt.clone();
        for _ in 0..n_new {
            let next = argmax(&self.last_logits(&seq)?) as u32;
            seq.ids.push(next);
        }
        Ok(seq)
    }

    /// True iff greedy decoding of `prompt` produces exactly `expected` as its
    /// continuation. Stops at the first mismatch.
    pub fn greedy_matches(&self, prompt: &TokenSeq, expected: &[u32]) -> Result<bool> {
        self.check_tokens(prompt)?;
        self.check_decode_len(prompt, expected.len())?;
        let mut seq = prompt.clone();
        for &want in expected {
            let next = argmax(&self.last_logits(&seq)?) as u32;
            if next != want {
                return Ok(false);
            }
            seq.ids.push(next);
        }
        Ok(true)
    }

    /// Softmax probability of the most likely next token after `prompt`.
    pub fn first_token_confidence(&self, prompt: &TokenSeq) -> Result<f64> {
        Ok(confidence(&self.last_logits(prompt)?))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max softmax probability of a logit row.
pub fn confidence(logits: &[f64]) -> f64 {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p.iter().copied().fold(0.0, f64::max)
}

fn causal_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, n_heads: usize, d_head: usize) -> Tensor2 {
    let n = q.rows();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = Tensor2::zeros(n, n_heads * d_head);
    let mut w = vec![0.0; n];
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = if j > i {
                    f64::NEG_INFINITY
                } else {
                    let kj = &k.row(j)[cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                };
            }
            softmax_in_place(&mut w);
            let dst = &mut out.row_mut(i)[cols.clone()];
            for (j, &wj) in w.iter().enumerate().take(i + 1) {
                let vj = &v.row(j)[cols.clone()];
                for (o, x) in dst.iter_mut().zip(vj) {
                    *o += wj * x;
                }
            }
        }
    }
    out
}

/// Seeded initialisation: N(0, 0.02) for matrices, biases and embeddings;
/// norm gains 1 and offsets 0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    init_model_with_std(config, seed, INIT_STD)
}

/// As [`init_model`] with a chosen standard deviation. Large values give a
/// peaky model whose greedy output depends strongly on the prompt.
pub fn init_model_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<ModelBundle> {
    config.validate()?;
    if !(std.is_finite() && std > 0.0) {
        return Err(EeError::Config(format!("init std must be positive, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Tensor2::new(rows, cols, data).expect("shape")
    };
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let norm = || NormWeights {
        gamma: Tensor2::row_vector(vec![1.0; d]),
        beta: (config.norm_kind == NormKind::LayerNorm).then(|| Tensor2::row_vector(vec![0.0; d])),
    };
    let tok_emb = draw(v, d);
    let pos_emb = draw(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: norm(),
            wq: draw(d, d),
            bq: draw(1, d),
            wk: draw(d, d),
            bk: draw(1, d),
            wv: draw(d, d),
            bv: draw(1, d),
            wo: draw(d, d),
            bo: draw(1, d),
            ffn_norm: norm(),
            w1: draw(f, d),
            b1: draw(1, f),
            w2: draw(d, f),
            b2: draw(1, d),
        })
        .collect();
    let final_norm = norm();
    let lm_head_w = draw(v, d);
    let lm_head_b = draw(1, v);
    Ok(ModelBundle::new_unchecked(
        config.clone(),
        Domain::Plaintext,
        Weights {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head_w,
            lm_head_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig::new(16, 8, 2, 2, 16, 12)
    }

    fn crc(t: &Tensor2) -> u32 {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        crc32fast::hash(&bytes)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&small(), 42).unwrap();
        let b = init_model(&small(), 42).unwrap();
        assert_eq!(a, b);
        let c = init_model(&small(), 1).unwrap();
        let d = init_model(&small(), 2).unwrap();
        assert_ne!(crc(&c.weights().tok_emb), crc(&d.weights().tok_emb));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig::new(16, 32, 1, 3, 16, 8);
        assert!(matches!(init_model(&bad, 0), Err(EeError::Config(_))));
        assert!(ModelConfig::new(1, 8, 1, 2, 8, 8).validate().is_err());
        assert!(ModelConfig::new(4, 8, 1, 2, 8, 0).validate().is_err());
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let m = init_model(&small(), 7).unwrap();
        let logits = m.forward(&TokenSeq::plaintext(vec![1, 2, 3])).unwrap();
        assert_eq!(logits.shape(), (3, 16));
        assert!(logits.is_finite());
        let last = m.last_logits(&TokenSeq::plaintext(vec![1, 2, 3])).unwrap();
        assert_eq!(last.as_slice(), logits.row(2));
    }

    #[test]
    fn forward_guards() {
        let m = init_model(&small(), 7).unwrap();
        assert!(matches!(
            m.forward(&TokenSeq::ciphertext(vec![1])),
            Err(EeError::Domain { .. })
        ));
        assert!(matches!(
            m.forward(&TokenSeq::plaintext(vec![0; 13])),
            Err(EeError::Shape(_))
        ));
        assert!(matches!(
            m.forward(&TokenSeq::plaintext(vec![16])),
            Err(EeError::Range { .. })
        ));
        assert!(m.greedy_decode(&TokenSeq::plaintext(vec![0; 10]), 4).is_err());
        // 10 + 3 new needs forwards up to length 12
        assert!(m.greedy_decode(&TokenSeq::plaintext(vec![0; 10]), 3).is_ok());
    }

    #[test]
    fn zero_head_gives_uniform_confidence() {
        let m = init_model(&small(), 7).unwrap();
        let mut w = m.weights().clone();
        w.lm_head_w = Tensor2::zeros(16, 8);
        w.lm_head_b = Tensor2::zeros(1, 16);
        let z = ModelBundle::from_parts(small(), Domain::Plaintext, w).unwrap();
        let logits = z.forward(&TokenSeq::plaintext(vec![3, 4])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let c = z.first_token_confidence(&TokenSeq::plaintext(vec![3, 4])).unwrap();
        assert!((c - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn greedy_decode_basics() {
        let m = init_model(&small(), 3).unwrap();
        let p = TokenSeq::plaintext(vec![5, 1]);
        assert_eq!(m.greedy_decode(&p, 0).unwrap(), p);
        let a = m.greedy_decode(&p, 6).unwrap();
        let b = m.greedy_decode(&p, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.ids.iter().all(|&i| i < 16));
        assert_eq!(a.domain, Domain::Plaintext);
        assert!(m.greedy_matches(&p, &a.ids[2..]).unwrap());
        let mut wrong = a.ids[2..].to_vec();
        wrong[0] = (wrong[0] + 1) % 16;
        assert!(!m.greedy_matches(&p, &wrong).unwrap());
    }

    #[test]
    fn rmsnorm_silu_variant_runs() {
        let cfg = small().with_norm(NormKind::RmsNorm).with_act(ActKind::Silu);
        let m = init_model(&cfg, 5).unwrap();
        assert!(m.weights().final_norm.beta.is_none());
        assert!(m.forward(&TokenSeq::plaintext(vec![0, 1, 2])).unwrap().is_finite());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn causality(prefix in proptest::collection::vec(0u32..16, 1..6),
                     tail_a in proptest::collection::vec(0u32..16, 1..6),
                     tail_b in proptest::collection::vec(0u32..16, 1..6)) {
            let m = init_model(&small(), 11).unwrap();
            let a: Vec<u32> = prefix.iter().chain(&tail_a).copied().collect();
            let b: Vec<u32> = prefix.iter().chain(&tail_b).copied().collect();
            let la = m.forward(&TokenSeq::plaintext(a)).unwrap();
            let lb = m.forward(&TokenSeq::plaintext(b)).unwrap();
            for t in 0..prefix.len() {
                prop_assert_eq!(la.row(t), lb.row(t));
            }
        }
    }
}
