use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EeError, Result};
use crate::model::{Domain, ModelBundle, TokenSeq};

/// One observed exchange: ciphertext prompt ids and the ciphertext ids the
/// server generated for it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub input_ids: Vec<u32>,
    pub output_ids: Vec<u32>,
}

/// Everything an eavesdropper on the encrypted endpoint has collected.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptCorpus {
    pairs: Vec<Pair>,
    vocab_size: usize,
}

impl TranscriptCorpus {
    pub fn new(pairs: Vec<Pair>, vocab_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(EeError::Config("corpus needs at least one pair".into()));
        }
        for p in &pairs {
            if p.input_ids.is_empty() {
                return Err(EeError::Config("corpus pair with empty input".into()));
            }
            if let Some(&id) = p
                .input_ids
                .iter()
                .chain(&p.output_ids)
                .find(|&&id| id as usize >= vocab_size)
            {
                return Err(EeError::Range { id, vocab_size });
            }
        }
        Ok(TranscriptCorpus { pairs, vocab_size })
    }

    /// Record greedy traffic of a ciphertext-domain model.
    pub fn from_encrypted_model(
        enc_model: &ModelBundle,
        prompts: &[TokenSeq],
        n_new: usize,
    ) -> Result<Self> {
        Domain::Ciphertext.expect(enc_model.domain())?;
        let pairs = prompts
            .iter()
            .map(|p| {
                let out = enc_model.greedy_decode(p, n_new)?;
                Ok(Pair {
                    input_ids: p.ids.clone(),
                    output_ids: out.ids[p.len()..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TranscriptCorpus::new(pairs, enc_model.config().vocab_size)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// JSON Lines, one `{"input_ids":[…],"output_ids":[…]}` per line.
    pub fn load_jsonl(path: impl AsRef<Path>, vocab_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| EeError::io(path, e))?;
        let mut pairs = Vec::new();
        let mut offset = 0usize;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| EeError::io(path, e))?;
            if !line.trim().is_empty() {
                let pair: Pair = serde_json::from_str(&line)
                    .map_err(|e| EeError::format(offset, format!("bad corpus line: {e}")))?;
                pairs.push(pair);
            }
            offset += line.len() + 1;
        }
        TranscriptCorpus::new(pairs, vocab_size)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p).expect("pair serialises");
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| EeError::io(path, e))
    }
}
