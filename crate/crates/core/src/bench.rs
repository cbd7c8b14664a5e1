//! Fidelity and latency comparison between vanilla inference (VI) and
//! inference through an encrypted model (EE).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ee::EEKey;
use crate::error::{EeError, Result};
use crate::exec::Exec;
use crate::model::{confidence, Domain, ModelBundle, TokenSeq};

/// `n` plaintext prompts of `len` ids drawn uniformly from a seeded stream.
pub fn random_prompts(vocab_size: usize, n: usize, len: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenSeq::plaintext((0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n: usize,
    pub scores_vi: Vec<f64>,
    pub scores_ee: Vec<f64>,
    pub fidelity: f64,
    pub skipped_zero_pairs: usize,
}

/// `1 - mean(|ee - vi| / max(ee, vi))`. Pairs where both scores are zero add
/// nothing to the sum; their count is returned alongside.
pub fn fidelity(scores_vi: &[f64], scores_ee: &[f64]) -> Result<(f64, usize)> {
    if scores_vi.len() != scores_ee.len() {
        return Err(EeError::Shape(format!(
            "{} VI scores against {} EE scores",
            scores_vi.len(),
            scores_ee.len()
        )));
    }
    if scores_vi.is_empty() {
        return Err(EeError::Precondition("fidelity of an empty score list".into()));
    }
    if let Some(s) = scores_vi
        .iter()
        .chain(scores_ee)
        .find(|s| !(0.0..=1.0).contains(*s))
    {
        return Err(EeError::Precondition(format!("score {s} outside [0, 1]")));
    }
    let mut sum = 0.0;
    let mut skipped = 0;
    for (&vi, &ee) in scores_vi.iter().zip(scores_ee) {
        let denom = vi.max(ee);
        if denom == 0.0 {
            skipped += 1;
        } else {
            sum += (ee - vi).abs() / denom;
        }
    }
    Ok((1.0 - sum / scores_vi.len() as f64, skipped))
}

impl FidelityReport {
    pub fn from_scores(scores_vi: Vec<f64>, scores_ee: Vec<f64>) -> Result<Self> {
        let (fidelity, skipped_zero_pairs) = fidelity(&scores_vi, &scores_ee)?;
        Ok(FidelityReport {
            n: scores_vi.len(),
            scores_vi,
            scores_ee,
            fidelity,
            skipped_zero_pairs,
        })
    }
}

fn check_arms(model_vi: &ModelBundle, model_ee: &ModelBundle, key: &EEKey) -> Result<()> {
    Domain::Plaintext.expect(model_vi.domain())?;
    if model_vi.config() != model_ee.config() {
        return Err(EeError::Pairing("VI and EE models have different configs".into()));
    }
    key.check_pairing(model_vi.config())
}

/// First-token confidence per prompt from both pipelines.
pub fn run_fidelity_suite(
    model_vi: &ModelBundle,
    model_ee: &ModelBundle,
    key: &EEKey,
    prompts: &[TokenSeq],
    exec: Exec,
) -> Result<FidelityReport> {
    check_arms(model_vi, model_ee, key)?;
    Domain::Ciphertext.expect(model_ee.domain())?;
    let scores = exec.map(prompts, |p| -> Result<(f64, f64)> {
        let vi = model_vi.first_token_confidence(p)?;
        let enc = key.encrypt_tokens(p)?;
        let logits = model_ee.last_logits(&enc)?;
        let plain = key.decrypt_logits(&crate::Tensor2::row_vector(logits))?;
        Ok((vi, confidence(plain.data())))
    });
    let (vi, ee): (Vec<f64>, Vec<f64>) = scores.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    FidelityReport::from_scores(vi, ee)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub vi_seconds: f64,
    pub ee_seconds: f64,
    pub delta_t_pct: f64,
    pub delta_t_std_pct: f64,
    pub repeats: usize,
    pub batch_size: usize,
    pub n_prompts: usize,
    pub n_new: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Wall-clock comparison of the two pipelines on one thread.
///
/// The VI arm decodes each prompt. The EE arm encrypts the prompt, decodes
/// with `model_ee` and decrypts the output; when `model_ee` is itself a
/// plaintext bundle (a control run) the key is still applied but the model
/// receives the plaintext ids. Arms alternate order between repeats and one
/// untimed warm-up of each precedes measurement.
pub fn measure_latency(
    model_vi: &ModelBundle,
    model_ee: &ModelBundle,
    key: &EEKey,
    prompts: &[TokenSeq],
    n_new: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if repeats < 3 {
        return Err(EeError::Precondition(format!("need at least 3 repeats, got {repeats}")));
    }
    check_arms(model_vi, model_ee, key)?;
    let run_vi = || -> Result<f64> {
        let t = Instant::now();
        for p in prompts {
            std::hint::black_box(model_vi.greedy_decode(p, n_new)?);
        }
        Ok(t.elapsed().as_secs_f64())
    };
    let run_ee = || -> Result<f64> {
        let t = Instant::now();
        for p in prompts {
            let enc = key.encrypt_tokens(p)?;
            let out = match model_ee.domain() {
                Domain::Ciphertext => model_ee.greedy_decode(&enc, n_new)?,
                Domain::Plaintext => {
                    let out = model_ee.greedy_decode(p, n_new)?;
                    TokenSeq::ciphertext(key.vocab_perm().apply_ids(&out.ids))
                }
            };
            std::hint::black_box(key.decrypt_tokens(&out)?);
        }
        Ok(t.elapsed().as_secs_f64())
    };
    run_vi()?;
    run_ee()?;
    let mut vi = Vec::with_capacity(repeats);
    let mut ee = Vec::with_capacity(repeats);
    for r in 0..repeats {
        if r % 2 == 0 {
            vi.push(run_vi()?);
            ee.push(run_ee()?);
        } else {
            ee.push(run_ee()?);
            vi.push(run_vi()?);
        }
    }
    let vi_seconds = median(&vi);
    let ee_seconds = median(&ee);
    let paired: Vec<f64> = vi.iter().zip(&ee).map(|(v, e)| (e - v) / v * 100.0).collect();
    Ok(LatencyReport {
        vi_seconds,
        ee_seconds,
        delta_t_pct: (ee_seconds - vi_seconds) / vi_seconds * 100.0,
        delta_t_std_pct: sample_std(&paired),
        repeats,
        batch_size: 1,
        n_prompts: prompts.len(),
        n_new,
    })
}

/// One benchmarked configuration, one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub fidelity: FidelityReport,
    pub latency: LatencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Model | VI (s) | EE (s) | ΔT (%) | Fid (%) | ΔT Std (%) |\n|---|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:+.2}% | {:.2} | ±{:.2}% |",
                r.model,
                r.latency.vi_seconds,
                r.latency.ee_seconds,
                r.latency.delta_t_pct,
                r.fidelity.fidelity * 100.0,
                r.latency.delta_t_std_pct,
            );
        }
        s
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| EeError::format(0, e.to_string()))
    }
}

/// Write `<prefix>.report.json` and `<prefix>.report.md`; returns both paths.
pub fn emit_report(report: &BenchReport, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref();
    let with = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let json_path = with(".report.json");
    let md_path = with(".report.md");
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    std::fs::write(&json_path, json).map_err(|e| EeError::io(&json_path, e))?;
    std::fs::write(&md_path, report.to_markdown()).map_err(|e| EeError::io(&md_path, e))?;
    Ok((json_path, md_path))
}
