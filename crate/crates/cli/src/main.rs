//! `eecrypt`: key generation, model encryption, inference, benchmarks,
//! attacks and the shard simulator from one command.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eecrypt::EeError;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "eecrypt", version, about = "Equivariant encryption for blind transformer inference")]
struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded random model from a config file.
    InitModel(InitModelArgs),
    /// Generate a key for a model config.
    Keygen(KeygenArgs),
    /// Transform a plaintext model with a key.
    EncryptModel(EncryptModelArgs),
    /// Greedy decoding; with a key, encrypt, decode and decrypt.
    Infer(InferArgs),
    /// Record greedy traffic as a JSON Lines corpus.
    Corpus(CorpusArgs),
    /// Fidelity and latency report for VI against EE.
    Fidelity(FidelityArgs),
    /// Recover the vocabulary permutation from an encrypted corpus.
    Attack(AttackArgs),
    /// Run the sharded pipeline simulator and audit its transcript.
    ShardSim(ShardSimArgs),
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InitModelArgs {
    /// Model config JSON.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of the initial weights.
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct KeygenArgs {
    #[arg(long, conflicts_with = "model")]
    pub model_config: Option<PathBuf>,
    /// Take the config from an existing model file instead.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit the identity key.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EncryptModelArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InferArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Comma-separated plaintext token ids.
    #[arg(long, value_delimiter = ',')]
    pub prompt: Vec<u32>,
    #[arg(long)]
    pub n_new: Option<usize>,
    /// Write the resolved config here.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusArgs {
    /// Model serving the traffic; with --key it must be the encrypted one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Encrypt the random plaintext prompts with this key first.
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub n_new: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityArgs {
    #[arg(long)]
    pub vi_model: Option<PathBuf>,
    #[arg(long)]
    pub ee_model: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Prompts as a corpus file; only the inputs are used.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Random prompts when no corpus is given.
    #[arg(long)]
    pub n_prompts: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tokens decoded per prompt in the latency arms.
    #[arg(long)]
    pub n_new: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Row label and report file name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub sequential: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Brute,
    Random,
    Hill,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AttackArgs {
    #[arg(value_enum)]
    pub method: Option<AttackMethod>,
    /// Observed ciphertext corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Plaintext model used as the consistency oracle.
    #[arg(long)]
    pub oracle_model: Option<PathBuf>,
    /// Plaintext corpus for reference unigram and bigram statistics.
    #[arg(long)]
    pub ref_corpus: Option<PathBuf>,
    /// Vocabulary size when no oracle model is given.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub lambda_uni: Option<f64>,
    #[arg(long)]
    pub lambda_bi: Option<f64>,
    #[arg(long)]
    pub lambda_cons: Option<f64>,
    #[arg(long)]
    pub lambda_judge: Option<f64>,
    #[arg(long)]
    pub judge_sample: Option<usize>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draws for random sampling; defaults to the budget.
    #[arg(long)]
    pub m: Option<u64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Key behind the corpus, to report the recovery rate.
    #[arg(long)]
    pub truth_key: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ShardSimArgs {
    /// Encrypted model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// With a key, --prompt is plaintext and the output is decrypted.
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Plaintext model for the blindness audit.
    #[arg(long)]
    pub plain_model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub prompt: Vec<u32>,
    #[arg(long)]
    pub n_new: Option<usize>,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Crash a node at a decoding step, as NODE@STEP; repeatable.
    #[arg(long)]
    pub fail: Vec<String>,
    #[arg(long)]
    pub spares: Option<usize>,
    #[arg(long)]
    pub latency_min_us: Option<u64>,
    #[arg(long)]
    pub latency_max_us: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error, by kind.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<EeError>() {
        Some(EeError::Format { .. } | EeError::Version { .. }) => 3,
        Some(EeError::Integrity(_)) => 4,
        Some(EeError::Pairing(_)) => 5,
        Some(EeError::Domain { .. }) => 6,
        Some(EeError::Shape(_) | EeError::Config(_) | EeError::Range { .. }) => 7,
        Some(EeError::Refused(_) | EeError::Precondition(_)) => 8,
        Some(EeError::Remote { .. } | EeError::Protocol(_)) => 9,
        Some(EeError::Pipeline(_)) => 10,
        Some(EeError::Io { .. }) => 11,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
