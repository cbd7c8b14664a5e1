use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use eecrypt::attack::{
    brute_force, hill_climb, judge_from_env, random_sampling, recovery_rate, unigram_from_sequences, AttackConfig,
    BigramTable, LossWeights, ModelOracle, TranscriptCorpus,
};
use eecrypt::bench::{emit_report, measure_latency, random_prompts, run_fidelity_suite, BenchReport, BenchRow};
use eecrypt::shard::{audit_blindness, plan_shards, run_pipeline, BrokerConfig, Failure, PlaintextContext};
use eecrypt::{
    init_model_with_std, keygen, load_key, load_model, save_key, save_model, Domain, EEKey, EeError, Exec,
    ModelBundle, ModelConfig, TokenSeq,
};
use serde_json::{json, Value};

use crate::config::{record, require, resolve};
use crate::{
    AttackArgs, AttackMethod, Command, CorpusArgs, EncryptModelArgs, FidelityArgs, InferArgs, InitModelArgs,
    KeygenArgs, ShardSimArgs, UsageError,
};

pub fn run(cmd: Command, config: Option<&Path>) -> Result<()> {
    match cmd {
        Command::InitModel(a) => init_model(resolve(&a, config)?),
        Command::Keygen(a) => keygen_cmd(resolve(&a, config)?),
        Command::EncryptModel(a) => encrypt_model(resolve(&a, config)?),
        Command::Infer(a) => infer(resolve(&a, config)?),
        Command::Corpus(a) => corpus(resolve(&a, config)?),
        Command::Fidelity(a) => fidelity(resolve(&a, config)?),
        Command::Attack(a) => attack(resolve(&a, config)?),
        Command::ShardSim(a) => shard_sim(resolve(&a, config)?),
    }
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

/// Model config JSON. `d_head`, `norm_kind` and `act_kind` may be omitted.
fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| EeError::io(path, e))?;
    let mut v: Value =
        serde_json::from_str(&text).map_err(|e| EeError::Config(format!("{}: {e}", path.display())))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| EeError::Config(format!("{}: expected a JSON object", path.display())))?;
    if !obj.contains_key("d_head") {
        let d = obj.get("d_model").and_then(Value::as_u64).unwrap_or(0);
        let h = obj.get("n_heads").and_then(Value::as_u64).unwrap_or(0);
        obj.insert("d_head".into(), json!(d.checked_div(h).unwrap_or(0)));
    }
    obj.entry("norm_kind").or_insert(json!("layernorm"));
    obj.entry("act_kind").or_insert(json!("gelu"));
    let cfg: ModelConfig =
        serde_json::from_value(v).map_err(|e| EeError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_ids(ids: &[u32]) {
    let s: Vec<String> = ids.iter().map(u32::to_string).collect();
    println!("{}", s.join(","));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn init_model(a: InitModelArgs) -> Result<()> {
    let cfg = load_model_config(&require(&a.model_config, "model-config")?)?;
    let out = require(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let model = init_model_with_std(&cfg, seed, a.init_std.unwrap_or(eecrypt::model::INIT_STD))?;
    save_model(&model, &out)?;
    record(&a, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn keygen_cmd(a: KeygenArgs) -> Result<()> {
    let cfg = match (&a.model_config, &a.model) {
        (Some(c), None) => load_model_config(c)?,
        (None, Some(m)) => load_model(m)?.config().clone(),
        (Some(_), Some(_)) => return Err(UsageError("give --model-config or --model, not both".into()).into()),
        (None, None) => return Err(UsageError("missing --model-config or --model".into()).into()),
    };
    let out = require(&a.out, "out")?;
    let key = if a.identity {
        EEKey::identity(&cfg)?
    } else {
        keygen(&cfg, require(&a.seed, "seed")?)?
    };
    save_key(&key, &out)?;
    record(&a, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn encrypt_model(a: EncryptModelArgs) -> Result<()> {
    let model = load_model(require(&a.model, "model")?)?;
    let key = load_key(require(&a.key, "key")?)?;
    let out = require(&a.out, "out")?;
    save_model(&key.encrypt_model(&model)?, &out)?;
    record(&a, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(require(&a.model, "model")?)?;
    if a.prompt.is_empty() {
        return Err(UsageError("missing --prompt".into()).into());
    }
    let n_new = a.n_new.unwrap_or(16);
    let prompt = TokenSeq::plaintext(a.prompt.clone());
    let out = match (&a.key, model.domain()) {
        (None, Domain::Plaintext) => model.greedy_decode(&prompt, n_new)?,
        (None, Domain::Ciphertext) => {
            return Err(EeError::Domain {
                expected: Domain::Plaintext,
                actual: Domain::Ciphertext,
            }
            .into())
        }
        (Some(k), _) => {
            let key = load_key(k)?;
            key.check_pairing(model.config())?;
            let enc = key.encrypt_tokens(&prompt)?;
            key.decrypt_tokens(&model.greedy_decode(&enc, n_new)?)?
        }
    };
    if let Some(r) = &a.record {
        write_json(r, &a)?;
    }
    print_ids(&out.ids);
    Ok(())
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let model = load_model(require(&a.model, "model")?)?;
    let out = require(&a.out, "out")?;
    let cfg = model.config().clone();
    let n_pairs = a.n_pairs.unwrap_or(100);
    let len = a.prompt_len.unwrap_or(8);
    let n_new = a.n_new.unwrap_or(8);
    let plain = random_prompts(cfg.vocab_size, n_pairs, len, a.seed.unwrap_or(0));
    let corpus = match &a.key {
        Some(k) => {
            let key = load_key(k)?;
            key.check_pairing(&cfg)?;
            let enc = plain.iter().map(|p| key.encrypt_tokens(p)).collect::<eecrypt::Result<Vec<_>>>()?;
            TranscriptCorpus::from_encrypted_model(&model, &enc, n_new)?
        }
        None => {
            // plaintext traffic, used as a reference corpus
            let pairs = plain
                .iter()
                .map(|p| {
                    let o = model.greedy_decode(p, n_new)?;
                    Ok(eecrypt::attack::Pair {
                        input_ids: p.ids.clone(),
                        output_ids: o.ids[p.len()..].to_vec(),
                    })
                })
                .collect::<eecrypt::Result<Vec<_>>>()?;
            TranscriptCorpus::new(pairs, cfg.vocab_size)?
        }
    };
    corpus.save_jsonl(&out)?;
    record(&a, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn fidelity(a: FidelityArgs) -> Result<()> {
    let vi = load_model(require(&a.vi_model, "vi-model")?)?;
    let ee = load_model(require(&a.ee_model, "ee-model")?)?;
    let key = load_key(require(&a.key, "key")?)?;
    let out = require(&a.out, "out")?;
    let vocab = vi.config().vocab_size;
    let prompts = match &a.corpus {
        Some(c) => TranscriptCorpus::load_jsonl(c, vocab)?
            .pairs()
            .iter()
            .map(|p| TokenSeq::plaintext(p.input_ids.clone()))
            .collect(),
        None => random_prompts(vocab, a.n_prompts.unwrap_or(20), a.prompt_len.unwrap_or(16), a.seed.unwrap_or(0)),
    };
    let fid = run_fidelity_suite(&vi, &ee, &key, &prompts, exec_for(a.sequential))?;
    let lat = measure_latency(&vi, &ee, &key, &prompts, a.n_new.unwrap_or(32), a.repeats.unwrap_or(10))?;
    let name = a.name.clone().unwrap_or_else(|| "model".into());
    let report = BenchReport {
        rows: vec![BenchRow {
            model: name.clone(),
            fidelity: fid,
            latency: lat,
        }],
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (_, md) = emit_report(&report, out.join(&name))?;
    record(&a, &out)?;
    print!("{}", report.to_markdown());
    eprintln!("wrote {}", md.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let method = a.method.ok_or_else(|| UsageError("missing attack method (brute, random, hill)".into()))?;
    let oracle_model = a.oracle_model.as_deref().map(load_model).transpose()?;
    let vocab = match (&oracle_model, a.vocab) {
        (Some(m), _) => m.config().vocab_size,
        (None, Some(v)) => v,
        (None, None) => return Err(UsageError("missing --oracle-model or --vocab".into()).into()),
    };
    let corpus = TranscriptCorpus::load_jsonl(require(&a.corpus, "corpus")?, vocab)?;
    let mut cfg = AttackConfig::new(corpus);
    cfg.weights = LossWeights {
        unigram: a.lambda_uni.unwrap_or(1.0),
        bigram: a.lambda_bi.unwrap_or(0.0),
        consistency: a.lambda_cons.unwrap_or(if oracle_model.is_some() { 1.0 } else { 0.0 }),
        judge: a.lambda_judge.unwrap_or(0.0),
    };
    if let Some(r) = &a.ref_corpus {
        let rc = TranscriptCorpus::load_jsonl(r, vocab)?;
        let seqs: Vec<Vec<u32>> = rc
            .pairs()
            .iter()
            .map(|p| p.input_ids.iter().chain(&p.output_ids).copied().collect())
            .collect();
        cfg.ref_unigram = Some(unigram_from_sequences(seqs.iter().map(Vec::as_slice), vocab));
        cfg.ref_bigram = Some(BigramTable::from_sequences(seqs.iter().map(Vec::as_slice)));
    }
    if let Some(m) = oracle_model {
        cfg.oracle = Some(Arc::new(ModelOracle::new(m)?));
    }
    let seed = a.seed.unwrap_or(0);
    if cfg.weights.judge > 0.0 {
        cfg.judge = Some(Arc::from(judge_from_env(seed)));
        cfg.judge_sample = a.judge_sample;
    }
    cfg.seed = seed;
    cfg.budget = a.budget.unwrap_or(10_000);
    cfg.exec = exec_for(a.sequential);
    let state = match method {
        AttackMethod::Brute => brute_force(&cfg)?,
        AttackMethod::Random => random_sampling(&cfg, a.m.unwrap_or(cfg.budget))?,
        AttackMethod::Hill => hill_climb(&cfg, a.restarts.unwrap_or(5))?,
    };
    let recovery = match &a.truth_key {
        Some(k) => {
            let key = load_key(k)?;
            Some(recovery_rate(&state.perm, &key.vocab_perm().inverse(), &cfg))
        }
        None => None,
    };
    let summary = json!({
        "method": state.method,
        "loss": state.loss,
        "evals_used": state.evals_used,
        "certified_local_optimum": state.certified_local_optimum,
        "recovery_rate": recovery,
    });
    if let Some(out) = &a.out {
        state.save_json(out)?;
        record(&a, out)?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn parse_failure(s: &str) -> Result<Failure> {
    let bad = || UsageError(format!("--fail expects NODE@STEP, got {s:?}"));
    let (n, st) = s.split_once('@').ok_or_else(bad)?;
    Ok(Failure {
        node: n.trim().parse().map_err(|_| bad())?,
        step: st.trim().parse().map_err(|_| bad())?,
    })
}

fn shard_sim(a: ShardSimArgs) -> Result<()> {
    let model = load_model(require(&a.model, "model")?)?;
    let out = require(&a.out, "out")?;
    if a.prompt.is_empty() {
        return Err(UsageError("missing --prompt".into()).into());
    }
    let key = a.key.as_deref().map(load_key).transpose()?;
    let plain_model: Option<ModelBundle> = a.plain_model.as_deref().map(load_model).transpose()?;
    if plain_model.is_some() && key.is_none() {
        return Err(UsageError("the audit needs --key as well as --plain-model".into()).into());
    }
    let plan = plan_shards(model.config(), a.shards.unwrap_or(1))?;
    let mut broker = BrokerConfig::new(a.seed.unwrap_or(0));
    broker.failures = a.fail.iter().map(|f| parse_failure(f)).collect::<Result<_>>()?;
    if let Some(s) = a.spares {
        broker.n_spares = s;
    }
    let (lo, hi) = broker.latency_us;
    broker.latency_us = (a.latency_min_us.unwrap_or(lo), a.latency_max_us.unwrap_or(hi));
    let n_new = a.n_new.unwrap_or(8);

    let plain_prompt = TokenSeq::plaintext(a.prompt.clone());
    let prompt = match &key {
        Some(k) => k.encrypt_tokens(&plain_prompt)?,
        None => TokenSeq::ciphertext(a.prompt.clone()),
    };
    let run = run_pipeline(&model, &plan, &broker, &prompt, n_new)?;
    let shown = match &key {
        Some(k) => k.decrypt_tokens(&run.output)?,
        None => run.output.clone(),
    };

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    run.transcript.save_jsonl(out.join("transcript.jsonl"))?;
    write_json(&out.join("output.json"), &json!({ "ids": shown.ids, "transcript_sha256": run.transcript.hash() }))?;
    if let (Some(k), Some(pm)) = (&key, &plain_model) {
        k.check_pairing(pm.config())?;
        Domain::Plaintext.expect(pm.domain())?;
        let generated = &shown.ids[plain_prompt.len()..];
        let res = audit_blindness(
            &run.transcript,
            &PlaintextContext {
                prompt: &plain_prompt,
                output: generated,
                model: pm,
            },
        );
        write_json(&out.join("audit.json"), &res)?;
        for w in &res.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!(
            "audit: {} ({} offending frames)",
            if res.passed { "passed" } else { "FAILED" },
            res.offending_frames.len()
        );
    }
    record(&a, &out)?;
    for r in run.transcript.reassignments() {
        eprintln!("reassigned: {}", r.note.as_deref().unwrap_or(""));
    }
    print_ids(&shown.ids);
    Ok(())
}
