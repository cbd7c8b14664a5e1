mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::*;
use eecrypt::attack::*;
use eecrypt::{EeError, Exec, PermTable};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(pairs: &[(&[u32], &[u32])], vocab: usize) -> TranscriptCorpus {
    TranscriptCorpus::new(
        pairs
            .iter()
            .map(|(i, o)| Pair {
                input_ids: i.to_vec(),
                output_ids: o.to_vec(),
            })
            .collect(),
        vocab,
    )
    .unwrap()
}

fn perm(m: &[u32]) -> PermTable {
    PermTable::new(m.to_vec()).unwrap()
}

fn consistency_cfg(v: &Victim) -> AttackConfig {
    let mut cfg = AttackConfig::new(v.corpus.clone());
    cfg.oracle = Some(Arc::new(ModelOracle::new(v.model.clone()).unwrap()));
    cfg.weights.consistency = 1.0;
    cfg
}

/// Reference statistics from fresh plaintext traffic of the same model.
fn reference_stats(v: &Victim, n: usize, seed: u64) -> (Vec<f64>, BigramTable) {
    let vocab = v.model.config().vocab_size;
    let seqs: Vec<Vec<u32>> = random_prompts(vocab, n, 4, seed)
        .iter()
        .map(|p| v.model.greedy_decode(p, 4).unwrap().ids)
        .collect();
    let uni = unigram_from_sequences(seqs.iter().map(|s| s.as_slice()), vocab);
    let bi = BigramTable::from_sequences(seqs.iter().map(|s| s.as_slice()));
    (uni, bi)
}

#[test]
fn unigram_hand_value() {
    let c = corpus(&[(&[0, 0], &[1])], 2);
    let got = unigram_loss(&perm(&[1, 0]), &c, Some(&[2.0 / 3.0, 1.0 / 3.0])).unwrap();
    assert!((got - 2.0 / 3.0).abs() < 1e-15, "{got}");
    let same = unigram_loss(&perm(&[0, 1]), &c, Some(&[2.0 / 3.0, 1.0 / 3.0])).unwrap();
    assert!(same.abs() < 1e-15);
}

#[test]
fn unigram_extremes_and_missing_reference() {
    let c = corpus(&[(&[0, 1, 1], &[0])], 4);
    assert_eq!(unigram_loss(&PermTable::identity(4), &c, Some(&[0.0, 0.0, 0.5, 0.5])).unwrap(), 2.0);
    let swapped = perm(&[2, 3, 0, 1]);
    assert!(unigram_loss(&swapped, &c, Some(&[0.0, 0.0, 0.5, 0.5])).unwrap().abs() < 1e-15);
    assert!(matches!(unigram_loss(&swapped, &c, None), Err(EeError::Config(_))));
    assert!(matches!(unigram_loss(&perm(&[0, 1]), &c, Some(&[0.5, 0.5])), Err(EeError::Config(_))));
}

#[test]
fn bigram_cases() {
    let c = corpus(&[(&[0, 1], &[0, 0])], 3);
    let id = PermTable::identity(3);
    let own = BigramTable::from_sequences([[0u32, 1, 0, 0].as_slice()]);
    assert!(bigram_loss(&id, &c, Some(&own)).unwrap().abs() < 1e-15);

    // context 0 -> {1, 0} half each (weight 2/3); context 1 -> {0} (weight 1/3)
    let mut rows = BTreeMap::new();
    rows.insert(0, BTreeMap::from([(1, 1.0)]));
    rows.insert(1, BTreeMap::from([(0, 1.0)]));
    let hand = BigramTable { rows };
    assert!((bigram_loss(&id, &c, Some(&hand)).unwrap() - 2.0 / 3.0).abs() < 1e-15);

    let mut rows = BTreeMap::new();
    rows.insert(0, BTreeMap::from([(2, 1.0)]));
    rows.insert(1, BTreeMap::from([(2, 1.0)]));
    let far = BigramTable { rows };
    assert_eq!(bigram_loss(&id, &c, Some(&far)).unwrap(), 2.0);
    let empty = BigramTable { rows: BTreeMap::new() };
    assert_eq!(bigram_loss(&id, &c, Some(&empty)).unwrap(), 2.0);
    assert!(matches!(bigram_loss(&id, &c, None), Err(EeError::Config(_))));
}

struct Never;
impl Oracle for Never {
    fn matches(&self, _: &[u32], _: &[u32]) -> eecrypt::Result<bool> {
        Ok(false)
    }
}

#[test]
fn consistency_endpoints() {
    let v = victim(&attack_config(5, 1, 16), 1, 101, 12, 4, 3);
    let oracle: Arc<dyn Oracle> = Arc::new(ModelOracle::new(v.model.clone()).unwrap());
    assert_eq!(consistency_penalty(&v.truth(), &v.corpus, Some(oracle.clone())).unwrap(), 0.0);
    assert_eq!(consistency_penalty(&v.truth(), &v.corpus, Some(Arc::new(Never))).unwrap(), 1.0);
    assert!(matches!(consistency_penalty(&v.truth(), &v.corpus, None), Err(EeError::Config(_))));
}

#[test]
fn consistency_matches_exhaustive_oracle_on_four_tokens() {
    let v = victim(&attack_config(4, 1, 16), 3, 103, 10, 3, 3);
    let oracle: Arc<dyn Oracle> = Arc::new(ModelOracle::new(v.model.clone()).unwrap());
    let perms = all_perms(4);
    assert_eq!(perms.len(), 24);
    let mut values = Vec::new();
    for p in &perms {
        let got = consistency_penalty(p, &v.corpus, Some(oracle.clone())).unwrap();
        let want = naive_consistency(p, &v.corpus, &v.model);
        assert_eq!(got, want, "perm {:?}", p.as_slice());
        values.push(got);
    }
    // a wrong perm with a strictly fractional value exercises the counting
    assert!(values.iter().any(|&x| x > 0.0 && x < 1.0));
    let zeros: Vec<_> = perms.iter().zip(&values).filter(|(_, &x)| x == 0.0).collect();
    assert_eq!(zeros.len(), 1);
    assert_eq!(zeros[0].0, &v.truth());
}

#[test]
fn total_loss_matches_exhaustive_oracle_on_five_tokens() {
    let v = victim(&attack_config(5, 1, 16), 2, 102, 12, 4, 3);
    let (uni, bi) = reference_stats(&v, 40, 77);
    let mut cfg = consistency_cfg(&v);
    cfg.ref_unigram = Some(uni.clone());
    cfg.ref_bigram = Some(bi.clone());
    cfg.weights = LossWeights {
        unigram: 0.5,
        bigram: 0.3,
        consistency: 0.2,
        judge: 0.0,
    };
    cfg.budget = 120;
    let mut best: Option<(f64, PermTable)> = None;
    for p in all_perms(5) {
        let got = total_loss(&p, &cfg).unwrap();
        let u = naive_unigram(&p, &v.corpus, &uni);
        let b = naive_bigram(&p, &v.corpus, &bi.rows);
        let c = naive_consistency(&p, &v.corpus, &v.model);
        let want = 0.5 * u + 0.3 * b + 0.2 * c;
        assert!((got.total - want).abs() < 1e-12, "{:?}: {} vs {want}", p.as_slice(), got.total);
        assert!((got.unigram.unwrap() - u).abs() < 1e-12);
        assert!((got.bigram.unwrap() - b).abs() < 1e-12);
        assert_eq!(got.consistency.unwrap(), c);
        // enumeration is lexicographic, so strict improvement keeps the smallest tie
        if best.as_ref().is_none_or(|(l, _)| got.total < *l) {
            best = Some((got.total, p));
        }
    }
    let (best_loss, best_perm) = best.unwrap();
    let bf = brute_force(&cfg).unwrap();
    assert_eq!(bf.perm, best_perm);
    assert_eq!(bf.loss, best_loss);
    assert_eq!(bf.evals_used, 120);
}

#[test]
fn total_loss_rejects_bad_inputs() {
    let v = victim(&attack_config(4, 1, 16), 1, 11, 4, 3, 2);
    let cfg = consistency_cfg(&v);
    assert!(matches!(total_loss(&PermTable::identity(5), &cfg), Err(EeError::Shape(_))));
    let none = AttackConfig::new(v.corpus.clone());
    assert!(matches!(total_loss(&PermTable::identity(4), &none), Err(EeError::Config(_))));
    let mut no_oracle = AttackConfig::new(v.corpus.clone());
    no_oracle.weights.consistency = 1.0;
    assert!(matches!(total_loss(&PermTable::identity(4), &no_oracle), Err(EeError::Config(_))));
}

#[test]
fn judge_loss_endpoints_and_stub() {
    let c = corpus(&[(&[0, 1], &[2]), (&[2], &[1, 0])], 3);
    let id = PermTable::identity(3);
    assert_eq!(judge_loss(&id, &c, Arc::new(ConstJudge(10))).unwrap(), 0.0);
    assert_eq!(judge_loss(&id, &c, Arc::new(ConstJudge(0))).unwrap(), 1.0);
    assert!((judge_loss(&id, &c, Arc::new(ConstJudge(7))).unwrap() - 0.3).abs() < 1e-15);
    let a = judge_loss(&id, &c, Arc::new(StubJudge { seed: 5 })).unwrap();
    let b = judge_loss(&id, &c, Arc::new(StubJudge { seed: 5 })).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
}

/// Serve `responses` in order, one per connection, and return the bound URL.
fn mock_server(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            bodies.push(String::from_utf8(req).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_judge_parses_rating_and_sends_rubric() {
    let ok = r#"{"choices":[{"message":{"content":"8"}}]}"#.to_string();
    let (url, h) = mock_server(vec![(200, ok)]);
    let judge = HttpJudge::new(url).with_model("m");
    assert_eq!(judge.rate(&[1, 2], &[3]).unwrap(), 8);
    let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "m");
    assert_eq!(sent["messages"][0]["content"], judge::RUBRIC);
}

#[test]
fn http_judge_protocol_and_remote_errors() {
    let (url, h) = mock_server(vec![(200, r#"{"choices":[{"message":{"content":"so-so"}}]}"#.into())]);
    assert!(matches!(HttpJudge::new(url).rate(&[1], &[2]), Err(EeError::Protocol(_))));
    h.join().unwrap();

    let (url, h) = mock_server(vec![(500, "{}".into()), (503, "{}".into())]);
    let err = HttpJudge::new(url).with_retries(1).rate(&[1], &[2]).unwrap_err();
    assert!(matches!(err, EeError::Remote { retries: 1, .. }), "{err}");
    assert_eq!(h.join().unwrap().len(), 2);

    // nothing listening
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = HttpJudge::new(format!("http://127.0.0.1:{port}/"))
        .with_retries(0)
        .with_timeout(Duration::from_secs(2));
    assert!(matches!(dead.rate(&[1], &[2]), Err(EeError::Remote { retries: 0, .. })));
}

#[test]
fn brute_force_refuses_large_vocabularies() {
    let c = corpus(&[(&[0, 11], &[5])], 12);
    let mut cfg = AttackConfig::new(c);
    cfg.ref_unigram = Some(vec![1.0 / 12.0; 12]);
    cfg.weights.unigram = 1.0;
    match brute_force(&cfg) {
        Err(EeError::Refused(msg)) => assert!(msg.contains("479001600"), "{msg}"),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn brute_force_recovers_three_token_key() {
    let v = victim(&attack_config(3, 1, 16), 1, 101, 10, 4, 4);
    assert!(!v.truth().is_identity());
    let cfg = consistency_cfg(&v);
    let s = brute_force(&cfg).unwrap();
    assert_eq!(s.perm, v.truth());
    assert_eq!(s.loss, 0.0);
    assert_eq!(s.evals_used, 6);
    assert_eq!(recovery_rate(&s.perm, &v.truth(), &cfg), 1.0);

    let mut short = consistency_cfg(&v);
    short.budget = 5;
    assert!(matches!(brute_force(&short), Err(EeError::Precondition(_))));
}

#[test]
fn identity_key_corpus_has_identity_among_zeros() {
    let cfg = attack_config(4, 1, 16);
    let model = eecrypt::init_model_with_std(&cfg, 9, 1.0).unwrap();
    let key = eecrypt::EEKey::identity(&cfg).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let prompts: Vec<_> = random_prompts(4, 6, 3, 1)
        .iter()
        .map(|p| key.encrypt_tokens(p).unwrap())
        .collect();
    let c = TranscriptCorpus::from_encrypted_model(&enc, &prompts, 3).unwrap();
    let mut ac = AttackConfig::new(c);
    ac.oracle = Some(Arc::new(ModelOracle::new(model).unwrap()));
    ac.weights.consistency = 1.0;
    assert_eq!(total_loss(&PermTable::identity(4), &ac).unwrap().total, 0.0);
    assert_eq!(brute_force(&ac).unwrap().loss, 0.0);
}

#[test]
fn random_sampling_single_draw_and_prefix_property() {
    let v = victim(&attack_config(6, 1, 16), 4, 104, 10, 4, 3);
    let mut cfg = consistency_cfg(&v);
    let (uni, _) = reference_stats(&v, 30, 5);
    cfg.ref_unigram = Some(uni);
    cfg.weights.unigram = 1.0;
    cfg.seed = 21;

    let one = random_sampling(&cfg, 1).unwrap();
    let first = PermTable::random(6, &mut ChaCha8Rng::seed_from_u64(21));
    assert_eq!(one.perm, first);
    assert_eq!(one.loss, total_loss(&first, &cfg).unwrap().total);
    assert_eq!(one.evals_used, 1);

    let mut last = f64::INFINITY;
    for m in [1, 2, 5, 20, 100, 400] {
        let s = random_sampling(&cfg, m).unwrap();
        assert!(s.loss <= last);
        assert_eq!(s.evals_used, m);
        last = s.loss;
    }
    assert!(matches!(random_sampling(&cfg, 0), Err(EeError::Precondition(_))));
    cfg.budget = 10;
    assert!(matches!(random_sampling(&cfg, 11), Err(EeError::Precondition(_))));
}

#[test]
fn random_sampling_finds_brute_force_minimum_on_seeded_instance() {
    let v = victim(&attack_config(6, 1, 16), 1, 101, 30, 4, 4);
    let (uni, bi) = reference_stats(&v, 60, 8);
    let mut cfg = consistency_cfg(&v);
    cfg.ref_unigram = Some(uni);
    cfg.ref_bigram = Some(bi);
    cfg.weights = LossWeights {
        unigram: 1.0,
        bigram: 1.0,
        consistency: 1.0,
        judge: 0.0,
    };
    cfg.seed = 3;
    let bf = brute_force(&cfg).unwrap();
    let rs = random_sampling(&cfg, 720).unwrap();
    assert!(bf.loss <= rs.loss);
    assert_eq!(rs.perm, bf.perm);
    assert_eq!(bf.perm, v.truth());
}

#[test]
fn hill_climb_trace_and_true_start() {
    let v = victim(&attack_config(6, 1, 16), 5, 105, 20, 4, 4);
    let mut cfg = consistency_cfg(&v);
    cfg.seed = 4;
    cfg.budget = 2_000;
    let s = hill_climb(&cfg, 3).unwrap();
    assert!(s.trace.windows(2).all(|w| w[1].loss < w[0].loss && w[1].eval > w[0].eval));
    assert_eq!(s.trace.last().unwrap().loss, s.loss);
    assert!(s.evals_used <= cfg.budget);
    assert!(s.certified_local_optimum.is_some());

    let from_truth = hill_climb_from(&cfg, &v.truth()).unwrap();
    assert_eq!(from_truth.loss, 0.0);
    assert_eq!(from_truth.perm, v.truth());
    assert_eq!(from_truth.certified_local_optimum, Some(true));
    assert_eq!(from_truth.evals_used, 1 + 15);
    assert_eq!(from_truth.trace.len(), 1);
}

#[test]
fn hill_climb_no_worse_than_random_sampling_fixture() {
    let v = victim(&attack_config(6, 1, 16), 2, 102, 20, 4, 4);
    let (uni, _) = reference_stats(&v, 40, 9);
    let mut cfg = consistency_cfg(&v);
    cfg.ref_unigram = Some(uni);
    cfg.weights.unigram = 1.0;
    cfg.seed = 12;
    cfg.budget = 300;
    let hc = hill_climb(&cfg, 3).unwrap();
    let rs = random_sampling(&cfg, 300).unwrap();
    assert!(hc.loss <= rs.loss, "hill {} vs random {}", hc.loss, rs.loss);
}

#[test]
fn optimizers_agree_across_exec_policies() {
    let v = victim(&attack_config(5, 1, 16), 6, 106, 12, 4, 3);
    let mut cfg = consistency_cfg(&v);
    let (uni, _) = reference_stats(&v, 30, 10);
    cfg.ref_unigram = Some(uni);
    cfg.weights.unigram = 0.5;
    cfg.budget = 400;
    cfg.seed = 8;
    let run = |exec| {
        let mut c = consistency_cfg(&v);
        c.ref_unigram = cfg.ref_unigram.clone();
        c.weights = cfg.weights;
        c.budget = cfg.budget;
        c.seed = cfg.seed;
        c.exec = exec;
        (
            serde_json::to_string(&brute_force(&c).unwrap()).unwrap(),
            serde_json::to_string(&random_sampling(&c, 300).unwrap()).unwrap(),
            serde_json::to_string(&hill_climb(&c, 4).unwrap()).unwrap(),
        )
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn attack_state_round_trips_through_json() {
    let v = victim(&attack_config(4, 1, 16), 7, 107, 6, 3, 2);
    let s = hill_climb(&consistency_cfg(&v), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    s.save_json(&path).unwrap();
    let back = AttackState::load_json(&path).unwrap();
    assert_eq!(back.perm, s.perm);
    assert_eq!(back.loss, s.loss);
    assert_eq!(back.trace, s.trace);
    assert_eq!(back.method, Method::HillClimb);
}

#[test]
fn corpus_jsonl_round_trip_and_errors() {
    let c = corpus(&[(&[0, 1], &[2]), (&[2, 2], &[])], 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    c.save_jsonl(&path).unwrap();
    assert_eq!(TranscriptCorpus::load_jsonl(&path, 3).unwrap(), c);
    assert!(matches!(TranscriptCorpus::load_jsonl(&path, 2), Err(EeError::Range { id: 2, .. })));
    std::fs::write(&path, "{\"input_ids\":[0]}\nnope\n").unwrap();
    assert!(matches!(TranscriptCorpus::load_jsonl(&path, 3), Err(EeError::Format { .. })));
    assert!(TranscriptCorpus::new(vec![], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn optimizer_invariants(model_seed in 0u64..50, key_seed in 0u64..50, seed in 0u64..1000, vocab in 4usize..=5) {
        let v = victim(&attack_config(vocab, 1, 8), model_seed, key_seed, 6, 3, 2);
        let (uni, _) = reference_stats(&v, 20, seed);
        let mut cfg = consistency_cfg(&v);
        cfg.ref_unigram = Some(uni);
        cfg.weights.unigram = 0.7;
        cfg.seed = seed;
        cfg.budget = 150;
        cfg.exec = Exec::Sequential;

        let bf = brute_force(&cfg).unwrap();
        let rs = random_sampling(&cfg, 60).unwrap();
        let hc = hill_climb(&cfg, 2).unwrap();
        for s in [&bf, &rs, &hc] {
            let mut m = s.perm.as_slice().to_vec();
            m.sort_unstable();
            prop_assert_eq!(m, (0..vocab as u32).collect::<Vec<_>>());
            prop_assert!(s.evals_used <= cfg.budget);
            prop_assert!(s.loss.is_finite() && s.loss >= 0.0);
            prop_assert_eq!(s.loss, total_loss(&s.perm, &cfg).unwrap().total);
        }
        prop_assert!(bf.loss <= rs.loss);
        prop_assert!(bf.loss <= hc.loss);
    }

    #[test]
    fn total_loss_ignores_pair_order(seed in 0u64..1000) {
        let v = victim(&attack_config(5, 1, 8), seed % 7, seed, 8, 3, 2);
        let (uni, bi) = reference_stats(&v, 20, seed);
        let mut cfg = consistency_cfg(&v);
        cfg.ref_unigram = Some(uni.clone());
        cfg.ref_bigram = Some(bi.clone());
        cfg.weights = LossWeights { unigram: 1.0, bigram: 1.0, consistency: 1.0, judge: 0.0 };
        let mut pairs = v.corpus.pairs().to_vec();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut shuffled = consistency_cfg(&v);
        shuffled.corpus = TranscriptCorpus::new(pairs, 5).unwrap();
        shuffled.ref_unigram = Some(uni);
        shuffled.ref_bigram = Some(bi);
        shuffled.weights = cfg.weights;
        let p = PermTable::random(5, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let a = total_loss(&p, &cfg).unwrap().total;
        let b = total_loss(&p, &shuffled).unwrap().total;
        prop_assert!((a - b).abs() < 1e-12);
    }
}
