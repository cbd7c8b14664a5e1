use eecrypt::bench::*;
use eecrypt::container::{decode_model, encode_model};
use eecrypt::ee::{decode_key, encode_key};
use eecrypt::*;
use sha2::{Digest, Sha256};

fn toy() -> ModelConfig {
    ModelConfig::new(128, 32, 2, 4, 64, 64)
}

fn prompts(n: usize, len: usize) -> Vec<TokenSeq> {
    (0..n as u32)
        .map(|i| TokenSeq::plaintext((0..len as u32).map(|t| (i * 37 + t * 11 + 5) % 128).collect::<Vec<_>>()))
        .collect()
}

// Frozen from a reference run of this implementation.
#[test]
fn golden_logits() {
    let m = init_model(&toy(), 42).unwrap();
    let l = m.forward(&TokenSeq::plaintext(vec![1, 2, 3])).unwrap();
    assert_eq!(l.shape(), (3, 128));
    let bytes: Vec<u8> = l.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(
        hex::encode(Sha256::digest(&bytes)),
        "966946ccbcc5a4bb891d553054ed93e8597e2fd0dda4fdec842859c758c0500e"
    );
    assert_eq!(l.get(0, 0), 0.058866151350064275);
    assert_eq!(l.get(2, 127), -0.05942456189509525);
    let out = m.greedy_decode(&TokenSeq::plaintext(vec![1, 2, 3]), 8).unwrap();
    assert_eq!(out.ids, vec![1, 2, 3, 105, 65, 15, 65, 15, 44, 105, 89]);
}

#[test]
fn end_to_end_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let model = init_model(&cfg, 42).unwrap();
    let key = keygen(&cfg, 7).unwrap();
    save_model(&model, dir.path().join("m.eem")).unwrap();
    save_key(&key, dir.path().join("k.eekey")).unwrap();

    let model = load_model(dir.path().join("m.eem")).unwrap();
    let key = load_key(dir.path().join("k.eekey")).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    save_model(&enc, dir.path().join("e.eem")).unwrap();
    let enc = load_model(dir.path().join("e.eem")).unwrap();
    assert_eq!(enc.domain(), Domain::Ciphertext);

    for p in prompts(3, 10) {
        let vi = model.greedy_decode(&p, 6).unwrap();
        let ee = enc.greedy_decode(&key.encrypt_tokens(&p).unwrap(), 6).unwrap();
        assert_ne!(ee.ids, vi.ids);
        assert_eq!(key.decrypt_tokens(&ee).unwrap(), vi);
    }
    // the encrypted model refuses plaintext ids and the plaintext one ciphertext ids
    let p = &prompts(1, 4)[0];
    assert!(matches!(enc.forward(p), Err(EeError::Domain { .. })));
    assert!(matches!(model.forward(&key.encrypt_tokens(p).unwrap()), Err(EeError::Domain { .. })));
}

#[test]
fn key_and_model_bytes_are_deterministic() {
    let cfg = toy();
    assert_eq!(encode_key(&keygen(&cfg, 3).unwrap()), encode_key(&keygen(&cfg, 3).unwrap()));
    assert_ne!(encode_key(&keygen(&cfg, 3).unwrap()), encode_key(&keygen(&cfg, 4).unwrap()));
    let m = init_model(&cfg, 1).unwrap();
    let bytes = encode_model(&m);
    assert_eq!(encode_model(&decode_model(&bytes).unwrap()), bytes);
    let k = keygen(&cfg, 3).unwrap();
    assert_eq!(decode_key(&encode_key(&k)).unwrap(), k);
}

#[test]
fn mismatched_key_is_a_pairing_error() {
    let model = init_model(&toy(), 1).unwrap();
    let other = ModelConfig::new(128, 32, 1, 4, 64, 64);
    let key = keygen(&other, 2).unwrap();
    assert!(matches!(key.encrypt_model(&model), Err(EeError::Pairing(_))));
}

#[test]
fn fidelity_suite_identity_is_exactly_one() {
    let cfg = toy();
    let model = init_model(&cfg, 42).unwrap();
    let key = EEKey::identity(&cfg).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let r = run_fidelity_suite(&model, &enc, &key, &prompts(10, 8), Exec::Parallel).unwrap();
    assert_eq!(r.fidelity, 1.0);
    assert_eq!(r.scores_vi, r.scores_ee);
    assert_eq!(r.n, 10);
}

#[test]
fn fidelity_suite_random_key_and_policies() {
    let cfg = toy();
    let model = init_model(&cfg, 42).unwrap();
    let key = keygen(&cfg, 9).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let ps = prompts(12, 8);
    let a = run_fidelity_suite(&model, &enc, &key, &ps, Exec::Sequential).unwrap();
    let b = run_fidelity_suite(&model, &enc, &key, &ps, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert!(a.fidelity >= 0.999999, "{}", a.fidelity);

    let wrong = keygen(&ModelConfig::new(128, 32, 1, 4, 64, 64), 9).unwrap();
    assert!(matches!(run_fidelity_suite(&model, &enc, &wrong, &ps, Exec::Sequential), Err(EeError::Pairing(_))));
    let small = init_model(&ModelConfig::new(128, 32, 1, 4, 64, 64), 1).unwrap();
    assert!(matches!(run_fidelity_suite(&model, &small, &key, &ps, Exec::Sequential), Err(EeError::Pairing(_))));
    assert!(matches!(run_fidelity_suite(&model, &model, &key, &ps, Exec::Sequential), Err(EeError::Domain { .. })));
}

#[test]
fn latency_needs_three_repeats_and_reports_shape() {
    let cfg = ModelConfig::new(32, 16, 1, 2, 32, 16);
    let model = init_model(&cfg, 1).unwrap();
    let key = keygen(&cfg, 2).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let ps: Vec<TokenSeq> = (0..3u32).map(|i| TokenSeq::plaintext(vec![i, i + 1, i + 2])).collect();
    assert!(matches!(measure_latency(&model, &enc, &key, &ps, 2, 2), Err(EeError::Precondition(_))));
    let r = measure_latency(&model, &enc, &key, &ps, 2, 3).unwrap();
    assert_eq!(r.repeats, 3);
    assert_eq!(r.n_prompts, 3);
    assert!(r.vi_seconds > 0.0 && r.ee_seconds > 0.0);
    assert!(r.delta_t_std_pct >= 0.0);
    // control run: the same plaintext bundle in both arms
    let c = measure_latency(&model, &model, &key, &ps, 2, 3).unwrap();
    assert!(c.delta_t_pct.is_finite());
}

#[test]
fn report_files_are_written() {
    let cfg = ModelConfig::new(32, 16, 1, 2, 32, 16);
    let model = init_model(&cfg, 1).unwrap();
    let key = keygen(&cfg, 2).unwrap();
    let enc = key.encrypt_model(&model).unwrap();
    let ps: Vec<TokenSeq> = (0..4u32).map(|i| TokenSeq::plaintext(vec![i, 2 * i + 1])).collect();
    let report = BenchReport {
        rows: vec![BenchRow {
            model: "toy-32".into(),
            fidelity: run_fidelity_suite(&model, &enc, &key, &ps, Exec::Sequential).unwrap(),
            latency: measure_latency(&model, &enc, &key, &ps, 2, 3).unwrap(),
        }],
    };
    let dir = tempfile::tempdir().unwrap();
    let (json, md) = emit_report(&report, dir.path().join("toy")).unwrap();
    assert!(json.ends_with("toy.report.json"));
    assert_eq!(BenchReport::load_json(&json).unwrap(), report);
    let table = std::fs::read_to_string(md).unwrap();
    assert!(table.starts_with("| Model | VI (s) | EE (s) | ΔT (%) | Fid (%) | ΔT Std (%) |"));
    assert!(table.contains("| toy-32 |"));
    assert!(table.contains("| 100.00 |"));
}
