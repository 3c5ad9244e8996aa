use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmf")).args(args).output().expect("spawn mmf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn profiles() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn make(dir: &Path, name: &str, extra: &[&str]) -> String {
    let p = dir.join(name).to_string_lossy().into_owned();
    let mut args = vec!["make-test-model", "--out", p.as_str()];
    args.extend_from_slice(extra);
    let o = mmf(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p
}

#[test]
fn greedy_zero_model_emits_id_zero() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "z.mmfl", &["--zero"]);
    let t = write(dir.path(), "t.txt", "1 2 3\n");
    let o = mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "3", "--greedy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "1\n2\n3\n0\n0\n0\n");
}

#[test]
fn seeded_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--d", "16", "--vocab", "48", "--seed", "5"]);
    let t = write(dir.path(), "t.txt", "4 8 15 16 23 42");
    let run = |seed: &str| stdout(&mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "24", "--seed", seed]));
    let a = run("7");
    assert_eq!(a.lines().count(), 6 + 24);
    assert_eq!(a, run("7"));
    assert_ne!(a, run("8"));
}

#[test]
fn zero_new_tokens_echoes_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &[]);
    let t = write(dir.path(), "t.txt", "1 2");
    let o = mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "1\n2\n");
}

#[test]
fn tokens_from_stdin() {
    use std::io::Write;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &[]);
    let t = write(dir.path(), "t.txt", "3 1 4 1 5");
    let from_file = stdout(&mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "5"]));
    let mut child = Command::new(env!("CARGO_BIN_EXE_mmf"))
        .args(["generate", "--model", &m, "--tokens", "-", "--max-new", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"3 1 4 1 5").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(stdout(&o), from_file);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--vocab", "16"]);
    let ok = write(dir.path(), "ok.txt", "1 2 3");

    let missing = dir.path().join("missing.mmfl").to_string_lossy().into_owned();
    assert_eq!(code(&mmf(&["generate", "--model", &missing, "--tokens", &ok])), 2);
    let no_tokens = dir.path().join("none.txt").to_string_lossy().into_owned();
    assert_eq!(code(&mmf(&["generate", "--model", &m, "--tokens", &no_tokens])), 2);

    let junk = write(dir.path(), "junk.mmfl", "not a model at all");
    assert_eq!(code(&mmf(&["generate", "--model", &junk, "--tokens", &ok])), 3);
    let bad = write(dir.path(), "bad.txt", "1 two 3");
    assert_eq!(code(&mmf(&["generate", "--model", &m, "--tokens", &bad])), 3);

    let far = write(dir.path(), "far.txt", "1 16");
    let o = mmf(&["generate", "--model", &m, "--tokens", &far]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("16"));
    assert_eq!(code(&mmf(&["prefill", "--model", &m, "--tokens", &far])), 4);
}

#[test]
fn unknown_flags_rejected() {
    let o = mmf(&["generate", "--model", "x", "--tokens", "y", "--frobnicate"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("frobnicate"));
    assert_ne!(code(&mmf(&["generate", "--model", "x", "--tokens", "y", "--seed", "1", "--greedy"])), 0);
}

#[test]
fn detokenize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--vocab", "16", "--seed", "2"]);
    let t = write(dir.path(), "t.txt", "1 2 3");
    let words: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
    let vocab = write(dir.path(), "vocab.json", &serde_json::to_string(&words).unwrap());
    let ids = stdout(&mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "8", "--seed", "3"]));
    let o = mmf(&["generate", "--model", &m, "--tokens", &t, "--max-new", "8", "--seed", "3", "--detokenize", &vocab]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let back: Vec<String> = stdout(&o).lines().map(|w| w.trim_start_matches('w').to_string()).collect();
    assert_eq!(back.len(), 3 + 8);
    assert_eq!(back, ids.lines().map(str::to_string).collect::<Vec<_>>());

    let short = write(dir.path(), "short.json", r#"["a", "b"]"#);
    assert_eq!(code(&mmf(&["generate", "--model", &m, "--tokens", &t, "--detokenize", &short])), 3);
    let notjson = write(dir.path(), "nj.json", "{");
    assert_eq!(code(&mmf(&["generate", "--model", &m, "--tokens", &t, "--detokenize", &notjson])), 3);
}

#[test]
fn prefill_json_reports_counters() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--d", "16", "--vocab", "32"]);
    let t = write(dir.path(), "t.txt", "1 2 3 4 5 6 7 8");
    let o = mmf(&["prefill", "--model", &m, "--tokens", &t, "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["tokens"], 8);
    assert!(v["accumulates"].as_u64().unwrap() > 0);
}

#[test]
fn bench_rejects_empty_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &[]);
    assert_eq!(code(&mmf(&["bench", "--model", &m, "--mode", "prefill", "--seq-len", "0"])), 3);
}

fn bench_tps(m: &str, mode: &str) -> f64 {
    let o = mmf(&["bench", "--model", m, "--mode", mode, "--seq-len", "256"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    v["host"]["tokens_per_s"].as_f64().unwrap()
}

#[test]
fn generate_throughput_does_not_exceed_prefill() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--d", "64", "--blocks", "2", "--vocab", "256"]);
    // alternate runs so both modes see the same machine load
    let (mut pre, mut gen) = (0f64, 0f64);
    for _ in 0..4 {
        pre = pre.max(bench_tps(&m, "prefill"));
        gen = gen.max(bench_tps(&m, "generate"));
    }
    assert!(gen <= pre * 1.05, "generate {gen} tok/s vs prefill {pre} tok/s");
}

#[test]
fn bench_projection_matches_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &[]);
    let sig3 = |x: f64| {
        let f = 10f64.powi(2 - x.abs().log10().floor() as i32);
        (x * f).round() / f
    };
    for (file, gen_tps, gen_mj, pre_tps, pre_mj) in
        [("loihi2_24chip.json", 41.5, 405.0, 6630.0, 3.7), ("loihi2_1chip.json", 71.3, 59.0, 14000.0, 2.8)]
    {
        let p = profiles().join(file).to_string_lossy().into_owned();
        let o = mmf(&["bench", "--model", &m, "--mode", "prefill", "--seq-len", "4", "--profile", &p]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        let get = |mode: &str, k: &str| v["projection"][mode][k].as_f64().unwrap();
        assert_eq!(sig3(get("generate", "tokens_per_s")), gen_tps);
        assert_eq!(sig3(get("generate", "energy_mj_per_token")), gen_mj);
        assert_eq!(sig3(get("prefill", "tokens_per_s")), pre_tps);
        assert_eq!(sig3(get("prefill", "energy_mj_per_token")), pre_mj);

        let o = mmf(&["bench", "--model", &m, "--mode", "generate", "--seq-len", "4", "--profile", &p, "--format", "csv"]);
        let text = stdout(&o);
        assert!(text.starts_with("source,mode,tokens_per_s"));
        assert_eq!(text.lines().count(), 4);
    }
    let broken = write(dir.path(), "p.json", r#"{"name": "x"}"#);
    assert_eq!(code(&mmf(&["bench", "--model", &m, "--mode", "prefill", "--seq-len", "4", "--profile", &broken])), 3);
}

#[test]
fn inspect_reports_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--d", "64", "--blocks", "2", "--vocab", "64"]);
    let o = mmf(&["inspect", "--model", &m, "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let zf = v["aggregate_zero_fraction"].as_f64().unwrap();
    assert!((0.33..=0.38).contains(&zf), "{zf}");
    assert_eq!(v["config"]["d"], 64);
    assert_eq!(v["matrices"].as_array().unwrap().len(), 2 * 7 + 1);

    let z = make(dir.path(), "z.mmfl", &["--d", "64", "--zero"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&mmf(&["inspect", "--model", &z, "--json"]))).unwrap();
    assert_eq!(v["aggregate_zero_fraction"].as_f64().unwrap(), 1.0);

    let text = stdout(&mmf(&["inspect", "--model", &m]));
    assert!(text.contains("aggregate zero fraction"));
}

#[test]
fn selfcheck_passes_and_locates_perturbation() {
    let o = mmf(&["selfcheck", "--random", "16,2,3", "--steps", "32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("PASS"));

    let o = mmf(&["selfcheck", "--random", "16,2,3", "--steps", "32", "--perturb", "5,1,3"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("MISMATCH step 5 site blocks.1.mlgru.hidden channel 3"), "{err}");

    assert_eq!(code(&mmf(&["selfcheck", "--random", "8,1,0", "--steps", "0"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let m = make(dir.path(), "r.mmfl", &["--d", "16", "--blocks", "2"]);
    let o = mmf(&["selfcheck", "--model", &m, "--steps", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
