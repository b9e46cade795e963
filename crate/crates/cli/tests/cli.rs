use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 8] = [
    "--set",
    "train.total_steps=6",
    "--set",
    "train.warmup_steps=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "data.n_records=40",
];

fn xcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xcache")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xcache(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(dir: &Path, extra: &[&str]) {
    let mut args = TINY.to_vec();
    args.extend(["train", "--out", p(dir)]);
    args.extend(extra);
    ok(&args);
}

#[test]
fn unknown_key_is_named_and_exits_2() {
    let out = xcache(&["--set", "train.no_such_key=3", "cache", "sizes"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.no_such_key"));
}

#[test]
fn malformed_override_exits_2() {
    assert_eq!(code(&xcache(&["--set", "seed", "cache", "sizes"])), 2);
}

#[test]
fn reference_sizes_table() {
    let out = ok(&["--preset", "reference", "cache", "sizes"]);
    for bytes in ["524288", "262144", "8192", "1536"] {
        assert!(out.contains(bytes), "{bytes} missing from\n{out}");
    }
}

#[test]
fn bench_load_needs_more_reps_than_discards() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = dir.path().join("blobs");
    let out = xcache(&["bench-load", "--blob-dir", p(&blobs), "--out", p(dir.path()), "--reps", "10", "--discard", "10"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_attn_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["bench-attn", "--out", p(dir.path())]);
    assert!(out.contains("log-log slope uncached"));
    assert!(dir.path().join("attn_macs.csv").is_file());
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn truncated_cache_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let caches = dir.path().join("caches");
    train(&model, &[]);
    let mut args = TINY.to_vec();
    args.extend(["cache", "build", "--model", p(&model), "--out", p(&caches)]);
    ok(&args);

    let file = caches.join("rec_000000.xcc");
    assert!(ok(&["cache", "inspect", p(&file)]).contains("checksum   ok"));
    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(code(&xcache(&["cache", "inspect", p(&file)])), 3);
    std::fs::write(&file, &bytes[..10]).unwrap();
    assert_eq!(code(&xcache(&["cache", "inspect", p(&file)])), 3);
}

#[test]
fn cached_eval_matches_uncached() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let caches = dir.path().join("caches");
    train(&model, &[]);
    let mut build = TINY.to_vec();
    build.extend(["cache", "build", "--model", p(&model), "--out", p(&caches)]);
    ok(&build);

    let eval = |out: &Path, cached: bool| {
        let mut args = TINY.to_vec();
        args.extend(["eval", "--model", p(&model), "--out", p(out)]);
        if cached {
            args.extend(["--cache-dir", p(&caches), "--use-cache"]);
        }
        ok(&args);
        std::fs::read_to_string(out.join("eval.csv")).unwrap()
    };
    let plain = eval(&dir.path().join("plain"), false);
    let cached = eval(&dir.path().join("cached"), true);
    assert_eq!(plain, cached);
    assert!(plain.contains("with_context"), "{plain}");

    let x = dir.path().join("x");
    let mut args = TINY.to_vec();
    args.extend(["eval", "--model", p(&model), "--out", p(&x), "--use-cache"]);
    assert_eq!(code(&xcache(&args)), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, half, resumed) = (dir.path().join("full"), dir.path().join("half"), dir.path().join("resumed"));
    train(&full, &[]);
    train(&half, &["--steps", "3"]);
    train(&resumed, &["--resume", p(&half)]);
    for f in ["weights.xcc", "train_log.csv"] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(resumed.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn data_command_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--set", "data.n_records=30", "data", "--out", p(dir.path())]);
    assert!(out.contains("27 train, 3 valid"), "{out}");
    let text = std::fs::read_to_string(dir.path().join("valid.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
}
