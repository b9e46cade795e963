use std::path::PathBuf;

use xcache::cache::CacheBlob;
use xcache::config::RunConfig;
use xcache::store::{decode_bundle, decode_container};
use xcache::synth::from_jsonl;
use xcache::vocab::Vocab;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn binary_seeds_decode() {
    for s in seeds("container_decode") {
        decode_container(&s).unwrap();
    }
    for s in seeds("bundle_decode") {
        assert!(!decode_bundle(&s).unwrap().is_empty());
    }
    for s in seeds("cache_blob") {
        CacheBlob::from_bytes(&s).unwrap();
    }
}

#[test]
fn text_seeds_parse() {
    let v = Vocab::default();
    for s in seeds("jsonl_record") {
        from_jsonl(s.as_slice(), &v).unwrap();
    }
    for s in seeds("vocab_parse") {
        v.parse(std::str::from_utf8(&s).unwrap()).unwrap();
    }
    for s in seeds("config_lines") {
        RunConfig::toy().apply_str(std::str::from_utf8(&s).unwrap()).unwrap();
    }
    assert!(seeds("f16_bits").iter().all(|s| s.len() == 4));
}
