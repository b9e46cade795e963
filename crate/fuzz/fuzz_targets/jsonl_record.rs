#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::synth::{from_jsonl, record_to_json};
use xcache::vocab::Vocab;

fuzz_target!(|data: &[u8]| {
    let v = Vocab::default();
    if let Ok(records) = from_jsonl(data, &v) {
        for r in &records {
            let line = record_to_json(r, &v).expect("parsed record serializes");
            let back = from_jsonl(line.as_bytes(), &v).expect("serialized record parses");
            assert_eq!(&back[0], r);
        }
    }
});
