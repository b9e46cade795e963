#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::store::{decode_container, encode_container};

fuzz_target!(|data: &[u8]| {
    if let Ok((c, used)) = decode_container(data) {
        assert!(used <= data.len());
        let again = encode_container(&c.header, &c.data).expect("decoded container re-encodes");
        assert_eq!(again.len(), used);
    }
});
