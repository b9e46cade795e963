#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::cache::CacheBlob;

fuzz_target!(|data: &[u8]| {
    if let Ok(blob) = CacheBlob::from_bytes(data) {
        let _ = blob.dims();
        let _ = blob.scalar_count();
    }
});
