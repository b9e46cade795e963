#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut c = RunConfig::toy();
    if c.apply_str(text).is_ok() {
        let mut d = RunConfig::reference();
        d.apply_str(&c.to_kv().unwrap()).unwrap();
        assert_eq!(c, d);
    }
});
