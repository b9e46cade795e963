#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::vocab::Vocab;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let v = Vocab::default();
    if let Ok(ids) = v.parse(text) {
        let rendered = v.render(&ids).unwrap();
        assert_eq!(v.parse(&rendered).unwrap(), ids);
    }
});
