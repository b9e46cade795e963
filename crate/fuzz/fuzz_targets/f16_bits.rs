#![no_main]

use libfuzzer_sys::fuzz_target;
use xcache::store::{f16_decode, f16_encode};

fuzz_target!(|bits: u32| {
    let x = f32::from_bits(bits);
    let h = f16_encode(x);
    let y = f16_decode(h);
    if x.is_nan() {
        assert!(y.is_nan());
    } else {
        assert_eq!(f16_encode(y), h);
        assert_eq!(y.is_sign_negative(), x.is_sign_negative());
    }
});
