#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens_core::store::parse_roofline;

fuzz_target!(|data: &[u8]| {
    let _ = parse_roofline(data);
});
