#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens_core::protocol::handshake;

fuzz_target!(|data: &[u8]| {
    let _ = handshake(data);
});
