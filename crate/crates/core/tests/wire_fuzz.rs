//! Random byte lines are always classified, never crash the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracelens_core::protocol::{decode_event, encode_event, handshake};
use tracelens_core::testkit::{fuzz_line, generate, GenParams};

#[test]
fn hundred_thousand_random_lines_are_classified() {
    let valid: Vec<String> = generate(5, &GenParams { max_events: 2000, ..GenParams::default() })
        .iter()
        .map(|r| encode_event(r).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut ok, mut err) = (0, 0);
    for _ in 0..100_000 {
        let line = fuzz_line(&mut rng, &valid);
        match decode_event(&line) {
            Ok(r) => {
                ok += 1;
                // Whatever decodes must re-encode.
                let again = encode_event(&r).unwrap();
                assert_eq!(decode_event(again.trim_end().as_bytes()).unwrap(), r);
            }
            Err(e) => {
                err += 1;
                assert!(!e.code().is_empty());
            }
        }
        let _ = handshake(&line);
    }
    assert!(ok > 0 && err > 0);
}
