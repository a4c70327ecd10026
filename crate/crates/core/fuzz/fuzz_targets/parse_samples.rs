#![no_main]

use epoa::trace::io::{parse_samples, write_samples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(samples) = parse_samples(text) else { return };
    // The written form is canonical: re-reading and re-writing it is a no-op.
    let mut out = Vec::new();
    write_samples(&mut out, &samples).unwrap();
    let again = parse_samples(std::str::from_utf8(&out).unwrap()).unwrap();
    let mut out2 = Vec::new();
    write_samples(&mut out2, &again).unwrap();
    assert_eq!(out, out2);
});
