#![no_main]

use epoa::trace::io::{parse_trips, write_trips};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(trips) = parse_trips(text) else { return };
    let mut out = Vec::new();
    write_trips(&mut out, &trips).unwrap();
    assert!(parse_trips(std::str::from_utf8(&out).unwrap()).is_ok());
});
