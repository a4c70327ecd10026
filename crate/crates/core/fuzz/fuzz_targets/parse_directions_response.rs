#![no_main]

use epoa::metrics::directions::parse_directions_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(body) = std::str::from_utf8(data) {
        let _ = parse_directions_response(body);
    }
});
