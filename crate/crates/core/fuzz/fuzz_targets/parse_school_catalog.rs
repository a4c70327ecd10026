#![no_main]

use epoa::trace::io::parse_school_catalog;
use epoa::trace::SchoolCatalog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schools) = parse_school_catalog(text) {
        let _ = SchoolCatalog::new(schools, 100.0);
    }
});
