#![no_main]

use std::sync::OnceLock;

use epoa::pipeline::parse_cluster_assignments;
use epoa::trace::io::parse_trips;
use epoa::trace::Trip;
use libfuzzer_sys::fuzz_target;

// Assignments are resolved against a fixed trip set.
fn trips() -> &'static [Trip] {
    static TRIPS: OnceLock<Vec<Trip>> = OnceLock::new();
    TRIPS.get_or_init(|| parse_trips(include_str!("../corpus/parse_trips/synthetic.jsonl")).unwrap())
}

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_cluster_assignments(text, trips());
    }
});
