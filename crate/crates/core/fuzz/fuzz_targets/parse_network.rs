#![no_main]

use epoa::simgame::{parse_network, write_network};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok((net, demands)) = parse_network(text) else {
        return;
    };
    let written = write_network(&net, &demands);
    let (again, again_demands) = parse_network(&written).unwrap();
    assert_eq!(write_network(&again, &again_demands), written);
});
