#![no_main]

use epoa::metrics::{parse_optima_table, write_optima_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(table) = parse_optima_table(text) else { return };
    let mut out = Vec::new();
    write_optima_table(&mut out, table.rows()).unwrap();
    let again = parse_optima_table(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(again.rows().len(), table.rows().len());
});
