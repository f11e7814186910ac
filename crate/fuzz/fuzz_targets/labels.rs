#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::reports::parse_label_sets;

fuzz_target!(|data: &[u8]| {
    let _ = parse_label_sets(data);
});
