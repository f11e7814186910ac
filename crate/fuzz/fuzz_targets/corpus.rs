#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::reports::parse_corpus;

fuzz_target!(|data: &[u8]| {
    let _ = parse_corpus(data);
});
