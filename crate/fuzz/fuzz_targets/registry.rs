#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::reports::Registry;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Registry::parse(text);
    }
});
