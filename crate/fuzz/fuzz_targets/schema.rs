#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::data::SchemaConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = SchemaConfig::from_toml(text);
    }
});
