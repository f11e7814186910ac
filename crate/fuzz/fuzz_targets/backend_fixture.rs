#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::reports::FixtureBackend;

fuzz_target!(|data: &[u8]| {
    let _ = FixtureBackend::from_json(data);
});
