#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::artifact::load_artifact;

fuzz_target!(|data: &[u8]| {
    let _ = load_artifact(data);
});
