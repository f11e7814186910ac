#![no_main]
use libfuzzer_sys::fuzz_target;
use refcharts::data::{ingest_reader, SchemaConfig};

fuzz_target!(|data: &[u8]| {
    let _ = ingest_reader(data, &SchemaConfig::default());
});
