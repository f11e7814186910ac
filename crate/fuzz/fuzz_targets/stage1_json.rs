#![no_main]
use std::sync::LazyLock;

use libfuzzer_sys::fuzz_target;
use refcharts::reports::{parse_stage1, Registry};

static REGISTRY: LazyLock<Registry> = LazyLock::new(Registry::bundled);

const REPORT: &str = "Findings:\nMultiple hypodense lesions in the liver consistent with metastases.\nThe spleen is unremarkable.\nAtherosclerotic calcification of the aorta.";

fuzz_target!(|data: &[u8]| {
    let _ = parse_stage1(data, REPORT, &REGISTRY);
});
