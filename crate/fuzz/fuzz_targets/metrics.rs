#![no_main]

use ibtpo::diagnostics::{parse_metrics_csv, parse_metrics_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_metrics_jsonl(text);
    let _ = parse_metrics_csv(text);
});
