#![no_main]

use ibtpo::policy::remote::{parse_completion_response, step_samples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    if let Ok(completions) = parse_completion_response(body) {
        for c in &completions {
            if let Ok(steps) = step_samples(c, "\n\n") {
                for s in &steps {
                    assert!(s.geo_mean_prob > 0.0 && s.geo_mean_prob <= 1.0);
                }
            }
        }
    }
});
