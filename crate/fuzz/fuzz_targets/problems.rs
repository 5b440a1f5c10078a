#![no_main]

use ibtpo::env::{extract_answer, parse_problems, split_steps, verify_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let steps = split_steps(&text, "\n\n");
    assert!(steps.iter().all(|s| !s.is_empty()));
    let _ = extract_answer(&text);
    if let Ok(problems) = parse_problems(&text) {
        for p in &problems {
            let r = verify_text(&p.prompt, false, p).value();
            assert!((0.0..=1.0).contains(&r));
            assert_eq!(verify_text(&p.prompt, true, p).value(), 0.0);
        }
    }
});
