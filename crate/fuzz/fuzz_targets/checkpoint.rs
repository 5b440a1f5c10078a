#![no_main]

use ibtpo::policy::{checkpoint_from_str, checkpoint_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = checkpoint_from_str(text) {
        let again = checkpoint_from_str(&checkpoint_to_string(&params)).expect("re-parse");
        assert_eq!(again, params);
    }
});
