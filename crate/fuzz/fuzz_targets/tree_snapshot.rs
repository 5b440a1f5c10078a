#![no_main]

use ibtpo::ibtree::{token_savings, tree_from_str, tree_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = tree_from_str(text) {
        let _ = token_savings(&tree);
        let again = tree_from_str(&tree_to_string(&tree)).expect("re-parse");
        assert_eq!(again, tree);
    }
});
