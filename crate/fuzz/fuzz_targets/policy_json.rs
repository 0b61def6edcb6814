#![no_main]

use cfdt::policy::PolicyTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PolicyTable::from_json(text) {
        let again = PolicyTable::from_json(&p.to_json()).expect("re-parse");
        assert_eq!(again.to_json(), p.to_json());
    }
});
