#![no_main]

use cfdt::gridworld::GridLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(layout) = GridLayout::from_json(text) {
        // Anything accepted is valid, reachable and round-trips.
        assert!(layout.is_reachable());
        let back = GridLayout::from_json(&layout.to_json()).expect("re-parse");
        assert_eq!(back, layout);
        assert_eq!(back.id(), layout.id());
    }
});
