#![no_main]

use cfdt::data::{parse_trajectories, Trajectory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_trajectories(data);
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Trajectory::from_json_line(text) {
        t.validate().expect("parsed trajectories are valid");
        let back = Trajectory::from_json_line(&t.to_json_line()).expect("re-parse");
        assert_eq!(back, t);
    }
});
