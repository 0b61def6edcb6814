#![no_main]

use cfdt::dt::DecisionTransformer;
use cfdt_nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ckpt) = Checkpoint::from_json(text) else { return };
    if let Ok(model) = DecisionTransformer::<f32>::from_checkpoint(&ckpt) {
        assert_eq!(Some(model.num_parameters()), model.config().num_parameters());
    }
});
