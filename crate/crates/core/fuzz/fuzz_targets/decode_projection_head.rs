#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(head) = colmatch::finetune::ProjectionHead::decode(data) {
        assert_eq!(colmatch::finetune::ProjectionHead::decode(&head.encode()).unwrap().encode(), head.encode());
    }
});
