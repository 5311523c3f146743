#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = colmatch::retrieval::MatchList::from_json(data);
});
