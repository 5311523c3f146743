#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Some((&n, rest)) = data.split_first() {
        let _ = colmatch::embedding::decode_embed_response(rest, (n % 4) as usize, (n / 4 % 8) as usize);
    }
});
