#![no_main]

use czsl::data::decode_encoder;
use libfuzzer_sys::fuzz_target;

// Input is the sidecar JSON, a zero byte, then the weight archive.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|b| *b == 0) else {
        return;
    };
    let Ok(json) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let _ = decode_encoder(&data[split + 1..], json);
});
