#![no_main]

use czsl::data::container::{decode_archive, decode_matrix, encode_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // A single record decodes only if re-encoding reproduces it exactly.
    if let Ok((m, precision)) = decode_matrix(data) {
        assert_eq!(encode_matrix(&m, precision), data);
    }
    let _ = decode_archive(data);
});
