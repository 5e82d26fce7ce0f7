#![no_main]

use czsl::data::{parse_glove, write_glove};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(emb) = parse_glove(text) {
        assert_eq!(parse_glove(&write_glove(&emb)).unwrap(), emb);
    }
});
