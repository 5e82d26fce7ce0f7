#![no_main]

use czsl::data::tsv::{parse_vocab, write_vocab};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(v) = parse_vocab(text) {
        assert_eq!(parse_vocab(&write_vocab(&v)).unwrap(), v);
    }
});
