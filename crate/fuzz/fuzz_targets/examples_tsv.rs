#![no_main]

use czsl::data::tsv::parse_examples;
use czsl::vocab::ConceptVocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let vocab = ConceptVocabulary::new(
        vec!["attr0".into(), "attr1".into()],
        vec!["obj0".into(), "obj1".into()],
    )
    .unwrap();
    let _ = parse_examples(text, &vocab);
});
