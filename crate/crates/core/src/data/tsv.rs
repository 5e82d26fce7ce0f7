//! Tab-separated metadata files. Each starts with a fixed header row; blank
//! lines are skipped; line numbers in errors are 1-based.

use std::fmt::Write as _;

use super::{DataError, Example, PairEntry, Split};
use crate::vocab::{Composition, ConceptVocabulary};

pub const VOCAB_HEADER: [&str; 2] = ["namespace", "name"];
pub const PAIRS_HEADER: [&str; 4] = ["attributes", "object", "status", "phases"];
pub const EXAMPLES_HEADER: [&str; 4] = ["row", "attributes", "object", "split"];

/// A data row and its line number.
pub type Row<'a> = (usize, Vec<&'a str>);

fn format_err(file: &str, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Format {
        file: file.to_string(),
        line: Some(line),
        msg: msg.into(),
    }
}

pub fn parse_rows<'a>(file: &str, text: &'a str, header: &[&str]) -> Result<Vec<Row<'a>>, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (first_no, first) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| format_err(file, 1, "missing header"))?;
    let got: Vec<&str> = first.split('\t').collect();
    if got != header {
        return Err(format_err(
            file,
            first_no,
            format!("header {got:?}, expected {header:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != header.len() {
            return Err(format_err(
                file,
                no,
                format!("{} columns, expected {}", cols.len(), header.len()),
            ));
        }
        rows.push((no, cols));
    }
    Ok(rows)
}

pub fn parse_vocab(text: &str) -> Result<ConceptVocabulary, DataError> {
    let mut attrs = Vec::new();
    let mut objs = Vec::new();
    for (no, cols) in parse_rows("vocab.tsv", text, &VOCAB_HEADER)? {
        let name = cols[1].trim();
        if name.is_empty() || name.contains(',') {
            return Err(format_err("vocab.tsv", no, format!("invalid concept name {name:?}")));
        }
        match cols[0] {
            "attr" => attrs.push(name.to_string()),
            "obj" => objs.push(name.to_string()),
            ns => return Err(format_err("vocab.tsv", no, format!("namespace {ns:?} is not attr|obj"))),
        }
    }
    ConceptVocabulary::new(attrs, objs).map_err(|e| DataError::Format {
        file: "vocab.tsv".into(),
        line: None,
        msg: e.to_string(),
    })
}

fn parse_label(
    file: &str,
    no: usize,
    attrs: &str,
    obj: &str,
    vocab: &ConceptVocabulary,
) -> Result<Composition, DataError> {
    let attrs = attrs
        .split(',')
        .map(|a| {
            vocab
                .attr_id(a.trim())
                .ok_or_else(|| format_err(file, no, format!("unknown attribute {a:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let obj = vocab
        .obj_id(obj.trim())
        .ok_or_else(|| format_err(file, no, format!("unknown object {obj:?}")))?;
    Ok(Composition { attrs, obj })
}

fn parse_split(file: &str, no: usize, s: &str) -> Result<Split, DataError> {
    s.trim()
        .parse()
        .map_err(|e: String| format_err(file, no, e))
}

pub fn parse_pairs(text: &str, vocab: &ConceptVocabulary) -> Result<Vec<(usize, PairEntry)>, DataError> {
    let file = "pairs.tsv";
    let mut out = Vec::new();
    for (no, cols) in parse_rows(file, text, &PAIRS_HEADER)? {
        let comp = parse_label(file, no, cols[0], cols[1], vocab)?;
        let seen = match cols[2].trim() {
            "seen" => true,
            "unseen" => false,
            s => return Err(format_err(file, no, format!("status {s:?} is not seen|unseen"))),
        };
        let phases = if cols[3].trim().is_empty() {
            Vec::new()
        } else {
            cols[3]
                .split(',')
                .map(|p| parse_split(file, no, p))
                .collect::<Result<Vec<_>, _>>()?
        };
        out.push((no, PairEntry { comp, seen, phases }));
    }
    Ok(out)
}

pub fn parse_examples(text: &str, vocab: &ConceptVocabulary) -> Result<Vec<(usize, Example)>, DataError> {
    let file = "examples.tsv";
    let mut out = Vec::new();
    for (no, cols) in parse_rows(file, text, &EXAMPLES_HEADER)? {
        let row = cols[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| format_err(file, no, format!("row index: {e}")))?;
        let label = parse_label(file, no, cols[1], cols[2], vocab)?;
        let split = parse_split(file, no, cols[3])?;
        out.push((no, Example { row, label, split }));
    }
    Ok(out)
}

fn attrs_field(vocab: &ConceptVocabulary, comp: &Composition) -> String {
    comp.attrs
        .iter()
        .map(|&a| vocab.attributes()[a].as_str())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_vocab(vocab: &ConceptVocabulary) -> String {
    let mut s = VOCAB_HEADER.join("\t") + "\n";
    for a in vocab.attributes() {
        writeln!(s, "attr\t{a}").unwrap();
    }
    for o in vocab.objects() {
        writeln!(s, "obj\t{o}").unwrap();
    }
    s
}

pub fn write_pairs(vocab: &ConceptVocabulary, pairs: &[PairEntry]) -> String {
    let mut s = PAIRS_HEADER.join("\t") + "\n";
    for p in pairs {
        let phases: Vec<&str> = p.phases.iter().map(|x| x.name()).collect();
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            attrs_field(vocab, &p.comp),
            vocab.objects()[p.comp.obj],
            if p.seen { "seen" } else { "unseen" },
            phases.join(",")
        )
        .unwrap();
    }
    s
}

pub fn write_examples(vocab: &ConceptVocabulary, examples: &[Example]) -> String {
    let mut s = EXAMPLES_HEADER.join("\t") + "\n";
    for e in examples {
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.row,
            attrs_field(vocab, &e.label),
            vocab.objects()[e.label.obj],
            e.split.name()
        )
        .unwrap();
    }
    s
}
