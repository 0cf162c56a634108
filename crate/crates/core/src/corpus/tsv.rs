use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;

use super::vocab::Vocabulary;
use super::{Sentence, Triplet};
use crate::error::{ApeError, Result};

/// Triplets read from a file, with the number of tokens that were missing from
/// the vocabulary and mapped to `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedTriplets {
    pub triplets: Vec<Triplet>,
    pub unknown_tokens: usize,
}

/// Parses one line of the triplet format: `src \t mt \t pe [\t ref]`, each
/// field holding space-separated tokens.
fn parse_line(line: &str, lineno: usize, vocab: &Vocabulary, unknown: &mut usize) -> Result<Triplet> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 && fields.len() != 4 {
        return Err(ApeError::Parse {
            line: lineno,
            message: "expected 3 or 4 fields".into(),
        });
    }
    let mut sentence = |field: &str| {
        let (ids, unk) = vocab.encode(field.split_whitespace());
        *unknown += unk;
        Sentence(ids)
    };
    Ok(Triplet {
        src: sentence(fields[0]),
        mt: sentence(fields[1]),
        pe: sentence(fields[2]),
        reference: fields.get(3).map(|f| sentence(f)),
    })
}

pub fn load_triplets(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<LoadedTriplets> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ApeError::io(path, e))?;
    let mut unknown_tokens = 0;
    let triplets = text
        .lines()
        .enumerate()
        .map(|(i, line)| parse_line(line, i + 1, vocab, &mut unknown_tokens))
        .collect::<Result<Vec<_>>>()?;
    if unknown_tokens > 0 {
        warn!(
            "{}: {unknown_tokens} out-of-vocabulary tokens mapped to [UNK]",
            path.display()
        );
    }
    Ok(LoadedTriplets {
        triplets,
        unknown_tokens,
    })
}

fn join(vocab: &Vocabulary, s: &Sentence) -> String {
    vocab.decode(s).join(" ")
}

fn format_triplet(vocab: &Vocabulary, t: &Triplet) -> String {
    let mut line = format!(
        "{}\t{}\t{}",
        join(vocab, &t.src),
        join(vocab, &t.mt),
        join(vocab, &t.pe)
    );
    if let Some(r) = &t.reference {
        line.push('\t');
        line.push_str(&join(vocab, r));
    }
    line
}

pub fn save_triplets(path: impl AsRef<Path>, triplets: &[Triplet], vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for t in triplets {
        writeln!(out, "{}", format_triplet(vocab, t)).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| ApeError::io(path, e))
}

/// Appends augmentation output for inspection: the triplet columns followed
/// by a provenance column (`orig`, `ins`, `sub` or `del`).
pub fn write_pseudo_dump<'a, I>(path: impl AsRef<Path>, rows: I, vocab: &Vocabulary) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Triplet)>,
{
    let path = path.as_ref();
    let mut out = Vec::new();
    for (provenance, t) in rows {
        let ref_field = t.reference.as_ref().unwrap_or(&t.pe);
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{provenance}",
            join(vocab, &t.src),
            join(vocab, &t.mt),
            join(vocab, &t.pe),
            join(vocab, ref_field)
        )
        .expect("write to Vec");
    }
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| ApeError::io(path, e))
}
