//! Line-oriented UTF-8 corpus file.
//!
//! ```text
//! shiftlab-corpus 1
//! seed <u64>
//! entities <n>
//! attributes <n>
//! vocab <count>
//! <id>\t<word>\t<s|f|c>            (count lines, ids 0..count in order)
//! records <count>
//! <entity>\t<attribute>\t<question>\t<rephrased>\t<answer>\t<i,j,...>
//! split <count>
//! <entity>\t<forget|neighbour|general>
//! ```
//!
//! Fact indices are word positions inside the answer. Serialization is
//! canonical, so `parse(text).to_text() == text` for every file this module
//! writes.

use std::path::Path;

use super::{Category, Corpus, FactRecord, Split, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &str = "shiftlab-corpus 1";

impl Corpus {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("entities {}\n", self.n_entities));
        out.push_str(&format!("attributes {}\n", self.n_attributes));
        out.push_str(&format!("vocab {}\n", self.vocab.len()));
        for (id, word, cat) in self.vocab.iter() {
            out.push_str(&format!("{id}\t{word}\t{}\n", cat.code()));
        }
        out.push_str(&format!("records {}\n", self.records.len()));
        for r in &self.records {
            let facts: Vec<String> = r.fact_positions.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.entity_id,
                r.attribute,
                r.question,
                r.rephrased,
                r.answer,
                facts.join(",")
            ));
        }
        out.push_str(&format!("split {}\n", self.split.len()));
        for (e, s) in self.split.iter().enumerate() {
            out.push_str(&format!("{e}\t{s}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Corpus> {
        let mut lines = Lines { inner: text.lines().enumerate(), last: 0 };
        let magic = lines.next_line()?;
        if magic != MAGIC {
            return Err(lines.err(format!("expected `{MAGIC}`, found `{magic}`")));
        }
        let seed = lines.header("seed")?;
        let n_entities = lines.header("entities")? as usize;
        let n_attributes = lines.header("attributes")? as usize;

        let n_vocab = lines.header("vocab")? as usize;
        let mut entries = Vec::with_capacity(n_vocab);
        for expected in 0..n_vocab {
            let line = lines.next_line()?;
            let f = fields(line, 3).ok_or_else(|| lines.err("vocabulary lines need 3 fields"))?;
            if f[0].parse::<usize>().ok() != Some(expected) {
                return Err(lines.err(format!("expected vocabulary id {expected}")));
            }
            let cat = Category::from_code(f[2]).ok_or_else(|| lines.err(format!("bad category `{}`", f[2])))?;
            entries.push((f[1].to_string(), cat));
        }
        let vocab = Vocabulary::from_entries(entries).map_err(|e| lines.err(e.to_string()))?;

        let n_records = lines.header("records")? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let line = lines.next_line()?;
            let f = fields(line, 6).ok_or_else(|| lines.err("record lines need 6 fields"))?;
            let entity_id = f[0].parse().map_err(|_| lines.err(format!("bad entity id `{}`", f[0])))?;
            let fact_positions = f[5]
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| lines.err(format!("bad fact indices `{}`", f[5])))?;
            records.push(FactRecord {
                entity_id,
                attribute: f[1].to_string(),
                question: f[2].to_string(),
                rephrased: f[3].to_string(),
                answer: f[4].to_string(),
                fact_positions,
            });
        }

        let n_split = lines.header("split")? as usize;
        let mut split = Vec::with_capacity(n_split);
        for expected in 0..n_split {
            let line = lines.next_line()?;
            let f = fields(line, 2).ok_or_else(|| lines.err("split lines need 2 fields"))?;
            if f[0].parse::<usize>().ok() != Some(expected) {
                return Err(lines.err(format!("expected split entry for entity {expected}")));
            }
            split.push(Split::parse(f[1]).ok_or_else(|| lines.err(format!("unknown split `{}`", f[1])))?);
        }
        if let Some((i, extra)) = lines.inner.next() {
            return Err(Error::CorpusFormat { line: i + 1, reason: format!("trailing content `{extra}`") });
        }

        let corpus = Corpus { seed, n_entities, n_attributes, vocab, records, split };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::parse(&text)
    }
}

fn fields(line: &str, n: usize) -> Option<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    (f.len() == n).then_some(f)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(Error::CorpusFormat { line: self.last + 1, reason: "unexpected end of file".into() }),
        }
    }

    fn header(&mut self, key: &str) -> Result<u64> {
        let line = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.err(format!("expected `{key} <number>`, found `{line}`")))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::CorpusFormat { line: self.last, reason: reason.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::super::generate_corpus;
    use super::*;

    #[test]
    fn text_round_trips_exactly() {
        let c = generate_corpus(11, 30, 4).unwrap();
        let text = c.to_text();
        let back = Corpus::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = generate_corpus(11, 5, 2).unwrap().to_text();
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Corpus::parse(&cut), Err(Error::CorpusFormat { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(Corpus::parse("hello\n"), Err(Error::CorpusFormat { line: 1, .. })));
    }
}
