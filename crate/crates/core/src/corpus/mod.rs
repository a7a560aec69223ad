//! Deterministic synthetic fact corpus: fictitious authors, one QA record per
//! (entity, attribute), a closed word-level vocabulary, and a forget /
//! neighbour / general split over entities.

mod format;
mod templates;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use templates::{ATTRIBUTES, AWARDS, CITIES, FIRST_NAMES, GENRES, PROFESSIONS};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Lexical category of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Special,
    /// Template word (determiner, verb, preposition, punctuation).
    Function,
    /// Slot filler: a name or an attribute value.
    Content,
}

impl Category {
    fn code(self) -> char {
        match self {
            Category::Special => 's',
            Category::Function => 'f',
            Category::Content => 'c',
        }
    }

    fn from_code(c: &str) -> Option<Self> {
        match c {
            "s" => Some(Category::Special),
            "f" => Some(Category::Function),
            "c" => Some(Category::Content),
            _ => None,
        }
    }
}

/// Bijection between words and contiguous ids, with a lexical category per id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    categories: Vec<Category>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, Category)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (w, _)) in entries.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if entries.get(i).map(|(w, c)| (w.as_str(), *c)) != Some((s, Category::Special)) {
                return Err(Error::invalid(format!("vocabulary id {i} must be the special token {s}")));
            }
        }
        let (words, categories) = entries.into_iter().unzip();
        Ok(Vocabulary { words, categories, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn category(&self, id: TokenId) -> Option<Category> {
        self.categories.get(id as usize).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str, Category)> {
        self.words.iter().zip(&self.categories).enumerate().map(|(i, (w, &c))| (i as TokenId, w.as_str(), c))
    }

    pub fn encode_words(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))).collect()
    }

    /// Words for `ids`, with special tokens skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&t| self.category(t).is_some_and(|c| c != Category::Special))
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Like [`Vocabulary::decode`] but keeps special tokens, for labelling.
    pub fn label(&self, id: TokenId) -> String {
        self.word(id).map_or_else(|| format!("#{id}"), str::to_string)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Neighbour,
    General,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Forget, Split::Neighbour, Split::General];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Neighbour => "neighbour",
            Split::General => "general",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forget" => Some(Split::Forget),
            "neighbour" => Some(Split::Neighbour),
            "general" => Some(Split::General),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token ids with the index separating prompt from completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub boundary: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The completion ids after the boundary.
    pub fn completion(&self) -> &[TokenId] {
        &self.ids[(self.boundary + 1).min(self.ids.len())..]
    }
}

/// One QA pair about one entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactRecord {
    pub entity_id: usize,
    pub attribute: String,
    pub question: String,
    /// Alternate wording of the question, used for robustness evaluation.
    pub rephrased: String,
    pub answer: String,
    /// Word indices inside the answer that hold slot-filled values.
    pub fact_positions: Vec<usize>,
}

impl FactRecord {
    /// Token ids of the fact-bearing answer words.
    pub fn fact_tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let words: Vec<&str> = self.answer.split_whitespace().collect();
        self.fact_positions.iter().filter_map(|&i| words.get(i).and_then(|w| vocab.id(w))).collect()
    }
}

/// An assembled training/evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub record: usize,
    pub seq: TokenSequence,
    /// Absolute positions of fact tokens inside `seq`.
    pub fact_positions: Vec<usize>,
}

impl Example {
    /// `BOS question SEP`, the generation prompt.
    pub fn prompt(&self) -> TokenSequence {
        TokenSequence { ids: self.seq.ids[..=self.seq.boundary].to_vec(), boundary: self.seq.boundary }
    }

    /// Reference answer ids, without EOS.
    pub fn answer(&self) -> &[TokenId] {
        let c = self.seq.completion();
        &c[..c.len().saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub n_entities: usize,
    pub n_attributes: usize,
    pub vocab: Vocabulary,
    pub records: Vec<FactRecord>,
    /// `split[entity_id]`
    pub split: Vec<Split>,
}

/// Entity counts per split for `n` entities: 20:60:40 at 120 entities.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let forget = (n / 6).max(1);
    let neighbour = (n / 2).max(1);
    (forget, neighbour, n - forget - neighbour)
}

fn build_vocabulary(surnames: &[String]) -> Result<Vocabulary> {
    let mut entries: Vec<(String, Category)> = SPECIALS.iter().map(|s| (s.to_string(), Category::Special)).collect();
    entries.extend(templates::template_words().into_iter().map(|w| (w.to_string(), Category::Function)));
    let pools: [&[&str]; 5] = [&FIRST_NAMES, &CITIES, &PROFESSIONS, &GENRES, &AWARDS];
    for pool in pools {
        entries.extend(pool.iter().map(|w| (w.to_string(), Category::Content)));
    }
    entries.extend(surnames.iter().map(|w| (w.clone(), Category::Content)));
    Vocabulary::from_entries(entries)
}

/// Generate the corpus for `seed`. Each entity receives one record per
/// attribute; fact positions mark every slot-filled answer word.
pub fn generate_corpus(seed: u64, n_entities: usize, n_attributes: usize) -> Result<Corpus> {
    if n_entities < 3 {
        return Err(Error::invalid(format!("n_entities must be at least 3, got {n_entities}")));
    }
    if !(2..=ATTRIBUTES.len()).contains(&n_attributes) {
        return Err(Error::invalid(format!(
            "n_attributes must be between 2 and {}, got {n_attributes}",
            ATTRIBUTES.len()
        )));
    }
    if n_entities > templates::max_entities() {
        return Err(Error::invalid(format!(
            "n_entities must be at most {}, got {n_entities}",
            templates::max_entities()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut surnames = templates::surname_pool();
    surnames.shuffle(&mut rng);
    surnames.truncate(n_entities);
    let vocab = build_vocabulary(&surnames)?;

    let mut records = Vec::with_capacity(n_entities * n_attributes);
    for (entity_id, last) in surnames.iter().enumerate() {
        let pick = |rng: &mut ChaCha8Rng, pool: &[&str]| pool[rng.random_range(0..pool.len())].to_string();
        let first = pick(&mut rng, &FIRST_NAMES);
        let city = pick(&mut rng, &CITIES);
        let profession = pick(&mut rng, &PROFESSIONS);
        let genre = pick(&mut rng, &GENRES);
        let father = pick(&mut rng, &PROFESSIONS);
        let mother = pick(&mut rng, &PROFESSIONS);
        let award = pick(&mut rng, &AWARDS);
        let home = pick(&mut rng, &CITIES);
        let fill = |slot: &str| -> String {
            match slot {
                "first" => first.clone(),
                "last" => last.clone(),
                "city" => city.clone(),
                "profession" => profession.clone(),
                "genre" => genre.clone(),
                "father" => father.clone(),
                "mother" => mother.clone(),
                "award" => award.clone(),
                "home" => home.clone(),
                other => unreachable!("template slot {other} has no filler"),
            }
        };
        for attr in ATTRIBUTES.iter().take(n_attributes) {
            let (q, _) = templates::render(attr.question, &fill);
            let (r, _) = templates::render(attr.rephrased, &fill);
            let (a, slots) = templates::render(attr.answer, &fill);
            records.push(FactRecord {
                entity_id,
                attribute: attr.name.to_string(),
                question: q.join(" "),
                rephrased: r.join(" "),
                answer: a.join(" "),
                fact_positions: slots,
            });
        }
    }

    let (n_forget, n_neighbour, _) = split_sizes(n_entities);
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::General; n_entities];
    for (rank, &e) in order.iter().enumerate() {
        split[e] = if rank < n_forget {
            Split::Forget
        } else if rank < n_forget + n_neighbour {
            Split::Neighbour
        } else {
            Split::General
        };
    }

    Ok(Corpus { seed, n_entities, n_attributes, vocab, records, split })
}

/// `BOS words EOS`, boundary 0.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_words(text)?);
    ids.push(EOS);
    Ok(TokenSequence { ids, boundary: 0 })
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    vocab.decode(&seq.ids)
}

/// `BOS question SEP answer EOS` with the boundary on SEP.
pub fn assemble_example(record: &FactRecord, vocab: &Vocabulary) -> Result<TokenSequence> {
    Ok(assemble(record, &record.question, vocab)?.seq)
}

fn assemble(record: &FactRecord, question: &str, vocab: &Vocabulary) -> Result<Example> {
    let q = vocab.encode_words(question)?;
    let a = vocab.encode_words(&record.answer)?;
    let mut ids = Vec::with_capacity(q.len() + a.len() + 3);
    ids.push(BOS);
    ids.extend(q);
    let boundary = ids.len();
    ids.push(SEP);
    ids.extend(a);
    ids.push(EOS);
    let fact_positions = record.fact_positions.iter().map(|&p| boundary + 1 + p).collect();
    Ok(Example { record: 0, seq: TokenSequence { ids, boundary }, fact_positions })
}

impl Corpus {
    pub fn split_of(&self, entity_id: usize) -> Split {
        self.split[entity_id]
    }

    pub fn record_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.split[self.records[i].entity_id] == split).collect()
    }

    pub fn example(&self, record: usize) -> Result<Example> {
        let r = &self.records[record];
        let mut ex = assemble(r, &r.question, &self.vocab)?;
        ex.record = record;
        Ok(ex)
    }

    /// Same answer, alternate question wording.
    pub fn rephrased_example(&self, record: usize) -> Result<Example> {
        let r = &self.records[record];
        let mut ex = assemble(r, &r.rephrased, &self.vocab)?;
        ex.record = record;
        Ok(ex)
    }

    pub fn examples(&self, split: Split) -> Result<Vec<Example>> {
        self.record_indices(split).into_iter().map(|i| self.example(i)).collect()
    }

    pub fn all_examples(&self) -> Result<Vec<Example>> {
        (0..self.records.len()).map(|i| self.example(i)).collect()
    }

    /// Longest assembled sequence over questions and rephrasings.
    pub fn max_len(&self) -> usize {
        self.records
            .iter()
            .map(|r| {
                let q = r.question.split_whitespace().count().max(r.rephrased.split_whitespace().count());
                q + r.answer.split_whitespace().count() + 3
            })
            .max()
            .unwrap_or(0)
    }

    /// Check the structural invariants; used after parsing.
    pub fn validate(&self) -> Result<()> {
        if self.split.len() != self.n_entities {
            return Err(Error::invalid("split table does not cover every entity"));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.entity_id >= self.n_entities {
                return Err(Error::invalid(format!("record {i} names unknown entity {}", r.entity_id)));
            }
            if r.question.trim().is_empty() || r.answer.trim().is_empty() {
                return Err(Error::invalid(format!("record {i} has an empty question or answer")));
            }
            let n_answer = r.answer.split_whitespace().count();
            if r.fact_positions.is_empty() || r.fact_positions.iter().any(|&p| p >= n_answer) {
                return Err(Error::invalid(format!("record {i} has invalid fact positions")));
            }
            for text in [&r.question, &r.rephrased, &r.answer] {
                self.vocab.encode_words(text)?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized corpus, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
