//! Word-level tokenizer, vocabulary, profession lexicon and the routing
//! table that sends profession ids to their prompt rows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]"];

/// Byte ranges of the tokens of `text`: maximal alphanumeric runs, and every
/// other non-whitespace character on its own.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            spans.push(start..i);
        }
        if !ch.is_whitespace() {
            spans.push(i..i + ch.len_utf8());
        }
    }
    if let Some(start) = word_start {
        spans.push(start..text.len());
    }
    spans
}

/// Lowercased, NFC-normalised tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let text: String = text.nfc().collect();
    token_spans(&text)
        .into_iter()
        .map(|span| text[span].to_lowercase())
        .collect()
}

/// Canonical form of a line: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

pub fn is_special(id: usize) -> bool {
    id < SPECIALS.len()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every token seen at least `min_freq` times,
    /// ordered by descending frequency and then lexicographically.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for token in tokenize(line.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(token, count)| *count >= min_freq && !SPECIALS.contains(&token.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(token, _)| token))
                .collect(),
        )
    }

    /// Token list where position = id. The specials must lead in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Input(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary token {token:?} at id {id}")));
            }
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One token per line; line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    /// `[CLS] tokens… [SEP]`, truncated to `max_seq_len` ids in total.
    pub fn encode(&self, text: &str, max_seq_len: usize) -> Vec<usize> {
        self.wrap(tokenize(text).iter().map(|t| self.lookup(t)), max_seq_len)
    }

    pub(crate) fn wrap(&self, ids: impl Iterator<Item = usize>, max_seq_len: usize) -> Vec<usize> {
        let budget = max_seq_len.max(2) - 2;
        let mut out = vec![CLS];
        out.extend(ids.take(budget));
        out.push(SEP);
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != CLS && id != SEP && id != PAD)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ordered single-token professions; slot `k` is the profession's prompt row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfessionLexicon {
    professions: Vec<String>,
    slots: HashMap<String, usize>,
}

/// Outcome of loading a lexicon: entries dropped because they are not a
/// single token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LexiconWarnings {
    pub multi_token: Vec<String>,
}

impl LexiconWarnings {
    pub fn is_empty(&self) -> bool {
        self.multi_token.is_empty()
    }
}

impl std::fmt::Display for LexiconWarnings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "skipped {} multi-token profession(s): {}",
            self.multi_token.len(),
            self.multi_token.join(", ")
        )
    }
}

impl ProfessionLexicon {
    pub fn from_words<I, S>(words: I) -> Result<(Self, LexiconWarnings)>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut professions = Vec::new();
        let mut slots = HashMap::new();
        let mut warnings = LexiconWarnings::default();
        for word in words {
            let word = word.as_ref().trim();
            if word.is_empty() {
                continue;
            }
            let tokens = tokenize(word);
            if tokens.len() != 1 {
                warnings.multi_token.push(word.to_string());
                continue;
            }
            let token = tokens.into_iter().next().expect("one token");
            if slots.insert(token.clone(), professions.len()).is_some() {
                return Err(Error::Input(format!("duplicate profession {token:?}")));
            }
            professions.push(token);
        }
        if professions.is_empty() {
            return Err(Error::Input("profession lexicon is empty".into()));
        }
        Ok((Self { professions, slots }, warnings))
    }

    /// One profession per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<(Self, LexiconWarnings)> {
        Self::from_words(text.lines().map(|line| line.split('#').next().unwrap_or("")))
    }

    pub fn load(path: &Path) -> Result<(Self, LexiconWarnings)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.professions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.professions.is_empty()
    }

    pub fn slot(&self, profession: &str) -> Option<usize> {
        self.slots.get(profession).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.slots.contains_key(token)
    }

    pub fn professions(&self) -> &[String] {
        &self.professions
    }

    pub fn to_file_string(&self) -> String {
        let mut out = self.professions.join("\n");
        out.push('\n');
        out
    }

    /// Every profession must be a vocabulary entry.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let missing: Vec<&str> = self
            .professions
            .iter()
            .filter(|p| vocab.id(p).is_none())
            .map(String::as_str)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(format!("professions missing from vocabulary: {}", missing.join(", "))))
        }
    }
}

/// Original id → effective embedding row. Identity off the profession set;
/// profession in slot `k` goes to `n + k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    rows: Vec<usize>,
    slot_ids: Vec<usize>,
}

impl RoutingTable {
    pub fn identity(vocab_size: usize) -> Self {
        Self {
            rows: (0..vocab_size).collect(),
            slot_ids: Vec::new(),
        }
    }

    pub fn build(vocab: &Vocab, lexicon: &ProfessionLexicon) -> Result<Self> {
        lexicon.check_vocab(vocab)?;
        let ids: Vec<usize> = lexicon
            .professions()
            .iter()
            .map(|p| vocab.id(p).expect("checked"))
            .collect();
        Self::from_slot_ids(vocab.len(), ids)
    }

    pub fn from_slot_ids(vocab_size: usize, slot_ids: Vec<usize>) -> Result<Self> {
        let mut rows: Vec<usize> = (0..vocab_size).collect();
        let mut seen = HashSet::new();
        for (slot, &id) in slot_ids.iter().enumerate() {
            if id >= vocab_size || is_special(id) || !seen.insert(id) {
                return Err(Error::Input(format!("invalid profession id {id} for slot {slot}")));
            }
            rows[id] = vocab_size + slot;
        }
        Ok(Self { rows, slot_ids })
    }

    /// `n`.
    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    /// `m`.
    pub fn prompt_rows(&self) -> usize {
        self.slot_ids.len()
    }

    /// Original vocabulary id of each slot.
    pub fn slot_ids(&self) -> &[usize] {
        &self.slot_ids
    }

    pub fn is_routed(&self, id: usize) -> bool {
        self.rows.get(id).is_some_and(|&row| row != id)
    }

    pub fn route_id(&self, id: usize) -> Result<usize> {
        self.rows.get(id).copied().ok_or_else(|| {
            Error::Range(format!("token id {id} outside vocabulary of {}", self.rows.len()))
        })
    }

    pub fn route(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.route_id(id)).collect()
    }

    /// Output columns (`n + m`) whose logits are forced to `-inf`: the
    /// original rows of routed professions.
    pub fn masked_columns(&self) -> Vec<bool> {
        let mut masked = vec![false; self.rows.len() + self.slot_ids.len()];
        for &id in &self.slot_ids {
            masked[id] = true;
        }
        masked
    }
}

/// Frequency table, used for unigram baselines.
pub fn unigram_counts<I, S>(vocab: &Vocab, lines: I) -> BTreeMap<usize, usize>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = BTreeMap::new();
    for line in lines {
        for token in tokenize(line.as_ref()) {
            *counts.entry(vocab.lookup(&token)).or_default() += 1;
        }
    }
    counts
}
