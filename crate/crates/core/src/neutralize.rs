//! Profession-related gender-neutral data: filter sentences that mention a
//! profession, emit each together with its gender-swapped counterpart, and
//! report balance statistics and swap-risk warnings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{token_spans, ProfessionLexicon};

const DEFAULT_SWAPS: &str = include_str!("../data/swap_lexicon.tsv");
const DEFAULT_WATCHLIST: &str = include_str!("../data/rare_gendered_nouns.txt");

/// Bidirectional gendered-term pairs. `counterpart` is an involution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapLexicon {
    pairs: Vec<(String, String)>,
    counterpart: HashMap<String, String>,
}

impl SwapLexicon {
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut out = Vec::new();
        let mut counterpart = HashMap::new();
        for (a, b) in pairs {
            let a = a.as_ref().trim().to_lowercase();
            let b = b.as_ref().trim().to_lowercase();
            if a.is_empty() || b.is_empty() || a == b {
                return Err(Error::Input(format!("invalid swap pair {a:?} / {b:?}")));
            }
            for term in [&a, &b] {
                if token_spans(term).len() != 1 {
                    return Err(Error::Input(format!("swap term {term:?} is not a single token")));
                }
                if counterpart.contains_key(term) {
                    return Err(Error::Input(format!("swap term {term:?} appears in two pairs")));
                }
            }
            counterpart.insert(a.clone(), b.clone());
            counterpart.insert(b.clone(), a.clone());
            out.push((a, b));
        }
        Ok(Self {
            pairs: out,
            counterpart,
        })
    }

    /// Two tab-separated columns per line; `#` lines and blanks ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (number, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Input(format!(
                        "swap lexicon line {} must have two tab-separated columns",
                        number + 1
                    )))
                }
            }
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The shipped stand-in list.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_SWAPS).expect("bundled swap lexicon is valid")
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn counterpart(&self, term: &str) -> Option<&str> {
        self.counterpart.get(term).map(String::as_str)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.counterpart.contains_key(term)
    }

    /// Replaces every whole token found in the lexicon by its counterpart,
    /// carrying over the casing class; every other byte is copied as is.
    pub fn swap(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len() + 8);
        let mut cursor = 0;
        for span in token_spans(text) {
            let token = &text[span.clone()];
            let lower = token.to_lowercase();
            if let Some(other) = self.counterpart(&lower) {
                out.push_str(&text[cursor..span.start]);
                out.push_str(&apply_case(token, other));
                cursor = span.end;
            }
        }
        out.push_str(&text[cursor..]);
        out
    }
}

/// "He"→"She", "HE"→"SHE", "he"→"she"; anything else → lowercase.
fn apply_case(source: &str, replacement: &str) -> String {
    let has_upper = source.chars().any(char::is_uppercase);
    if !has_upper {
        return replacement.to_string();
    }
    let mut chars = source.chars();
    let first = chars.next().expect("non-empty token");
    let rest_lower = chars.clone().all(|c| !c.is_uppercase());
    let all_upper = source.chars().count() > 1 && source.chars().all(|c| !c.is_lowercase());
    if first.is_uppercase() && rest_lower {
        let mut rc = replacement.chars();
        match rc.next() {
            Some(c) => c.to_uppercase().chain(rc).collect(),
            None => String::new(),
        }
    } else if all_upper {
        replacement.to_uppercase()
    } else {
        replacement.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    Swapped,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "ORIGINAL",
            Origin::Swapped => "SWAPPED",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ORIGINAL" => Ok(Origin::Original),
            "SWAPPED" => Ok(Origin::Swapped),
            other => Err(Error::Input(format!("unknown record origin {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub text: String,
    pub origin: Origin,
    /// 1-based line number in the input corpus.
    pub source_line: usize,
    pub professions_found: Vec<String>,
}

impl SentenceRecord {
    /// `origin<TAB>source_line<TAB>text`
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.origin, self.source_line, self.text)
    }

    /// Parses a dataset line; `professions_found` is recomputed from the text.
    pub fn parse_line(line: &str, lexicon: &ProfessionLexicon) -> Result<Self> {
        let mut cols = line.splitn(3, '\t');
        let (Some(origin), Some(source), Some(text)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Input(format!("malformed dataset line {line:?}")));
        };
        let source_line = source
            .parse()
            .map_err(|_| Error::Input(format!("bad source line number {source:?}")))?;
        Ok(Self {
            text: text.to_string(),
            origin: origin.parse()?,
            source_line,
            professions_found: professions_in(text, lexicon),
        })
    }
}

/// Distinct professions of `text` in order of first appearance, matched as
/// whole tokens without regard to case.
pub fn professions_in(text: &str, lexicon: &ProfessionLexicon) -> Vec<String> {
    let mut found: Vec<String> = Vec::new();
    for span in token_spans(text) {
        let token = text[span].to_lowercase();
        if lexicon.contains(&token) && !found.contains(&token) {
            found.push(token);
        }
    }
    found
}

/// Streams the lines that mention at least one profession.
pub fn filter_profession_sentences<'a, I>(
    lines: I,
    lexicon: &'a ProfessionLexicon,
) -> impl Iterator<Item = Result<SentenceRecord>> + 'a
where
    I: IntoIterator<Item = Result<String>>,
    I::IntoIter: 'a,
{
    lines.into_iter().enumerate().filter_map(move |(index, line)| {
        let text = match line {
            Ok(text) => text,
            Err(err) => return Some(Err(err)),
        };
        let professions_found = professions_in(&text, lexicon);
        (!professions_found.is_empty()).then(|| {
            Ok(SentenceRecord {
                text,
                origin: Origin::Original,
                source_line: index + 1,
                professions_found,
            })
        })
    })
}

/// Line reader whose I/O errors carry the path and 1-based line number.
pub fn read_lines<'a, R: BufRead + 'a>(reader: R, path: &'a Path) -> impl Iterator<Item = Result<String>> + 'a {
    reader.lines().enumerate().map(move |(index, line)| {
        line.map(|l| l.trim_end_matches('\r').to_string())
            .map_err(|e| Error::io_at_line(path, index + 1, e))
    })
}

pub fn in_memory<S: AsRef<str>>(lines: &[S]) -> impl Iterator<Item = Result<String>> + '_ {
    lines.iter().map(|l| Ok(l.as_ref().to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BalanceStats {
    /// Whole-token occurrences of every lexicon term, keyed by lowercase term.
    pub term_counts: BTreeMap<String, usize>,
    /// Output records mentioning each profession.
    pub profession_counts: BTreeMap<String, usize>,
    pub total_records: usize,
    pub filtered_sentences: usize,
}

impl BalanceStats {
    fn new(swaps: &SwapLexicon, lexicon: &ProfessionLexicon) -> Self {
        Self {
            term_counts: swaps
                .pairs()
                .iter()
                .flat_map(|(a, b)| [a.clone(), b.clone()])
                .map(|t| (t, 0))
                .collect(),
            profession_counts: lexicon.professions().iter().map(|p| (p.clone(), 0)).collect(),
            total_records: 0,
            filtered_sentences: 0,
        }
    }

    fn observe(&mut self, record: &SentenceRecord) {
        self.total_records += 1;
        for span in token_spans(&record.text) {
            let token = record.text[span].to_lowercase();
            if let Some(count) = self.term_counts.get_mut(&token) {
                *count += 1;
            }
        }
        for profession in &record.professions_found {
            *self.profession_counts.entry(profession.clone()).or_default() += 1;
        }
    }

    /// Pairs whose two sides were counted a different number of times.
    pub fn imbalanced_pairs(&self, swaps: &SwapLexicon) -> Vec<(String, String)> {
        swaps
            .pairs()
            .iter()
            .filter(|(a, b)| self.term_counts.get(a) != self.term_counts.get(b))
            .cloned()
            .collect()
    }

    /// `term<TAB>count` lines in sections, with a totals footer.
    pub fn to_report(&self, swaps: &SwapLexicon, swaps_source: &str) -> String {
        let mut out = format!("# swaps: {swaps_source}\n# gendered term counts\n");
        for (a, b) in swaps.pairs() {
            for term in [a, b] {
                out.push_str(&format!("{term}\t{}\n", self.term_counts.get(term).copied().unwrap_or(0)));
            }
        }
        out.push_str("# profession sentence counts\n");
        for (profession, count) in &self.profession_counts {
            out.push_str(&format!("{profession}\t{count}\n"));
        }
        out.push_str("# totals\n");
        out.push_str(&format!("total_records\t{}\n", self.total_records));
        out.push_str(&format!("filtered_sentences\t{}\n", self.filtered_sentences));
        out
    }
}

/// Emits `ORIGINAL` then `SWAPPED` for every filtered sentence, writing the
/// dataset to `out` as it goes.
pub fn augment<I, W>(lines: I, lexicon: &ProfessionLexicon, swaps: &SwapLexicon, out: &mut W) -> Result<BalanceStats>
where
    I: IntoIterator<Item = Result<String>>,
    W: Write,
{
    augment_with(lines, lexicon, swaps, |record| {
        writeln!(out, "{}", record.to_line()).map_err(|e| Error::io("<dataset>", e))
    })
}

/// In-memory variant of [`augment`].
pub fn augment_records<I>(lines: I, lexicon: &ProfessionLexicon, swaps: &SwapLexicon) -> Result<(Vec<SentenceRecord>, BalanceStats)>
where
    I: IntoIterator<Item = Result<String>>,
{
    let mut records = Vec::new();
    let stats = augment_with(lines, lexicon, swaps, |record| {
        records.push(record.clone());
        Ok(())
    })?;
    Ok((records, stats))
}

fn augment_with<I>(
    lines: I,
    lexicon: &ProfessionLexicon,
    swaps: &SwapLexicon,
    mut sink: impl FnMut(&SentenceRecord) -> Result<()>,
) -> Result<BalanceStats>
where
    I: IntoIterator<Item = Result<String>>,
{
    let mut stats = BalanceStats::new(swaps, lexicon);
    for record in filter_profession_sentences(lines, lexicon) {
        let original = record?;
        let swapped = SentenceRecord {
            text: swaps.swap(&original.text),
            origin: Origin::Swapped,
            source_line: original.source_line,
            professions_found: original.professions_found.clone(),
        };
        stats.filtered_sentences += 1;
        for rec in [&original, &swapped] {
            stats.observe(rec);
            sink(rec)?;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskWarning {
    pub source_line: usize,
    pub nouns: Vec<String>,
    pub text: String,
}

/// Rare gendered nouns the swap lexicon does not cover. Terms that the
/// given lexicon does cover are dropped, since those are swapped together
/// with the pronouns.
pub fn watchlist(text: &str, swaps: &SwapLexicon) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|w| !w.is_empty() && !swaps.contains(w))
        .collect()
}

pub fn builtin_watchlist(swaps: &SwapLexicon) -> HashSet<String> {
    watchlist(DEFAULT_WATCHLIST, swaps)
}

/// Swapped records that contain a watchlist noun alongside swapped terms:
/// candidates for a pronoun that no longer agrees with the noun.
pub fn grammar_risk_scan(records: &[SentenceRecord], swaps: &SwapLexicon, watch: &HashSet<String>) -> Vec<RiskWarning> {
    records
        .iter()
        .filter(|r| r.origin == Origin::Swapped)
        .filter_map(|record| {
            let tokens: Vec<String> = token_spans(&record.text)
                .into_iter()
                .map(|s| record.text[s].to_lowercase())
                .collect();
            if !tokens.iter().any(|t| swaps.contains(t)) {
                return None;
            }
            let mut nouns: Vec<String> = tokens.iter().filter(|t| watch.contains(*t)).cloned().collect();
            nouns.dedup();
            (!nouns.is_empty()).then(|| RiskWarning {
                source_line: record.source_line,
                nouns,
                text: record.text.clone(),
            })
        })
        .collect()
}

/// `source_line<TAB>nouns<TAB>text` per warning.
pub fn warnings_report(warnings: &[RiskWarning]) -> String {
    warnings
        .iter()
        .map(|w| format!("{}\t{}\t{}\n", w.source_line, w.nouns.join(","), w.text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nurse_lexicon() -> ProfessionLexicon {
        ProfessionLexicon::parse("nurse\n").unwrap().0
    }

    #[test]
    fn filter_keeps_whole_token_matches_only() {
        let lexicon = nurse_lexicon();
        let lines = ["the sky is blue", "the nurse arrived", "nursery rhymes"];
        let records: Vec<SentenceRecord> = filter_profession_sentences(in_memory(&lines), &lexicon)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].professions_found, ["nurse"]);
        assert_eq!(records[0].source_line, 2);
    }

    #[test]
    fn filter_matches_case_insensitively() {
        let lexicon = nurse_lexicon();
        let lines = ["The NURSE left"];
        let n = filter_profession_sentences(in_memory(&lines), &lexicon).count();
        assert_eq!(n, 1);
    }

    #[test]
    fn swap_examples() {
        let swaps = SwapLexicon::builtin();
        assert_eq!(swaps.swap("He said she was a nurse"), "She said he was a nurse");
        assert_eq!(swaps.swap("the book is on the table"), "the book is on the table");
        assert_eq!(swaps.swap("HE and his uncle."), "SHE and hers aunt.");
        assert_eq!(swaps.swap("  spaced\the\t "), "  spaced\tshe\t ");
        assert_eq!(swaps.swap("hE"), "she");
    }

    #[test]
    fn lexicon_rejects_overlapping_pairs() {
        assert!(SwapLexicon::from_pairs([("he", "she"), ("she", "they")]).is_err());
        assert!(SwapLexicon::from_pairs([("he", "he")]).is_err());
        assert!(SwapLexicon::parse("he\tshe\textra\n").is_err());
    }

    #[test]
    fn builtin_lexicon_is_an_involution() {
        let swaps = SwapLexicon::builtin();
        assert!(swaps.pairs().len() >= 54);
        for (a, b) in swaps.pairs() {
            assert_eq!(swaps.counterpart(a), Some(b.as_str()));
            assert_eq!(swaps.counterpart(swaps.counterpart(a).unwrap()), Some(a.as_str()));
        }
    }

    #[test]
    fn augment_doubles_and_balances() {
        let lexicon = nurse_lexicon();
        let swaps = SwapLexicon::builtin();
        let lines: Vec<String> = (0..7).map(|i| format!("the nurse said he was tired {i}")).collect();
        let mut out = Vec::new();
        let stats = augment(in_memory(&lines), &lexicon, &swaps, &mut out).unwrap();
        assert_eq!(stats.total_records, 14);
        assert_eq!(stats.filtered_sentences, 7);
        assert_eq!(stats.term_counts["he"], 7);
        assert_eq!(stats.term_counts["she"], 7);
        assert!(stats.imbalanced_pairs(&swaps).is_empty());
        let text = String::from_utf8(out).unwrap();
        let first: Vec<&str> = text.lines().take(2).collect();
        assert_eq!(first[0], "ORIGINAL\t1\tthe nurse said he was tired 0");
        assert_eq!(first[1], "SWAPPED\t1\tthe nurse said she was tired 0");
    }

    #[test]
    fn spinster_sentence_is_flagged() {
        let lexicon = nurse_lexicon();
        let swaps = SwapLexicon::builtin();
        let lines = ["the nurse was a spinster and she lived alone", "the nurse was tired"];
        let (records, _) = augment_records(in_memory(&lines), &lexicon, &swaps).unwrap();
        let warnings = grammar_risk_scan(&records, &swaps, &builtin_watchlist(&swaps));
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].nouns, ["spinster"]);
        assert_eq!(warnings[0].text, "the nurse was a spinster and he lived alone");
    }

    #[test]
    fn no_watchlist_words_no_warnings() {
        let lexicon = nurse_lexicon();
        let swaps = SwapLexicon::builtin();
        let lines = ["the nurse said he was late"];
        let (records, _) = augment_records(in_memory(&lines), &lexicon, &swaps).unwrap();
        assert!(grammar_risk_scan(&records, &swaps, &builtin_watchlist(&swaps)).is_empty());
    }

    #[test]
    fn dataset_line_round_trip() {
        let lexicon = nurse_lexicon();
        let record = SentenceRecord {
            text: "the nurse\tleft".into(),
            origin: Origin::Swapped,
            source_line: 12,
            professions_found: vec!["nurse".into()],
        };
        assert_eq!(SentenceRecord::parse_line(&record.to_line(), &lexicon).unwrap(), record);
    }
}
