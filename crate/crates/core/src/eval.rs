//! Bias scores, masked coreference, perplexity and the forgetting probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::files;
use crate::model::MlmModel;
use crate::neutralize::professions_in;
use crate::tensor::softmax_into;
use crate::vocab::{is_special, tokenize, ProfessionLexicon, Vocab, CLS, MASK, SEP};

pub const PRONOUN_SLOT: &str = "PRONOUN_SLOT";
pub const PROFESSION_SLOT: &str = "PROFESSION_SLOT";

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.matches(PRONOUN_SLOT).count() != 1 || text.matches(PROFESSION_SLOT).count() != 1 {
            return Err(Error::Input(format!(
                "template needs exactly one {PRONOUN_SLOT} and one {PROFESSION_SLOT}: {text:?}"
            )));
        }
        Ok(Self { text: text.to_string() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn fill(&self, pronoun: &str, profession: &str) -> String {
        self.text.replace(PRONOUN_SLOT, pronoun).replace(PROFESSION_SLOT, profession)
    }

    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        let out: Vec<Self> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(Self::new)
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Input("no templates found".into()));
        }
        Ok(out)
    }

    pub fn load_all(path: &Path) -> Result<Vec<Self>> {
        Self::parse_all(&files::read_text(path)?)
    }
}

pub fn builtin_templates() -> Vec<Template> {
    Template::parse_all(include_str!("../data/templates.txt")).expect("built-in templates are valid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PronounPair {
    pub first: String,
    pub second: String,
}

impl Default for PronounPair {
    fn default() -> Self {
        Self {
            first: "he".into(),
            second: "she".into(),
        }
    }
}

impl PronounPair {
    pub fn swapped(&self) -> Self {
        Self {
            first: self.second.clone(),
            second: self.first.clone(),
        }
    }

    fn ids(&self, vocab: &Vocab) -> Result<(usize, usize)> {
        let get = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::Config(format!("pronoun {t:?} is not in the vocabulary")))
        };
        Ok((get(&self.first)?, get(&self.second)?))
    }
}

/// Ids for `[CLS] text [SEP]` with the single `PRONOUN_SLOT` replaced by
/// `[MASK]`; returns the ids and the mask position.
pub fn encode_masked(vocab: &Vocab, text: &str, max_seq_len: usize) -> Result<(Vec<usize>, usize)> {
    let mut parts = text.split(PRONOUN_SLOT);
    let (before, after) = match (parts.next(), parts.next(), parts.next()) {
        (Some(b), Some(a), None) => (b, a),
        _ => return Err(Error::Input(format!("expected one {PRONOUN_SLOT} in {text:?}"))),
    };
    let mut ids = vec![CLS];
    ids.extend(tokenize(before).iter().map(|t| vocab.lookup(t)));
    let position = ids.len();
    ids.push(MASK);
    ids.extend(tokenize(after).iter().map(|t| vocab.lookup(t)));
    ids.push(SEP);
    if ids.len() > max_seq_len {
        return Err(Error::Range(format!(
            "{} ids exceed max_seq_len {max_seq_len}: {text:?}",
            ids.len()
        )));
    }
    Ok((ids, position))
}

/// Logit rows at `positions[i]` of `sequences[i]`, computed in chunks.
pub fn rows_at(model: &MlmModel, sequences: &[Vec<usize>], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sequences.len());
    for (seqs, pos) in sequences.chunks(EVAL_CHUNK).zip(positions.chunks(EVAL_CHUNK)) {
        let logits = model.logits_batch(seqs)?;
        let mut start = 0;
        for (seq, &p) in seqs.iter().zip(pos) {
            out.push(logits.row(start + p).to_vec());
            start += seq.len();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasScore {
    pub profession: String,
    /// Template index, or `None` for a mean over templates.
    pub template: Option<usize>,
    pub p_first: f64,
    pub p_second: f64,
    pub score: f64,
}

fn score_row(row: &[f64], first: usize, second: usize) -> (f64, f64) {
    let mut probs = vec![0.0; row.len()];
    softmax_into(row, &mut probs);
    (probs[first], probs[second])
}

/// `P(first) - P(second)` at the masked pronoun of `template` filled with
/// `profession`.
pub fn bias_score(
    model: &MlmModel,
    vocab: &Vocab,
    profession: &str,
    template: &Template,
    pronouns: &PronounPair,
) -> Result<BiasScore> {
    let report = bias_report(model, vocab, &[profession.to_string()], std::slice::from_ref(template), pronouns)?;
    let mut score = report.per_template.into_iter().next().expect("one score");
    score.template = None;
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub pronouns: PronounPair,
    pub templates: Vec<Template>,
    /// Profession-major, template-minor.
    pub per_template: Vec<BiasScore>,
    /// Mean over templates per profession.
    pub per_profession: Vec<BiasScore>,
}

impl BiasReport {
    /// Mean over professions of |score|.
    pub fn avg_abs(&self) -> f64 {
        avg_abs(&self.per_profession)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("profession,score,P_he,P_she\n");
        for s in &self.per_profession {
            let _ = writeln!(out, "{},{},{},{}", s.profession, s.score, s.p_first, s.p_second);
        }
        out
    }

    pub fn templates_csv(&self) -> String {
        let mut out = String::from("template_index,template,profession,score,P_he,P_she\n");
        for s in &self.per_template {
            let t = s.template.expect("per-template score");
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{}",
                csv_field(self.templates[t].text()),
                s.profession,
                s.score,
                s.p_first,
                s.p_second
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "avg_abs_bias: {}\nprofessions: {}\ntemplates: {}\npronouns: {}/{}\n",
            self.avg_abs(),
            self.per_profession.len(),
            self.templates.len(),
            self.pronouns.first,
            self.pronouns.second
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn avg_abs(scores: &[BiasScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.score.abs()).sum::<f64>() / scores.len() as f64
}

/// Scores every profession under every template; per-profession values are
/// template means taken before any absolute value.
pub fn bias_report(
    model: &MlmModel,
    vocab: &Vocab,
    professions: &[String],
    templates: &[Template],
    pronouns: &PronounPair,
) -> Result<BiasReport> {
    if professions.is_empty() || templates.is_empty() {
        return Err(Error::Precondition("bias scoring needs professions and templates".into()));
    }
    let (first, second) = pronouns.ids(vocab)?;
    let max_len = model.config().max_seq_len;
    let mut sequences = Vec::new();
    let mut positions = Vec::new();
    for profession in professions {
        if vocab.id(profession).is_none() {
            return Err(Error::Lookup(format!("profession {profession:?} is not in the vocabulary")));
        }
        for template in templates {
            let text = template.text().replace(PROFESSION_SLOT, profession);
            let (ids, pos) = encode_masked(vocab, &text, max_len)?;
            sequences.push(ids);
            positions.push(pos);
        }
    }
    let rows = rows_at(model, &sequences, &positions)?;
    let mut per_template = Vec::with_capacity(rows.len());
    let mut per_profession = Vec::with_capacity(professions.len());
    for (p, profession) in professions.iter().enumerate() {
        let (mut sum_first, mut sum_second) = (0.0, 0.0);
        for t in 0..templates.len() {
            let (a, b) = score_row(&rows[p * templates.len() + t], first, second);
            sum_first += a;
            sum_second += b;
            per_template.push(BiasScore {
                profession: profession.clone(),
                template: Some(t),
                p_first: a,
                p_second: b,
                score: a - b,
            });
        }
        let k = templates.len() as f64;
        let (a, b) = (sum_first / k, sum_second / k);
        per_profession.push(BiasScore {
            profession: profession.clone(),
            template: None,
            p_first: a,
            p_second: b,
            score: a - b,
        });
    }
    Ok(BiasReport {
        pronouns: pronouns.clone(),
        templates: templates.to_vec(),
        per_template,
        per_profession,
    })
}

/// Mean |bias| over the lexicon's professions.
pub fn avg_abs_bias(
    model: &MlmModel,
    vocab: &Vocab,
    lexicon: &ProfessionLexicon,
    templates: &[Template],
    pronouns: &PronounPair,
) -> Result<f64> {
    Ok(bias_report(model, vocab, lexicon.professions(), templates, pronouns)?.avg_abs())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorefInstance {
    pub sentence: String,
    pub a: String,
    pub b: String,
    pub gold: String,
}

impl CorefInstance {
    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [sentence, a, b, gold] = fields.as_slice() else {
            return Err(Error::Input(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        if sentence.matches(PRONOUN_SLOT).count() != 1 {
            return Err(Error::Input(format!("sentence needs exactly one {PRONOUN_SLOT}")));
        }
        if gold != a && gold != b {
            return Err(Error::Input(format!("gold {gold:?} is neither candidate")));
        }
        Ok(Self {
            sentence: sentence.to_string(),
            a: a.to_string(),
            b: b.to_string(),
            gold: gold.to_string(),
        })
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.sentence, self.a, self.b, self.gold)
    }
}

pub fn parse_instances(text: &str, path: &Path) -> Result<Vec<CorefInstance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            CorefInstance::parse_line(l).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_instances(path: &Path) -> Result<Vec<CorefInstance>> {
    parse_instances(&files::read_text(path)?, path)
}

pub fn instances_to_string(instances: &[CorefInstance]) -> String {
    instances.iter().map(|i| i.to_line() + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorefPrediction {
    pub chose_a: bool,
    pub tie: bool,
    pub logit_a: f64,
    pub logit_b: f64,
}

fn candidate_column(model: &MlmModel, vocab: &Vocab, candidate: &str) -> Result<usize> {
    let tokens = tokenize(candidate);
    if tokens.len() != 1 {
        return Err(Error::Lookup(format!("candidate {candidate:?} is not a single token")));
    }
    let id = vocab
        .id(&tokens[0])
        .ok_or_else(|| Error::Lookup(format!("candidate {candidate:?} is not in the vocabulary")))?;
    model.routing().route_id(id)
}

/// Decision from a logit row: higher candidate wins, an exact tie goes to A.
/// Comparing logits is the same as comparing probabilities, since both
/// candidates share the softmax normaliser.
pub fn decide(row: &[f64], column_a: usize, column_b: usize) -> CorefPrediction {
    let (logit_a, logit_b) = (row[column_a], row[column_b]);
    CorefPrediction {
        chose_a: logit_a >= logit_b,
        tie: logit_a == logit_b,
        logit_a,
        logit_b,
    }
}

pub fn coref_predict(model: &MlmModel, vocab: &Vocab, instance: &CorefInstance) -> Result<CorefPrediction> {
    let ca = candidate_column(model, vocab, &instance.a)?;
    let cb = candidate_column(model, vocab, &instance.b)?;
    let (ids, pos) = encode_masked(vocab, &instance.sentence, model.config().max_seq_len)?;
    let row = rows_at(model, &[ids], &[pos])?.pop().expect("one row");
    Ok(decide(&row, ca, cb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorefReport {
    pub evaluated: usize,
    pub correct: usize,
    pub ties: usize,
    /// (instance index, reason) for instances that could not be scored.
    pub skipped: Vec<(usize, String)>,
    /// Per evaluated instance: (index, correct).
    pub outcomes: Vec<(usize, bool)>,
}

impl CorefReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.evaluated as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "accuracy: {}\ncorrect: {}\nevaluated: {}\nties: {}\nskipped: {}\n",
            self.accuracy(),
            self.correct,
            self.evaluated,
            self.ties,
            self.skipped.len()
        );
        for (i, reason) in &self.skipped {
            let _ = writeln!(out, "skipped_instance: {}: {reason}", i + 1);
        }
        out
    }
}

/// Accuracy over `instances`; instances with invalid candidates are
/// skipped and listed in the report.
pub fn coref_accuracy(model: &MlmModel, vocab: &Vocab, instances: &[CorefInstance]) -> Result<CorefReport> {
    if instances.is_empty() {
        return Err(Error::Precondition("coreference evaluation needs at least one instance".into()));
    }
    let mut skipped = Vec::new();
    let mut valid = Vec::new();
    let mut sequences = Vec::new();
    let mut positions = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let prepared = candidate_column(model, vocab, &inst.a).and_then(|ca| {
            let cb = candidate_column(model, vocab, &inst.b)?;
            let (ids, pos) = encode_masked(vocab, &inst.sentence, model.config().max_seq_len)?;
            Ok((ca, cb, ids, pos))
        });
        match prepared {
            Ok((ca, cb, ids, pos)) => {
                valid.push((i, ca, cb));
                sequences.push(ids);
                positions.push(pos);
            }
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    if valid.is_empty() {
        return Err(Error::Input("no coreference instance could be scored".into()));
    }
    let rows = rows_at(model, &sequences, &positions)?;
    let mut report = CorefReport {
        evaluated: valid.len(),
        correct: 0,
        ties: 0,
        skipped,
        outcomes: Vec::with_capacity(valid.len()),
    };
    for ((i, ca, cb), row) in valid.into_iter().zip(&rows) {
        let p = decide(row, ca, cb);
        let inst = &instances[i];
        let chosen = if p.chose_a { &inst.a } else { &inst.b };
        let ok = *chosen == inst.gold;
        report.correct += usize::from(ok);
        report.ties += usize::from(p.tie);
        report.outcomes.push((i, ok));
    }
    Ok(report)
}

/// Pseudo-perplexity: every non-special token is masked in turn and scored
/// with a softmax restricted to the columns where `valid[j]` holds. Tokens
/// whose own column is invalid are not scored.
pub fn pseudo_perplexity(model: &MlmModel, sequences: &[Vec<usize>], valid: &[bool]) -> Result<f64> {
    let (total, count) = pseudo_nll(model, sequences, valid)?;
    if count == 0 {
        return Err(Error::Precondition("no scorable tokens for perplexity".into()));
    }
    Ok((total / count as f64).exp())
}

fn pseudo_nll(model: &MlmModel, sequences: &[Vec<usize>], valid: &[bool]) -> Result<(f64, usize)> {
    let n = model.config().vocab_size;
    if valid.len() != n {
        return Err(Error::Shape {
            op: "pseudo_perplexity",
            lhs: vec![valid.len()],
            rhs: vec![n],
        });
    }
    let mut probes = Vec::new();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for seq in sequences {
        for (p, &id) in seq.iter().enumerate() {
            if is_special(id) || id >= n || !valid[id] {
                continue;
            }
            let mut masked = seq.clone();
            masked[p] = MASK;
            probes.push(masked);
            positions.push(p);
            targets.push(id);
        }
    }
    let rows = rows_at(model, &probes, &positions)?;
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(&targets) {
        let restricted: Vec<f64> = (0..n).map(|j| if valid[j] { row[j] } else { f64::NEG_INFINITY }).collect();
        let max = restricted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + restricted.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total, targets.len()))
}

/// Add-one smoothed unigram perplexity over non-special tokens.
pub fn unigram_perplexity(counts: &BTreeMap<usize, usize>, vocab_size: usize, sequences: &[Vec<usize>]) -> Result<f64> {
    let ordinary = vocab_size.saturating_sub(crate::vocab::SPECIALS.len());
    if ordinary == 0 {
        return Err(Error::Precondition("vocabulary has no ordinary tokens".into()));
    }
    let total: usize = counts.iter().filter(|(id, _)| !is_special(**id)).map(|(_, c)| c).sum();
    let denom = (total + ordinary) as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for &id in sequences.iter().flatten() {
        if is_special(id) {
            continue;
        }
        let c = counts.get(&id).copied().unwrap_or(0);
        nll -= ((c + 1) as f64 / denom).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Precondition("no scorable tokens for perplexity".into()));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub max_abs_logit_diff: f64,
    pub base_perplexity: f64,
    pub debiased_perplexity: f64,
    pub profession_free_sentences: usize,
    pub general_sentences: usize,
    pub shared_columns: usize,
}

impl ForgettingReport {
    pub fn perplexity_ratio(&self) -> f64 {
        self.debiased_perplexity / self.base_perplexity
    }

    pub fn to_text(&self) -> String {
        format!(
            "max_abs_logit_diff: {:e}\nbase_perplexity: {}\ndebiased_perplexity: {}\nperplexity_ratio: {}\nprofession_free_sentences: {}\ngeneral_sentences: {}\nshared_columns: {}\n",
            self.max_abs_logit_diff,
            self.base_perplexity,
            self.debiased_perplexity,
            self.perplexity_ratio(),
            self.profession_free_sentences,
            self.general_sentences,
            self.shared_columns
        )
    }
}

/// Columns `j < n` that neither model masks.
pub fn shared_columns(a: &MlmModel, b: &MlmModel) -> Result<Vec<bool>> {
    let n = a.config().vocab_size;
    if b.config().vocab_size != n {
        return Err(Error::Input(format!(
            "models disagree on vocabulary size ({n} vs {})",
            b.config().vocab_size
        )));
    }
    let ma = a.routing().masked_columns();
    let mb = b.routing().masked_columns();
    Ok((0..n).map(|j| !ma[j] && !mb[j]).collect())
}

/// Compares a debiased model against its base: exact logit agreement on
/// profession-free text and pseudo-perplexity on general text, both over
/// the shared columns.
pub fn forgetting_probe(
    base: &MlmModel,
    debiased: &MlmModel,
    vocab: &Vocab,
    lexicon: &ProfessionLexicon,
    profession_free: &[String],
    general: &[String],
) -> Result<ForgettingReport> {
    if profession_free.is_empty() || general.is_empty() {
        return Err(Error::Precondition("forgetting probe needs both text sets".into()));
    }
    if let Some(s) = profession_free.iter().find(|s| !professions_in(s, lexicon).is_empty()) {
        return Err(Error::Input(format!("profession token in the profession-free set: {s:?}")));
    }
    let shared = shared_columns(base, debiased)?;
    let max_len = base.config().max_seq_len.min(debiased.config().max_seq_len);
    let encode = |texts: &[String]| -> Vec<Vec<usize>> { texts.iter().map(|t| vocab.encode(t, max_len)).collect() };

    let probe = encode(profession_free);
    let mut max_diff: f64 = 0.0;
    for chunk in probe.chunks(EVAL_CHUNK) {
        let la = base.logits_batch(chunk)?;
        let lb = debiased.logits_batch(chunk)?;
        for r in 0..la.rows() {
            let (ra, rb) = (la.row(r), lb.row(r));
            for (j, &ok) in shared.iter().enumerate() {
                if ok {
                    max_diff = max_diff.max((ra[j] - rb[j]).abs());
                }
            }
        }
    }
    let general_ids = encode(general);
    Ok(ForgettingReport {
        max_abs_logit_diff: max_diff,
        base_perplexity: pseudo_perplexity(base, &general_ids, &shared)?,
        debiased_perplexity: pseudo_perplexity(debiased, &general_ids, &shared)?,
        profession_free_sentences: probe.len(),
        general_sentences: general_ids.len(),
        shared_columns: shared.iter().filter(|&&v| v).count(),
    })
}

/// `key: value` lines into a map; other lines are ignored.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
