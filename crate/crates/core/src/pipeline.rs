//! File-level steps shared by the CLI and the end-to-end experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_run_name, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{self, BiasReport, CorefInstance, CorefReport, ForgettingReport, PronounPair, Template};
use crate::files::{self, write_atomic};
use crate::neutralize::{
    self, augment_records, builtin_watchlist, grammar_risk_scan, warnings_report, BalanceStats, Origin, RiskWarning,
    SentenceRecord, SwapLexicon,
};
use crate::report;
use crate::synth::{self, World};
use crate::trainer::{self, Mode};
use crate::vocab::{ProfessionLexicon, RoutingTable, Vocab};

pub const TRAIN_LOG: &str = "train.log";
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const DATASET: &str = "dataset.tsv";
pub const STATS: &str = "stats.txt";
pub const WARNINGS: &str = "warnings.txt";
pub const BIAS_CSV: &str = "bias.csv";
pub const BIAS_TEMPLATES_CSV: &str = "bias_templates.csv";
pub const BIAS_SUMMARY: &str = "bias_summary.txt";
pub const COREF: &str = "coref.txt";
pub const FORGETTING: &str = "forgetting.txt";
pub const REPORT: &str = "report.tsv";

pub fn checkpoint_name(percent: u32) -> String {
    format!("ckpt-{percent}.bin")
}

/// Coreference report name for a checkpoint; the final one is `coref.txt`.
pub fn coref_name(percent: u32) -> String {
    if percent == 100 {
        COREF.to_string()
    } else {
        format!("coref-{percent}.txt")
    }
}

/// Generated text for one seed.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub base_corpus: Vec<String>,
    pub phase_corpus: Vec<String>,
    pub general: Vec<String>,
    pub probe: Vec<String>,
    pub coref: Vec<CorefInstance>,
    pub templates: Vec<Template>,
    pub lexicon: ProfessionLexicon,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    let templates = load_templates(cfg.templates.as_deref())?;
    let world = World::new(cfg.world(), templates.clone())?;
    Ok(SyntheticData {
        base_corpus: world.corpus(cfg.base_sentences, cfg.seed, "base-corpus"),
        phase_corpus: world.corpus(cfg.phase_sentences, cfg.seed, "phase-corpus"),
        general: World::general_corpus(cfg.general_sentences, cfg.seed, "general-heldout"),
        probe: World::general_corpus(cfg.probe_sentences, cfg.seed, "probe-heldout"),
        coref: synth::coref_instances(cfg.seed),
        templates,
        lexicon: synth::lexicon(),
    })
}

pub const DATA_FILES: [&str; 7] = [
    "corpus.txt",
    "wiki.txt",
    "general.txt",
    "probe.txt",
    "coref.tsv",
    "professions.txt",
    "templates.txt",
];

pub fn write_data(data: &SyntheticData, dir: &Path) -> Result<()> {
    let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
    let templates: Vec<String> = data.templates.iter().map(|t| t.text().to_string()).collect();
    let contents = [
        lines(&data.base_corpus),
        lines(&data.phase_corpus),
        lines(&data.general),
        lines(&data.probe),
        eval::instances_to_string(&data.coref),
        data.lexicon.to_file_string(),
        lines(&templates),
    ];
    for (name, text) in DATA_FILES.iter().zip(contents) {
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

pub fn load_templates(path: Option<&Path>) -> Result<Vec<Template>> {
    match path {
        Some(p) => Template::load_all(p),
        None => Ok(eval::builtin_templates()),
    }
}

/// Non-empty lines of a text file.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    neutralize::read_lines(std::io::BufReader::new(file), path)
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .collect()
}

pub fn load_swaps(path: Option<&Path>) -> Result<(SwapLexicon, String)> {
    match path {
        Some(p) => Ok((SwapLexicon::load(p)?, p.display().to_string())),
        None => Ok((SwapLexicon::builtin(), "built-in default lexicon".to_string())),
    }
}

pub struct Neutralized {
    pub records: Vec<SentenceRecord>,
    pub stats: BalanceStats,
    pub warnings: Vec<RiskWarning>,
}

/// Filters, augments and scans `lines`, writing the dataset, balance stats
/// and grammar-risk warnings into `out_dir`.
pub fn neutralize_to_dir<I>(
    lines: I,
    lexicon: &ProfessionLexicon,
    swaps: &SwapLexicon,
    swaps_source: &str,
    out_dir: &Path,
) -> Result<Neutralized>
where
    I: IntoIterator<Item = Result<String>>,
{
    let (records, stats) = augment_records(lines, lexicon, swaps)?;
    let warnings = grammar_risk_scan(&records, swaps, &builtin_watchlist(swaps));
    let dataset: String = records.iter().map(|r| r.to_line() + "\n").collect();
    write_atomic(&out_dir.join(DATASET), dataset.as_bytes())?;
    write_atomic(&out_dir.join(STATS), stats.to_report(swaps, swaps_source).as_bytes())?;
    write_atomic(&out_dir.join(WARNINGS), warnings_report(&warnings).as_bytes())?;
    Ok(Neutralized {
        records,
        stats,
        warnings,
    })
}

pub fn load_dataset(path: &Path, lexicon: &ProfessionLexicon) -> Result<Vec<SentenceRecord>> {
    let text = files::read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            SentenceRecord::parse_line(l, lexicon).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Texts a run trains on: every record when neutralized, otherwise only
/// the unswapped originals.
pub fn select_texts(records: &[SentenceRecord], neutralized: bool) -> Vec<String> {
    records
        .iter()
        .filter(|r| neutralized || r.origin == Origin::Original)
        .map(|r| r.text.clone())
        .collect()
}

pub fn encode_all(vocab: &Vocab, texts: &[String], max_seq_len: usize) -> Vec<Vec<usize>> {
    texts.iter().map(|t| vocab.encode(t, max_seq_len)).collect()
}

/// Where a training run starts.
pub enum Start {
    Fresh { vocab: Vocab, lexicon: Option<ProfessionLexicon> },
    From { checkpoint: Box<Checkpoint>, reset_prompts: bool },
}

/// Trains one run and writes its log, resolved config and 25/50/100%
/// checkpoints into `out_dir`. Returns the final checkpoint.
pub fn train_run(
    cfg: &ExperimentConfig,
    mode: Mode,
    neutralized: bool,
    start: Start,
    texts: &[String],
    out_dir: &Path,
) -> Result<Checkpoint> {
    let mut train_cfg = cfg.train_config(mode, neutralized);
    let mut log = Vec::new();
    let (vocab, lexicon, model) = match (mode, start) {
        (Mode::Base, Start::Fresh { vocab, lexicon }) => {
            let data = encode_all(&vocab, texts, cfg.max_seq_len);
            let save = saver(out_dir, &vocab, lexicon.as_ref(), mode, neutralized);
            let (model, _) = trainer::pretrain_base(&data, cfg.model_config(vocab.len()), &train_cfg, &mut log, save)?;
            (vocab, lexicon, model)
        }
        (Mode::Base, Start::From { .. }) => {
            return Err(Error::Usage("base pre-training starts from scratch; drop the input checkpoint".into()))
        }
        (_, Start::Fresh { .. }) => {
            return Err(Error::Usage(format!("{mode} training needs an input checkpoint")));
        }
        (_, Start::From { checkpoint, reset_prompts }) => {
            train_cfg.reset_prompts = reset_prompts;
            if checkpoint.model.config().max_seq_len != cfg.max_seq_len {
                train_cfg.max_seq_len = checkpoint.model.config().max_seq_len;
            }
            let Checkpoint {
                model,
                vocab,
                professions,
                ..
            } = *checkpoint;
            let lexicon = match (professions, mode.uses_prompts()) {
                (Some(l), _) => Some(l),
                (None, false) => None,
                (None, true) => match &cfg.professions {
                    Some(p) => Some(load_lexicon(p)?),
                    None => {
                        return Err(Error::Usage(format!(
                            "{mode} needs a profession list: none in the checkpoint or the config"
                        )))
                    }
                },
            };
            let routing = match &lexicon {
                Some(l) if mode.uses_prompts() => RoutingTable::build(&vocab, l)?,
                _ => RoutingTable::identity(vocab.len()),
            };
            let data = encode_all(&vocab, texts, train_cfg.max_seq_len);
            let save = saver(out_dir, &vocab, lexicon.as_ref(), mode, neutralized);
            let (model, _) = trainer::second_phase(model, &routing, &data, &train_cfg, &mut log, save)?;
            (vocab, lexicon, model)
        }
    };
    write_atomic(&out_dir.join(TRAIN_LOG), &log)?;
    write_atomic(
        &out_dir.join(RESOLVED_CONFIG),
        cfg.resolved(Some(vocab.len()), Some(model.config().prompt_rows)).as_bytes(),
    )?;
    Ok(Checkpoint {
        model,
        vocab,
        professions: lexicon,
        mode,
        neutralized,
    })
}

fn saver<'a>(
    out_dir: &'a Path,
    vocab: &'a Vocab,
    lexicon: Option<&'a ProfessionLexicon>,
    mode: Mode,
    neutralized: bool,
) -> impl FnMut(u32, usize, &crate::model::MlmModel) -> Result<()> + 'a {
    move |pct, _step, model| {
        let ckpt = Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            professions: lexicon.cloned(),
            mode,
            neutralized,
        };
        ckpt.save(&out_dir.join(checkpoint_name(pct)))
    }
}

pub fn load_lexicon(path: &Path) -> Result<ProfessionLexicon> {
    let (lexicon, warnings) = ProfessionLexicon::load(path)?;
    if !warnings.is_empty() {
        eprintln!("warning: {}: {warnings}", path.display());
    }
    Ok(lexicon)
}

/// Professions to score for a checkpoint: its own list, else `fallback`.
pub fn professions_for(ckpt: &Checkpoint, fallback: Option<&ProfessionLexicon>) -> Result<ProfessionLexicon> {
    ckpt.professions
        .clone()
        .or_else(|| fallback.cloned())
        .ok_or_else(|| Error::Usage("no profession list: none in the checkpoint and none given".into()))
}

pub fn eval_bias(ckpt: &Checkpoint, lexicon: &ProfessionLexicon, templates: &[Template], out_dir: &Path) -> Result<BiasReport> {
    let report = eval::bias_report(
        &ckpt.model,
        &ckpt.vocab,
        lexicon.professions(),
        templates,
        &PronounPair::default(),
    )?;
    write_atomic(&out_dir.join(BIAS_CSV), report.to_csv().as_bytes())?;
    write_atomic(&out_dir.join(BIAS_TEMPLATES_CSV), report.templates_csv().as_bytes())?;
    write_atomic(&out_dir.join(BIAS_SUMMARY), report.summary().as_bytes())?;
    Ok(report)
}

pub fn eval_coref(ckpt: &Checkpoint, instances: &[CorefInstance], out: &Path) -> Result<CorefReport> {
    let report = eval::coref_accuracy(&ckpt.model, &ckpt.vocab, instances)?;
    for (i, reason) in &report.skipped {
        eprintln!("skipped coreference instance {}: {reason}", i + 1);
    }
    write_atomic(out, report.to_text().as_bytes())?;
    Ok(report)
}

pub fn eval_forgetting(
    base: &Checkpoint,
    debiased: &Checkpoint,
    lexicon: &ProfessionLexicon,
    probe: &[String],
    general: &[String],
    out: &Path,
) -> Result<ForgettingReport> {
    if base.vocab != debiased.vocab {
        return Err(Error::Input("checkpoints were trained with different vocabularies".into()));
    }
    let report = eval::forgetting_probe(&base.model, &debiased.model, &debiased.vocab, lexicon, probe, general)?;
    write_atomic(out, report.to_text().as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub avg_abs_bias: f64,
    /// Coreference accuracy by checkpoint percentage.
    pub coref: BTreeMap<u32, f64>,
    pub max_abs_logit_diff: f64,
    pub perplexity_ratio: f64,
    pub frozen_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub runs: BTreeMap<String, RunMetrics>,
    pub report: String,
}

/// Runs every step for one seed under `out_dir`: data, base model,
/// neutralized data, all configured second-phase runs, evaluations and
/// the comparison table.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let data = generate(cfg)?;
    let data_dir = out_dir.join("data");
    write_data(&data, &data_dir)?;
    let vocab = Vocab::build(&data.base_corpus, cfg.min_freq)?;
    data.lexicon.check_vocab(&vocab)?;

    let base_dir = out_dir.join("base");
    train_run(
        cfg,
        Mode::Base,
        true,
        Start::Fresh {
            vocab,
            lexicon: Some(data.lexicon.clone()),
        },
        &data.base_corpus,
        &base_dir,
    )?;
    let base = Checkpoint::load(&base_dir.join(checkpoint_name(100)))?;

    let (swaps, source) = load_swaps(cfg.swaps.as_deref())?;
    let neutral = neutralize_to_dir(
        neutralize::in_memory(&data.phase_corpus),
        &data.lexicon,
        &swaps,
        &source,
        &out_dir.join("neutralized"),
    )?;

    let mut runs = vec![("base".to_string(), base_dir)];
    for name in &cfg.runs {
        let (mode, neutralized) = parse_run_name(name)?;
        let dir = out_dir.join(name);
        train_run(
            cfg,
            mode,
            neutralized,
            Start::From {
                checkpoint: Box::new(base.clone()),
                reset_prompts: false,
            },
            &select_texts(&neutral.records, neutralized),
            &dir,
        )?;
        runs.push((name.clone(), dir));
    }

    let mut metrics = BTreeMap::new();
    for (name, dir) in &runs {
        metrics.insert(name.clone(), evaluate_run_dir(&base, &data, dir)?);
    }
    let table = report::build_report(out_dir)?;
    write_atomic(&out_dir.join(REPORT), table.as_bytes())?;
    Ok(PipelineSummary {
        runs: metrics,
        report: table,
    })
}

/// Writes every report for the checkpoints in `dir`.
pub fn evaluate_run_dir(base: &Checkpoint, data: &SyntheticData, dir: &Path) -> Result<RunMetrics> {
    let mut coref = BTreeMap::new();
    for pct in trainer::CHECKPOINT_PERCENTS {
        let ckpt = Checkpoint::load(&dir.join(checkpoint_name(pct)))?;
        let report = eval_coref(&ckpt, &data.coref, &dir.join(coref_name(pct)))?;
        coref.insert(pct, report.accuracy());
    }
    let last = Checkpoint::load(&dir.join(checkpoint_name(100)))?;
    let bias = eval_bias(&last, &data.lexicon, &data.templates, dir)?;
    let forgetting = eval_forgetting(base, &last, &data.lexicon, &data.probe, &data.general, &dir.join(FORGETTING))?;
    let frozen_digest = last
        .model
        .params
        .digest(|p| p.name() != crate::model::PROMPT_EMBEDDINGS);
    Ok(RunMetrics {
        avg_abs_bias: bias.avg_abs(),
        coref,
        max_abs_logit_diff: forgetting.max_abs_logit_diff,
        perplexity_ratio: forgetting.perplexity_ratio(),
        frozen_digest,
    })
}

/// Paths of every file a pipeline run writes, relative to its root.
pub fn output_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}
