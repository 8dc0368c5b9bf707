//! `geep` command-line front end.
//!
//! Exit codes: 0 success, 1 non-finite loss, 2 bad input or missing file,
//! 3 usage error, 4 corrupt checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geep_core::checkpoint::Checkpoint;
use geep_core::config::ExperimentConfig;
use geep_core::error::{Error, Result};
use geep_core::files::write_atomic;
use geep_core::model::declared_overhead;
use geep_core::neutralize;
use geep_core::pipeline::{self, Start, COREF, FORGETTING, RESOLVED_CONFIG, REPORT};
use geep_core::report::build_report;
use geep_core::trainer::Mode;
use geep_core::vocab::Vocab;
use geep_core::eval;

#[derive(Parser, Debug)]
#[command(name = "geep", version, about = "Profession-prompt debiasing lab on a toy masked language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpora, coreference set, professions and templates.
    Generate(GenerateArgs),
    /// Filter profession sentences and add their gender-swapped counterparts.
    Neutralize(NeutralizeArgs),
    /// Pre-train a base model or run a second phase from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint.
    Eval(EvalArgs),
    /// Tabulate the reports of several run directories.
    Report(ReportArgs),
    /// Run every step for one seed: data, base, second phases, reports.
    Pipeline(PipelineArgs),
    /// Print parameter accounting for a checkpoint or a declared model size.
    Account(AccountArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key = value experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; takes precedence over GEEP_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NeutralizeArgs {
    /// Plain-text corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Profession list, one per line.
    #[arg(long)]
    professions: PathBuf,
    /// Gendered swap pairs; the built-in lexicon is used when omitted.
    #[arg(long)]
    swaps: Option<PathBuf>,
    /// Output directory for dataset.tsv, stats.txt and warnings.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Train on the unswapped filtered sentences only.
    #[arg(long)]
    no_gn: bool,
    #[command(flatten)]
    config: ConfigArgs,
    /// Starting checkpoint; required for every mode except base.
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    /// Training text: a plain corpus for base, a neutralized dataset.tsv
    /// otherwise. Falls back to the config's corpus or dataset key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Profession list, when the checkpoint carries none.
    #[arg(long)]
    professions: Option<PathBuf>,
    /// Draw fresh prompt rows even if the checkpoint already has some.
    #[arg(long)]
    reset_prompts: bool,
    /// Output directory for checkpoints, log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Base,
    Sppa,
    Geep,
    SppaNpe,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Base => Mode::Base,
            ModeArg::Sppa => Mode::Sppa,
            ModeArg::Geep => Mode::Geep,
            ModeArg::SppaNpe => Mode::SppaNpe,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(value_enum)]
    task: Task,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Reference checkpoint for the forgetting probe.
    #[arg(long)]
    baseline_ckpt: Option<PathBuf>,
    /// Input data: a generated data directory, or for coref a coref.tsv file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Templates for the bias score; built-in templates when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Profession list, when the checkpoint carries none.
    #[arg(long)]
    professions: Option<PathBuf>,
    /// Profession-free sentences for the logit comparison (forgetting).
    #[arg(long)]
    probe: Option<PathBuf>,
    /// General held-out text for perplexity (forgetting).
    #[arg(long)]
    general: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Bias,
    Coref,
    Forgetting,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory of run directories, or a single run directory.
    #[arg(long)]
    runs: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AccountArgs {
    /// Report the parameter table of this checkpoint instead.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Number of prompt rows.
    #[arg(long, default_value_t = 303)]
    prompts: u64,
    #[arg(long, default_value_t = 768)]
    d_model: u64,
    /// Declared size of the frozen base model.
    #[arg(long, default_value_t = 110_000_000)]
    base_scalars: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => generate(args),
        Command::Neutralize(args) => neutralize_cmd(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => evaluate(args),
        Command::Report(args) => report(args),
        Command::Pipeline(args) => {
            let cfg = args.config.load()?;
            let summary = pipeline::run_pipeline(&cfg, &args.out)?;
            write_atomic(&args.out.join(RESOLVED_CONFIG), cfg.resolved(None, None).as_bytes())?;
            print!("{}", summary.report);
            Ok(())
        }
        Command::Account(args) => {
            match args.ckpt {
                Some(path) => print!("{}", Checkpoint::load(&path)?.model.accounting().render()),
                None => print!("{}", declared_overhead(args.prompts, args.d_model, args.base_scalars)),
            }
            Ok(())
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Input(format!("{}: no such file or directory", path.display())))
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let data = pipeline::generate(&cfg)?;
    pipeline::write_data(&data, &args.out)?;
    write_atomic(&args.out.join(RESOLVED_CONFIG), cfg.resolved(None, None).as_bytes())
}

fn neutralize_cmd(args: NeutralizeArgs) -> Result<()> {
    require(&args.corpus)?;
    let lexicon = pipeline::load_lexicon(&args.professions)?;
    let (swaps, source) = pipeline::load_swaps(args.swaps.as_deref())?;
    let file = std::fs::File::open(&args.corpus).map_err(|e| Error::io(&args.corpus, e))?;
    let lines = neutralize::read_lines(std::io::BufReader::new(file), &args.corpus);
    let out = pipeline::neutralize_to_dir(lines, &lexicon, &swaps, &source, &args.out)?;
    eprintln!(
        "{} filtered sentences, {} records, {} warnings",
        out.stats.filtered_sentences,
        out.records.len(),
        out.warnings.len()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    let mode = Mode::from(args.mode);
    let neutralized = !args.no_gn;
    if let Some(p) = &args.professions {
        cfg.professions = Some(p.clone());
    }
    let start = match (mode, &args.ckpt_in) {
        (Mode::Base, Some(_)) => {
            return Err(Error::Usage("base pre-training starts from scratch; drop --ckpt-in".into()));
        }
        (Mode::Base, None) => None,
        (_, None) => return Err(Error::Usage(format!("{mode} training needs --ckpt-in"))),
        (_, Some(path)) => Some(Checkpoint::load(path)?),
    };
    let (start, texts) = match start {
        None => {
            let path = args
                .data
                .or(cfg.corpus.clone())
                .ok_or_else(|| Error::Usage("base training needs --data or a corpus key".into()))?;
            require(&path)?;
            let texts = pipeline::read_sentences(&path)?;
            let vocab = Vocab::build(&texts, cfg.min_freq)?;
            let lexicon = match &cfg.professions {
                Some(p) => {
                    let lexicon = pipeline::load_lexicon(p)?;
                    lexicon.check_vocab(&vocab)?;
                    Some(lexicon)
                }
                None => None,
            };
            (Start::Fresh { vocab, lexicon }, texts)
        }
        Some(checkpoint) => {
            let path = args
                .data
                .or(cfg.dataset.clone())
                .ok_or_else(|| Error::Usage(format!("{mode} training needs --data or a dataset key")))?;
            require(&path)?;
            let lexicon = match (&checkpoint.professions, &cfg.professions) {
                (Some(l), _) => l.clone(),
                (None, Some(p)) => pipeline::load_lexicon(p)?,
                (None, None) => return Err(Error::Usage("reading a dataset needs a profession list".into())),
            };
            let records = pipeline::load_dataset(&path, &lexicon)?;
            let texts = pipeline::select_texts(&records, neutralized);
            (
                Start::From {
                    checkpoint: Box::new(checkpoint),
                    reset_prompts: args.reset_prompts,
                },
                texts,
            )
        }
    };
    let ckpt = pipeline::train_run(&cfg, mode, neutralized, start, &texts, &args.out)?;
    eprintln!(
        "trained {} on {} sentences; checkpoints in {}",
        ckpt.mode.run_name(neutralized),
        texts.len(),
        args.out.display()
    );
    Ok(())
}

/// `name` inside `data` when it is a directory, else `data` itself.
fn data_file(data: &Path, name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(name)
    } else {
        data.to_path_buf()
    }
}

fn evaluate(args: EvalArgs) -> Result<()> {
    require(&args.ckpt)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let fallback = args.professions.as_deref().map(pipeline::load_lexicon).transpose()?;
    match args.task {
        Task::Bias => {
            let lexicon = pipeline::professions_for(&ckpt, fallback.as_ref())?;
            let templates = match (&args.templates, &args.data) {
                (Some(t), _) => Some(t.clone()),
                (None, Some(d)) if d.join("templates.txt").is_file() => Some(d.join("templates.txt")),
                _ => None,
            };
            if let Some(t) = &templates {
                require(t)?;
            }
            let report = pipeline::eval_bias(&ckpt, &lexicon, &pipeline::load_templates(templates.as_deref())?, &args.out)?;
            print!("{}", report.summary());
        }
        Task::Coref => {
            let data = args.data.ok_or_else(|| Error::Usage("coref evaluation needs --data".into()))?;
            let path = data_file(&data, "coref.tsv");
            require(&path)?;
            let instances = eval::load_instances(&path)?;
            let report = pipeline::eval_coref(&ckpt, &instances, &args.out.join(COREF))?;
            print!("{}", report.to_text());
        }
        Task::Forgetting => {
            let base_path = args
                .baseline_ckpt
                .ok_or_else(|| Error::Usage("forgetting needs --baseline-ckpt".into()))?;
            require(&base_path)?;
            let base = Checkpoint::load(&base_path)?;
            let pick = |explicit: Option<PathBuf>, name: &str| -> Result<PathBuf> {
                let path = match (explicit, &args.data) {
                    (Some(p), _) => p,
                    (None, Some(d)) => data_file(d, name),
                    (None, None) => return Err(Error::Usage(format!("forgetting needs --data or --{}", name.trim_end_matches(".txt")))),
                };
                require(&path)?;
                Ok(path)
            };
            let probe = pipeline::read_sentences(&pick(args.probe.clone(), "probe.txt")?)?;
            let general = pipeline::read_sentences(&pick(args.general.clone(), "general.txt")?)?;
            let lexicon = pipeline::professions_for(&ckpt, fallback.as_ref())
                .or_else(|_| pipeline::professions_for(&base, fallback.as_ref()))?;
            let report = pipeline::eval_forgetting(&base, &ckpt, &lexicon, &probe, &general, &args.out.join(FORGETTING))?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let table = build_report(&args.runs)?;
    if let Some(out) = &args.out {
        let path = if out.is_dir() { out.join(REPORT) } else { out.clone() };
        write_atomic(&path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}
