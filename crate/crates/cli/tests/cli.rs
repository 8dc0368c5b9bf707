use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use geep_core::checkpoint::Checkpoint;
use tempfile::TempDir;

const TINY: &str = "\
seed = 5
base_sentences = 400
phase_sentences = 300
general_sentences = 40
probe_sentences = 40
d_model = 8
layers = 1
heads = 2
d_ff = 16
max_seq_len = 16
batch_size = 8
base_steps = 8
steps = 8
log_every = 4
";

fn geep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geep"))
        .args(args)
        .env_remove("GEEP_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(&out));
    out
}

/// Generated data, a neutralized dataset, a base run and a GEEP run,
/// built once and shared read-only.
struct Workspace {
    _dir: TempDir,
    root: PathBuf,
}

impl Workspace {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn workspace() -> &'static Workspace {
    static CELL: OnceLock<Workspace> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let conf = root.join("tiny.conf");
        fs::write(&conf, TINY).unwrap();
        ok(geep(&["generate", "--config", p(&conf), "--out", p(&root.join("data"))]));
        ok(geep(&[
            "neutralize",
            "--corpus",
            p(&root.join("data/wiki.txt")),
            "--professions",
            p(&root.join("data/professions.txt")),
            "--out",
            p(&root.join("neutralized")),
        ]));
        ok(geep(&[
            "train", "--mode", "base", "--config", p(&conf),
            "--data", p(&root.join("data/corpus.txt")),
            "--professions", p(&root.join("data/professions.txt")),
            "--out", p(&root.join("base")),
        ]));
        ok(geep(&[
            "train", "--mode", "geep", "--config", p(&conf),
            "--ckpt-in", p(&root.join("base/ckpt-100.bin")),
            "--data", p(&root.join("neutralized/dataset.tsv")),
            "--out", p(&root.join("geep")),
        ]));
        Workspace { _dir: dir, root }
    })
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = ok(geep(&["--help"]));
    for cmd in ["generate", "neutralize", "train", "eval", "report", "pipeline", "account"] {
        assert!(stdout(&out).contains(cmd), "{cmd} missing from help");
    }
    let out = ok(geep(&["train", "--help"]));
    for flag in ["--mode", "--no-gn", "--config", "--seed", "--ckpt-in", "--reset-prompts", "--out"] {
        assert!(stdout(&out).contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(geep(&["train", "--mode", "nonsense", "--out", "x"]).status.code(), Some(3));
    assert_eq!(geep(&["frobnicate"]).status.code(), Some(3));
}

#[test]
fn neutralize_doubles_the_filtered_sentences() {
    let ws = workspace();
    let dataset = fs::read_to_string(ws.path("neutralized/dataset.tsv")).unwrap();
    let lines: Vec<&str> = dataset.lines().collect();
    assert!(!lines.is_empty());
    let originals = lines.iter().filter(|l| l.starts_with("ORIGINAL\t")).count();
    assert_eq!(lines.len(), 2 * originals);
    let stats = fs::read_to_string(ws.path("neutralized/stats.txt")).unwrap();
    assert!(stats.contains("built-in default lexicon"), "{stats}");
    assert!(ws.path("neutralized/warnings.txt").is_file());
}

#[test]
fn missing_corpus_is_an_input_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.txt");
    fs::write(dir.path().join("p.txt"), "nurse\n").unwrap();
    let out = geep(&[
        "neutralize",
        "--corpus",
        p(&missing),
        "--professions",
        p(&dir.path().join("p.txt")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.txt"));
}

#[test]
fn mode_and_checkpoint_must_agree() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let base_with_ckpt = geep(&[
        "train", "--mode", "base", "--ckpt-in", p(&ws.path("base/ckpt-100.bin")),
        "--data", p(&ws.path("data/corpus.txt")), "--out", p(dir.path()),
    ]);
    assert_eq!(base_with_ckpt.status.code(), Some(3));
    let geep_without = geep(&["train", "--mode", "geep", "--data", p(&ws.path("neutralized/dataset.tsv")), "--out", p(dir.path())]);
    assert_eq!(geep_without.status.code(), Some(3));
    let geep_on_geep = geep(&[
        "train", "--mode", "geep", "--ckpt-in", p(&ws.path("geep/ckpt-100.bin")),
        "--data", p(&ws.path("neutralized/dataset.tsv")), "--out", p(dir.path()),
    ]);
    assert_eq!(geep_on_geep.status.code(), Some(3));
}

#[test]
fn base_training_writes_three_checkpoints_deterministically() {
    let ws = workspace();
    for pct in [25, 50, 100] {
        assert!(ws.path(&format!("base/ckpt-{pct}.bin")).is_file());
    }
    let log = fs::read_to_string(ws.path("base/train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let again = tempfile::tempdir().unwrap();
    let conf = ws.path("tiny.conf");
    ok(geep(&[
        "train", "--mode", "base", "--config", p(&conf),
        "--data", p(&ws.path("data/corpus.txt")),
        "--professions", p(&ws.path("data/professions.txt")),
        "--out", p(again.path()),
    ]));
    assert_eq!(
        fs::read(ws.path("base/ckpt-100.bin")).unwrap(),
        fs::read(again.path().join("ckpt-100.bin")).unwrap()
    );
}

#[test]
fn geep_checkpoint_differs_from_base_only_in_the_prompt_block() {
    let ws = workspace();
    let base = Checkpoint::manifest(&fs::read(ws.path("base/ckpt-100.bin")).unwrap()).unwrap();
    let tuned = Checkpoint::manifest(&fs::read(ws.path("geep/ckpt-100.bin")).unwrap()).unwrap();
    assert_eq!(tuned.len(), base.len() + 1);
    for entry in &base {
        let other = tuned.iter().find(|e| e.name == entry.name).unwrap();
        assert_eq!(other.shape, entry.shape, "{}", entry.name);
        assert_eq!(other.sha256, entry.sha256, "{} changed", entry.name);
    }
    assert!(tuned.iter().any(|e| e.name == "embeddings.prompt"));
}

#[test]
fn no_gn_trains_on_the_originals_only() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = ok(geep(&[
        "train", "--mode", "sppa", "--no-gn", "--config", p(&ws.path("tiny.conf")),
        "--ckpt-in", p(&ws.path("base/ckpt-100.bin")),
        "--data", p(&ws.path("neutralized/dataset.tsv")),
        "--out", p(dir.path()),
    ]));
    let dataset = fs::read_to_string(ws.path("neutralized/dataset.tsv")).unwrap();
    let originals = dataset.lines().filter(|l| l.starts_with("ORIGINAL\t")).count();
    assert!(stderr(&out).contains(&format!("sppa-no-gn on {originals} sentences")), "{}", stderr(&out));
}

#[test]
fn eval_writes_bias_coref_and_forgetting_reports() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = ws.path("geep/ckpt-100.bin");
    let data = ws.path("data");
    ok(geep(&["eval", "bias", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(dir.path())]));
    let csv = fs::read_to_string(dir.path().join("bias.csv")).unwrap();
    assert!(csv.starts_with("profession,score,P_he,P_she\n"));
    let professions = fs::read_to_string(data.join("professions.txt")).unwrap();
    assert_eq!(csv.lines().count() - 1, professions.lines().filter(|l| !l.trim().is_empty()).count());
    assert!(dir.path().join("bias_templates.csv").is_file());

    let out = ok(geep(&["eval", "coref", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(dir.path())]));
    assert!(stdout(&out).starts_with("accuracy: "));
    assert!(dir.path().join("coref.txt").is_file());

    ok(geep(&[
        "eval", "forgetting", "--ckpt", p(&ckpt), "--baseline-ckpt", p(&ws.path("base/ckpt-100.bin")),
        "--data", p(&data), "--out", p(dir.path()),
    ]));
    let text = fs::read_to_string(dir.path().join("forgetting.txt")).unwrap();
    let diff: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max_abs_logit_diff: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(diff <= 1e-12);
}

#[test]
fn corrupt_checkpoint_exits_four() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fs::read(ws.path("base/ckpt-100.bin")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, &bytes).unwrap();
    let out = geep(&["eval", "coref", "--ckpt", p(&bad), "--data", p(&ws.path("data")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    fs::write(&bad, &bytes[..40]).unwrap();
    let out = geep(&["eval", "coref", "--ckpt", p(&bad), "--data", p(&ws.path("data")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn report_handles_single_runs_and_missing_files() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("geep");
    fs::create_dir(&run).unwrap();
    ok(geep(&["eval", "coref", "--ckpt", p(&ws.path("geep/ckpt-100.bin")), "--data", p(&ws.path("data")), "--out", p(&run)]));
    let out = ok(geep(&["report", "--runs", p(&run)]));
    let table = stdout(&out);
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    assert_eq!(header, ["metric", "geep"]);
    let bias_row = table.lines().find(|l| l.starts_with("avg_abs_bias")).unwrap();
    assert_eq!(bias_row, "avg_abs_bias\tNA");
    let coref_row = table.lines().find(|l| l.starts_with("coref_accuracy\t")).unwrap();
    assert_ne!(coref_row, "coref_accuracy\tNA");
}

#[test]
fn account_reports_declared_overhead() {
    let out = ok(geep(&["account"]));
    let text = stdout(&out);
    assert!(text.contains("232,704"), "{text}");
    assert!(text.contains("0.21%"), "{text}");
    let ws = workspace();
    let out = ok(geep(&["account", "--ckpt", p(&ws.path("geep/ckpt-100.bin"))]));
    assert!(stdout(&out).contains("embeddings.prompt"));
}

#[test]
fn seed_precedence_is_flag_then_environment_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, TINY).unwrap();
    let resolved_seed = |out: &Path| {
        let text = fs::read_to_string(out.join("config.resolved")).unwrap();
        text.lines().find_map(|l| l.strip_prefix("seed = ")).unwrap().to_string()
    };
    let a = dir.path().join("a");
    ok(geep(&["generate", "--config", p(&conf), "--out", p(&a)]));
    assert_eq!(resolved_seed(&a), "5");

    let b = dir.path().join("b");
    let out = Command::new(env!("CARGO_BIN_EXE_geep"))
        .args(["generate", "--config", p(&conf), "--out", p(&b)])
        .env("GEEP_SEED", "77")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(resolved_seed(&b), "77");

    let c = dir.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_geep"))
        .args(["generate", "--config", p(&conf), "--seed", "9", "--out", p(&c)])
        .env("GEEP_SEED", "77")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(resolved_seed(&c), "9");
    assert_ne!(fs::read(a.join("corpus.txt")).unwrap(), fs::read(c.join("corpus.txt")).unwrap());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = geep(&["generate", "--config", p(&conf), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));
}
