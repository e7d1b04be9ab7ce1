use std::path::Path;
use std::process::{Command, Output};

use mbn_cli::{ExperimentConfig, Overrides};
use mbn_core::datagen::GroupedDataset;
use mbn_core::fairmetrics::FairnessReport;
use mbn_core::trainer::Mode;

fn config_text(out: &Path, mode: &str, extra_trainer: &str) -> String {
    format!(
        r#"
label = "test"
out_dir = "{}"
seed = 3

[data]
ratio = "7:1:1:1"
total_classes = 40
samples_per_class = 4
sigmas = [0.25, 0.35, 0.40, 0.45]
dim = 16
subspace_dim = 4
meta_identities = 3
meta_samples = 3
test_identities = 5
test_samples = 3

[trainer]
mode = "{mode}"
iterations = 30
batch_size = 16
{extra_trainer}

[eval]
budget = 40
"#,
        out.display()
    )
}

fn write_config(dir: &Path, mode: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, config_text(&dir.join("run"), mode, extra)).unwrap();
    path
}

fn mbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(dir.path(), "mbn-cos", "lr_margin = { base = 0.02 }\nmeta = { tau = 0.3 }");
    let config = ExperimentConfig::parse(&text, &Overrides::default()).unwrap();
    assert_eq!(config.trainer.config.lr_margin.base, 0.02);
    assert_eq!(config.trainer.config.meta.tau, 0.3);
    assert_eq!(config.trainer.config.meta.gamma, 0.5);
    let echoed = config.to_toml().unwrap();
    let reloaded = ExperimentConfig::parse(&echoed, &Overrides::default()).unwrap();
    assert_eq!(reloaded, config);
    assert_eq!(reloaded.to_toml().unwrap(), echoed);
}

#[test]
fn overrides_replace_seed_mode_and_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(dir.path(), "arcface", "");
    let overrides = Overrides { seed: Some(9), mode: Some(Mode::MbnArc), out_dir: Some("elsewhere".into()) };
    let config = ExperimentConfig::parse(&text, &overrides).unwrap();
    assert_eq!(config.seed, 9);
    assert_eq!(config.trainer.config.seed, 9);
    assert_eq!(config.trainer.mode, Mode::MbnArc);
    assert_eq!(config.out_dir, Path::new("elsewhere"));
}

#[test]
fn mode_defaults_for_margins() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, anchor, init) in [("mbn-arc", 0.3, 0.3), ("mbn-cos", 0.15, 0.15), ("cosface", 0.2, 0.2)] {
        let config = ExperimentConfig::parse(&config_text(dir.path(), mode, ""), &Overrides::default()).unwrap();
        assert_eq!(config.trainer.config.anchor_margin, anchor, "{mode}");
        assert_eq!(config.trainer.config.initial_margin, init, "{mode}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let parse = |text: &str| ExperimentConfig::parse(text, &Overrides::default());
    let base = config_text(dir.path(), "arcface", "");
    assert!(parse(&base).is_ok());
    assert!(parse(&config_text(dir.path(), "arcface", "learning_rate = 0.1")).is_err());
    assert!(parse(&config_text(dir.path(), "arcface", "meta = { delta = 1.0 }")).is_err());
    assert!(parse(&config_text(dir.path(), "arcface", "seed = 4")).is_err());
    assert!(parse(&config_text(dir.path(), "bogus", "")).is_err());
    assert!(parse(&format!("colour = 1\n{base}")).is_err());
    assert!(parse(&base.replace("budget = 40", "budget = 40\ndifficulty = 1.5")).is_err());
    assert!(parse(&base.replace("sigmas = [0.25, 0.35, 0.40, 0.45]", "sigmas = [0.25, 0.35]")).is_err());
    assert!(parse(&base.replace("batch_size = 16", "batch_size = 15")).is_err());

    let files = base.replace(
        "ratio = \"7:1:1:1\"",
        "train_file = \"/nonexistent/train.txt\"\nmeta_file = \"/nonexistent/meta.txt\"\ntest_file = \"/nonexistent/test.txt\"",
    );
    let files: String = files.lines().filter(|l| !l.starts_with("total_classes") && !l.starts_with("samples_per_class") && !l.starts_with("sigmas")).collect::<Vec<_>>().join("\n");
    let err = parse(&files).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn gen_train_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "softmax", "");
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let out = mbn(&["gen-data", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let train = GroupedDataset::load(run.join("train.txt")).unwrap();
    let counts: Vec<usize> = train.group_sample_counts().values().copied().collect();
    assert_eq!(counts, vec![112, 16, 16, 16]);
    let first = std::fs::read(run.join("train.txt")).unwrap();
    assert_eq!(code(&mbn(&["gen-data", "--config", cfg])), 0);
    assert_eq!(std::fs::read(run.join("train.txt")).unwrap(), first);

    let out = mbn(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(trace.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let margin_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("m_")).collect();
    assert_eq!(margin_cols.len(), 4);
    let mut n = 0;
    for rec in rows.records() {
        let rec = rec.unwrap();
        for &i in &margin_cols {
            assert_eq!(rec[i].parse::<f64>().unwrap(), 0.0);
        }
        n += 1;
    }
    assert_eq!(n, 30);
    assert!(run.join("model.txt").is_file());

    let echoed = ExperimentConfig::load(&run.join("config.toml"), &Overrides::default()).unwrap();
    assert_eq!(echoed, ExperimentConfig::load(Path::new(cfg), &Overrides::default()).unwrap());

    let out = mbn(&["eval", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    let report_text = std::fs::read_to_string(run.join("report.json")).unwrap();
    let report = FairnessReport::from_json(&report_text).unwrap();
    assert_eq!(line.trim(), report.summary_line());
    assert!(std::fs::read_to_string(run.join("roc.csv")).unwrap().starts_with("group,threshold,fpr,tpr"));
    assert_eq!(code(&mbn(&["eval", "--config", cfg])), 0);
    assert_eq!(std::fs::read_to_string(run.join("report.json")).unwrap(), report_text);
}

#[test]
fn noiseless_data_gives_degenerate_ser() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let text = config_text(&dir.path().join("run"), "arcface", "")
        .replace("sigmas = [0.25, 0.35, 0.40, 0.45]", "sigmas = [1e-9, 1e-9, 1e-9, 1e-9]");
    std::fs::write(&path, text).unwrap();
    let cfg = path.to_str().unwrap();
    for verb in ["gen-data", "train", "eval"] {
        let out = mbn(&[verb, "--config", cfg]);
        assert_eq!(code(&out), 0, "{verb}: {}", String::from_utf8_lossy(&out.stderr));
        if verb == "eval" {
            assert!(String::from_utf8(out.stdout).unwrap().contains("degenerate"));
        }
    }
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "softmax", "");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    mbn(&["gen-data", "--config", cfg, "--out", a.to_str().unwrap()]);
    mbn(&["gen-data", "--config", cfg, "--out", b.to_str().unwrap(), "--seed", "4"]);
    let ta = std::fs::read(a.join("train.txt")).unwrap();
    let tb = std::fs::read(b.join("train.txt")).unwrap();
    assert_ne!(ta, tb);
    let echo = std::fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 4"), "{echo}");
}

#[test]
fn numeric_abort_exits_2_and_keeps_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "arcface", "lr_model = { base = 1e300 }");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&mbn(&["gen-data", "--config", cfg])), 0);
    let out = mbn(&["train", "--config", cfg]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert!(trace.lines().next().unwrap().starts_with("iteration"));
    assert!(!dir.path().join("run/model.txt").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mbn(&["--help"])), 0);
    assert_eq!(code(&mbn(&["--version"])), 0);
    assert_eq!(code(&mbn(&["frobnicate"])), 1);
    assert_eq!(code(&mbn(&["train", "--config", "/nonexistent.toml"])), 1);
    let cfg = write_config(dir.path(), "arcface", "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&mbn(&["train", "--config", cfg, "--mode", "bogus"])), 1);
    // No datasets generated yet.
    assert_eq!(code(&mbn(&["train", "--config", cfg])), 1);
    assert_eq!(code(&mbn(&["eval", "--config", cfg])), 1);
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let small = ["gradcheck", "--instances", "3", "--meta-states", "2"];
    let out = mbn(&small);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().next().unwrap().starts_with("check"));
    assert!(table.contains("meta-gradient/cos"));
    assert_eq!(String::from_utf8(mbn(&small).stdout).unwrap(), table);

    let mut faulty = small.to_vec();
    faulty.extend(["--fault", "first-order/exp=1.01"]);
    let out = mbn(&faulty);
    assert_eq!(code(&out), 3);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let failing: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("first-order/exp "));

    let mut unknown = small.to_vec();
    unknown.extend(["--fault", "no-such-check=2"]);
    assert_eq!(code(&mbn(&unknown)), 1);
}
