use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use sru2b::cli::{
    cmd_ablate, cmd_evaluate, cmd_export_embeddings, cmd_generate, cmd_train, load_dataset, RunConfig,
};
use sru2b::evalrank::Variant;
use sru2b::model::ModelParams;
use sru2b::trainer::load_checkpoint;
use tempfile::TempDir;

fn small(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        [generate]
        n_users = 30
        n_items = 200
        n_leaf_categories = 20
        n_brands = 30
        n_shops = 40
        [train]
        epochs = 1
        [eval]
        variants = ["base"]
        "#,
    )
    .unwrap();
    cfg.paths.out_dir = Some(dir.to_path_buf());
    cfg
}

fn bin(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_sru2b"))
        .args(args)
        .current_dir(dir)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn generate_accounting_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    let s = cmd_generate(&cfg).unwrap();
    let g = &cfg.generate;
    assert_eq!(s.n_impressions, g.n_users * g.sessions_per_user * g.impressions_per_session);
    let events = fs::read_to_string(cfg.events_path()).unwrap();
    assert_eq!(events.lines().count(), s.n_impressions + s.n_clicks);
    assert_eq!(fs::read_to_string(cfg.catalog_path()).unwrap().lines().count(), g.n_items);

    let first: Vec<Vec<u8>> = ["catalog.jsonl", "events.jsonl", "latents.jsonl"]
        .iter()
        .map(|f| fs::read(tmp.path().join(f)).unwrap())
        .collect();
    cmd_generate(&cfg).unwrap();
    for (f, bytes) in ["catalog.jsonl", "events.jsonl", "latents.jsonl"].iter().zip(first) {
        assert_eq!(fs::read(tmp.path().join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn zero_epochs_writes_initialization() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.epochs = 0;
    cmd_generate(&cfg).unwrap();
    assert!(cmd_train(&cfg).unwrap().is_empty());
    let ckpt = load_checkpoint(&cfg.checkpoint_path()).unwrap();
    let data = load_dataset(&cfg).unwrap();
    assert_eq!(ckpt.params, ModelParams::init(&cfg.model, &data.vocab));
    assert_eq!(ckpt.state.step, 0);
    assert_eq!(fs::read_to_string(tmp.path().join("loss_trace.csv")).unwrap(), "epoch,mean_loss\n");
}

#[test]
fn train_evaluate_export_round() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(tmp.path());
    cmd_generate(&cfg).unwrap();
    let trace = cmd_train(&cfg).unwrap();
    assert_eq!(trace.len(), 1);
    let ckpt_bytes = fs::read(cfg.checkpoint_path()).unwrap();
    cmd_train(&cfg).unwrap();
    assert_eq!(fs::read(cfg.checkpoint_path()).unwrap(), ckpt_bytes);
    let trace_csv = fs::read_to_string(tmp.path().join("loss_trace.csv")).unwrap();
    assert_eq!(trace_csv.lines().count(), 2);

    let a = cmd_evaluate(&cfg, &cfg.checkpoint_path()).unwrap();
    let metrics = fs::read(tmp.path().join("metrics.csv")).unwrap();
    let b = cmd_evaluate(&cfg, &cfg.checkpoint_path()).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(tmp.path().join("metrics.csv")).unwrap(), metrics);
    assert!(a.contains("@50 ") && a.contains("@80 "));

    let out = tmp.path().join("emb/embeddings.csv");
    let rows = cmd_export_embeddings(&cfg, &cfg.checkpoint_path(), &out).unwrap();
    let data = load_dataset(&cfg).unwrap();
    assert_eq!(rows, 4 * data.test.len() + data.vocab.n_items());
    let text = fs::read(&out).unwrap();
    assert_eq!(String::from_utf8_lossy(&text).lines().count(), rows + 1);
    cmd_export_embeddings(&cfg, &cfg.checkpoint_path(), &out).unwrap();
    assert_eq!(fs::read(&out).unwrap(), text);

    // no user has enough clicks for an example, so the test split is empty
    let mut empty = cfg.clone();
    empty.sequence.label_k = 10_000;
    let out = tmp.path().join("empty.csv");
    assert_eq!(cmd_export_embeddings(&empty, &cfg.checkpoint_path(), &out).unwrap(), 0);
    let header = fs::read_to_string(&out).unwrap();
    assert_eq!(header.lines().count(), 1);
    assert!(header.starts_with("type,id,v0,"));
}

#[test]
fn ablate_base_only_and_full_set() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small(tmp.path());
    cmd_generate(&cfg).unwrap();
    cmd_ablate(&cfg).unwrap();
    let csv = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), cfg.eval.cutoffs.len());
    for r in &rows {
        assert!(r.starts_with("base,"));
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[6].parse::<f64>().unwrap(), 0.0);
        assert!(r.ends_with(",none,none"));
    }

    cfg.eval.variants = Variant::ALL.to_vec();
    cfg.train.epochs = 0;
    cmd_ablate(&cfg).unwrap();
    let csv = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let names: std::collections::BTreeSet<&str> =
        csv.lines().skip(1).map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names.len(), 9);
    assert!(csv.contains("SRU2B,50,") && csv.contains(",gated,sym"));
}

#[test]
fn binary_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let cfg_text = "[generate]\nn_users = 30\nn_items = 200\nn_leaf_categories = 20\n[train]\nepochs = 1\n";
    fs::write(dir.join("run.toml"), cfg_text).unwrap();
    fs::write(dir.join("wide.toml"), format!("{cfg_text}[model]\nembedding_dim = 64\n")).unwrap();
    fs::write(dir.join("bad.toml"), "[generate]\nn_items = 10\n").unwrap();
    fs::write(dir.join("nan.toml"), format!("{cfg_text}learning_rate = 1e300\n")).unwrap();
    fs::write(dir.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();

    let run = |cfg: &str, cmd: &str| bin(&["--config", cfg, "--out", "o", cmd], dir);
    assert_eq!(run("run.toml", "generate"), 0);
    assert_eq!(run("run.toml", "train"), 0);
    assert_eq!(run("run.toml", "evaluate"), 0);
    assert_eq!(run("wide.toml", "evaluate"), 4);
    assert_eq!(run("bad.toml", "generate"), 2);
    assert_eq!(run("typo.toml", "generate"), 2);
    assert_eq!(run("nan.toml", "train"), 3);
    assert_eq!(bin(&["--config", "missing.toml", "generate"], dir), 2);

    fs::write(dir.join("o/model.ckpt"), b"garbage").unwrap();
    assert_eq!(run("run.toml", "evaluate"), 4);

    fs::write(dir.join("blocker"), b"").unwrap();
    assert_eq!(bin(&["--config", "run.toml", "--out", "blocker/sub", "generate"], dir), 2);
}

#[test]
fn seed_flag_overrides_every_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), "[generate]\nn_users = 20\nn_items = 100\nn_leaf_categories = 10\n").unwrap();
    assert_eq!(bin(&["--config", "run.toml", "--seed", "5", "--out", "a", "generate"], dir), 0);
    assert_eq!(bin(&["--config", "run.toml", "--seed", "5", "--out", "b", "generate"], dir), 0);
    assert_eq!(bin(&["--config", "run.toml", "--seed", "6", "--out", "c", "generate"], dir), 0);
    let ev = |d: &str| fs::read(dir.join(d).join("events.jsonl")).unwrap();
    assert_eq!(ev("a"), ev("b"));
    assert_ne!(ev("a"), ev("c"));
    let cfg = RunConfig::default().with_seed(9);
    assert_eq!((cfg.generate.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
}
