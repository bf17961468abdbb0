//! Command-line surface: one TOML run config, five subcommands.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    build_examples, parse_catalog, parse_events, split_temporal, write_catalog, write_events, Event, EventType,
    ItemMeta, SequenceConfig, TrainingExample,
};
use crate::encoders::{embed_all, encode_clicked, encode_labels, encode_unclicked};
use crate::evalrank::{
    evaluate, report_csv, report_text, run_ablation, run_sweep, sweep_csv, Experiment, Variant,
};
use crate::model::{IndexedExample, ModelConfig, ModelParams, Vocab};
use crate::objective::{fuse, LossConfig};
use crate::syngen::{generate_catalog, generate_events, write_latents, GenConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of each user's latest examples held out for testing.
    pub test_fraction: f64,
    pub cutoffs: Vec<usize>,
    pub variants: Vec<Variant>,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_margins: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_fraction: 0.1,
            cutoffs: vec![50, 80],
            variants: Variant::ALL.to_vec(),
            sweep_lambdas: Vec::new(),
            sweep_margins: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("cutoffs must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }
}

/// File locations. Unset entries default to fixed names inside the output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenConfig,
    pub sequence: SequenceConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `--seed` to the generator, the initialization and the batch
    /// order alike.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generate.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generate.validate()?;
        self.sequence.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.paths.catalog.clone().unwrap_or_else(|| self.out_dir().join("catalog.jsonl"))
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths.events.clone().unwrap_or_else(|| self.out_dir().join("events.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out_dir().join("model.ckpt"))
    }
}

/// Indexed train/test examples over one vocabulary.
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<IndexedExample>,
    pub test: Vec<IndexedExample>,
    pub test_examples: Vec<TrainingExample>,
}

pub fn prepare_dataset(
    catalog: &[ItemMeta],
    events: &[Event],
    seq: &SequenceConfig,
    test_fraction: f64,
) -> Result<Dataset> {
    seq.validate()?;
    let examples = build_examples(events, seq);
    let split = split_temporal(&examples, test_fraction)?;
    let vocab = Vocab::from_events(catalog, events)?;
    let train = vocab.index_examples(&split.train)?;
    let test = vocab.index_examples(&split.test)?;
    Ok(Dataset {
        vocab,
        train,
        test,
        test_examples: split.test,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let catalog = parse_catalog(open(&cfg.catalog_path())?)?;
    let events = parse_events(open(&cfg.events_path())?)?;
    prepare_dataset(&catalog, &events, &cfg.sequence, cfg.eval.test_fraction)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub struct GenerateSummary {
    pub n_items: usize,
    pub n_impressions: usize,
    pub n_clicks: usize,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.generate.validate()?;
    let dir = out_dir(cfg)?;
    let catalog = generate_catalog(&cfg.generate)?;
    let log = generate_events(&cfg.generate, &catalog)?;

    let mut w = create(&cfg.catalog_path())?;
    write_catalog(&mut w, &catalog.items)?;
    w.flush()?;
    let mut w = create(&cfg.events_path())?;
    write_events(&mut w, &log.events)?;
    w.flush()?;
    let mut w = create(&dir.join("latents.jsonl"))?;
    write_latents(&mut w, &catalog, &log)?;
    w.flush()?;

    let n_clicks = log.events.iter().filter(|e| e.event_type == EventType::Click).count();
    Ok(GenerateSummary {
        n_items: catalog.items.len(),
        n_impressions: log.events.len() - n_clicks,
        n_clicks,
    })
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{}", e + 1, l);
    }
    out
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    info!(
        "train examples: {}, test examples: {}, items: {}",
        data.train.len(),
        data.test.len(),
        data.vocab.n_items()
    );
    let params = ModelParams::init(&cfg.model, &data.vocab);
    let mut trainer = Trainer::new(&data.vocab, &data.train, params, cfg.loss.clone(), cfg.train.clone())?;
    let trace = trainer.train()?;
    save_checkpoint(&cfg.checkpoint_path(), &trainer.params, &trainer.optimizer, &trainer.run_state())?;
    write_file(&dir.join("loss_trace.csv"), trace_csv(&trace).as_bytes())?;
    Ok(trace)
}

/// Loads a checkpoint and checks it against the configured model shape.
fn load_model(cfg: &RunConfig, path: &Path, vocab: &Vocab) -> Result<(ModelParams, LossConfig)> {
    let ckpt = load_checkpoint(path)?;
    let saved = &ckpt.state.model;
    if saved.embedding_dim != cfg.model.embedding_dim
        || saved.clicked_encoder != cfg.model.clicked_encoder
        || saved.share_label_ffn != cfg.model.share_label_ffn
    {
        return Err(Error::Mismatch(format!(
            "checkpoint model (L_e={}, {:?}, share_label_ffn={}) does not match config (L_e={}, {:?}, share_label_ffn={})",
            saved.embedding_dim,
            saved.clicked_encoder,
            saved.share_label_ffn,
            cfg.model.embedding_dim,
            cfg.model.clicked_encoder,
            cfg.model.share_label_ffn
        )));
    }
    ckpt.params.check_vocab(vocab)?;
    Ok((ckpt.params, ckpt.state.loss))
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    cfg.eval.validate()?;
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (params, loss) = load_model(cfg, checkpoint, &data.vocab)?;
    let report = evaluate(&params, &data.vocab, &data.test, &loss, &cfg.eval.cutoffs)?;
    write_file(&dir.join("metrics.csv"), report_csv(&report).as_bytes())?;
    Ok(report_text(&report))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    if cfg.eval.variants.is_empty() {
        return Err(Error::Config("eval.variants is empty".into()));
    }
    let dir = out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let exp = Experiment {
        vocab: &data.vocab,
        train: &data.train,
        test: &data.test,
        model: cfg.model.clone(),
        loss: cfg.loss.clone(),
        train_cfg: cfg.train.clone(),
        cutoffs: cfg.eval.cutoffs.clone(),
    };
    let table = run_ablation(&exp, &cfg.eval.variants)?;
    write_file(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    let mut text = table.to_text();
    if !cfg.eval.sweep_lambdas.is_empty() || !cfg.eval.sweep_margins.is_empty() {
        let rows = run_sweep(&exp, &cfg.eval.sweep_lambdas, &cfg.eval.sweep_margins)?;
        let csv = sweep_csv(&rows);
        write_file(&dir.join("sweep.csv"), csv.as_bytes())?;
        text.push('\n');
        text.push_str(&csv);
    }
    Ok(text)
}

/// Writes `h`, `n`, `c` and `ẑ` for every test example, then every item
/// embedding. Returns the number of data rows.
pub fn cmd_export_embeddings(cfg: &RunConfig, checkpoint: &Path, output: &Path) -> Result<usize> {
    let data = load_dataset(cfg)?;
    let (params, loss) = load_model(cfg, checkpoint, &data.vocab)?;
    let d = params.embedding_dim();
    let mut out = String::from("type,id");
    for j in 0..d {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    let mut rows = 0;
    let mut push = |out: &mut String, kind: &str, id: &str, v: &[f64]| {
        let _ = write!(out, "{kind},{id}");
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
        rows += 1;
    };
    if !data.test.is_empty() {
        let q = embed_all(&data.vocab, &params);
        for (ex, raw) in data.test.iter().zip(&data.test_examples) {
            let id = format!("{}@{}", raw.user_id, raw.anchor_time);
            let (h, _) = encode_clicked(&ex.clicked, ex.user, &q, &params)?;
            let (n, _) = encode_unclicked(&ex.unclicked, &q, &params);
            let (c, _) = encode_labels(&ex.labels, &q, &params)?;
            let (z, _) = fuse(&h, &n, &params.fusion, loss.fusion_mode)?;
            push(&mut out, "h", &id, &h);
            push(&mut out, "n", &id, &n);
            push(&mut out, "c", &id, &c);
            push(&mut out, "z", &id, &z);
        }
        for i in 0..data.vocab.n_items() {
            push(&mut out, "item", data.vocab.item_id(i), q.get(i));
        }
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", parent.display())))?;
    }
    write_file(output, out.as_bytes())?;
    Ok(rows)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Checkpoint { .. } | Error::Mismatch(_) => EXIT_ARTIFACT,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sru2b", version, about = "Train and evaluate recommenders over clicked and unclicked sequences")]
pub struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the generator, initialization and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic catalog, event log and hidden latents.
    Generate,
    /// Train one model and write a checkpoint plus loss trace.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every configured ablation variant.
    Ablate,
    /// Dump h, n, c and fused vectors per test example plus item embeddings.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let s = cmd_generate(&cfg)?;
            println!(
                "generated {} items, {} impressions, {} clicks ({} events)",
                s.n_items,
                s.n_impressions,
                s.n_clicks,
                s.n_impressions + s.n_clicks
            );
        }
        Command::Train => {
            let trace = cmd_train(&cfg)?;
            match trace.last() {
                Some(l) => println!("trained {} epochs, final mean loss {l:.6}", trace.len()),
                None => println!("wrote initial checkpoint (0 epochs)"),
            }
        }
        Command::Evaluate { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
            print!("{}", cmd_evaluate(&cfg, &path)?);
        }
        Command::Ablate => print!("{}", cmd_ablate(&cfg)?),
        Command::ExportEmbeddings { checkpoint, output } => {
            let path = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
            let output = output.clone().unwrap_or_else(|| cfg.out_dir().join("embeddings.csv"));
            let rows = cmd_export_embeddings(&cfg, &path, &output)?;
            println!("wrote {rows} rows to {}", output.display());
        }
    }
    Ok(())
}

/// Runs the parsed command and maps failures onto the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
