//! Command-line surface of the `embsum` binary.

mod sweep;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ctr::{evaluate_with_summaries, train, TrainConfig};
use crate::embstore::{load_head, precompute_dataset_cpe, precompute_dataset_upe, score_offline, EmbeddingFile};
use crate::metrics::{aggregate, mean_rouge, ImpressionResult};
use crate::model::{Ablations, EmbSum, GlobalMode};
use crate::textdata::{synth_generate, DataOptions, Dataset, Split, SynthConfig};
use crate::usermodel::infer_upe_with;

pub use sweep::{grid, run_sweep, SweepRow, CPE_CODES, LAMBDAS, TABLE_HEADER, UPE_CODES};

#[derive(Debug, Parser)]
#[command(name = "embsum", version, about = "Train, evaluate and serve EmbSum recommendation models")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic topic corpus.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint.
    Train(RunArgs),
    /// Score one split and write ranking metrics.
    Evaluate(EvaluateArgs),
    /// Precompute candidate and user embedding files.
    Precompute(PrecomputeArgs),
    /// Rank candidates for a user from embedding files.
    Score(ScoreArgs),
    /// Generate user summaries.
    Summarize(SummarizeArgs),
    /// Train the λ × n × m grid and tabulate dev metrics.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub k_history: Option<usize>,
    #[arg(long)]
    pub title_len: Option<usize>,
    #[arg(long)]
    pub abstract_len: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Shared by `train` and `sweep`.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// mind, goodreads, or a literal template such as "{title} {abstract}".
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub neg_ratio: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub upe_codes: Option<usize>,
    #[arg(long)]
    pub cpe_codes: Option<usize>,
    #[arg(long)]
    pub code_dim: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub k_history: Option<usize>,
    #[arg(long)]
    pub items_per_session: Option<usize>,
    #[arg(long)]
    pub max_summary_len: Option<usize>,
    /// One of none, no_cpe, no_sessions, upe_size_1, no_sum_loss.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Fraction of training impressions to keep.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "scores")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate precomputed scores instead of a model: one line per
    /// impression, `id<TAB>score score ...` in candidate order.
    #[arg(long, conflicts_with = "checkpoint")]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "mind")]
    pub template: String,
    /// Also report ROUGE of generated summaries.
    #[arg(long)]
    pub rouge: bool,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only users of this split; all users by default.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value = "mind")]
    pub template: String,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Checkpoint holding the scoring head.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub upe: PathBuf,
    #[arg(long)]
    pub cpe: PathBuf,
    #[arg(long)]
    pub user: String,
    /// Comma-separated item ids; every stored item when omitted.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "mind")]
    pub template: String,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (train, dev, test)"))
    }
}

/// Everything a training run depends on; echoed as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub data: DataOptions,
    pub train_fraction: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            out_dir: None,
            data: DataOptions::default(),
            train_fraction: 1.0,
            train: TrainConfig::default(),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl RunConfig {
    /// Config file (if any) with command-line overrides applied.
    pub fn materialize(args: &RunArgs) -> anyhow::Result<RunConfig> {
        let mut c: RunConfig = match &args.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = &args.$flag {
                    c.$($field)+ = v.clone().into();
                }
            };
        }
        set!(data => data_dir);
        set!(out => out_dir);
        set!(template => data.template);
        set!(epochs => train.epochs);
        set!(lr => train.lr);
        set!(lambda => train.lambda);
        set!(batch_size => train.batch_size);
        set!(neg_ratio => train.neg_ratio);
        set!(seed => train.seed);
        set!(upe_codes => train.model.upe_codes);
        set!(cpe_codes => train.model.cpe_codes);
        set!(code_dim => train.model.code_dim);
        set!(d_model => train.model.transformer.d_model);
        set!(heads => train.model.transformer.n_heads);
        set!(enc_layers => train.model.transformer.n_enc_layers);
        set!(dec_layers => train.model.transformer.n_dec_layers);
        set!(d_ff => train.model.transformer.d_ff);
        set!(dropout => train.model.transformer.dropout);
        set!(k_history => train.model.k_history);
        set!(items_per_session => train.model.items_per_session);
        set!(max_summary_len => train.model.max_summary_len);
        set!(train_fraction => train_fraction);
        if let Some(a) = &args.ablation {
            c.train.model.ablations = Ablations::only(a)?;
        }
        if c.data_dir.is_none() || c.out_dir.is_none() {
            bail!("both a data directory and an output directory are required (--data, --out)");
        }
        c.train.validate()?;
        Ok(c)
    }

    pub fn load_data(&self) -> anyhow::Result<Dataset> {
        let dir = self.data_dir.as_deref().ok_or_else(|| anyhow!("no data directory"))?;
        let data = Dataset::load_dir(dir, &self.data, None)?;
        Ok(if self.train_fraction < 1.0 {
            data.subsample_train(self.train_fraction, self.train.seed)?
        } else {
            data
        })
    }
}

/// An output directory whose new files are deleted if the command fails.
struct Outputs {
    dir: PathBuf,
    created: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn prepare(dir: &Path) -> anyhow::Result<Outputs> {
        let created = !dir.exists();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created,
            files: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn run<T>(dir: &Path, body: impl FnOnce(&mut Outputs) -> anyhow::Result<T>) -> anyhow::Result<T> {
        let mut out = Outputs::prepare(dir)?;
        let result = body(&mut out);
        if result.is_err() {
            if out.created {
                let _ = std::fs::remove_dir_all(&out.dir);
            } else {
                for f in &out.files {
                    let _ = std::fs::remove_file(f);
                }
            }
        }
        result
    }
}

fn data_options(template: &str) -> DataOptions {
    DataOptions {
        template: template.to_string(),
        ..DataOptions::default()
    }
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    let overrides = [
        (a.users, &mut cfg.n_users),
        (a.items, &mut cfg.n_items),
        (a.topics, &mut cfg.n_topics),
        (a.k_history, &mut cfg.k_history),
        (a.title_len, &mut cfg.title_len),
        (a.abstract_len, &mut cfg.abstract_len),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.noise {
        cfg.history_noise = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = synth_generate(&cfg)?;
    Outputs::run(&a.out, |out| {
        for name in ["news.tsv", "summaries.tsv", "topics.json", "behaviors_train.tsv", "behaviors_dev.tsv", "behaviors_test.tsv"] {
            out.file(name);
        }
        corpus.write_dir(&a.out)?;
        out.write_json("synth_config.json", &cfg)?;
        eprintln!("wrote {} items, {} users to {}", corpus.items.len(), corpus.records.len(), a.out.display());
        Ok(())
    })
}

fn cmd_train(a: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::materialize(a)?;
    let data = cfg.load_data()?;
    let dir = cfg.out_dir.clone().expect("checked in materialize");
    Outputs::run(&dir, |out| {
        out.write_json("config.json", &cfg)?;
        let ck = out.file("model.embm");
        let log = out.file("train_log.jsonl");
        let result = train(&data, &cfg.train, Some(&ck), Some(&log))?;
        let best = &result.log[result.best_epoch - 1];
        out.write_json("best_epoch.json", best)?;
        eprintln!("best epoch {} (dev AUC {:?}); checkpoint {}", result.best_epoch, result.best_dev_auc, ck.display());
        Ok(())
    })
}

fn parse_scores(path: &Path) -> anyhow::Result<std::collections::HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected id<TAB>scores", path.display(), n + 1))?;
        let scores = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: bad score", path.display(), n + 1))?;
        if out.insert(id.to_string(), scores).is_some() {
            bail!("{}:{}: duplicate impression {id}", path.display(), n + 1);
        }
    }
    Ok(out)
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let report = if let Some(scores) = &a.scores {
        let data = Dataset::load_dir(&a.data, &data_options(&a.template), None)?;
        let scores = parse_scores(scores)?;
        let mut results = Vec::new();
        for imp in data.split(a.split) {
            let s = scores
                .get(&imp.id)
                .ok_or_else(|| anyhow!("no scores for impression {}", imp.id))?;
            if s.len() != imp.candidates.len() {
                bail!("impression {} has {} candidates but {} scores", imp.id, imp.candidates.len(), s.len());
            }
            results.push(ImpressionResult {
                scores: s.clone(),
                labels: imp.labels(),
            });
        }
        aggregate(&results)?
    } else {
        let ck = a.checkpoint.as_deref().expect("clap requires checkpoint or scores");
        let (model, params, vocab) = EmbSum::load(ck)?;
        let data = Dataset::load_dir(&a.data, &data_options(&a.template), Some(vocab))?;
        evaluate_with_summaries(&model, &params, &data, a.split, a.rouge)?.report
    };
    Outputs::run(&a.out, |out| {
        out.write_json(&format!("metrics_{}.json", a.split.name()), &report)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        Ok(())
    })
}

fn cmd_precompute(a: &PrecomputeArgs) -> anyhow::Result<()> {
    let (model, params, vocab) = EmbSum::load(&a.checkpoint)?;
    let data = Dataset::load_dir(&a.data, &data_options(&a.template), Some(vocab))?;
    Outputs::run(&a.out, |out| {
        let cpe = precompute_dataset_cpe(&model, &params, &data)?;
        cpe.write(&out.file("items.cpe.embs"))?;
        let upe = precompute_dataset_upe(&model, &params, &data, a.split)?;
        upe.write(&out.file("users.upe.embs"))?;
        eprintln!("wrote {} item and {} user embeddings to {}", cpe.len(), upe.len(), a.out.display());
        Ok(())
    })
}

fn cmd_score(a: &ScoreArgs) -> anyhow::Result<()> {
    let w_s = load_head(&a.checkpoint)?;
    let upes = EmbeddingFile::read(&a.upe)?;
    let cpes = EmbeddingFile::read(&a.cpe)?;
    let cands: Vec<&str> = if a.candidates.is_empty() {
        cpes.ids().iter().map(String::as_str).collect()
    } else {
        a.candidates.iter().map(String::as_str).collect()
    };
    let ranked = score_offline(&upes, &cpes, &w_s, &a.user, &cands, a.top_k)?;
    let mut stdout = std::io::stdout().lock();
    if a.json {
        let rows: Vec<_> = ranked
            .iter()
            .map(|(id, s)| serde_json::json!({"id": id, "score": s}))
            .collect();
        writeln!(stdout, "{}", serde_json::to_string_pretty(&serde_json::json!({"user": a.user, "ranking": rows}))?)?;
    } else {
        for (id, s) in ranked {
            writeln!(stdout, "{id}\t{s}")?;
        }
    }
    Ok(())
}

fn cmd_summarize(a: &SummarizeArgs) -> anyhow::Result<()> {
    let (model, params, vocab) = EmbSum::load(&a.checkpoint)?;
    let data = Dataset::load_dir(&a.data, &data_options(&a.template), Some(vocab))?;
    let mut rows = Vec::new();
    for u in data.split_users(a.split) {
        let input = model.user_input(&data, u)?;
        let (_, generated) = infer_upe_with(&model, &params, &input, GlobalMode::InferGenerate)?;
        let text = generated.map(|g| data.vocab.decode(&g)).unwrap_or_default();
        rows.push((u.to_string(), text));
    }
    let mut pairs = Vec::new();
    for (u, text) in &rows {
        if let Some(r) = data.user(u)?.summary.as_deref() {
            pairs.push((text.as_str(), r));
        }
    }
    if let Some(r) = mean_rouge(pairs) {
        eprintln!("ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4}", r.rouge1_f, r.rouge2_f, r.rouge_l_f);
    }
    Outputs::run(&a.out, |out| {
        let p = out.file("summaries_out.tsv");
        let body: String = rows.iter().map(|(u, t)| format!("{u}\t{t}\n")).collect();
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    })
}

fn cmd_sweep(a: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::materialize(a)?;
    let data = cfg.load_data()?;
    let dir = cfg.out_dir.clone().expect("checked in materialize");
    Outputs::run(&dir, |out| {
        out.write_json("config.json", &cfg)?;
        let table = out.file("sweep.tsv");
        let mut f = std::fs::File::create(&table).with_context(|| format!("creating {}", table.display()))?;
        writeln!(f, "{TABLE_HEADER}")?;
        let rows = run_sweep(&data, &cfg.train, &grid(), |row| {
            writeln!(f, "{}", row.tsv()).map_err(|e| crate::Error::Io {
                path: table.clone(),
                source: e,
            })
        })?;
        out.write_json("sweep.json", &rows)?;
        println!("{TABLE_HEADER}");
        for r in &rows {
            println!("{}", r.tsv());
        }
        Ok(())
    })
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Score(a) => cmd_score(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses arguments, runs the command, and reports failures as one JSON line on stderr.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| {
                    if let Some(err) = c.downcast_ref::<crate::Error>() {
                        Some(err.kind())
                    } else if c.is::<serde_json::Error>() {
                        Some("json")
                    } else if c.is::<std::io::Error>() {
                        Some("io")
                    } else {
                        None
                    }
                })
                .unwrap_or("error");
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("{}", serde_json::json!({"error": kind, "message": msg}));
            ExitCode::FAILURE
        }
    }
}
