//! `wfp`: generate corpora, pretrain, train, evaluate and rank workflows.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use workflow_predictor::encoder::{parse_channels, EncoderConfig};
use workflow_predictor::eval::{evaluate, mean_std, report_table, EvalReport};
use workflow_predictor::ingest::{load_manifest, Corpus, Dims};
use workflow_predictor::predictor::{
    history_csv, train_supervised, Fusion, LabeledSet, Mode, Model, ModelCheckpoint, Predict,
};
use workflow_predictor::pretrain::{loss_csv, run_pretraining, EncoderCheckpoint};
use workflow_predictor::search::{
    compare_rewards, regret_csv, score_candidates, summarize, top_k, RewardSource, Scope,
};
use workflow_predictor::synth::{gen_corpus, PlantedOracle, SplitBy, SynthConfig};
use workflow_predictor::{Error, Result};

use crate::config::{exit_code, RunConfig};
use crate::manifest::{hash_all, write_json, write_text, RunManifest, FILE_NAME};

#[derive(Parser, Debug)]
#[command(
    name = "wfp",
    version,
    about = "Predict how well an agent workflow will do on a task without running it"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with a planted success rule.
    Synth(SynthArgs),
    /// Pretrain the workflow encoder on unlabeled workflows.
    Pretrain(PretrainArgs),
    /// Train the success predictor on labeled pairs.
    Train(TrainArgs),
    /// Score a checkpoint (or the planted oracle) on a labeled split.
    Eval(EvalArgs),
    /// Rank candidate workflows, or compare reward sources.
    Rank(RankArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DimsPreset {
    /// 384-wide text, 768-wide code.
    Full,
    /// 16/32-wide channels for quick runs.
    Small,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub workflows: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub min_nodes: Option<usize>,
    #[arg(long)]
    pub max_nodes: Option<usize>,
    #[arg(long)]
    pub edge_prob: Option<f64>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long, value_enum)]
    pub dims: Option<DimsPreset>,
    /// Split unit: `workflow` (default) or `label`.
    #[arg(long, value_parser = parse_split_by)]
    pub split_by: Option<SplitBy>,
    /// Also write this many unlabeled candidate workflows.
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EncoderArgs {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub mlp_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Comma-separated subset of code,graph,text.
    #[arg(long)]
    pub views: Option<String>,
    /// `false` keeps only the operator-feature graph view.
    #[arg(long)]
    pub multi_graph: Option<bool>,
}

impl EncoderArgs {
    fn apply(&self, e: &mut EncoderConfig) -> Result<()> {
        set(&mut e.hidden_dim, self.hidden_dim);
        set(&mut e.gnn_layers, self.gnn_layers);
        set(&mut e.mlp_layers, self.mlp_layers);
        set(&mut e.attention_heads, self.heads);
        set(&mut e.multi_graph, self.multi_graph);
        if let Some(v) = &self.views {
            e.enabled_views = parse_channels(v)?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus manifest; repeat to pool several corpora.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Pretrained encoder checkpoint; its architecture is reused.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub label_ratio: Option<f64>,
    #[arg(long)]
    pub freeze_encoder: Option<bool>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub test: PathBuf,
    /// Model checkpoint; repeat for a multi-seed summary.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Score with the planted oracle instead of a checkpoint.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Reward {
    Predictor,
    Random,
    Oracle,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus manifest holding the candidate workflows and tasks.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "predictor")]
    pub reward: Reward,
    #[arg(long)]
    pub k: Option<usize>,
    /// Compare predictor, oracle and random selection instead of ranking.
    #[arg(long)]
    pub compare: bool,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_parser = parse_scope)]
    pub scope: Option<Scope>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_split_by(s: &str) -> std::result::Result<SplitBy, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    parse_enum(s)
}

fn parse_fusion(s: &str) -> std::result::Result<Fusion, String> {
    parse_enum(s)
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    parse_enum(s)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses `args` and runs the command; maps errors to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, args),
        Command::Pretrain(a) => cmd_pretrain(a, args),
        Command::Train(a) => cmd_train(a, args),
        Command::Eval(a) => cmd_eval(a, args),
        Command::Rank(a) => cmd_rank(a, args),
    }
}

struct Run {
    command: &'static str,
    config: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    args: Vec<String>,
}

impl Run {
    fn start(command: &'static str, common: &CommonArgs, args: Vec<String>) -> Result<Self> {
        let mut config = RunConfig::load(common.config.as_deref())?;
        config.set_seed(common.seed);
        fs::create_dir_all(&common.out).map_err(|e| Error::Io {
            path: common.out.clone(),
            source: e,
        })?;
        Ok(Self {
            command,
            config,
            out: common.out.clone(),
            inputs: common.config.iter().cloned().collect(),
            args,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self, outputs: &[PathBuf]) -> Result<()> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            args: self.args.clone(),
            config: &self.config,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(outputs)?,
        };
        write_json(&self.out.join(FILE_NAME), &m)
    }
}

/// Loads a manifest and remembers every file it references as an input.
fn load_corpus(path: &Path, inputs: &mut Vec<PathBuf>) -> Result<Corpus> {
    let corpus = load_manifest(path)?;
    let m = workflow_predictor::ingest::CorpusManifest::read(path)?;
    inputs.push(path.to_path_buf());
    inputs.push(m.resolve(&m.workflows));
    for p in [&m.tasks, &m.labels, &m.embeddings].into_iter().flatten() {
        inputs.push(m.resolve(p));
    }
    Ok(corpus)
}

fn cmd_synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let mut run = Run::start("synth", &a.common, args)?;
    let s = &mut run.config.synth;
    if let Some(DimsPreset::Small) = a.dims {
        s.dims = SynthConfig::small().dims;
    } else if let Some(DimsPreset::Full) = a.dims {
        s.dims = Dims::default();
    }
    set(&mut s.n_workflows, a.workflows);
    set(&mut s.n_tasks, a.tasks);
    set(&mut s.min_nodes, a.min_nodes);
    set(&mut s.max_nodes, a.max_nodes);
    set(&mut s.edge_prob, a.edge_prob);
    set(&mut s.label_noise, a.label_noise);
    set(&mut s.feature_noise, a.feature_noise);
    set(&mut s.split_by, a.split_by);
    set(&mut s.n_candidates, a.candidates);
    let files = gen_corpus(s, &run.out)?;
    let mut outputs: Vec<PathBuf> = ["workflows.jsonl", "tasks.jsonl", "labels.jsonl"]
        .iter()
        .map(|f| run.path(f))
        .collect();
    outputs.push(files.manifest.clone());
    outputs.extend(files.split_manifests.iter().cloned());
    outputs.push(files.oracle.clone());
    if let Some(c) = &files.candidates {
        outputs.push(run.path("candidates.jsonl"));
        outputs.push(c.clone());
    }
    eprintln!(
        "wrote {} workflows x {} tasks to {}",
        run.config.synth.n_workflows,
        run.config.synth.n_tasks,
        run.out.display()
    );
    run.finish(&outputs)
}

fn cmd_pretrain(a: PretrainArgs, args: Vec<String>) -> Result<()> {
    let mut run = Run::start("pretrain", &a.common, args)?;
    let mut workflows = Vec::new();
    let mut dims: Option<Dims> = None;
    for p in &a.corpus {
        let c = load_corpus(p, &mut run.inputs)?;
        match dims {
            Some(d) if d != c.dims => {
                return Err(Error::Config(format!(
                    "{} has different channel widths from the first corpus",
                    p.display()
                )))
            }
            _ => dims = Some(c.dims),
        }
        workflows.extend(c.workflows);
    }
    let cfg = &mut run.config;
    cfg.encoder.dims = dims.unwrap_or_default();
    a.encoder.apply(&mut cfg.encoder)?;
    set(&mut cfg.pretrain.epochs, a.epochs);
    set(&mut cfg.pretrain.batch_size, a.batch);
    set(&mut cfg.pretrain.learning_rate, a.lr);
    set(&mut cfg.pretrain.weight_decay, a.wd);
    set(&mut cfg.pretrain.temperature, a.temperature);
    let outcome = run_pretraining(&workflows, cfg.encoder.clone(), cfg.pretrain.clone())?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        eprintln!(
            "pretrained on {} workflows: {} steps, loss {:.4} -> {:.4}",
            workflows.len(),
            last.step,
            first.enc,
            last.enc
        );
    }
    let ck = run.path("encoder.json");
    outcome.pretrainer.checkpoint().save(&ck)?;
    let csv = run.path("pretrain_loss.csv");
    write_text(&csv, &loss_csv(&outcome.log))?;
    run.finish(&[ck, csv])
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_accuracy: f64,
    train_samples: usize,
    train_samples_available: usize,
    seed: u64,
}

fn cmd_train(a: TrainArgs, args: Vec<String>) -> Result<()> {
    let mut run = Run::start("train", &a.common, args)?;
    let train = load_corpus(&a.train, &mut run.inputs)?;
    let val = load_corpus(&a.val, &mut run.inputs)?;
    if train.dims != val.dims {
        return Err(Error::Config(
            "train and validation corpora have different channel widths".into(),
        ));
    }
    let pretrained = match &a.init {
        Some(p) => {
            run.inputs.push(p.clone());
            Some(EncoderCheckpoint::load(p)?)
        }
        None => None,
    };
    let cfg = &mut run.config;
    if let Some(ck) = &pretrained {
        cfg.encoder = ck.config.clone();
    }
    a.encoder.apply(&mut cfg.encoder)?;
    if cfg.encoder.dims != train.dims {
        if pretrained.is_some() {
            return Err(Error::Config(
                "pretrained encoder was built for different channel widths".into(),
            ));
        }
        cfg.encoder.dims = train.dims;
    }
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.weight_decay, a.wd);
    set(&mut t.dropout, a.dropout);
    set(&mut t.label_ratio, a.label_ratio);
    set(&mut t.freeze_encoder, a.freeze_encoder);
    set(&mut cfg.head.mode, a.mode);
    set(&mut cfg.head.fusion, a.fusion);
    set(&mut cfg.head.threshold, a.threshold);
    cfg.encoder.dropout = cfg.train.dropout;
    cfg.head.dropout = cfg.train.dropout;

    let mut model = Model::new(cfg.encoder.clone(), cfg.head, cfg.seed)?;
    if let Some(ck) = &pretrained {
        model.load_encoder(ck)?;
    }
    let train_set = LabeledSet::from_corpus(&train)?;
    let val_set = LabeledSet::from_corpus(&val)?;
    let outcome = train_supervised(model, &train_set, &val_set, &cfg.train)?;
    let best = outcome
        .history
        .get(outcome.best_epoch.saturating_sub(1))
        .map_or(f64::NAN, |r| r.val_accuracy);
    eprintln!(
        "trained on {} of {} labeled pairs; best epoch {} (val accuracy {best:.4})",
        outcome.train_samples,
        train_set.len(),
        outcome.best_epoch
    );
    let ck = run.path("model.json");
    outcome.model.checkpoint().save(&ck)?;
    let hist = run.path("history.csv");
    write_text(&hist, &history_csv(&outcome.history))?;
    let summary = run.path("train_summary.json");
    write_json(
        &summary,
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_accuracy: best,
            train_samples: outcome.train_samples,
            train_samples_available: train_set.len(),
            seed: run.config.seed,
        },
    )?;
    run.finish(&[ck, hist, summary])
}

fn load_model(path: &Path, dims: &Dims) -> Result<Model> {
    let ck = ModelCheckpoint::load(path)?;
    if ck.encoder.dims != *dims {
        return Err(Error::Config(format!(
            "{} was trained on different channel widths",
            path.display()
        )));
    }
    Model::from_checkpoint(&ck)
}

#[derive(Serialize)]
struct MultiReport {
    runs: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    utility_mean: f64,
    utility_std: f64,
    utility_thresholded_mean: f64,
    utility_thresholded_std: f64,
    reports: Vec<EvalReport>,
}

fn cmd_eval(a: EvalArgs, args: Vec<String>) -> Result<()> {
    let mut run = Run::start("eval", &a.common, args)?;
    let test = load_corpus(&a.test, &mut run.inputs)?;
    set(&mut run.config.eval.k, a.k.map(Some));
    let set = LabeledSet::from_corpus(&test)?;
    let mut models: Vec<Box<dyn Predict>> = Vec::new();
    match (&a.oracle, a.checkpoint.is_empty()) {
        (Some(_), false) => return Err(Error::Usage("pass either --oracle or --checkpoint, not both".into())),
        (None, true) => return Err(Error::Usage("--checkpoint or --oracle is required".into())),
        (Some(o), true) => {
            run.inputs.push(o.clone());
            models.push(Box::new(PlantedOracle::read(o)?));
        }
        (None, false) => {
            for p in &a.checkpoint {
                run.inputs.push(p.clone());
                models.push(Box::new(load_model(p, &test.dims)?));
            }
        }
    }
    let reports = models
        .iter()
        .map(|m| evaluate(m.as_ref(), &set, run.config.eval.k))
        .collect::<Result<Vec<_>>>()?;
    let out = run.path("report.json");
    if let [r] = reports.as_slice() {
        print!("{}", report_table(r));
        write_json(&out, r)?;
    } else {
        let pick = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        let (am, asd) = pick(|r| r.accuracy);
        let (um, usd) = pick(|r| r.utility);
        let (tm, tsd) = pick(|r| r.utility_thresholded);
        println!("runs                 {}", reports.len());
        println!("accuracy             {am:.4} ± {asd:.4}");
        println!("utility@{:<4}         {um:.4} ± {usd:.4}", reports[0].k);
        println!("utility@{:<4} (hard)  {tm:.4} ± {tsd:.4}", reports[0].k);
        write_json(
            &out,
            &MultiReport {
                runs: reports.len(),
                accuracy_mean: am,
                accuracy_std: asd,
                utility_mean: um,
                utility_std: usd,
                utility_thresholded_mean: tm,
                utility_thresholded_std: tsd,
                reports,
            },
        )?;
    }
    run.finish(&[out])
}

fn cmd_rank(a: RankArgs, args: Vec<String>) -> Result<()> {
    let mut run = Run::start("rank", &a.common, args)?;
    let pool = load_corpus(&a.pool, &mut run.inputs)?;
    let s = &mut run.config.search;
    set(&mut s.k, a.k);
    set(&mut s.trials, a.trials);
    set(&mut s.scope, a.scope);
    let search = run.config.search.clone();

    let oracle = match &a.oracle {
        Some(p) => {
            run.inputs.push(p.clone());
            Some(PlantedOracle::read(p)?)
        }
        None => None,
    };
    let model = match &a.checkpoint {
        Some(p) => {
            run.inputs.push(p.clone());
            Some(load_model(p, &pool.dims)?)
        }
        None => None,
    };
    let need_oracle = || {
        oracle
            .as_ref()
            .ok_or_else(|| Error::Usage("this mode needs --oracle oracle.json".into()))
    };
    let need_model = || {
        model
            .as_ref()
            .ok_or_else(|| Error::Usage("this mode needs --checkpoint".into()))
    };

    if a.compare {
        let rows = compare_rewards(
            &pool.workflows,
            &pool.tasks,
            need_model()?,
            need_oracle()?,
            search.k,
            search.trials,
            run.config.seed,
            search.scope,
        )?;
        let summary = summarize(&rows);
        for s in &summary {
            println!(
                "{:<10} {:.4} ± {:.4}  gap {:.4}",
                s.reward_source, s.mean, s.std, s.mean_gap
            );
        }
        let csv = run.path("regret.csv");
        write_text(&csv, &regret_csv(&rows))?;
        let js = run.path("regret_summary.json");
        write_json(&js, &summary)?;
        return run.finish(&[csv, js]);
    }

    let reward = match a.reward {
        Reward::Predictor => RewardSource::Predictor(need_model()?),
        Reward::Oracle => RewardSource::Oracle(need_oracle()?),
        Reward::Random => RewardSource::Random { seed: run.config.seed },
    };
    let scores = score_candidates(&pool.workflows, &pool.tasks, &reward)?;
    let picks = top_k(&scores, search.k)?;
    let mut csv = String::from("rank,workflow_id,score\n");
    for (i, id) in picks.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, id, scores[id]));
        println!("{:>3}  {id}  {:.4}", i + 1, scores[id]);
    }
    let out = run.path("ranking.csv");
    write_text(&out, &csv)?;
    run.finish(&[out])
}
