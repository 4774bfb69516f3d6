//! Browser demo. Everything runs client-side on a small synthetic corpus:
//! generate it, train a predictor on it, then rank unseen candidates.
//!
//! Methods return JSON strings so the page needs no bindings beyond strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use workflow_predictor::encoder::{parse_channels, EncoderConfig};
use workflow_predictor::eval::evaluate;
use workflow_predictor::ingest::Corpus;
use workflow_predictor::predictor::{train_supervised, HeadConfig, LabeledSet, Model, Predict, TrainConfig};
use workflow_predictor::search::{compare_rewards, score_candidates, summarize, top_k, RewardSource, Scope};
use workflow_predictor::synth::{generate, SplitBy, SynthConfig, SynthCorpus};
use workflow_predictor::workflow::Workflow;

const TASKS: usize = 12;
const CANDIDATES: usize = 40;

#[derive(Serialize)]
struct NodeView<'a> {
    operator: &'a str,
}

#[derive(Serialize)]
struct WorkflowView<'a> {
    id: &'a str,
    nodes: Vec<NodeView<'a>>,
    edges: &'a [[usize; 2]],
    oracle_rate: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    workflows: usize,
    tasks: usize,
    labels: usize,
    positive_share: f64,
    candidates: usize,
    sample: Vec<WorkflowView<'a>>,
}

#[derive(Serialize)]
struct TrainView {
    views: String,
    epochs: Vec<(usize, f64, f64)>,
    best_epoch: usize,
    test_accuracy: f64,
    test_utility: f64,
    k: usize,
}

#[derive(Serialize)]
struct Ranked {
    id: String,
    predicted: f64,
    oracle_rate: f64,
}

#[derive(Serialize)]
struct RankView {
    top: Vec<Ranked>,
    /// (reward source, mean realized success) over repeated trials.
    comparison: Vec<(String, f64)>,
}

#[wasm_bindgen]
pub struct Demo {
    corpus: SynthCorpus,
    seed: u64,
    model: Option<Model>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(err)
}

impl Demo {
    fn split(&self, k: usize) -> Result<LabeledSet, String> {
        let c = &self.corpus;
        LabeledSet::from_corpus(&Corpus {
            workflows: c.workflows.clone(),
            tasks: c.tasks.clone(),
            labels: c.splits[k].iter().map(|&i| c.labels[i].clone()).collect(),
            dims: SynthConfig::small().dims,
        })
        .map_err(err)
    }

    /// Mean planted success probability over all tasks.
    fn oracle_rate(&self, w: &Workflow) -> Result<f64, String> {
        let pairs: Vec<_> = self.corpus.tasks.iter().map(|t| (w, t)).collect();
        let p = self.corpus.oracle.predict_pairs(&pairs).map_err(err)?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, workflows: u32) -> Result<Demo, String> {
        let corpus = generate(&SynthConfig {
            n_workflows: workflows as usize,
            n_tasks: TASKS,
            n_candidates: CANDIDATES,
            // Every workflow keeps test labels, so utility@k has enough workflows to rank.
            split_by: SplitBy::Label,
            seed: seed as u64,
            ..SynthConfig::small()
        })
        .map_err(err)?;
        Ok(Demo {
            corpus,
            seed: seed as u64,
            model: None,
        })
    }

    /// Corpus statistics plus the first few workflows for drawing.
    pub fn summary(&self) -> Result<String, String> {
        let c = &self.corpus;
        let sample = c
            .workflows
            .iter()
            .take(6)
            .map(|w| {
                Ok(WorkflowView {
                    id: &w.id,
                    nodes: w
                        .nodes
                        .iter()
                        .map(|n| NodeView {
                            operator: &n.operator_type,
                        })
                        .collect(),
                    edges: &w.edges,
                    oracle_rate: self.oracle_rate(w)?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let positives = c.labels.iter().filter(|l| l.outcome > 0.5).count();
        json(&Summary {
            workflows: c.workflows.len(),
            tasks: c.tasks.len(),
            labels: c.labels.len(),
            positive_share: positives as f64 / c.labels.len() as f64,
            candidates: c.candidates.len(),
            sample,
        })
    }

    /// Trains from scratch on the enabled views (`"code,graph,text"` or a subset).
    pub fn train(&mut self, epochs: u32, views: &str) -> Result<String, String> {
        let enc = EncoderConfig {
            hidden_dim: 16,
            attention_heads: 2,
            dropout: 0.1,
            enabled_views: parse_channels(views).map_err(err)?,
            dims: SynthConfig::small().dims,
            ..EncoderConfig::default()
        };
        let head = HeadConfig {
            dropout: 0.1,
            ..HeadConfig::default()
        };
        let cfg = TrainConfig {
            epochs: epochs.max(1) as usize,
            batch_size: 64,
            learning_rate: 1e-3,
            dropout: 0.1,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let (train, val, test) = (self.split(0)?, self.split(1)?, self.split(2)?);
        let model = Model::new(enc, head, self.seed).map_err(err)?;
        let out = train_supervised(model, &train, &val, &cfg).map_err(err)?;
        let report = evaluate(&out.model, &test, None).map_err(err)?;
        let view = TrainView {
            views: views.to_string(),
            epochs: out
                .history
                .iter()
                .map(|r| (r.epoch, r.train_loss, r.val_accuracy))
                .collect(),
            best_epoch: out.best_epoch,
            test_accuracy: report.accuracy,
            test_utility: report.utility_thresholded,
            k: report.k,
        };
        self.model = Some(out.model);
        json(&view)
    }

    /// Top-`k` unseen candidates by predicted success, plus realized success
    /// of predictor, random and oracle selection.
    pub fn rank(&self, k: u32) -> Result<String, String> {
        let model = self.model.as_ref().ok_or("train a model first")?;
        let c = &self.corpus;
        let k = (k as usize).clamp(1, c.candidates.len());
        let scores = score_candidates(&c.candidates, &c.tasks, &RewardSource::Predictor(model)).map_err(err)?;
        let top = top_k(&scores, k)
            .map_err(err)?
            .into_iter()
            .map(|id| {
                let w = c
                    .candidates
                    .iter()
                    .find(|w| w.id == id)
                    .expect("ranked id comes from the pool");
                Ok(Ranked {
                    predicted: scores[&id],
                    oracle_rate: self.oracle_rate(w)?,
                    id,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let rows = compare_rewards(
            &c.candidates,
            &c.tasks,
            model,
            &c.oracle,
            k,
            5,
            self.seed,
            Scope::Pooled,
        )
        .map_err(err)?;
        let comparison = summarize(&rows)
            .into_iter()
            .map(|s| (s.reward_source, s.mean))
            .collect();
        json(&RankView { top, comparison })
    }
}
