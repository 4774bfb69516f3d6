//! Task fusion, prediction head and supervised training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderState, WorkflowBatch, PREFIX};
use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::numerics::layers::{Activation, Linear, Mlp};
use crate::numerics::rng::substream;
use crate::numerics::{AdamConfig, AdamState, NamedTensor, ParamStore, Tape, Tensor, Var};
use crate::pretrain::EncoderCheckpoint;
use crate::synth::{oracle_success, PlantedOracle};
use crate::workflow::{TaskRecord, Workflow};

pub const HEAD_PREFIX: &str = "head.";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Binary,
    Regression,
}

/// How the task embedding joins `Z`: projected to `d` first, or raw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Project,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub mode: Mode,
    pub fusion: Fusion,
    pub dropout: f64,
    pub threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Binary,
            fusion: Fusion::Project,
            dropout: 0.5,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Anything that maps `(workflow, task)` pairs to success estimates.
pub trait Predict {
    fn predict_pairs(&self, pairs: &[(&Workflow, &TaskRecord)]) -> Result<Vec<f64>>;

    fn threshold(&self) -> f64 {
        DEFAULT_THRESHOLD
    }
}

impl Predict for PlantedOracle {
    fn predict_pairs(&self, pairs: &[(&Workflow, &TaskRecord)]) -> Result<Vec<f64>> {
        pairs.iter().map(|(w, t)| oracle_success(w, t, self)).collect()
    }
}

/// Distinct workflows of a set of pairs plus the row each pair reads.
pub struct PairBatch {
    pub workflows: WorkflowBatch,
    pub index: Rc<Vec<usize>>,
    pub tasks: Tensor,
}

impl PairBatch {
    pub fn new(pairs: &[(&Workflow, &TaskRecord)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        // Keyed by address: two distinct workflows may share an id in ad hoc inputs.
        let mut slot: BTreeMap<*const Workflow, usize> = BTreeMap::new();
        let mut unique = Vec::new();
        let mut index = Vec::with_capacity(pairs.len());
        for (w, _) in pairs {
            let next = unique.len();
            let i = *slot.entry(*w as *const Workflow).or_insert_with(|| {
                unique.push(*w);
                next
            });
            index.push(i);
        }
        let rows: Vec<Vec<f64>> = pairs.iter().map(|(_, t)| t.embedding.clone()).collect();
        Ok(Self {
            workflows: WorkflowBatch::new(&unique)?,
            index: Rc::new(index),
            tasks: Tensor::from_rows(&rows).map_err(|_| Error::data("task embedding widths differ"))?,
        })
    }
}

/// Encoder plus head; all weights live in `store`.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderState,
    pub head: HeadConfig,
    task_proj: Option<Linear>,
    mlp: Mlp,
    pub store: ParamStore,
}

impl Model {
    pub fn new(encoder: EncoderConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&head.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderState::new(encoder, &mut store, &mut substream(seed, "init.encoder"))?;
        let mut rng = substream(seed, "init.head");
        let d = encoder.config.hidden_dim;
        let task_dim = encoder.config.dims.task;
        let (task_proj, width) = match head.fusion {
            Fusion::Project => (
                Some(Linear::new(
                    &mut store,
                    &format!("{HEAD_PREFIX}task_proj"),
                    task_dim,
                    d,
                    true,
                    &mut rng,
                )?),
                2 * d,
            ),
            Fusion::Concat => (None, d + task_dim),
        };
        let mlp = Mlp::new(
            &mut store,
            &format!("{HEAD_PREFIX}mlp"),
            &[width, d, 1],
            Activation::Relu,
            head.dropout,
            &mut rng,
        )?;
        Ok(Self {
            encoder,
            head,
            task_proj,
            mlp,
            store,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.mlp.in_dim()
    }

    /// `F = [Z, proj(T)]` (or `[Z, T]` in concat mode).
    pub fn fuse(&self, tape: &mut Tape, z: Var, t: Var) -> Result<Var> {
        let want = self.encoder.config.dims.task;
        if tape.value(t).cols() != want {
            return Err(Error::config(format!(
                "task embedding has width {}, model expects {want}",
                tape.value(t).cols()
            )));
        }
        let t = match &self.task_proj {
            Some(p) => p.forward(tape, &self.store, t)?,
            None => t,
        };
        tape.concat_cols(&[z, t])
    }

    /// Head logits (binary) or scores (regression), one row per pair.
    pub fn raw_output<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &PairBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let enc = self
            .encoder
            .encode_batch(tape, &self.store, &batch.workflows, training, rng)?;
        let z = tape.gather_rows(enc.z, batch.index.clone())?;
        let t = tape.constant(batch.tasks.clone());
        let f = self.fuse(tape, z, t)?;
        self.mlp.forward(tape, &self.store, f, training, rng)
    }

    /// `ê` (sigmoid of the logit) in binary mode, the raw score otherwise.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &PairBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let out = self.raw_output(tape, batch, training, rng)?;
        Ok(match self.head.mode {
            Mode::Binary => tape.sigmoid(out),
            Mode::Regression => out,
        })
    }

    pub fn predict(&self, w: &Workflow, t: &TaskRecord) -> Result<f64> {
        Ok(self.predict_pairs(&[(w, t)])?[0])
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            encoder: self.encoder.config.clone(),
            head: self.head,
            tensors: self.store.to_named(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let mut m = Model::new(ck.encoder.clone(), ck.head, 0)?;
        m.store.load_named(&ck.tensors)?;
        Ok(m)
    }

    /// Replaces encoder weights with pretrained ones. Architectures must agree.
    pub fn load_encoder(&mut self, ck: &EncoderCheckpoint) -> Result<()> {
        let (a, b) = (&ck.config, &self.encoder.config);
        let same = a.hidden_dim == b.hidden_dim
            && a.gnn_layers == b.gnn_layers
            && a.mlp_layers == b.mlp_layers
            && a.attention_heads == b.attention_heads
            && a.enabled_views == b.enabled_views
            && a.multi_graph == b.multi_graph
            && a.dims == b.dims;
        if !same {
            return Err(Error::config(
                "pretrained encoder architecture differs from the model configuration",
            ));
        }
        self.store.load_named_prefix(&ck.tensors, PREFIX)
    }
}

/// Pairs are scored in chunks of this many so memory stays bounded.
const PREDICT_CHUNK: usize = 1024;

impl Predict for Model {
    fn predict_pairs(&self, pairs: &[(&Workflow, &TaskRecord)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut rng = substream(0, "predict");
        for chunk in pairs.chunks(PREDICT_CHUNK) {
            let batch = PairBatch::new(chunk)?;
            let mut tape = Tape::inference();
            let y = self.forward(&mut tape, &batch, false, &mut rng)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    fn threshold(&self) -> f64 {
        self.head.threshold
    }
}

/// Full model state plus architecture, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Mean binary cross-entropy; probabilities are clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(tape: &mut Tape, p: Var, targets: &[f64]) -> Result<Var> {
    tape.bce(p, targets)
}

pub fn mse_loss(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let t = tape.constant(Tensor::new(tape.value(pred).shape().to_vec(), targets.to_vec())?);
    tape.mse(pred, t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub workflow: usize,
    pub task: usize,
    pub outcome: f64,
}

/// Labeled pairs resolved against their workflows and tasks.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub workflows: Vec<Workflow>,
    pub tasks: Vec<TaskRecord>,
    pub samples: Vec<Sample>,
}

impl LabeledSet {
    pub fn from_corpus(c: &Corpus) -> Result<Self> {
        let samples = c
            .labels
            .iter()
            .map(|l| {
                let workflow = c
                    .workflow_index(&l.workflow_id)
                    .ok_or_else(|| Error::data(format!("unknown workflow `{}`", l.workflow_id)))?;
                let task = c
                    .task_index(&l.task_id)
                    .ok_or_else(|| Error::data(format!("unknown task `{}`", l.task_id)))?;
                Ok(Sample {
                    workflow,
                    task,
                    outcome: l.outcome,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            workflows: c.workflows.clone(),
            tasks: c.tasks.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs(&self, idx: &[usize]) -> Vec<(&Workflow, &TaskRecord)> {
        idx.iter()
            .map(|&i| {
                let s = &self.samples[i];
                (&self.workflows[s.workflow], &self.tasks[s.task])
            })
            .collect()
    }

    pub fn all_pairs(&self) -> Vec<(&Workflow, &TaskRecord)> {
        self.pairs(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn outcomes(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.samples[i].outcome).collect()
    }

    pub fn workflow_ids(&self) -> Vec<&str> {
        self.samples
            .iter()
            .map(|s| self.workflows[s.workflow].id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Applied to encoder and head when the model is built.
    pub dropout: f64,
    pub label_ratio: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            dropout: 0.5,
            label_ratio: 1.0,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::config(format!(
                "label_ratio {} must lie in (0, 1]",
                self.label_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("learning_rate and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Uniform sample of `⌈ratio·N⌉` indices without replacement, returned sorted.
pub fn subsample_labels(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("label ratio {ratio} must lie in (0, 1]")));
    }
    let k = ((ratio * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.shuffle(&mut substream(seed, "label_ratio"));
        idx.truncate(k);
        idx.sort_unstable();
    }
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// 1-based.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_samples: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_accuracy));
    }
    out
}

/// Hard-decision accuracy of `model` on `set`. Regression outputs and
/// targets are both thresholded.
pub fn split_accuracy<P: Predict + ?Sized>(model: &P, set: &LabeledSet) -> Result<f64> {
    let preds = model.predict_pairs(&set.all_pairs())?;
    let thr = model.threshold();
    let hits = preds
        .iter()
        .zip(&set.samples)
        .filter(|(p, s)| (**p > thr) == (s.outcome > thr))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// One optimizer step on the given sample indices; returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    optimizer: &mut AdamState,
    set: &LabeledSet,
    idx: &[usize],
    rng: &mut R,
) -> Result<f64> {
    let batch = PairBatch::new(&set.pairs(idx))?;
    let targets = set.outcomes(idx);
    let mut tape = Tape::new();
    let loss = match model.head.mode {
        Mode::Binary => {
            let p = model.forward(&mut tape, &batch, true, rng)?;
            bce_loss(&mut tape, p, &targets)?
        }
        Mode::Regression => {
            let s = model.forward(&mut tape, &batch, true, rng)?;
            mse_loss(&mut tape, s, &targets)?
        }
    };
    tape.backward(loss)?;
    model.store.zero_grads();
    tape.write_param_grads(&mut model.store)?;
    optimizer.step(&mut model.store)?;
    Ok(tape.value(loss).item())
}

/// Trains end to end (or head only) and keeps the epoch with the highest
/// validation accuracy; ties keep the earliest.
pub fn train_supervised(
    mut model: Model,
    train: &LabeledSet,
    val: &LabeledSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::usage("training and validation splits must be non-empty"));
    }
    if model.head.mode == Mode::Binary {
        if let Some(s) = train
            .samples
            .iter()
            .chain(&val.samples)
            .find(|s| s.outcome != 0.0 && s.outcome != 1.0)
        {
            return Err(Error::data(format!(
                "binary mode needs 0/1 outcomes, found {}",
                s.outcome
            )));
        }
    }
    let mut used = subsample_labels(train.len(), config.label_ratio, config.seed)?;
    model.store.set_trainable(PREFIX, !config.freeze_encoder);
    let mut optimizer = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut shuffle = substream(config.seed, "train.shuffle");
    let mut dropout = substream(config.seed, "train.dropout");
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        used.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in used.chunks(config.batch_size) {
            total += train_step(&mut model, &mut optimizer, train, chunk, &mut dropout)? * chunk.len() as f64;
        }
        let val_accuracy = split_accuracy(&model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / used.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.store.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => 0,
    };
    model.store.zero_grads();
    model.store.set_trainable(PREFIX, true);
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        train_samples: used.len(),
    })
}
