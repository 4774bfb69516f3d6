//! Label-free encoder pretraining: modality decoders, reconstruction and
//! symmetric cross-view InfoNCE.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Channel, Encoded, EncoderConfig, EncoderState, WorkflowBatch, PREFIX};
use crate::error::{Error, Result};
use crate::numerics::layers::{Activation, Mlp};
use crate::numerics::rng::substream;
use crate::numerics::{AdamConfig, AdamState, NamedTensor, ParamStore, Tape, Tensor, Var};
use crate::workflow::Workflow;

pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub recon_weight: f64,
    pub contrastive_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 32,
            epochs: 20,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            recon_weight: 1.0,
            contrastive_weight: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (in-batch negatives)"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("learning_rate and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Decoders from latents back to the graph latent, code and prompt embeddings.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub graph: Option<Mlp>,
    pub code: Option<Mlp>,
    pub prompt: Option<Mlp>,
}

impl DecoderState {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = config.hidden_dim;
        let dims = |out: usize| {
            let mut v = vec![d; config.mlp_layers];
            v.push(out);
            v
        };
        let mut make = |c: Channel, name: &str, out: usize| -> Result<Option<Mlp>> {
            if config.enabled(c) {
                let full = format!("{DECODER_PREFIX}{name}");
                Ok(Some(Mlp::new(store, &full, &dims(out), Activation::Relu, 0.0, rng)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            graph: make(Channel::Graph, "graph", d)?,
            code: make(Channel::Code, "code", config.dims.code_workflow)?,
            prompt: make(Channel::Text, "prompt", config.dims.prompt_workflow)?,
        })
    }

    /// `(ĝ, ĉ, p̂)` for whichever latents are present.
    pub fn decode_views<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_graph: Option<Var>,
        z_code: Option<Var>,
        z_prompt: Option<Var>,
        rng: &mut R,
    ) -> Result<[Option<Var>; 3]> {
        let mut run = |mlp: &Option<Mlp>, z: Option<Var>| -> Result<Option<Var>> {
            match (mlp, z) {
                (Some(m), Some(z)) => Ok(Some(m.forward(tape, store, z, false, rng)?)),
                _ => Ok(None),
            }
        };
        Ok([
            run(&self.graph, z_graph)?,
            run(&self.code, z_code)?,
            run(&self.prompt, z_prompt)?,
        ])
    }
}

/// `(1/M) Σᵢ Σ_views ‖targetᵢ − reconᵢ‖²` over `(recon, target)` pairs of `M`-row matrices.
pub fn recon_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::usage("reconstruction needs at least one view"))?;
    let m = tape.value(first.0).rows() as f64;
    let mut total: Option<Var> = None;
    for &(recon, target) in pairs {
        let diff = tape.sub(target, recon)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / m))
}

/// Symmetric InfoNCE with cosine similarity, averaged over all view pairs.
/// Each pair contributes the mean of both anchor directions.
pub fn contrastive_loss(tape: &mut Tape, latents: &[Var], temperature: f64) -> Result<Var> {
    if latents.len() < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = tape.value(latents[0]).rows();
    if m < 2 {
        return Err(Error::usage(format!(
            "contrastive loss needs at least 2 samples, got {m}"
        )));
    }
    let normed: Vec<Var> = latents.iter().map(|&z| tape.normalize_rows(z)).collect::<Result<_>>()?;
    let diag = tape.constant(Tensor::eye(m));
    let mut terms = Vec::new();
    for a in 0..normed.len() {
        for b in a + 1..normed.len() {
            let bt = tape.transpose(normed[b])?;
            let sim = tape.matmul(normed[a], bt)?;
            let logits = tape.scale(sim, 1.0 / temperature);
            for axis in [1, 0] {
                let lsm = tape.log_softmax(logits, axis)?;
                let picked = tape.mul(lsm, diag)?;
                let s = tape.sum(picked);
                terms.push(tape.scale(s, -1.0 / m as f64));
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub rec: f64,
    pub con: f64,
    pub enc: f64,
}

/// Encoder, decoders and their optimizer.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub encoder: EncoderState,
    pub decoders: DecoderState,
    pub store: ParamStore,
    pub optimizer: AdamState,
    pub config: PretrainConfig,
}

impl Pretrainer {
    /// Encoder weights are drawn from the same substream the supervised
    /// model uses, so a zero-step pretraining run equals a fresh init.
    pub fn new(encoder: EncoderConfig, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderState::new(encoder, &mut store, &mut substream(config.seed, "init.encoder"))?;
        let decoders = DecoderState::new(&encoder.config, &mut store, &mut substream(config.seed, "init.decoder"))?;
        let optimizer = AdamState::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
            &store,
        );
        Ok(Self {
            encoder,
            decoders,
            store,
            optimizer,
            config,
        })
    }

    /// Builds the loss graph for one batch without stepping.
    pub fn losses<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &WorkflowBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var, Var)> {
        if batch.count < 2 {
            return Err(Error::usage("pretraining batches need at least 2 workflows"));
        }
        let Encoded {
            z_graph,
            z_code,
            z_prompt,
            ..
        } = self.encoder.encode_batch(tape, &self.store, batch, training, rng)?;
        let [g_hat, c_hat, p_hat] = self
            .decoders
            .decode_views(tape, &self.store, z_graph, z_code, z_prompt, rng)?;
        let mut pairs = Vec::new();
        if let (Some(r), Some(z)) = (g_hat, z_graph) {
            let target = tape.detach(z);
            pairs.push((r, target));
        }
        if let Some(r) = c_hat {
            let target = tape.constant(batch.code.clone());
            pairs.push((r, target));
        }
        if let Some(r) = p_hat {
            let target = tape.constant(batch.prompt.clone());
            pairs.push((r, target));
        }
        let rec = recon_loss(tape, &pairs)?;
        let latents: Vec<Var> = [z_graph, z_code, z_prompt].into_iter().flatten().collect();
        let con = contrastive_loss(tape, &latents, self.config.temperature)?;
        let a = tape.scale(rec, self.config.recon_weight);
        let b = tape.scale(con, self.config.contrastive_weight);
        let enc = tape.add(a, b)?;
        Ok((rec, con, enc))
    }

    /// Forward, one backward pass and one optimizer step.
    pub fn pretrain_step<R: Rng + ?Sized>(&mut self, workflows: &[&Workflow], rng: &mut R) -> Result<PretrainLosses> {
        let batch = WorkflowBatch::new(workflows)?;
        let mut tape = Tape::new();
        let (rec, con, enc) = self.losses(&mut tape, &batch, true, rng)?;
        tape.backward(enc)?;
        self.store.zero_grads();
        tape.write_param_grads(&mut self.store)?;
        self.optimizer.step(&mut self.store)?;
        Ok(PretrainLosses {
            rec: tape.value(rec).item(),
            con: tape.value(con).item(),
            enc: tape.value(enc).item(),
        })
    }

    pub fn checkpoint(&self) -> EncoderCheckpoint {
        EncoderCheckpoint {
            config: self.encoder.config.clone(),
            tensors: self.store.to_named_prefix(PREFIX),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub rec: f64,
    pub con: f64,
    pub enc: f64,
}

/// Encoder-only weights with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

impl EncoderCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

pub struct PretrainOutcome {
    pub pretrainer: Pretrainer,
    pub log: Vec<LossRecord>,
}

/// Epochs of seeded shuffles over `workflows`; a trailing batch smaller than
/// two is dropped because it has no negatives.
pub fn run_pretraining(
    workflows: &[Workflow],
    encoder: EncoderConfig,
    config: PretrainConfig,
) -> Result<PretrainOutcome> {
    if workflows.is_empty() {
        return Err(Error::usage("pretraining corpus is empty"));
    }
    let mut p = Pretrainer::new(encoder, config)?;
    let mut shuffle = substream(p.config.seed, "pretrain.shuffle");
    let mut dropout = substream(p.config.seed, "pretrain.dropout");
    let mut order: Vec<usize> = (0..workflows.len()).collect();
    let mut log = Vec::new();
    for epoch in 1..=p.config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(p.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Workflow> = chunk.iter().map(|&i| &workflows[i]).collect();
            let l = p.pretrain_step(&batch, &mut dropout)?;
            log.push(LossRecord {
                step: log.len() + 1,
                epoch,
                rec: l.rec,
                con: l.con,
                enc: l.enc,
            });
        }
    }
    Ok(PretrainOutcome { pretrainer: p, log })
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,l_rec,l_con,l_enc\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.rec, r.con, r.enc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Dims;
    use crate::numerics::{grad_check, grad_check_params};
    use crate::synth::{generate, SynthConfig};

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            attention_heads: 2,
            dropout: 0.0,
            dims: SynthConfig::small().dims,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn contrastive_two_way_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = contrastive_loss(&mut tape, &[a, b], 1.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_equal_latents_is_ln_m() {
        for m in [2usize, 5, 9] {
            let mut tape = Tape::new();
            let z: Vec<Var> = (0..3).map(|_| tape.leaf(Tensor::full(&[m, 4], 0.7))).collect();
            let l = contrastive_loss(&mut tape, &z, 0.07).unwrap();
            assert!((tape.value(l).item() - (m as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_is_scale_invariant_and_checks_batch() {
        let rows = |s: f64| Tensor::matrix(3, 2, vec![1.0 * s, 0.2 * s, -0.3 * s, 0.9 * s, 0.5 * s, 0.5 * s]).unwrap();
        let run = |sa: f64, sb: f64| {
            let mut tape = Tape::new();
            let a = tape.leaf(rows(sa));
            let b = tape.leaf(
                Tensor::matrix(3, 2, vec![0.8, 0.1, -0.2, 1.0, 0.3, 0.7])
                    .unwrap()
                    .reshape(&[3, 2])
                    .unwrap(),
            );
            let b = tape.scale(b, sb);
            let l = contrastive_loss(&mut tape, &[a, b], 0.5).unwrap();
            tape.value(l).item()
        };
        assert!((run(1.0, 1.0) - run(3.5, 0.2)).abs() < 1e-12);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            contrastive_loss(&mut tape, &[a, a], 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn contrastive_gradient_matches_fd() {
        let x = Tensor::matrix(3, 3, vec![0.3, -0.2, 0.9, 0.1, 0.4, -0.6, -0.5, 0.8, 0.2]).unwrap();
        let e = grad_check(
            |t, a| {
                let b = t.constant(Tensor::matrix(3, 3, vec![0.2, 0.1, 0.7, -0.3, 0.5, 0.1, 0.4, -0.4, 0.6]).unwrap());
                let c = t.tanh(a);
                contrastive_loss(t, &[a, b, c], 0.5)
            },
            &x,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn recon_examples() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let same = tape.constant(tape.value(r).clone());
        let l = recon_loss(&mut tape, &[(r, same)]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let c = tape.leaf(Tensor::zeros(&[1, 3]));
        let p = tape.leaf(Tensor::zeros(&[1, 2]));
        let zeros2 = tape.constant(Tensor::zeros(&[1, 2]));
        let zeros3 = tape.constant(Tensor::zeros(&[1, 3]));
        let l = recon_loss(&mut tape, &[(g, zeros2), (c, zeros3), (p, zeros2)]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn graph_target_branch_carries_no_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.3])
                .unwrap()
                .with_requires_grad(true),
        );
        let target = tape.detach(z);
        let w = tape.leaf(
            Tensor::matrix(2, 2, vec![1.5, 0.2, -0.4, 0.9])
                .unwrap()
                .with_requires_grad(true),
        );
        let recon = tape.matmul(z, w).unwrap();
        let l = recon_loss(&mut tape, &[(recon, target)]).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(target).is_none());
        // only the reconstruction path reaches z: d/dz ‖z − zW‖² with z held fixed as target
        let zt = tape.value(z).clone();
        let rt = tape.value(recon).clone();
        let wt = tape.value(w).clone();
        let g = tape.grad(z).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let mut expect = 0.0;
                for j in 0..2 {
                    expect += -2.0 * (zt.at(i, j) - rt.at(i, j)) * wt.at(k, j) / 2.0;
                }
                assert!((g[i * 2 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoders_zero_and_shapes() {
        let cfg = EncoderConfig {
            dims: Dims {
                code_workflow: 768,
                ..enc_cfg().dims
            },
            ..enc_cfg()
        };
        let mut store = ParamStore::new();
        let dec = DecoderState::new(&cfg, &mut store, &mut substream(0, "d")).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 8]));
        let [g, c, p] = dec
            .decode_views(&mut tape, &store, Some(z), Some(z), Some(z), &mut substream(0, "x"))
            .unwrap();
        assert_eq!(tape.value(c.unwrap()).shape(), &[1, 768]);
        assert!(tape.value(c.unwrap()).data().iter().all(|&x| x == 0.0));
        assert!(tape.value(g.unwrap()).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(p.unwrap()).shape(), &[1, 16]);

        let ids: Vec<_> = store.ids().collect();
        let e = grad_check_params(&store, &ids, 5, |t, s| {
            let z = t.constant(Tensor::matrix(1, 8, (0..8).map(|i| 0.1 * i as f64 - 0.3).collect())?);
            let [g, c, p] = dec.decode_views(t, s, Some(z), Some(z), Some(z), &mut substream(0, "x"))?;
            let parts = [g.unwrap(), c.unwrap(), p.unwrap()];
            let all = t.concat_cols(&parts)?;
            let sq = t.mul(all, all)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn steps_are_deterministic_and_lr_zero_freezes() {
        let corpus = generate(&SynthConfig {
            n_workflows: 8,
            n_tasks: 2,
            ..SynthConfig::small()
        })
        .unwrap();
        let refs: Vec<&Workflow> = corpus.workflows.iter().collect();
        let run = |lr: f64| {
            let mut p = Pretrainer::new(
                enc_cfg(),
                PretrainConfig {
                    learning_rate: lr,
                    ..PretrainConfig::default()
                },
            )
            .unwrap();
            let before = p.store.to_named();
            let mut rng = substream(0, "drop");
            let a = p.pretrain_step(&refs, &mut rng).unwrap();
            let b = p.pretrain_step(&refs, &mut rng).unwrap();
            (before, p.store.to_named(), a, b)
        };
        let (b1, a1, l1, l2) = run(1e-3);
        let (b2, a2, m1, m2) = run(1e-3);
        assert_eq!((&b1, &a1, l1, l2), (&b2, &a2, m1, m2));
        let (before, after, z1, z2) = run(0.0);
        assert_eq!(before, after);
        assert_eq!(z1, z2);
    }

    #[test]
    fn bookkeeping_counts_steps() {
        let corpus = generate(&SynthConfig {
            n_workflows: 64,
            n_tasks: 1,
            ..SynthConfig::small()
        })
        .unwrap();
        let out = run_pretraining(
            &corpus.workflows,
            enc_cfg(),
            PretrainConfig {
                epochs: 2,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.log.last().unwrap().epoch, 2);
        assert!(loss_csv(&out.log).starts_with("step,epoch,l_rec,l_con,l_enc\n1,1,"));
        assert!(matches!(
            run_pretraining(&[], enc_cfg(), PretrainConfig::default()),
            Err(Error::Usage(_))
        ));
    }
}
