//! Multi-view workflow encoder.
//!
//! Workflows in a batch are stacked into one node matrix per view, so every
//! graph op runs once per batch. Row-normalized directed adjacency with
//! self-loops drives message passing; views of the same node attend to each
//! other; a per-node softmax pools the views; a mean readout gives `Z_G`.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dims, HIDDEN_DIM};
use crate::numerics::layers::{Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::numerics::{ParamStore, SparseRows, Tape, Tensor, Var};
use crate::workflow::{View, Workflow};

pub const PREFIX: &str = "encoder.";

/// The three representation channels of a workflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Graph,
    Code,
    Text,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Graph, Channel::Code, Channel::Text];
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Graph => "graph",
            Channel::Code => "code",
            Channel::Text => "text",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "graph" => Ok(Channel::Graph),
            "code" => Ok(Channel::Code),
            "text" | "prompt" => Ok(Channel::Text),
            other => Err(Error::config(format!(
                "unknown view `{other}` (expected graph, code or text)"
            ))),
        }
    }
}

/// Parses a comma-separated view list such as `code,graph,text`.
pub fn parse_channels(s: &str) -> Result<BTreeSet<Channel>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub gnn_layers: usize,
    pub mlp_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub enabled_views: BTreeSet<Channel>,
    pub multi_graph: bool,
    pub dims: Dims,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: HIDDEN_DIM,
            gnn_layers: 2,
            mlp_layers: 2,
            attention_heads: 4,
            dropout: 0.5,
            enabled_views: Channel::ALL.into_iter().collect(),
            multi_graph: true,
            dims: Dims::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.attention_heads == 0 || !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} must be a positive multiple of attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.enabled_views.is_empty() {
            return Err(Error::config("at least one view must be enabled"));
        }
        if self.mlp_layers == 0 {
            return Err(Error::config("mlp_layers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn enabled(&self, c: Channel) -> bool {
        self.enabled_views.contains(&c)
    }

    /// Graph views fed to the GNNs.
    pub fn graph_views(&self) -> Vec<View> {
        if self.multi_graph {
            View::ALL.to_vec()
        } else {
            vec![View::Prompt]
        }
    }

    fn view_dim(&self, v: View) -> usize {
        match v {
            View::Prompt => self.dims.prompt_node,
            View::Code => self.dims.code_node,
            View::Operator => self.dims.operator_node,
        }
    }

    /// `[input, d, …, d]` with `mlp_layers` layers.
    fn mlp_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.mlp_layers - 1));
        dims.push(output);
        dims
    }
}

#[derive(Clone, Debug)]
struct GraphBranch {
    views: Vec<View>,
    projections: Vec<Linear>,
    /// `gnn[v][l]`
    gnn: Vec<Vec<Linear>>,
    attention: MultiHeadAttention,
    norm: LayerNorm,
    pool: Mlp,
}

/// Parameter handles of the encoder; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub config: EncoderConfig,
    graph: Option<GraphBranch>,
    code: Option<Mlp>,
    prompt: Option<Mlp>,
    aggregate: Mlp,
}

/// Stacked inputs for a batch of workflows.
#[derive(Clone, Debug)]
pub struct WorkflowBatch {
    pub count: usize,
    /// Per view in [`View::ALL`] order: all nodes stacked, `Σn × dim`.
    pub node_features: [Tensor; 3],
    pub adjacency: Rc<SparseRows>,
    pub lens: Rc<Vec<usize>>,
    pub code: Tensor,
    pub prompt: Tensor,
}

impl WorkflowBatch {
    pub fn new(workflows: &[&Workflow]) -> Result<Self> {
        if workflows.is_empty() {
            return Err(Error::usage("empty workflow batch"));
        }
        let mut feats: [Vec<Vec<f64>>; 3] = Default::default();
        let mut rows = Vec::new();
        let mut lens = Vec::with_capacity(workflows.len());
        for w in workflows {
            let views = w.build_view_graphs()?;
            for (k, v) in views.iter().enumerate() {
                for r in 0..v.features.rows() {
                    feats[k].push(v.features.row(r).to_vec());
                }
            }
            let offset = rows.len();
            let indeg = w.in_degrees();
            let mut local: Vec<Vec<(usize, f64)>> = (0..w.node_count())
                .map(|i| vec![(offset + i, 1.0 / (indeg[i] + 1) as f64)])
                .collect();
            for &[s, d] in &w.edges {
                local[d].push((offset + s, 1.0 / (indeg[d] + 1) as f64));
            }
            rows.extend(local);
            lens.push(w.node_count());
        }
        let stack = |rows: &[Vec<f64>], what: &str| {
            Tensor::from_rows(rows).map_err(|_| Error::data(format!("{what} widths differ across the batch")))
        };
        let ncols = rows.len();
        Ok(Self {
            count: workflows.len(),
            node_features: [
                stack(&feats[0], "prompt_features")?,
                stack(&feats[1], "code_features")?,
                stack(&feats[2], "operator_features")?,
            ],
            adjacency: Rc::new(SparseRows { rows, ncols }),
            lens: Rc::new(lens),
            code: stack(
                &workflows.iter().map(|w| w.code_embedding.clone()).collect::<Vec<_>>(),
                "code_embedding",
            )?,
            prompt: stack(
                &workflows.iter().map(|w| w.prompt_embedding.clone()).collect::<Vec<_>>(),
                "prompt_embedding",
            )?,
        })
    }

    pub fn total_nodes(&self) -> usize {
        self.adjacency.rows.len()
    }
}

/// Encoder outputs for a batch; rows follow the batch order.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z: Var,
    pub z_graph: Option<Var>,
    pub z_code: Option<Var>,
    pub z_prompt: Option<Var>,
    /// `Σn × V` view-attention weights.
    pub view_weights: Option<Var>,
}

impl EncoderState {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let graph = if config.enabled(Channel::Graph) {
            let views = config.graph_views();
            let mut projections = Vec::new();
            let mut gnn = Vec::new();
            for &v in &views {
                let name = format!("{PREFIX}proj.{}", v.name());
                projections.push(Linear::new(store, &name, config.view_dim(v), d, true, rng)?);
                let layers = (0..config.gnn_layers)
                    .map(|l| Linear::new(store, &format!("{PREFIX}gnn.{}.{l}", v.name()), d, d, false, rng))
                    .collect::<Result<_>>()?;
                gnn.push(layers);
            }
            Some(GraphBranch {
                views,
                projections,
                gnn,
                attention: MultiHeadAttention::new(store, &format!("{PREFIX}attn"), d, config.attention_heads, rng)?,
                norm: LayerNorm::new(store, &format!("{PREFIX}attn_norm"), d)?,
                pool: Mlp::new(
                    store,
                    &format!("{PREFIX}pool"),
                    &config.mlp_dims(d, 1),
                    Activation::Tanh,
                    0.0,
                    rng,
                )?,
            })
        } else {
            None
        };
        let code = if config.enabled(Channel::Code) {
            let dims = config.mlp_dims(config.dims.code_workflow, d);
            Some(Mlp::new(
                store,
                &format!("{PREFIX}code"),
                &dims,
                Activation::Relu,
                config.dropout,
                rng,
            )?)
        } else {
            None
        };
        let prompt = if config.enabled(Channel::Text) {
            let dims = config.mlp_dims(config.dims.prompt_workflow, d);
            Some(Mlp::new(
                store,
                &format!("{PREFIX}prompt"),
                &dims,
                Activation::Relu,
                config.dropout,
                rng,
            )?)
        } else {
            None
        };
        let width = config.enabled_views.len() * d;
        let aggregate = Mlp::new(
            store,
            &format!("{PREFIX}agg"),
            &config.mlp_dims(width, d),
            Activation::Relu,
            config.dropout,
            rng,
        )?;
        Ok(Self {
            config,
            graph,
            code,
            prompt,
            aggregate,
        })
    }

    pub fn aggregate_input_width(&self) -> usize {
        self.aggregate.in_dim()
    }

    /// `ReLU(Â h W)` followed by dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn gnn_layer<R: Rng + ?Sized>(
        tape: &mut Tape,
        store: &ParamStore,
        layer: &Linear,
        h: Var,
        adjacency: &Rc<SparseRows>,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let m = tape.aggregate(h, adjacency.clone())?;
        let m = layer.forward(tape, store, m)?;
        let m = tape.relu(m);
        tape.dropout(m, dropout, training, rng)
    }

    /// Projected and propagated node states of every graph view, interleaved
    /// node-major into `(Σn·V) × d`.
    pub fn encode_view_graphs<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &WorkflowBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let g = self.graph_branch()?;
        let mut outs = Vec::with_capacity(g.views.len());
        for (k, &v) in g.views.iter().enumerate() {
            let idx = View::ALL.iter().position(|&x| x == v).unwrap();
            let x = tape.constant(batch.node_features[idx].clone());
            let mut h = g.projections[k].forward(tape, store, x)?;
            for layer in &g.gnn[k] {
                h = Self::gnn_layer(
                    tape,
                    store,
                    layer,
                    h,
                    &batch.adjacency,
                    self.config.dropout,
                    training,
                    rng,
                )?;
            }
            outs.push(h);
        }
        tape.interleave(&outs)
    }

    /// `LN(MHA(X, X, X) + X)` over the view axis of each node.
    pub fn cross_view_attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = self.graph_branch()?;
        let a = g.attention.forward(tape, store, x, x, x, g.views.len())?;
        let r = tape.add(a, x)?;
        g.norm.forward(tape, store, r)
    }

    /// Returns the pooled node states `Σn × d` and the `Σn × V` weights.
    pub fn view_attention_pool<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let g = self.graph_branch()?;
        let nv = g.views.len();
        let scores = g.pool.forward(tape, store, x, false, rng)?;
        let n = tape.value(scores).rows() / nv;
        let scores = tape.reshape(scores, &[n, nv])?;
        let weights = tape.softmax(scores, 1)?;
        Ok((tape.group_weighted_sum(weights, x)?, weights))
    }

    pub fn graph_readout(tape: &mut Tape, h: Var, lens: &Rc<Vec<usize>>) -> Result<Var> {
        tape.segment_mean(h, lens.clone())
    }

    pub fn encode_code<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mlp = self
            .code
            .as_ref()
            .ok_or_else(|| Error::config("code view is disabled"))?;
        mlp.forward(tape, store, c, training, rng)
    }

    pub fn encode_prompt<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mlp = self
            .prompt
            .as_ref()
            .ok_or_else(|| Error::config("text view is disabled"))?;
        mlp.forward(tape, store, p, training, rng)
    }

    /// Concatenates the enabled latents in `[graph, code, text]` order and
    /// applies the aggregation MLP.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_graph: Option<Var>,
        z_code: Option<Var>,
        z_prompt: Option<Var>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let parts: Vec<Var> = [z_graph, z_code, z_prompt].into_iter().flatten().collect();
        if parts.is_empty() {
            return Err(Error::config("aggregate needs at least one enabled view"));
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        self.aggregate.forward(tape, store, x, training, rng)
    }

    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &WorkflowBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let (z_graph, view_weights) = if self.graph.is_some() {
            let x = self.encode_view_graphs(tape, store, batch, training, rng)?;
            let x = self.cross_view_attention(tape, store, x)?;
            let (h, w) = self.view_attention_pool(tape, store, x, rng)?;
            (Some(Self::graph_readout(tape, h, &batch.lens)?), Some(w))
        } else {
            (None, None)
        };
        let z_code = match self.code {
            Some(_) => {
                let c = tape.constant(batch.code.clone());
                Some(self.encode_code(tape, store, c, training, rng)?)
            }
            None => None,
        };
        let z_prompt = match self.prompt {
            Some(_) => {
                let p = tape.constant(batch.prompt.clone());
                Some(self.encode_prompt(tape, store, p, training, rng)?)
            }
            None => None,
        };
        let z = self.aggregate(tape, store, z_graph, z_code, z_prompt, training, rng)?;
        Ok(Encoded {
            z,
            z_graph,
            z_code,
            z_prompt,
            view_weights,
        })
    }

    /// Single-workflow convenience wrapper around [`Self::encode_batch`].
    pub fn encode_workflow<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        w: &Workflow,
        training: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        let batch = WorkflowBatch::new(&[w])?;
        self.encode_batch(tape, store, &batch, training, rng)
    }

    fn graph_branch(&self) -> Result<&GraphBranch> {
        self.graph
            .as_ref()
            .ok_or_else(|| Error::config("graph view is disabled"))
    }
}

/// Eval-mode `Z` rows for `workflows`, in order.
pub fn embed(encoder: &EncoderState, store: &ParamStore, workflows: &[&Workflow]) -> Result<Tensor> {
    let batch = WorkflowBatch::new(workflows)?;
    let mut tape = Tape::inference();
    let mut rng = crate::numerics::rng::substream(0, "unused");
    let out = encoder.encode_batch(&mut tape, store, &batch, false, &mut rng)?;
    Ok(tape.value(out.z).detached())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::substream;
    use crate::numerics::{grad_check, grad_check_params};
    use crate::workflow::tests::workflow;

    fn small(views: &[Channel]) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            attention_heads: 2,
            dropout: 0.0,
            enabled_views: views.iter().copied().collect(),
            dims: Dims {
                prompt_node: 8,
                code_node: 8,
                operator_node: 8,
                code_workflow: 4,
                prompt_workflow: 4,
                task: 4,
            },
            ..EncoderConfig::default()
        }
    }

    fn build(cfg: EncoderConfig) -> (EncoderState, ParamStore) {
        let mut store = ParamStore::new();
        let enc = EncoderState::new(cfg, &mut store, &mut substream(1, "init")).unwrap();
        (enc, store)
    }

    fn eye_linear(store: &mut ParamStore, n: usize) -> Linear {
        let id = store.add("eye.weight", Tensor::eye(n)).unwrap();
        Linear {
            weight: id,
            bias: None,
            in_dim: n,
            out_dim: n,
        }
    }

    #[test]
    fn gnn_layer_examples() {
        let mut store = ParamStore::new();
        let layer = eye_linear(&mut store, 2);
        let mut rng = substream(0, "t");

        let w1 = WorkflowBatch::new(&[&workflow(1, &[])]).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(1, 2, vec![-1.0, 3.0]).unwrap());
        let out = EncoderState::gnn_layer(&mut tape, &store, &layer, h, &w1.adjacency, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 3.0]);

        let chain = WorkflowBatch::new(&[&workflow(2, &[[0, 1]])]).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let out =
            EncoderState::gnn_layer(&mut tape, &store, &layer, h, &chain.adjacency, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(out).row(1), &[0.5, 0.0]);
        assert_eq!(tape.value(out).row(0), &[1.0, 0.0]);
    }

    #[test]
    fn gnn_layer_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "t");
        let layer = Linear::new(&mut store, "l", 3, 3, false, &mut rng).unwrap();
        let w = workflow(4, &[[0, 1], [0, 2], [1, 3], [2, 3]]);
        let perm = [2, 0, 3, 1];
        let wp = w.permuted(&perm);
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0 - i as f64, 0.5 * i as f64]).collect();
        let mut xp = x.clone();
        for (old, row) in x.iter().enumerate() {
            xp[perm[old]] = row.clone();
        }
        let run = |w: &Workflow, x: &[Vec<f64>]| {
            let b = WorkflowBatch::new(&[w]).unwrap();
            let mut tape = Tape::new();
            let h = tape.leaf(Tensor::from_rows(x).unwrap());
            let out = EncoderState::gnn_layer(
                &mut tape,
                &store,
                &layer,
                h,
                &b.adjacency,
                0.0,
                false,
                &mut substream(0, "x"),
            )
            .unwrap();
            tape.value(out).clone()
        };
        let a = run(&w, &x);
        let b = run(&wp, &xp);
        for old in 0..4 {
            for (p, q) in a.row(old).iter().zip(b.row(perm[old])) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn view_graph_shapes() {
        let (enc, store) = build(small(&Channel::ALL));
        let batch = WorkflowBatch::new(&[&workflow(2, &[[0, 1]])]).unwrap();
        let mut tape = Tape::new();
        let x = enc
            .encode_view_graphs(&mut tape, &store, &batch, false, &mut substream(0, "d"))
            .unwrap();
        assert_eq!(tape.value(x).shape(), &[6, 8]);
        assert_eq!(tape.value(x).reshape(&[2, 3, 8]).unwrap().shape(), &[2, 3, 8]);
        let y = enc.cross_view_attention(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[6, 8]);

        let (single, store1) = build(EncoderConfig {
            multi_graph: false,
            ..small(&Channel::ALL)
        });
        let mut tape = Tape::new();
        let x = single
            .encode_view_graphs(&mut tape, &store1, &batch, false, &mut substream(0, "d"))
            .unwrap();
        assert_eq!(tape.value(x).shape(), &[2, 8]);
    }

    #[test]
    fn identical_view_features_give_identical_slices() {
        let (enc, mut store) = build(small(&Channel::ALL));
        // share one set of projection and GNN weights across the three views
        for name in [
            "proj.code.weight",
            "proj.operator.weight",
            "gnn.code.0.weight",
            "gnn.operator.0.weight",
            "gnn.code.1.weight",
            "gnn.operator.1.weight",
        ] {
            let src = store
                .id(&format!(
                    "{PREFIX}{}",
                    name.replace("code", "prompt").replace("operator", "prompt")
                ))
                .unwrap();
            let dst = store.id(&format!("{PREFIX}{name}")).unwrap();
            let v = store.get(src).data().to_vec();
            store.get_mut(dst).data_mut().copy_from_slice(&v);
        }
        let mut w = workflow(3, &[[0, 2], [1, 2]]);
        for n in &mut w.nodes {
            n.code_features = n.prompt_features.clone();
            n.operator_features = n.prompt_features.clone();
        }
        let batch = WorkflowBatch::new(&[&w]).unwrap();
        let mut tape = Tape::new();
        let x = enc
            .encode_view_graphs(&mut tape, &store, &batch, false, &mut substream(0, "d"))
            .unwrap();
        let t = tape.value(x);
        for n in 0..3 {
            assert_eq!(t.row(3 * n), t.row(3 * n + 1));
            assert_eq!(t.row(3 * n), t.row(3 * n + 2));
        }
    }

    #[test]
    fn cross_view_attention_permutes_with_views() {
        let (enc, store) = build(small(&Channel::ALL));
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.37).sin()).collect())
            .collect();
        let perm = [2, 0, 1];
        let mut permuted = rows.clone();
        for n in 0..2 {
            for v in 0..3 {
                permuted[n * 3 + perm[v]] = rows[n * 3 + v].clone();
            }
        }
        let run = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(rows).unwrap());
            let y = enc.cross_view_attention(&mut tape, &store, x).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&rows), run(&permuted));
        for n in 0..2 {
            for v in 0..3 {
                for (p, q) in a.row(n * 3 + v).iter().zip(b.row(n * 3 + perm[v])) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_view_attention_is_value_projection() {
        let (enc, store) = build(EncoderConfig {
            multi_graph: false,
            ..small(&Channel::ALL)
        });
        let g = enc.graph.as_ref().unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap());
        let y = enc.cross_view_attention(&mut tape, &store, x).unwrap();
        let v = g.attention.value.forward(&mut tape, &store, x).unwrap();
        let o = g.attention.output.forward(&mut tape, &store, v).unwrap();
        let r = tape.add(o, x).unwrap();
        let expect = g.norm.forward(&mut tape, &store, r).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(expect).data());
    }

    #[test]
    fn view_pool_examples() {
        let (enc, store) = build(small(&Channel::ALL));
        let mut rng = substream(0, "p");
        let mut tape = Tape::new();
        let same: Vec<Vec<f64>> = (0..6).map(|r| vec![(r / 3) as f64 + 0.5; 8]).collect();
        let x = tape.leaf(Tensor::from_rows(&same).unwrap());
        let (h, w) = enc.view_attention_pool(&mut tape, &store, x, &mut rng).unwrap();
        for n in 0..2 {
            for (a, b) in tape.value(h).row(n).iter().zip(&same[n * 3]) {
                assert!((a - b).abs() < 1e-12);
            }
            let s: f64 = tape.value(w).row(n).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(tape.value(w).row(n).iter().all(|&p| p >= 0.0));
        }

        let (single, store1) = build(EncoderConfig {
            multi_graph: false,
            ..small(&Channel::ALL)
        });
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 8, (0..8).map(|i| i as f64).collect()).unwrap());
        let (h, w) = single.view_attention_pool(&mut tape, &store1, x, &mut rng).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(h).data(), tape.value(x).data());
    }

    #[test]
    fn readout_examples() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(3, 2, vec![2.0, 0.0, 0.0, 2.0, 5.0, 5.0]).unwrap());
        let z = EncoderState::graph_readout(&mut tape, h, &Rc::new(vec![2, 1])).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 1.0, 5.0, 5.0]);
    }

    #[test]
    fn mlp_encoders_zero_and_gradients() {
        let (enc, mut store) = build(small(&Channel::ALL));
        let mut rng = substream(0, "m");
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(&[1, 4]));
        let zc = enc.encode_code(&mut tape, &store, c, false, &mut rng).unwrap();
        assert_eq!(tape.value(zc).data(), &[0.0; 8]);
        assert_eq!(tape.value(zc).shape(), &[1, 8]);
        let zp = enc.encode_prompt(&mut tape, &store, c, false, &mut rng).unwrap();
        assert_eq!(tape.value(zp).data(), &[0.0; 8]);
        let zp2 = enc.encode_prompt(&mut tape, &store, c, false, &mut rng).unwrap();
        assert_eq!(tape.value(zp).data(), tape.value(zp2).data());

        let input = Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let e = grad_check(
            |t, x| {
                let z = enc.encode_code(t, &store, x, false, &mut substream(0, "g"))?;
                let z = t.tanh(z);
                Ok(t.sum(z))
            },
            &input,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
        let e = grad_check(
            |t, x| {
                let z = enc.encode_prompt(t, &store, x, false, &mut substream(0, "g"))?;
                let z = t.tanh(z);
                Ok(t.sum(z))
            },
            &input,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn aggregate_widths() {
        assert_eq!(build(small(&Channel::ALL)).0.aggregate_input_width(), 24);
        assert_eq!(build(small(&[Channel::Graph])).0.aggregate_input_width(), 8);
        let mut store = ParamStore::new();
        assert!(matches!(
            EncoderState::new(small(&[]), &mut store, &mut substream(0, "x")),
            Err(Error::Config(_))
        ));
        for views in [
            vec![Channel::Graph],
            vec![Channel::Code, Channel::Text],
            Channel::ALL.to_vec(),
        ] {
            let (enc, store) = build(small(&views));
            let z = embed(&enc, &store, &[&workflow(3, &[[0, 1]])]).unwrap();
            assert_eq!(z.shape(), &[1, 8]);
        }
    }

    #[test]
    fn code_dimension_mismatch_is_config_error() {
        let (enc, store) = build(small(&Channel::ALL));
        let mut w = workflow(2, &[[0, 1]]);
        w.code_embedding = vec![0.0; 7];
        assert!(matches!(embed(&enc, &store, &[&w]), Err(Error::Config(_))));
    }

    #[test]
    fn encode_workflow_contracts() {
        let (enc, store) = build(small(&Channel::ALL));
        let w = workflow(1, &[]);
        let a = embed(&enc, &store, &[&w]).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, embed(&enc, &store, &[&w]).unwrap());

        let w3 = workflow(3, &[[0, 1], [1, 2]]);
        let ids: Vec<_> = store.ids().collect();
        let e = grad_check_params(&store, &ids, 7, |t, s| {
            let out = enc.encode_workflow(t, s, &w3, false, &mut substream(0, "g"))?;
            Ok(t.sum(out.z))
        })
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let (enc, store) = build(small(&Channel::ALL));
        let ws = [
            workflow(3, &[[0, 1]]),
            workflow(1, &[]),
            workflow(4, &[[0, 3], [1, 3], [2, 3]]),
        ];
        let refs: Vec<&Workflow> = ws.iter().collect();
        let batch = embed(&enc, &store, &refs).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let single = embed(&enc, &store, &[w]).unwrap();
            for (a, b) in batch.row(i).iter().zip(single.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
