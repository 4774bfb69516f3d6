//! Workflows, their node-aligned graph views, tasks and labels.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Node count above which a workflow is flagged as suspicious (typical graphs have ~6 nodes).
pub const LARGE_WORKFLOW_NODES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNode {
    pub operator_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub id: String,
    pub nodes: Vec<AgentNode>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub code_embedding: Vec<f64>,
    #[serde(default)]
    pub prompt_embedding: Vec<f64>,
    #[serde(default)]
    pub framework_tag: String,
    #[serde(default)]
    pub domain_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    #[serde(default)]
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub domain_tag: String,
}

/// Observed outcome of running a workflow on a task: 0/1 or a scalar score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub workflow_id: String,
    pub task_id: String,
    pub outcome: f64,
}

impl LabeledSample {
    pub fn is_binary(&self) -> bool {
        self.outcome == 0.0 || self.outcome == 1.0
    }
}

/// First violated workflow invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    NoNodes,
    EdgeOutOfRange {
        edge: usize,
        src: usize,
        dst: usize,
        nodes: usize,
    },
    SelfLoop {
        edge: usize,
        node: usize,
    },
    DuplicateEdge {
        edge: usize,
        src: usize,
        dst: usize,
    },
    Cycle {
        node: usize,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoNodes => write!(f, "workflow has no nodes"),
            Diagnostic::EdgeOutOfRange { edge, src, dst, nodes } => {
                write!(f, "edge #{edge} ({src}, {dst}) references a node outside 0..{nodes}")
            }
            Diagnostic::SelfLoop { edge, node } => write!(f, "edge #{edge} is a self-loop on node {node}"),
            Diagnostic::DuplicateEdge { edge, src, dst } => {
                write!(f, "edge #{edge} ({src}, {dst}) is a duplicate")
            }
            Diagnostic::Cycle { node } => write!(f, "graph has a cycle through node {node}"),
        }
    }
}

impl From<Diagnostic> for Error {
    fn from(d: Diagnostic) -> Self {
        match d {
            Diagnostic::Cycle { node } => Error::Cycle { node },
            other => Error::Data(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Prompt,
    Code,
    Operator,
}

impl View {
    pub const ALL: [View; 3] = [View::Prompt, View::Code, View::Operator];

    pub fn name(self) -> &'static str {
        match self {
            View::Prompt => "prompt",
            View::Code => "code",
            View::Operator => "operator",
        }
    }
}

/// One node-feature assignment over a workflow's shared node and edge set.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph {
    pub view: View,
    pub edges: Arc<Vec<[usize; 2]>>,
    /// `N × dim` node features.
    pub features: Tensor,
}

impl Workflow {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<(), Diagnostic> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Diagnostic::NoNodes);
        }
        let mut seen = BTreeSet::new();
        for (i, &[src, dst]) in self.edges.iter().enumerate() {
            if src >= n || dst >= n {
                return Err(Diagnostic::EdgeOutOfRange {
                    edge: i,
                    src,
                    dst,
                    nodes: n,
                });
            }
            if src == dst {
                return Err(Diagnostic::SelfLoop { edge: i, node: src });
            }
            if !seen.insert((src, dst)) {
                return Err(Diagnostic::DuplicateEdge { edge: i, src, dst });
            }
        }
        kahn(n, &self.edges).map(|_| ())
    }

    /// Non-fatal oddities worth logging.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.nodes.len() > LARGE_WORKFLOW_NODES {
            out.push(format!(
                "workflow `{}` has {} nodes (more than {LARGE_WORKFLOW_NODES})",
                self.id,
                self.nodes.len()
            ));
        }
        out
    }

    /// Kahn's algorithm, always taking the smallest ready index.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        if let Some(bad) = self
            .edges
            .iter()
            .find(|e| e[0] >= self.nodes.len() || e[1] >= self.nodes.len())
        {
            return Err(Error::data(format!("edge {bad:?} references a missing node")));
        }
        kahn(self.nodes.len(), &self.edges).map_err(Error::from)
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &[_, dst] in &self.edges {
            deg[dst] += 1;
        }
        deg
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &[src, _] in &self.edges {
            deg[src] += 1;
        }
        deg
    }

    /// Number of edges on the longest directed path.
    pub fn longest_path(&self) -> Result<usize> {
        let order = self.topological_order()?;
        let mut depth = vec![0usize; self.nodes.len()];
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for &[s, d] in &self.edges {
            succ[s].push(d);
        }
        for &u in &order {
            for &v in &succ[u] {
                depth[v] = depth[v].max(depth[u] + 1);
            }
        }
        Ok(depth.into_iter().max().unwrap_or(0))
    }

    /// The three node-aligned views, in [`View::ALL`] order.
    pub fn build_view_graphs(&self) -> Result<[ViewGraph; 3]> {
        self.validate()?;
        let edges = Arc::new(self.edges.clone());
        let build = |view: View| -> Result<ViewGraph> {
            let mut rows = Vec::with_capacity(self.nodes.len());
            for (i, node) in self.nodes.iter().enumerate() {
                let feats = match view {
                    View::Prompt => &node.prompt_features,
                    View::Code => &node.code_features,
                    View::Operator => &node.operator_features,
                };
                let feats = feats.as_ref().ok_or_else(|| {
                    Error::data(format!(
                        "workflow `{}` node {i} is missing {}_features",
                        self.id,
                        view.name()
                    ))
                })?;
                rows.push(feats.clone());
            }
            let dim = rows[0].len();
            if dim == 0 || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::data(format!(
                    "workflow `{}` has inconsistent {} feature widths",
                    self.id,
                    view.name()
                )));
            }
            Ok(ViewGraph {
                view,
                edges: edges.clone(),
                features: Tensor::from_rows(&rows)?,
            })
        };
        Ok([build(View::Prompt)?, build(View::Code)?, build(View::Operator)?])
    }

    /// Same workflow with nodes relabeled: old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Workflow {
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = node.clone();
        }
        Workflow {
            nodes,
            edges: self.edges.iter().map(|&[s, d]| [perm[s], perm[d]]).collect(),
            ..self.clone()
        }
    }
}

fn kahn(n: usize, edges: &[[usize; 2]]) -> Result<Vec<usize>, Diagnostic> {
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &[s, d] in edges {
        indeg[d] += 1;
        succ[s].push(d);
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = ready.pop() {
        order.push(u);
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    if order.len() < n {
        let node = (0..n).find(|&i| indeg[i] > 0).unwrap();
        return Err(Diagnostic::Cycle { node });
    }
    Ok(order)
}
