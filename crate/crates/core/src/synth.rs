//! Synthetic corpora with a planted success oracle.
//!
//! Every workflow carries a shared latent `u` (visible in its code embedding
//! and its node prompts) and a code-only latent `v`. Tasks carry their own
//! latent. The oracle logit is a closed form over structure, operator mix,
//! workflow code and prompt embeddings, the task embedding and a
//! task-prompt bilinear term.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_jsonl, CorpusManifest, Dims};
use crate::numerics::rng::{substream, Rng};
use crate::numerics::sigmoid;
use crate::workflow::{AgentNode, LabeledSample, TaskRecord, Workflow};

pub const OPERATORS: [&str; 5] = ["generate", "review", "revise", "ensemble", "format"];
const DOMAINS: [&str; 3] = ["math", "code", "qa"];

/// Target standard deviation of each oracle term over the generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermScales {
    pub structure: f64,
    pub operators: f64,
    pub code: f64,
    pub prompt: f64,
    pub task: f64,
    pub alignment: f64,
}

impl Default for TermScales {
    fn default() -> Self {
        Self {
            structure: 0.5,
            operators: 0.5,
            code: 1.5,
            prompt: 1.0,
            task: 1.0,
            alignment: 0.5,
        }
    }
}

/// What the train/val/test split partitions. Splitting by workflow keeps every
/// label of a workflow in one split, so test workflows are unseen in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    #[default]
    Workflow,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_workflows: usize,
    pub n_tasks: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    pub dims: Dims,
    pub latent_dim: usize,
    pub feature_noise: f64,
    pub label_noise: f64,
    pub scales: TermScales,
    /// Train/val/test fractions of the split unit.
    pub split: [f64; 3],
    pub split_by: SplitBy,
    /// Extra unlabeled workflows from the same generator, for ranking runs.
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_workflows: 100,
            n_tasks: 20,
            min_nodes: 3,
            max_nodes: 9,
            edge_prob: 0.4,
            dims: Dims::default(),
            latent_dim: 4,
            feature_noise: 0.5,
            label_noise: 0.0,
            scales: TermScales::default(),
            split: [0.8, 0.1, 0.1],
            split_by: SplitBy::Workflow,
            n_candidates: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small channel widths, handy for tests and desk-scale runs.
    pub fn small() -> Self {
        Self {
            dims: Dims {
                prompt_node: 16,
                code_node: 16,
                operator_node: 8,
                code_workflow: 32,
                prompt_workflow: 16,
                task: 16,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.n_workflows == 0 || self.n_tasks == 0 {
            return bad("need at least one workflow and one task");
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return bad("node range must satisfy 1 <= min_nodes <= max_nodes");
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad("edge_prob must lie in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5)");
        }
        if self.latent_dim == 0 || self.feature_noise < 0.0 {
            return bad("latent_dim must be positive and feature_noise non-negative");
        }
        let d = &self.dims;
        if [d.prompt_node, d.code_node, d.code_workflow, d.task].contains(&0) {
            return bad("all channel widths must be positive");
        }
        if d.prompt_workflow != d.prompt_node {
            return bad("prompt_workflow must equal prompt_node (the workflow prompt is the node mean)");
        }
        if d.operator_node < OPERATORS.len() {
            return Err(Error::config(format!(
                "operator_node must be at least {} for the one-hot operator vocabulary",
                OPERATORS.len()
            )));
        }
        if self.split.iter().any(|&f| f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }
}

/// Planted ground truth: `sigmoid(logit)` with
/// `logit = structure·[N, L, E/N] + operators·mix + code·C + prompt·P + task·T + Tᵀ A P + bias`,
/// where `N` is the node count, `L` the longest path in edges, `E/N` the mean
/// branching factor and `mix` the fraction of nodes of each operator type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedOracle {
    pub structure: [f64; 3],
    pub operators: Vec<f64>,
    pub code: Vec<f64>,
    pub prompt: Vec<f64>,
    pub task: Vec<f64>,
    /// `task × prompt` row-major; empty means no bilinear term.
    #[serde(default)]
    pub alignment: Vec<f64>,
    pub bias: f64,
}

impl PlantedOracle {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            structure: [0.0; 3],
            operators: vec![0.0; OPERATORS.len()],
            code: vec![0.0; dims.code_workflow],
            prompt: vec![0.0; dims.prompt_workflow],
            task: vec![0.0; dims.task],
            alignment: Vec::new(),
            bias: 0.0,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn check(&self, w: &Workflow, t: &TaskRecord) -> Result<()> {
        let mismatch = |what: &str, got: usize, want: usize| {
            Err(Error::config(format!("oracle expects {what} width {want}, got {got}")))
        };
        if w.code_embedding.len() != self.code.len() {
            return mismatch("code", w.code_embedding.len(), self.code.len());
        }
        if w.prompt_embedding.len() != self.prompt.len() {
            return mismatch("prompt", w.prompt_embedding.len(), self.prompt.len());
        }
        if t.embedding.len() != self.task.len() {
            return mismatch("task", t.embedding.len(), self.task.len());
        }
        if self.operators.len() != OPERATORS.len() {
            return mismatch("operator", self.operators.len(), OPERATORS.len());
        }
        if !self.alignment.is_empty() && self.alignment.len() != self.task.len() * self.prompt.len() {
            return mismatch("alignment", self.alignment.len(), self.task.len() * self.prompt.len());
        }
        Ok(())
    }

    fn terms(&self, w: &Workflow, t: &TaskRecord) -> Result<[f64; 6]> {
        self.check(w, t)?;
        let s = structure_features(w)?;
        let mix = operator_mix(w);
        Ok([
            dot(&self.structure, &s),
            dot(&self.operators, &mix),
            dot(&self.code, &w.code_embedding),
            dot(&self.prompt, &w.prompt_embedding),
            dot(&self.task, &t.embedding),
            bilinear(&self.alignment, &t.embedding, &w.prompt_embedding),
        ])
    }

    pub fn logit(&self, w: &Workflow, t: &TaskRecord) -> Result<f64> {
        Ok(self.terms(w, t)?.iter().sum::<f64>() + self.bias)
    }
}

/// Success probability of `w` on `t` under the planted oracle.
pub fn oracle_success(w: &Workflow, t: &TaskRecord, oracle: &PlantedOracle) -> Result<f64> {
    Ok(sigmoid(oracle.logit(w, t)?))
}

/// Mean oracle probability over `tasks`.
pub fn planted_rate(w: &Workflow, tasks: &[TaskRecord], oracle: &PlantedOracle) -> Result<f64> {
    let mut sum = 0.0;
    for t in tasks {
        sum += oracle_success(w, t, oracle)?;
    }
    Ok(sum / tasks.len().max(1) as f64)
}

/// `[node count, longest path, edges per node]`.
pub fn structure_features(w: &Workflow) -> Result<[f64; 3]> {
    let n = w.node_count() as f64;
    Ok([n, w.longest_path()? as f64, w.edges.len() as f64 / n])
}

/// Fraction of nodes of each type in [`OPERATORS`].
pub fn operator_mix(w: &Workflow) -> Vec<f64> {
    let mut mix = vec![0.0; OPERATORS.len()];
    for node in &w.nodes {
        if let Some(k) = OPERATORS.iter().position(|&o| o == node.operator_type) {
            mix[k] += 1.0;
        }
    }
    let n = w.node_count().max(1) as f64;
    mix.iter_mut().for_each(|m| *m /= n);
    mix
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bilinear(a: &[f64], t: &[f64], p: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    t.iter()
        .enumerate()
        .map(|(i, ti)| ti * dot(&a[i * p.len()..(i + 1) * p.len()], p))
        .sum()
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `rows × cols` gaussian matrix scaled by `1/√cols`, row-major.
fn projection(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    gaussian(rng, rows * cols).into_iter().map(|x| x * s).collect()
}

fn apply(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks(x.len()).map(|row| dot(row, x)).collect()
}

/// Fixed random bases that tie latents to observed channels.
#[derive(Clone, Debug)]
pub struct Generator {
    config: SynthConfig,
    code_shared: Vec<f64>,
    code_private: Vec<f64>,
    prompt_shared: Vec<f64>,
    prompt_roles: Vec<Vec<f64>>,
    node_code: Vec<Vec<f64>>,
    task_basis: Vec<f64>,
}

impl Generator {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "synth.basis");
        let (d, r) = (&config.dims, config.latent_dim);
        Ok(Self {
            code_shared: projection(&mut rng, d.code_workflow, r),
            code_private: projection(&mut rng, d.code_workflow, r),
            prompt_shared: projection(&mut rng, d.prompt_node, r),
            prompt_roles: (0..OPERATORS.len())
                .map(|_| gaussian(&mut rng, d.prompt_node).into_iter().map(|x| 0.5 * x).collect())
                .collect(),
            node_code: (0..OPERATORS.len()).map(|_| gaussian(&mut rng, d.code_node)).collect(),
            task_basis: projection(&mut rng, d.task, r),
            config: config.clone(),
        })
    }

    fn noisy(&self, rng: &mut Rng, base: Vec<f64>) -> Vec<f64> {
        let s = self.config.feature_noise;
        base.into_iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + s * z
            })
            .collect()
    }

    pub fn gen_workflow(&self, id: String, rng: &mut Rng) -> Workflow {
        let c = &self.config;
        let n = rng.random_range(c.min_nodes..=c.max_nodes);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < c.edge_prob {
                    edges.push([i, j]);
                }
            }
        }
        let mut indeg = vec![0; n];
        let mut outdeg = vec![0; n];
        for &[s, d] in &edges {
            outdeg[s] += 1;
            indeg[d] += 1;
        }
        let u = gaussian(rng, c.latent_dim);
        let v = gaussian(rng, c.latent_dim);
        let shared_prompt = apply(&self.prompt_shared, &u);
        let nodes: Vec<AgentNode> = (0..n)
            .map(|i| {
                let k = match (indeg[i], outdeg[i]) {
                    (0, _) => 0,
                    (d, _) if d >= 2 => 3,
                    (_, 0) => 4,
                    _ => {
                        if rng.random::<bool>() {
                            1
                        } else {
                            2
                        }
                    }
                };
                let prompt = shared_prompt
                    .iter()
                    .zip(&self.prompt_roles[k])
                    .map(|(a, b)| a + b)
                    .collect();
                let mut op = vec![0.0; c.dims.operator_node];
                op[k] = 1.0;
                AgentNode {
                    operator_type: OPERATORS[k].to_string(),
                    prompt_features: Some(self.noisy(rng, prompt)),
                    code_features: Some(self.noisy(rng, self.node_code[k].clone())),
                    operator_features: Some(op),
                }
            })
            .collect();
        let mut prompt_embedding = vec![0.0; c.dims.prompt_node];
        for node in &nodes {
            for (p, x) in prompt_embedding.iter_mut().zip(node.prompt_features.as_ref().unwrap()) {
                *p += x / n as f64;
            }
        }
        let code = apply(&self.code_shared, &u)
            .into_iter()
            .zip(apply(&self.code_private, &v))
            .map(|(a, b)| a + b)
            .collect();
        Workflow {
            domain_tag: DOMAINS[rng.random_range(0..DOMAINS.len())].to_string(),
            id,
            nodes,
            edges,
            code_embedding: self.noisy(rng, code),
            prompt_embedding,
            framework_tag: "synthetic".into(),
        }
    }

    pub fn gen_task(&self, id: String, rng: &mut Rng) -> TaskRecord {
        let tau = gaussian(rng, self.config.latent_dim);
        TaskRecord {
            domain_tag: DOMAINS[rng.random_range(0..DOMAINS.len())].to_string(),
            task_id: id,
            embedding: self.noisy(rng, apply(&self.task_basis, &tau)),
        }
    }

    /// Draws oracle directions inside the latent spans, then rescales each
    /// term to its configured spread over `(workflows × tasks)` and centers
    /// the logits at their median.
    pub fn plant_oracle(&self, workflows: &[Workflow], tasks: &[TaskRecord]) -> Result<PlantedOracle> {
        let c = &self.config;
        let r = c.latent_dim;
        let mut rng = substream(c.seed, "synth.oracle");
        let (a, b) = (gaussian(&mut rng, r), gaussian(&mut rng, r));
        let code: Vec<f64> = apply(&self.code_shared, &a)
            .into_iter()
            .zip(apply(&self.code_private, &b))
            .map(|(x, y)| x + y)
            .collect();
        let prompt = apply(&self.prompt_shared, &gaussian(&mut rng, r));
        let task = apply(&self.task_basis, &gaussian(&mut rng, r));
        let m = gaussian(&mut rng, r * r);
        // A = T_basis · M · P_sharedᵀ
        let (dt, dp) = (c.dims.task, c.dims.prompt_node);
        let mut alignment = vec![0.0; dt * dp];
        for i in 0..dt {
            for j in 0..dp {
                let mut s = 0.0;
                for x in 0..r {
                    for y in 0..r {
                        s += self.task_basis[i * r + x] * m[x * r + y] * self.prompt_shared[j * r + y];
                    }
                }
                alignment[i * dp + j] = s;
            }
        }
        let mut oracle = PlantedOracle {
            structure: [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ],
            operators: gaussian(&mut rng, OPERATORS.len()),
            code,
            prompt,
            task,
            alignment,
            bias: 0.0,
        };

        let mut terms: Vec<[f64; 6]> = Vec::with_capacity(workflows.len() * tasks.len());
        for w in workflows {
            for t in tasks {
                terms.push(oracle.terms(w, t)?);
            }
        }
        let s = &c.scales;
        let targets = [s.structure, s.operators, s.code, s.prompt, s.task, s.alignment];
        let mut factors = [0.0; 6];
        for k in 0..6 {
            let sd = std_dev(terms.iter().map(|t| t[k]));
            factors[k] = if sd > 1e-12 { targets[k] / sd } else { 0.0 };
        }
        oracle.structure.iter_mut().for_each(|x| *x *= factors[0]);
        oracle.operators.iter_mut().for_each(|x| *x *= factors[1]);
        oracle.code.iter_mut().for_each(|x| *x *= factors[2]);
        oracle.prompt.iter_mut().for_each(|x| *x *= factors[3]);
        oracle.task.iter_mut().for_each(|x| *x *= factors[4]);
        oracle.alignment.iter_mut().for_each(|x| *x *= factors[5]);

        let mut logits: Vec<f64> = terms
            .iter()
            .map(|t| t.iter().zip(&factors).map(|(a, f)| a * f).sum())
            .collect();
        logits.sort_by(f64::total_cmp);
        let mid = logits.len() / 2;
        let median = if logits.len().is_multiple_of(2) {
            0.5 * (logits[mid - 1] + logits[mid])
        } else {
            logits[mid]
        };
        oracle.bias = -median;
        Ok(oracle)
    }
}

fn std_dev(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One workflow from a fresh basis seeded by `config.seed`.
pub fn gen_workflow(config: &SynthConfig, rng: &mut Rng) -> Result<Workflow> {
    Ok(Generator::new(config)?.gen_workflow("wf0000".into(), rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub workflows: Vec<Workflow>,
    pub tasks: Vec<TaskRecord>,
    pub labels: Vec<LabeledSample>,
    pub oracle: PlantedOracle,
    /// Label indices for train / val / test.
    pub splits: [Vec<usize>; 3],
    /// Unlabeled workflows unseen by any split.
    pub candidates: Vec<Workflow>,
}

/// Generates the corpus in memory.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    let gen = Generator::new(config)?;
    let mut rng = substream(config.seed, "synth.workflows");
    let wdigits = digits(config.n_workflows);
    let workflows: Vec<Workflow> = (0..config.n_workflows)
        .map(|i| gen.gen_workflow(format!("wf{i:0wdigits$}"), &mut rng))
        .collect();
    let mut rng = substream(config.seed, "synth.tasks");
    let tdigits = digits(config.n_tasks);
    let tasks: Vec<TaskRecord> = (0..config.n_tasks)
        .map(|i| gen.gen_task(format!("task{i:0tdigits$}"), &mut rng))
        .collect();
    let oracle = gen.plant_oracle(&workflows, &tasks)?;

    let mut noise = substream(config.seed, "synth.noise");
    let mut labels = Vec::with_capacity(workflows.len() * tasks.len());
    for w in &workflows {
        for t in tasks.iter() {
            let clean = oracle_success(w, t, &oracle)? > 0.5;
            let flip = noise.random::<f64>() < config.label_noise;
            labels.push(LabeledSample {
                workflow_id: w.id.clone(),
                task_id: t.task_id.clone(),
                outcome: if clean ^ flip { 1.0 } else { 0.0 },
            });
        }
    }

    let units = match config.split_by {
        SplitBy::Workflow => workflows.len(),
        SplitBy::Label => labels.len(),
    };
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut substream(config.seed, "synth.split"));
    let n_train = (config.split[0] * units as f64).round() as usize;
    let n_val = ((config.split[1] * units as f64).round() as usize).min(units - n_train);
    let parts = [
        &order[..n_train],
        &order[n_train..n_train + n_val],
        &order[n_train + n_val..],
    ];
    let nt = tasks.len();
    let mut splits = parts.map(|p| match config.split_by {
        SplitBy::Workflow => p.iter().flat_map(|&w| w * nt..(w + 1) * nt).collect::<Vec<_>>(),
        SplitBy::Label => p.to_vec(),
    });
    splits.iter_mut().for_each(|s| s.sort_unstable());
    let mut rng = substream(config.seed, "synth.candidates");
    let cdigits = digits(config.n_candidates);
    let candidates = (0..config.n_candidates)
        .map(|i| gen.gen_workflow(format!("cand{i:0cdigits$}"), &mut rng))
        .collect();
    Ok(SynthCorpus {
        candidates,
        workflows,
        tasks,
        labels,
        oracle,
        splits,
    })
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len().max(3)
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Files written by [`gen_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub split_manifests: [PathBuf; 3],
    pub oracle: PathBuf,
    pub candidates: Option<PathBuf>,
}

/// Writes workflows, tasks, labels (all and per split), manifests and
/// `oracle.json` under `out`. Output bytes depend only on `config`.
pub fn gen_corpus(config: &SynthConfig, out: &Path) -> Result<CorpusFiles> {
    let corpus = generate(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_jsonl(&out.join("workflows.jsonl"), &corpus.workflows)?;
    write_jsonl(&out.join("tasks.jsonl"), &corpus.tasks)?;
    write_jsonl(&out.join("labels.jsonl"), &corpus.labels)?;
    let manifest = |labels: &str| CorpusManifest {
        workflows: "workflows.jsonl".into(),
        tasks: Some("tasks.jsonl".into()),
        labels: Some(labels.into()),
        embeddings: None,
        dims: config.dims,
        base_dir: PathBuf::new(),
    };
    let all = write_json(out, "manifest.json", &manifest("labels.jsonl"))?;
    let mut split_manifests: [PathBuf; 3] = Default::default();
    for (k, name) in SPLIT_NAMES.iter().enumerate() {
        let file = format!("labels_{name}.jsonl");
        let subset: Vec<&LabeledSample> = corpus.splits[k].iter().map(|&i| &corpus.labels[i]).collect();
        write_jsonl(&out.join(&file), &subset)?;
        split_manifests[k] = write_json(out, &format!("manifest_{name}.json"), &manifest(&file))?;
    }
    let candidates = if corpus.candidates.is_empty() {
        None
    } else {
        write_jsonl(&out.join("candidates.jsonl"), &corpus.candidates)?;
        let m = CorpusManifest {
            workflows: "candidates.jsonl".into(),
            labels: None,
            ..manifest("")
        };
        Some(write_json(out, "manifest_candidates.json", &m)?)
    };
    let oracle = write_json(out, "oracle.json", &corpus.oracle)?;
    write_json(out, "synth_config.json", config)?;
    Ok(CorpusFiles {
        manifest: all,
        split_manifests,
        oracle,
        candidates,
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
