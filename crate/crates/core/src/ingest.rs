//! Corpus loading (JSONL) and the hashing text embedder.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a;
use crate::workflow::{LabeledSample, TaskRecord, Workflow};

pub const TEXT_DIM: usize = 384;
pub const CODE_DIM: usize = 768;
pub const HIDDEN_DIM: usize = 512;
pub const OPERATOR_DIM: usize = 16;
pub const TEXT_MAX_TOKENS: usize = 256;
pub const CODE_MAX_TOKENS: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub prompt_node: usize,
    pub code_node: usize,
    pub operator_node: usize,
    pub code_workflow: usize,
    pub prompt_workflow: usize,
    pub task: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            prompt_node: TEXT_DIM,
            code_node: CODE_DIM,
            operator_node: OPERATOR_DIM,
            code_workflow: CODE_DIM,
            prompt_workflow: TEXT_DIM,
            task: TEXT_DIM,
        }
    }
}

/// `manifest.json`. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub workflows: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub dims: Dims,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::DataAt {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub workflows: Vec<Workflow>,
    pub tasks: Vec<TaskRecord>,
    pub labels: Vec<LabeledSample>,
    pub dims: Dims,
}

impl Corpus {
    pub fn workflow(&self, id: &str) -> Option<&Workflow> {
        self.workflows
            .binary_search_by(|w| w.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.workflows[i])
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks
            .binary_search_by(|t| t.task_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.tasks[i])
    }

    pub fn workflow_index(&self, id: &str) -> Option<usize> {
        self.workflows.binary_search_by(|w| w.id.as_str().cmp(id)).ok()
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.tasks.binary_search_by(|t| t.task_id.as_str().cmp(id)).ok()
    }

    /// Puts records in canonical order: workflows and tasks by id, labels by
    /// (workflow, task) keeping file order among equal keys.
    pub fn sort(&mut self) {
        self.workflows.sort_by(|a, b| a.id.cmp(&b.id));
        self.tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        self.labels
            .sort_by(|a, b| (&a.workflow_id, &a.task_id).cmp(&(&b.workflow_id, &b.task_id)));
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::DataAt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Serializes one record per line, LF-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Deserialize)]
struct RawText {
    id: String,
    text: String,
}

/// Where a vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Precomputed,
    Hashed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dimension: usize,
    pub source: EmbeddingSource,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize, source: EmbeddingSource) -> Self {
        Self {
            dimension,
            source,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: String, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dimension {
            return Err(Error::data(format!(
                "vector `{id}` has length {}, table dimension is {}",
                v.len(),
                self.dimension
            )));
        }
        if self.vectors.insert(id.clone(), v).is_some() {
            return Err(Error::data(format!("duplicate embedding id `{id}`")));
        }
        Ok(())
    }
}

/// Loads one split. Every workflow must validate, every label must resolve
/// and every vector must match the declared dimensions.
///
/// Raw-text entries in `embeddings` are addressed by id:
/// `task/<task>`, `workflow/<wf>/code`, `workflow/<wf>/prompt`,
/// `workflow/<wf>/node/<i>/prompt` and `workflow/<wf>/node/<i>/code`.
/// They overwrite the matching vector after truncation and hashing.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Corpus> {
    let dims = manifest.dims;
    let wf_path = manifest.resolve(&manifest.workflows);
    let mut workflows = Vec::new();
    let mut wf_lines = BTreeMap::new();
    for (line, w) in read_jsonl::<Workflow>(&wf_path)? {
        if wf_lines.insert(w.id.clone(), line).is_some() {
            return Err(at(&wf_path, line, format!("duplicate workflow id `{}`", w.id)));
        }
        workflows.push(w);
    }

    let mut tasks = Vec::new();
    let mut task_lines = BTreeMap::new();
    let task_path = manifest.tasks.as_ref().map(|p| manifest.resolve(p));
    if let Some(path) = &task_path {
        for (line, t) in read_jsonl::<TaskRecord>(path)? {
            if task_lines.insert(t.task_id.clone(), line).is_some() {
                return Err(at(path, line, format!("duplicate task id `{}`", t.task_id)));
            }
            tasks.push(t);
        }
    }

    if let Some(p) = &manifest.embeddings {
        let path = manifest.resolve(p);
        apply_raw_texts(&path, dims, &mut workflows, &mut tasks)?;
    }

    for w in &workflows {
        let line = wf_lines[&w.id];
        w.validate()
            .map_err(|d| at(&wf_path, line, format!("workflow `{}`: {d}", w.id)))?;
        check_workflow_dims(w, &dims).map_err(|m| at(&wf_path, line, m))?;
    }
    if let Some(path) = &task_path {
        for t in &tasks {
            if t.embedding.len() != dims.task {
                return Err(at(
                    path,
                    task_lines[&t.task_id],
                    format!(
                        "task `{}` embedding has length {}, declared {}",
                        t.task_id,
                        t.embedding.len(),
                        dims.task
                    ),
                ));
            }
        }
    }

    let mut labels = Vec::new();
    if let Some(p) = &manifest.labels {
        let path = manifest.resolve(p);
        for (line, s) in read_jsonl::<LabeledSample>(&path)? {
            if !wf_lines.contains_key(&s.workflow_id) {
                return Err(at(&path, line, format!("dangling workflow_id `{}`", s.workflow_id)));
            }
            if !task_lines.contains_key(&s.task_id) {
                return Err(at(&path, line, format!("dangling task_id `{}`", s.task_id)));
            }
            if !s.outcome.is_finite() {
                return Err(at(&path, line, "non-finite outcome".into()));
            }
            labels.push(s);
        }
    }

    let mut corpus = Corpus {
        workflows,
        tasks,
        labels,
        dims,
    };
    corpus.sort();
    for w in &corpus.workflows {
        for msg in w.warnings() {
            eprintln!("warning: {msg}");
        }
    }
    Ok(corpus)
}

/// Reads `manifest.json` and loads the split it describes.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    load_corpus(&CorpusManifest::read(path)?)
}

fn at(path: &Path, line: usize, message: String) -> Error {
    Error::DataAt {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn check_workflow_dims(w: &Workflow, dims: &Dims) -> std::result::Result<(), String> {
    let check = |what: &str, got: usize, want: usize| {
        if got != want {
            Err(format!("workflow `{}`: {what} has length {got}, declared {want}", w.id))
        } else {
            Ok(())
        }
    };
    check("code_embedding", w.code_embedding.len(), dims.code_workflow)?;
    check("prompt_embedding", w.prompt_embedding.len(), dims.prompt_workflow)?;
    for (i, n) in w.nodes.iter().enumerate() {
        let views = [
            ("prompt_features", &n.prompt_features, dims.prompt_node),
            ("code_features", &n.code_features, dims.code_node),
            ("operator_features", &n.operator_features, dims.operator_node),
        ];
        for (name, v, want) in views {
            match v {
                Some(v) => check(&format!("node {i} {name}"), v.len(), want)?,
                None => return Err(format!("workflow `{}`: node {i} is missing {name}", w.id)),
            }
        }
    }
    Ok(())
}

fn apply_raw_texts(path: &Path, dims: Dims, workflows: &mut [Workflow], tasks: &mut [TaskRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (line, raw) in read_jsonl::<RawText>(path)? {
        if !seen.insert(raw.id.clone()) {
            return Err(at(path, line, format!("duplicate embedding id `{}`", raw.id)));
        }
        let parts: Vec<&str> = raw.id.split('/').collect();
        let text = |max, dim| hash_embed(&truncate_text(&raw.text, max), dim, 0);
        let find_wf = |workflows: &mut [Workflow], id: &str| -> Result<usize> {
            workflows
                .iter()
                .position(|w| w.id == id)
                .ok_or_else(|| at(path, line, format!("dangling workflow id `{id}`")))
        };
        match parts.as_slice() {
            ["task", tid] => {
                let t = tasks
                    .iter_mut()
                    .find(|t| t.task_id == *tid)
                    .ok_or_else(|| at(path, line, format!("dangling task id `{tid}`")))?;
                t.embedding = text(TEXT_MAX_TOKENS, dims.task);
            }
            ["workflow", wid, "code"] => {
                let i = find_wf(workflows, wid)?;
                workflows[i].code_embedding = text(CODE_MAX_TOKENS, dims.code_workflow);
            }
            ["workflow", wid, "prompt"] => {
                let i = find_wf(workflows, wid)?;
                workflows[i].prompt_embedding = text(TEXT_MAX_TOKENS, dims.prompt_workflow);
            }
            ["workflow", wid, "node", idx, view @ ("prompt" | "code")] => {
                let i = find_wf(workflows, wid)?;
                let node = idx
                    .parse::<usize>()
                    .ok()
                    .and_then(|k| workflows[i].nodes.get_mut(k))
                    .ok_or_else(|| at(path, line, format!("bad node index `{idx}`")))?;
                if *view == "prompt" {
                    node.prompt_features = Some(text(TEXT_MAX_TOKENS, dims.prompt_node));
                } else {
                    node.code_features = Some(text(CODE_MAX_TOKENS, dims.code_node));
                }
            }
            _ => return Err(at(path, line, format!("unrecognized embedding id `{}`", raw.id))),
        }
    }
    Ok(())
}

/// Keeps the first `max_tokens` whitespace-separated tokens.
pub fn truncate_text(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens.max(1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Signed feature hashing of lowercase alphanumeric tokens, L2-normalized.
pub fn hash_embed(text: &str, dimension: usize, seed: u64) -> Vec<f64> {
    let dimension = dimension.max(1);
    let mut v = vec![0.0; dimension];
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut key = seed.to_le_bytes().to_vec();
        key.extend(token.to_lowercase().bytes());
        let h = fnv1a(&key);
        let bucket = (h % dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
