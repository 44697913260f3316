//! Task decomposition into a dependency DAG of sub-questions.
//!
//! The dag-role model is asked for a JSON list of
//! `{"task_id", "dependent_task_ids", "instruction"}` objects. The list is
//! pulled out of whatever prose or code fences surround it, validated as an
//! acyclic graph, and scheduled in dependency order. When the model keeps
//! producing unusable output, [`decompose`] falls back to a single node
//! holding the original question.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gate::fill_template;
use crate::modelgw::{CompletionRequest, Gateway, GatewayError, Role};

/// Decomposition prompt. `{Query}` is replaced exactly once.
pub const DAG_TEMPLATE: &str = r#"Below is an instruction that describes a task. Write a response that appropriately completes the request.

### Instruction:
Please analyze the medical question provided and try to break the question into smaller, distinct sub-questions. By subsequently solving the sub-problems and combining the answers to the sub-problems, the original question can be better answered. A problem consists of one to four sub-problems.

When posing questions based on patient symptom data, all sub-questions should be expanded from the given options to include corresponding background information, rather than directly asking questions based on the patient's symptom data.
If the problem can be decomposed, carefully follow the instruction, don't make unnecessary changes and do not answer any sub-questions.

Output a list of Json following the format:
[
 {
"task_id": "unique identifier for a sub-problem, can be an ordinal",
"dependent_task_ids": ["The sub-issue ID of the prerequisite for this sub-issue"],
"instruction": "what you should do in this sub-problem, one short phrase or sentence
 "},...
]
If the problem does not need to be broken down into sub-problems, your output format is:
[
 {
    "task_id": "1",
    "dependent_task_ids": [],
    "instruction": original question
 }
]
Medical question: {Query}

### Response:
"#;

/// Soft upper bound on sub-questions; larger graphs are kept but flagged.
pub const EXPECTED_MAX_NODES: usize = 4;
pub const OVERSIZE_FLAG: &str = "exceeds one-to-four expectation";

/// Parse failures retried before falling back to a single node.
pub const DEFAULT_DAG_RETRIES: usize = 2;

pub const DAG_OUTPUT_TOKENS: usize = 512;

pub fn render_dag_prompt(question: &str) -> String {
    fill_template(DAG_TEMPLATE, question)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("no usable JSON task list: {0}")]
    MalformedJson(String),
    #[error("task list is empty")]
    EmptyTaskList,
    #[error("task `{task}` depends on unknown task `{dependency}`")]
    UnknownDependency { task: String, dependency: String },
    #[error("task `{0}` appears more than once")]
    DuplicateTaskId(String),
    #[error("dependency cycle through task `{0}`")]
    CycleDetected(String),
    #[error("no task `{0}`")]
    NoSuchTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub task_id: String,
    pub dependent_task_ids: Vec<String>,
    pub instruction: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphOrigin {
    Decomposed,
    FallbackSingle,
}

/// A validated, acyclic task graph. Children are derived from the
/// dependency lists rather than stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct TaskGraph {
    nodes: Vec<TaskNode>,
    origin: GraphOrigin,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<String>,
}

#[derive(Deserialize)]
struct RawGraph {
    nodes: Vec<TaskNode>,
    origin: GraphOrigin,
    #[serde(default)]
    flags: Vec<String>,
}

impl TryFrom<RawGraph> for TaskGraph {
    type Error = DagError;

    fn try_from(raw: RawGraph) -> Result<Self, DagError> {
        validate(&raw.nodes)?;
        Ok(TaskGraph {
            nodes: raw.nodes,
            origin: raw.origin,
            flags: raw.flags,
        })
    }
}

impl TaskGraph {
    /// Validates `nodes` and resets every status to pending.
    pub fn new(mut nodes: Vec<TaskNode>, origin: GraphOrigin) -> Result<Self, DagError> {
        validate(&nodes)?;
        for n in &mut nodes {
            n.status = TaskStatus::Pending;
            n.result = None;
        }
        let mut flags = Vec::new();
        if nodes.len() > EXPECTED_MAX_NODES {
            flags.push(OVERSIZE_FLAG.to_string());
        }
        Ok(Self { nodes, origin, flags })
    }

    /// The no-decomposition form: one task holding the whole question.
    pub fn single(question: &str) -> Self {
        Self {
            nodes: vec![TaskNode {
                task_id: "1".into(),
                dependent_task_ids: Vec::new(),
                instruction: question.to_string(),
                status: TaskStatus::Pending,
                result: None,
            }],
            origin: GraphOrigin::FallbackSingle,
            flags: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn origin(&self) -> GraphOrigin {
        self.origin
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, task_id: &str) -> Option<&TaskNode> {
        self.nodes.iter().find(|n| n.task_id == task_id)
    }

    fn node_mut(&mut self, task_id: &str) -> Result<&mut TaskNode, DagError> {
        self.nodes
            .iter_mut()
            .find(|n| n.task_id == task_id)
            .ok_or_else(|| DagError::NoSuchTask(task_id.to_string()))
    }

    /// Tasks that list `task_id` as a dependency, in node order.
    pub fn children(&self, task_id: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.dependent_task_ids.iter().any(|d| d == task_id))
            .map(|n| n.task_id.as_str())
            .collect()
    }

    pub fn mark_running(&mut self, task_id: &str) -> Result<(), DagError> {
        let n = self.node_mut(task_id)?;
        n.status = TaskStatus::Running;
        n.result = None;
        Ok(())
    }

    pub fn mark_done(&mut self, task_id: &str, result: String) -> Result<(), DagError> {
        let n = self.node_mut(task_id)?;
        n.status = TaskStatus::Done;
        n.result = Some(result);
        Ok(())
    }

    pub fn mark_failed(&mut self, task_id: &str) -> Result<(), DagError> {
        let n = self.node_mut(task_id)?;
        n.status = TaskStatus::Failed;
        n.result = None;
        Ok(())
    }

    /// Dependency-respecting order; among ready tasks the smallest id goes
    /// first (numeric ids by value, before any non-numeric ids).
    pub fn topo_order(&self) -> Vec<String> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.task_id.as_str(), i))
            .collect();
        let mut indegree: Vec<usize> = self.nodes.iter().map(|n| unique_deps(n).len()).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for d in unique_deps(n) {
                children[index[d]].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<TaskKey>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] == 0)
            .map(|(i, n)| Reverse(TaskKey(&n.task_id, i)))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(TaskKey(id, i))) = ready.pop() {
            order.push(id.to_string());
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(TaskKey(&self.nodes[c].task_id, c)));
                }
            }
        }
        debug_assert_eq!(order.len(), self.nodes.len(), "validated graphs are acyclic");
        order
    }

    /// Groups of tasks whose dependencies all sit in earlier groups. Each
    /// group is in [`TaskGraph::topo_order`] order, and concatenating the
    /// groups yields a valid topological order.
    pub fn waves(&self) -> Vec<Vec<String>> {
        let order = self.topo_order();
        let mut depth: HashMap<&str, usize> = HashMap::new();
        for id in &order {
            let node = self.node(id).expect("ordered ids exist");
            let d = node
                .dependent_task_ids
                .iter()
                .map(|dep| depth[dep.as_str()] + 1)
                .max()
                .unwrap_or(0);
            depth.insert(id.as_str(), d);
        }
        let levels = depth.values().copied().max().map_or(0, |m| m + 1);
        let mut waves = vec![Vec::new(); levels];
        for id in &order {
            waves[depth[id.as_str()]].push(id.clone());
        }
        waves
    }
}

fn unique_deps(n: &TaskNode) -> Vec<&str> {
    let mut seen = HashSet::new();
    n.dependent_task_ids
        .iter()
        .map(String::as_str)
        .filter(|d| seen.insert(*d))
        .collect()
}

/// Task id ordering: all-digit ids compare numerically and sort before any
/// other id; everything else compares as strings.
pub fn task_id_cmp(a: &str, b: &str) -> Ordering {
    fn numeric(s: &str) -> Option<&str> {
        (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())).then(|| {
            let t = s.trim_start_matches('0');
            if t.is_empty() {
                "0"
            } else {
                t
            }
        })
    }
    match (numeric(a), numeric(b)) {
        (Some(x), Some(y)) => x.len().cmp(&y.len()).then_with(|| x.cmp(y)).then_with(|| a.cmp(b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

#[derive(PartialEq, Eq)]
struct TaskKey<'a>(&'a str, usize);

impl Ord for TaskKey<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        task_id_cmp(self.0, other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for TaskKey<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate(nodes: &[TaskNode]) -> Result<(), DagError> {
    if nodes.is_empty() {
        return Err(DagError::EmptyTaskList);
    }
    let mut index = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.task_id.trim().is_empty() {
            return Err(DagError::MalformedJson("empty task_id".into()));
        }
        if n.instruction.trim().is_empty() {
            return Err(DagError::MalformedJson(format!("task `{}` has an empty instruction", n.task_id)));
        }
        if n.status == TaskStatus::Done && n.result.is_none() {
            return Err(DagError::MalformedJson(format!("task `{}` is done without a result", n.task_id)));
        }
        if n.status != TaskStatus::Done && n.result.is_some() {
            return Err(DagError::MalformedJson(format!("task `{}` has a result but is not done", n.task_id)));
        }
        if index.insert(n.task_id.as_str(), i).is_some() {
            return Err(DagError::DuplicateTaskId(n.task_id.clone()));
        }
    }
    for n in nodes {
        for d in &n.dependent_task_ids {
            if !index.contains_key(d.as_str()) {
                return Err(DagError::UnknownDependency {
                    task: n.task_id.clone(),
                    dependency: d.clone(),
                });
            }
        }
    }
    find_cycle(nodes, &index).map_or(Ok(()), |id| Err(DagError::CycleDetected(id)))
}

/// Iterative three-colour depth-first search over dependency edges.
fn find_cycle(nodes: &[TaskNode], index: &HashMap<&str, usize>) -> Option<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Colour {
        White,
        Grey,
        Black,
    }
    let mut colour = vec![Colour::White; nodes.len()];
    for start in 0..nodes.len() {
        if colour[start] != Colour::White {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        colour[start] = Colour::Grey;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let deps = &nodes[node].dependent_task_ids;
            if *next < deps.len() {
                let dep = index[deps[*next].as_str()];
                *next += 1;
                match colour[dep] {
                    Colour::Grey => return Some(nodes[dep].task_id.clone()),
                    Colour::White => {
                        colour[dep] = Colour::Grey;
                        stack.push((dep, 0));
                    }
                    Colour::Black => {}
                }
            } else {
                colour[node] = Colour::Black;
                stack.pop();
            }
        }
    }
    None
}

/// Finds the first JSON array in `text` whose elements are all objects,
/// whether fenced, bare, or surrounded by prose.
pub fn extract_json_array(text: &str) -> Result<Vec<Value>, DagError> {
    let mut last_error = None;
    for (pos, _) in text.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Array(items))) if items.iter().all(Value::is_object) => return Ok(items),
            Some(Err(e)) => last_error = Some(e.to_string()),
            _ => {}
        }
    }
    Err(DagError::MalformedJson(
        last_error.unwrap_or_else(|| "no JSON array of task objects found".into()),
    ))
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn node_from_value(v: &Value) -> Result<TaskNode, DagError> {
    let obj = v.as_object().expect("extract_json_array yields objects");
    let task_id = obj
        .get("task_id")
        .and_then(id_string)
        .ok_or_else(|| DagError::MalformedJson("task without a string task_id".into()))?;
    let deps = match obj.get("dependent_task_ids") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|d| id_string(d).ok_or_else(|| DagError::MalformedJson(format!("task `{task_id}` has a non-string dependency"))))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(DagError::MalformedJson(format!("task `{task_id}` dependencies are not a list"))),
    };
    let instruction = obj
        .get("instruction")
        .and_then(Value::as_str)
        .ok_or_else(|| DagError::MalformedJson(format!("task `{task_id}` has no instruction")))?;
    Ok(TaskNode {
        task_id,
        dependent_task_ids: deps,
        instruction: instruction.trim().to_string(),
        status: TaskStatus::Pending,
        result: None,
    })
}

/// Parses model output into a validated graph with every node pending.
pub fn parse_task_list(model_text: &str) -> Result<TaskGraph, DagError> {
    let items = extract_json_array(model_text)?;
    let nodes = items.iter().map(node_from_value).collect::<Result<Vec<_>, _>>()?;
    TaskGraph::new(nodes, GraphOrigin::Decomposed)
}

/// Outcome of [`decompose`], with every raw model reply kept for tracing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub graph: TaskGraph,
    pub raw_outputs: Vec<String>,
    pub parse_errors: Vec<String>,
}

/// Asks the dag-role model for a task list, retrying unusable output up to
/// `retries` times before falling back to [`TaskGraph::single`]. Only
/// gateway failures escape.
pub fn decompose(gateway: &Gateway, question: &str, retries: usize) -> Result<Decomposition, GatewayError> {
    let prompt = render_dag_prompt(question);
    let mut raw_outputs = Vec::new();
    let mut parse_errors = Vec::new();
    for _ in 0..=retries {
        let out = gateway.complete(&CompletionRequest::new(Role::Dag, prompt.clone(), DAG_OUTPUT_TOKENS))?;
        let parsed = parse_task_list(&out.text);
        raw_outputs.push(out.text);
        match parsed {
            Ok(graph) => {
                return Ok(Decomposition {
                    graph,
                    raw_outputs,
                    parse_errors,
                })
            }
            Err(e) => parse_errors.push(e.to_string()),
        }
    }
    Ok(Decomposition {
        graph: TaskGraph::single(question),
        raw_outputs,
        parse_errors,
    })
}
