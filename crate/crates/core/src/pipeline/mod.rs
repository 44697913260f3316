//! End-to-end answering: gate, decompose, per-node gate and retrieve,
//! draft, synthesis.
//!
//! ```text
//! base gate ── know ──> direct answer
//!     │
//!   unknow
//!     │
//! plan (decompose, or one node) ──> nodes in dependency waves
//!     node gate ── know ──> answer with prior answers
//!        └──── unknow ──> retrieve, answer with passages + prior answers
//!     │
//! base retrieval ──> draft ──> synthesis
//! ```
//!
//! Every step is appended to [`PipelineResult::events`], and nodes running
//! in parallel are merged back in topological order, so a trace never
//! depends on scheduling.

mod compose;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use compose::{compose_subtask_prompt, enforce_budget, BudgetImpossible, ComposedPrompt, QaPair, Truncation};

use crate::dag::{decompose, GraphOrigin, TaskGraph, DEFAULT_DAG_RETRIES};
use crate::gate::{parse_gate_output, render_gate_prompt, Knowledge, GATE_OUTPUT_TOKENS};
use crate::modelgw::{CompletionRequest, Gateway, GatewayError, Role, RoleBudgets};
use crate::retrieve::{Passage, RetrieveError, Retriever};
use crate::vindex::ScoredDocument;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Header of the draft call that turns base-question passages into an
/// answer paragraph.
pub const DRAFT_HEADER: &str = "Write a short answer paragraph for the question, using the documents where they help.";

/// Header of the final call.
pub const SYNTHESIS_HEADER: &str =
    "Answer the question. The documents, draft answer and answered sub-questions are background information.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub enable_gate: bool,
    pub enable_dag: bool,
    pub enable_rag: bool,
    pub retrieve_n: usize,
    pub coarse_k: usize,
    pub budgets: RoleBudgets,
    pub max_output_tokens: usize,
    /// Prepended to the direct and final answering prompts, e.g. a
    /// chain-of-thought instruction.
    pub answer_prefix: Option<String>,
    pub node_workers: usize,
    pub dag_retries: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            enable_gate: true,
            enable_dag: true,
            enable_rag: true,
            retrieve_n: 5,
            coarse_k: 32,
            budgets: RoleBudgets::default(),
            max_output_tokens: 512,
            answer_prefix: None,
            node_workers: 1,
            dag_retries: DEFAULT_DAG_RETRIES,
        }
    }
}

/// Smallest budget any role may be given.
pub const MIN_BUDGET: usize = 64;

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        for role in Role::ALL {
            if self.budgets.get(role) < MIN_BUDGET {
                return bad(format!("{role} budget must be at least {MIN_BUDGET}"));
            }
        }
        if self.retrieve_n == 0 || self.retrieve_n > self.coarse_k {
            return bad(format!(
                "retrieve_n must be in 1..={} (coarse_k), got {}",
                self.coarse_k, self.retrieve_n
            ));
        }
        if self.node_workers == 0 {
            return bad("node_workers must be at least 1".into());
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("retrieval is enabled but no retriever is configured")]
    MissingRetriever,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("base retrieval failed: {0}")]
    Retrieve(#[from] RetrieveError),
    #[error("{role} prompt cannot fit its budget: {source}")]
    BudgetImpossible { role: Role, source: BudgetImpossible },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOutcome {
    Know,
    Unknow,
    /// Unparseable gate output, treated as unknow.
    AmbiguousFallback,
}

impl GateOutcome {
    pub fn is_know(self) -> bool {
        self == GateOutcome::Know
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    /// `None` for the base question.
    pub task_id: Option<String>,
    pub outcome: GateOutcome,
    pub raw_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Decomposed,
    Fallback,
    /// Decomposition switched off.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Gate said know: answered from the model's own knowledge.
    Parametric,
    /// Answered over retrieved passages.
    Retrieved,
    /// Gate said unknow (or was off) but retrieval is disabled.
    Unaugmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Gate { task_id: Option<String>, outcome: GateOutcome },
    Direct,
    Plan { source: PlanSource, nodes: usize },
    Retrieve { task_id: Option<String>, docs: usize },
    Answer { task_id: String, mode: AnswerMode },
    NodeFailed { task_id: String },
    Draft,
    Synthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Gate,
    Decompose,
    Direct,
    Node,
    Draft,
    Synthesis,
}

/// One prompt that reached a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub purpose: CallPurpose,
    pub task_id: Option<String>,
    pub prompt_tokens: usize,
    /// Size before truncation; equals `prompt_tokens` when nothing was cut.
    pub untruncated_tokens: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub schema_version: u32,
    pub question: String,
    pub final_answer: String,
    pub direct: bool,
    pub gate_decisions: Vec<GateRecord>,
    pub graph: Option<TaskGraph>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_outputs: Vec<String>,
    pub node_answers: BTreeMap<String, String>,
    pub retrieved: BTreeMap<String, Vec<ScoredDocument>>,
    pub base_retrieved: Vec<ScoredDocument>,
    pub draft_answer: Option<String>,
    pub subqa_block: Option<String>,
    pub failures: Vec<NodeFailure>,
    pub events: Vec<Event>,
    pub calls: Vec<CallRecord>,
    pub retrieval_calls: usize,
}

impl PipelineResult {
    /// The base-question gate decision, if the gate ran.
    pub fn base_gate(&self) -> Option<&GateRecord> {
        self.gate_decisions.iter().find(|g| g.task_id.is_none())
    }

    pub fn subquestion_count(&self) -> Option<usize> {
        self.graph.as_ref().map(TaskGraph::len)
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    gateway: Gateway,
    retriever: Option<Arc<dyn Retriever>>,
    config: PipelineConfig,
}

impl Pipeline {
    /// The gateway's budgets are replaced by the config's.
    pub fn new(gateway: Gateway, retriever: Option<Arc<dyn Retriever>>, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.enable_rag && retriever.is_none() {
            return Err(PipelineError::MissingRetriever);
        }
        Ok(Self {
            gateway: gateway.with_budgets(config.budgets),
            retriever,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Same backends and retriever under another configuration.
    pub fn reconfigured(&self, config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::new(self.gateway.clone(), self.retriever.clone(), config)
    }

    pub fn answer(&self, question: &str) -> Result<PipelineResult, PipelineError> {
        let run = Run {
            p: self,
            memo: Mutex::new(HashMap::new()),
            retrieval_calls: AtomicUsize::new(0),
        };
        run.answer(question)
    }
}

struct Run<'a> {
    p: &'a Pipeline,
    memo: Mutex<HashMap<String, Vec<Passage>>>,
    retrieval_calls: AtomicUsize,
}

struct NodeOutcome {
    task_id: String,
    gate: Option<GateRecord>,
    retrieved: Option<Vec<ScoredDocument>>,
    answer: Result<(String, AnswerMode), String>,
    events: Vec<Event>,
    calls: Vec<CallRecord>,
}

impl Run<'_> {
    fn cfg(&self) -> &PipelineConfig {
        &self.p.config
    }

    #[allow(clippy::too_many_arguments)]
    fn call(
        &self,
        role: Role,
        purpose: CallPurpose,
        task_id: Option<&str>,
        prompt: String,
        untruncated_tokens: Option<usize>,
        max_output_tokens: usize,
        calls: &mut Vec<CallRecord>,
    ) -> Result<String, GatewayError> {
        let gw = &self.p.gateway;
        let prompt_tokens = gw.tokenizer().count(&prompt);
        let out = gw.complete(&CompletionRequest::new(role, prompt, max_output_tokens));
        // An over-budget prompt is refused before any I/O, so it is not a call.
        if !matches!(out, Err(GatewayError::BudgetExceeded { .. })) {
            calls.push(CallRecord {
                role,
                purpose,
                task_id: task_id.map(str::to_string),
                prompt_tokens,
                untruncated_tokens: untruncated_tokens.unwrap_or(prompt_tokens),
                budget: gw.budgets().get(role),
            });
        }
        Ok(out?.text)
    }

    fn gate(&self, question: &str, task_id: Option<&str>, calls: &mut Vec<CallRecord>) -> Result<GateRecord, GatewayError> {
        let raw = self.call(
            Role::Know,
            CallPurpose::Gate,
            task_id,
            render_gate_prompt(question),
            None,
            GATE_OUTPUT_TOKENS,
            calls,
        )?;
        let outcome = match parse_gate_output(&raw) {
            Ok(Knowledge::Know) => GateOutcome::Know,
            Ok(Knowledge::Unknow) => GateOutcome::Unknow,
            Err(_) => GateOutcome::AmbiguousFallback,
        };
        Ok(GateRecord {
            task_id: task_id.map(str::to_string),
            outcome,
            raw_output: raw,
        })
    }

    fn medical(
        &self,
        purpose: CallPurpose,
        task_id: Option<&str>,
        prompt: ComposedPrompt,
        calls: &mut Vec<CallRecord>,
    ) -> Result<String, PipelineError> {
        let gw = &self.p.gateway;
        let (prompt, t) = enforce_budget(prompt, gw.budgets().medical, gw.tokenizer().as_ref())
            .map_err(|source| PipelineError::BudgetImpossible {
                role: Role::Medical,
                source,
            })?;
        Ok(self.call(
            Role::Medical,
            purpose,
            task_id,
            prompt.render(),
            Some(t.original_tokens),
            self.cfg().max_output_tokens,
            calls,
        )?)
    }

    /// Retrieval memoized by query text for the length of one run.
    fn retrieve(&self, query: &str) -> Result<Vec<Passage>, RetrieveError> {
        let retriever = self.p.retriever.as_ref().expect("checked at construction");
        let mut memo = self.memo.lock().expect("retrieval memo poisoned");
        if let Some(hit) = memo.get(query) {
            return Ok(hit.clone());
        }
        self.retrieval_calls.fetch_add(1, Ordering::Relaxed);
        let docs = retriever.retrieve(query, self.cfg().retrieve_n)?;
        memo.insert(query.to_string(), docs.clone());
        Ok(docs)
    }

    fn header(&self, base: &str) -> String {
        match &self.cfg().answer_prefix {
            Some(prefix) if base.is_empty() => prefix.clone(),
            Some(prefix) => format!("{prefix}\n{base}"),
            None => base.to_string(),
        }
    }

    fn answer(&self, question: &str) -> Result<PipelineResult, PipelineError> {
        let mut events = Vec::new();
        let mut calls = Vec::new();
        let mut gate_decisions = Vec::new();

        if self.cfg().enable_gate {
            let g = self.gate(question, None, &mut calls)?;
            events.push(Event::Gate {
                task_id: None,
                outcome: g.outcome,
            });
            let know = g.outcome.is_know();
            gate_decisions.push(g);
            if know {
                let prompt = ComposedPrompt {
                    header: self.header(""),
                    ..ComposedPrompt::question(question)
                };
                let final_answer = self.medical(CallPurpose::Direct, None, prompt, &mut calls)?;
                events.push(Event::Direct);
                return Ok(PipelineResult {
                    schema_version: TRACE_SCHEMA_VERSION,
                    question: question.to_string(),
                    final_answer,
                    direct: true,
                    gate_decisions,
                    graph: None,
                    plan_outputs: Vec::new(),
                    node_answers: BTreeMap::new(),
                    retrieved: BTreeMap::new(),
                    base_retrieved: Vec::new(),
                    draft_answer: None,
                    subqa_block: None,
                    failures: Vec::new(),
                    events,
                    calls,
                    retrieval_calls: 0,
                });
            }
        }

        let (mut graph, plan_outputs, source) = if self.cfg().enable_dag {
            let gw = &self.p.gateway;
            let d = decompose(gw, question, self.cfg().dag_retries)?;
            let tokens = gw.tokenizer().count(&crate::dag::render_dag_prompt(question));
            for _ in &d.raw_outputs {
                calls.push(CallRecord {
                    role: Role::Dag,
                    purpose: CallPurpose::Decompose,
                    task_id: None,
                    prompt_tokens: tokens,
                    untruncated_tokens: tokens,
                    budget: gw.budgets().dag,
                });
            }
            let source = match d.graph.origin() {
                GraphOrigin::Decomposed => PlanSource::Decomposed,
                GraphOrigin::FallbackSingle => PlanSource::Fallback,
            };
            (d.graph, d.raw_outputs, source)
        } else {
            (TaskGraph::single(question), Vec::new(), PlanSource::Single)
        };
        events.push(Event::Plan {
            source,
            nodes: graph.len(),
        });

        let mut node_answers = BTreeMap::new();
        let mut retrieved = BTreeMap::new();
        let mut failures = Vec::new();
        let mut settled: HashMap<String, Option<String>> = HashMap::new();
        for wave in graph.waves() {
            let mut outcomes = Vec::with_capacity(wave.len());
            for batch in wave.chunks(self.cfg().node_workers) {
                if batch.len() == 1 {
                    outcomes.push(self.run_node(&graph, &batch[0], &settled));
                } else {
                    let graph = &graph;
                    let settled = &settled;
                    std::thread::scope(|s| {
                        let handles: Vec<_> = batch
                            .iter()
                            .map(|id| s.spawn(move || self.run_node(graph, id, settled)))
                            .collect();
                        for h in handles {
                            outcomes.push(h.join().expect("node worker panicked"));
                        }
                    });
                }
            }
            for o in outcomes {
                events.extend(o.events);
                calls.extend(o.calls);
                gate_decisions.extend(o.gate);
                if let Some(docs) = o.retrieved {
                    retrieved.insert(o.task_id.clone(), docs);
                }
                match o.answer {
                    Ok((text, _)) => {
                        graph.mark_done(&o.task_id, text.clone()).expect("node exists");
                        node_answers.insert(o.task_id.clone(), text.clone());
                        settled.insert(o.task_id, Some(text));
                    }
                    Err(reason) => {
                        graph.mark_failed(&o.task_id).expect("node exists");
                        failures.push(NodeFailure {
                            task_id: o.task_id.clone(),
                            reason,
                        });
                        settled.insert(o.task_id, None);
                    }
                }
            }
        }

        let order = graph.topo_order();
        let pairs: Vec<QaPair> = order
            .iter()
            .filter_map(|id| {
                let node = graph.node(id)?;
                node.result.as_ref().map(|a| QaPair {
                    question: node.instruction.clone(),
                    answer: a.clone(),
                })
            })
            .collect();
        let notes: Vec<String> = order
            .iter()
            .filter_map(|id| graph.node(id))
            .filter(|n| n.result.is_none())
            .map(|n| n.instruction.clone())
            .collect();
        let subqa_block = (!pairs.is_empty()).then(|| {
            pairs
                .iter()
                .map(|qa| format!("Q: {}\nA: {}\n", qa.question, qa.answer))
                .collect::<String>()
        });

        let mut base_passages = Vec::new();
        let mut draft_answer = None;
        if self.cfg().enable_rag {
            base_passages = self.retrieve(question)?;
            events.push(Event::Retrieve {
                task_id: None,
                docs: base_passages.len(),
            });
            if !base_passages.is_empty() {
                let prompt = ComposedPrompt {
                    header: DRAFT_HEADER.to_string(),
                    passages: base_passages.clone(),
                    ..ComposedPrompt::question(question)
                };
                draft_answer = Some(self.medical(CallPurpose::Draft, None, prompt, &mut calls)?);
                events.push(Event::Draft);
            }
        }

        let prompt = ComposedPrompt {
            header: self.header(SYNTHESIS_HEADER),
            passages: base_passages.clone(),
            draft: draft_answer.clone(),
            prior: pairs,
            notes,
            question: question.to_string(),
        };
        let final_answer = self.medical(CallPurpose::Synthesis, None, prompt, &mut calls)?;
        events.push(Event::Synthesis);

        Ok(PipelineResult {
            schema_version: TRACE_SCHEMA_VERSION,
            question: question.to_string(),
            final_answer,
            direct: false,
            gate_decisions,
            graph: Some(graph),
            plan_outputs,
            node_answers,
            retrieved,
            base_retrieved: base_passages.into_iter().map(|p| p.doc).collect(),
            draft_answer,
            subqa_block,
            failures,
            events,
            calls,
            retrieval_calls: self.retrieval_calls.load(Ordering::Relaxed),
        })
    }

    fn run_node(&self, graph: &TaskGraph, task_id: &str, settled: &HashMap<String, Option<String>>) -> NodeOutcome {
        let node = graph.node(task_id).expect("scheduled ids exist");
        let mut out = NodeOutcome {
            task_id: task_id.to_string(),
            gate: None,
            retrieved: None,
            answer: Err(String::new()),
            events: Vec::new(),
            calls: Vec::new(),
        };
        let fail = |mut out: NodeOutcome, reason: String| {
            out.events.push(Event::NodeFailed {
                task_id: out.task_id.clone(),
            });
            out.answer = Err(reason);
            out
        };

        let mut deps: Vec<&str> = node.dependent_task_ids.iter().map(String::as_str).collect();
        deps.sort_by(|a, b| crate::dag::task_id_cmp(a, b));
        deps.dedup();
        let mut prior = Vec::with_capacity(deps.len());
        for dep in deps {
            match settled.get(dep) {
                Some(Some(answer)) => prior.push(QaPair {
                    question: graph.node(dep).expect("validated").instruction.clone(),
                    answer: answer.clone(),
                }),
                _ => return fail(out, format!("dependency `{dep}` failed")),
            }
        }

        let mut know = false;
        if self.cfg().enable_gate {
            match self.gate(&node.instruction, Some(task_id), &mut out.calls) {
                Ok(g) => {
                    out.events.push(Event::Gate {
                        task_id: Some(task_id.to_string()),
                        outcome: g.outcome,
                    });
                    know = g.outcome.is_know();
                    out.gate = Some(g);
                }
                Err(e) => return fail(out, e.to_string()),
            }
        }

        let mut docs = Vec::new();
        let mode = if know {
            AnswerMode::Parametric
        } else if self.cfg().enable_rag {
            match self.retrieve(&node.instruction) {
                Ok(d) => docs = d,
                Err(e) => return fail(out, e.to_string()),
            }
            out.events.push(Event::Retrieve {
                task_id: Some(task_id.to_string()),
                docs: docs.len(),
            });
            out.retrieved = Some(docs.iter().map(|p| p.doc.clone()).collect());
            AnswerMode::Retrieved
        } else {
            AnswerMode::Unaugmented
        };

        let prompt = compose_subtask_prompt(&node.instruction, &docs, &prior);
        match self.medical(CallPurpose::Node, Some(task_id), prompt, &mut out.calls) {
            Ok(text) => {
                out.events.push(Event::Answer {
                    task_id: task_id.to_string(),
                    mode,
                });
                out.answer = Ok((text, mode));
                out
            }
            Err(e) => fail(out, e.to_string()),
        }
    }
}
