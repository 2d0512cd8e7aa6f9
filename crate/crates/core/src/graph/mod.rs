//! Bipartite task/value graph used by every partitioning phase.
//!
//! A model is a DAG whose nodes are either *tasks* (operators) or *values*
//! (tensors, parameters, model inputs). Edges always alternate between the two
//! kinds. Nodes are stored sorted by id, so a node's dense index orders the
//! same way as its id and every tie-break in the crate can use the index.

mod json;
mod validate;

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{load_graph, save_graph, GraphFile};
pub use validate::{constant_outputs, validate_graph, Violation};

pub type NodeId = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInfo {
    pub op: String,
    pub flops_per_sample: f64,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl TaskInfo {
    /// Key used to look a task up in a measured cost table: the op name
    /// followed by `|key=value` for every attribute in key order.
    pub fn signature(&self) -> String {
        let mut sig = self.op.clone();
        for (k, v) in &self.attrs {
            sig.push('|');
            sig.push_str(k);
            sig.push('=');
            match v {
                serde_json::Value::String(s) => sig.push_str(s),
                other => sig.push_str(&other.to_string()),
            }
        }
        sig
    }
}

/// Size annotation of a value. At per-replica batch `b` the value occupies
/// `fixed_bytes + b * bytes_per_sample` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueInfo {
    pub fixed_bytes: u64,
    pub bytes_per_sample: u64,
    pub is_param: bool,
}

impl ValueInfo {
    pub fn bytes_at(&self, batch: u64) -> u64 {
        self.fixed_bytes + batch * self.bytes_per_sample
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Task(TaskInfo),
    Value(ValueInfo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl Node {
    pub fn task(id: impl Into<NodeId>, op: impl Into<String>, flops_per_sample: f64) -> Self {
        Node {
            id: id.into(),
            kind: NodeKind::Task(TaskInfo {
                op: op.into(),
                flops_per_sample,
                attrs: BTreeMap::new(),
            }),
        }
    }

    pub fn value(id: impl Into<NodeId>, fixed_bytes: u64, bytes_per_sample: u64, is_param: bool) -> Self {
        Node {
            id: id.into(),
            kind: NodeKind::Value(ValueInfo {
                fixed_bytes,
                bytes_per_sample,
                is_param,
            }),
        }
    }

    pub fn is_task(&self) -> bool {
        matches!(self.kind, NodeKind::Task(_))
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(NodeId),
    #[error("reference to unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("graph is not a DAG; cycle through {0:?}")]
    Cycle(Vec<NodeId>),
    #[error("invalid graph: {}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Immutable task graph. Construction checks only referential integrity;
/// semantic invariants are reported by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

impl TaskGraph {
    pub fn new(
        mut nodes: Vec<Node>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        inputs: impl IntoIterator<Item = NodeId>,
        outputs: impl IntoIterator<Item = NodeId>,
    ) -> Result<Self, GraphError> {
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        let lookup = |id: &NodeId| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| GraphError::UnknownNode(id.clone()))
        };

        let mut edge_idx = Vec::new();
        for (s, d) in edges {
            edge_idx.push((lookup(&s)?, lookup(&d)?));
        }
        edge_idx.sort_unstable();
        edge_idx.dedup();

        let mut succ = vec![Vec::new(); nodes.len()];
        let mut pred = vec![Vec::new(); nodes.len()];
        for &(s, d) in &edge_idx {
            succ[s].push(d);
            pred[d].push(s);
        }
        for p in pred.iter_mut() {
            p.sort_unstable();
        }

        let mut ins = inputs.into_iter().map(|i| lookup(&i)).collect::<Result<Vec<_>, _>>()?;
        ins.sort_unstable();
        ins.dedup();
        let mut outs = outputs.into_iter().map(|o| lookup(&o)).collect::<Result<Vec<_>, _>>()?;
        outs.sort_unstable();
        outs.dedup();

        Ok(TaskGraph {
            nodes,
            index,
            succ,
            pred,
            edges: edge_idx,
            inputs: ins,
            outputs: outs,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.nodes[i].id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn succ(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    pub fn pred(&self, i: usize) -> &[usize] {
        &self.pred[i]
    }

    /// Edges as dense index pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn is_input(&self, i: usize) -> bool {
        self.inputs.binary_search(&i).is_ok()
    }

    pub fn is_output(&self, i: usize) -> bool {
        self.outputs.binary_search(&i).is_ok()
    }

    pub fn is_task(&self, i: usize) -> bool {
        self.nodes[i].is_task()
    }

    pub fn task(&self, i: usize) -> Option<&TaskInfo> {
        match &self.nodes[i].kind {
            NodeKind::Task(t) => Some(t),
            NodeKind::Value(_) => None,
        }
    }

    pub fn value(&self, i: usize) -> Option<&ValueInfo> {
        match &self.nodes[i].kind {
            NodeKind::Value(v) => Some(v),
            NodeKind::Task(_) => None,
        }
    }

    pub fn task_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.is_task(i))
    }

    pub fn value_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| !self.is_task(i))
    }

    /// Producing task of a value (the first one, if the graph is invalid).
    pub fn producer(&self, v: usize) -> Option<usize> {
        self.pred[v].first().copied()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_indices().count()
    }

    /// Kahn's algorithm with ties broken by ascending index (= ascending id).
    pub fn topo_indices(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.pred.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(u)) = heap.pop() {
            order.push(u);
            for &v in &self.succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    heap.push(Reverse(v));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            let stuck = (0..n)
                .filter(|&i| indeg[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            Err(GraphError::Cycle(stuck))
        }
    }
}

/// Deterministic topological order of node ids; ties go to the smaller id.
pub fn topo_order(g: &TaskGraph) -> Result<Vec<NodeId>, GraphError> {
    Ok(g.topo_indices()?
        .into_iter()
        .map(|i| g.id(i).to_string())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCount {
    pub bytes: u64,
    pub elements: u64,
}

/// Sums parameter sizes. Element counts assume every parameter is stored
/// with `bytes_per_element` bytes.
pub fn count_params(g: &TaskGraph, bytes_per_element: u64) -> ParamCount {
    let bpe = bytes_per_element.max(1);
    g.value_indices()
        .filter_map(|i| g.value(i))
        .filter(|v| v.is_param)
        .fold(ParamCount::default(), |acc, v| ParamCount {
            bytes: acc.bytes + v.fixed_bytes,
            elements: acc.elements + v.fixed_bytes / bpe,
        })
}

/// Incremental construction helper used by the model generators and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, id: &str, bytes_per_sample: u64) -> &mut Self {
        self.nodes.push(Node::value(id, 0, bytes_per_sample, false));
        self.inputs.push(id.to_string());
        self
    }

    pub fn param(&mut self, id: &str, bytes: u64) -> &mut Self {
        self.nodes.push(Node::value(id, bytes, 0, true));
        self
    }

    pub fn value(&mut self, id: &str, fixed_bytes: u64, bytes_per_sample: u64) -> &mut Self {
        self.nodes.push(Node::value(id, fixed_bytes, bytes_per_sample, false));
        self
    }

    /// Adds a task consuming `inputs` and producing `outputs`. Output value
    /// nodes must be added separately.
    pub fn task(&mut self, id: &str, op: &str, flops_per_sample: f64, inputs: &[&str], outputs: &[&str]) -> &mut Self {
        self.nodes.push(Node::task(id, op, flops_per_sample));
        for i in inputs {
            self.edges.push((i.to_string(), id.to_string()));
        }
        for o in outputs {
            self.edges.push((id.to_string(), o.to_string()));
        }
        self
    }

    pub fn node(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn edge(&mut self, src: &str, dst: &str) -> &mut Self {
        self.edges.push((src.to_string(), dst.to_string()));
        self
    }

    pub fn mark_input(&mut self, id: &str) -> &mut Self {
        self.inputs.push(id.to_string());
        self
    }

    pub fn output(&mut self, id: &str) -> &mut Self {
        self.outputs.push(id.to_string());
        self
    }

    pub fn build(self) -> Result<TaskGraph, GraphError> {
        TaskGraph::new(self.nodes, self.edges, self.inputs, self.outputs)
    }
}
