//! Atomic subcomponents: the finest partition units.
//!
//! A task is *non-constant* when its output depends on a model input. Every
//! atom holds exactly one non-constant task, its output values, and the
//! constant tasks/values that feed only it. Constant subgraphs feeding several
//! atoms are cloned once per consuming atom.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphError, Node, NodeId, TaskGraph};

pub type SubId = String;

#[derive(Debug, Error)]
pub enum AtomicError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("model has no task that depends on a model input")]
    NoNonConstantTask,
    #[error("model output {0} depends only on constants")]
    DanglingOutput(NodeId),
    #[error("node {0} is not consumed by any non-constant task")]
    Orphan(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    Constant,
    NonConstant,
}

/// A connected set of graph nodes with the values it exchanges with the rest
/// of the graph. Atoms, blocks and stages are all subcomponents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subcomponent {
    pub id: SubId,
    #[serde(rename = "nodes")]
    pub node_ids: Vec<NodeId>,
    #[serde(rename = "inputs")]
    pub input_values: Vec<NodeId>,
    #[serde(rename = "outputs")]
    pub output_values: Vec<NodeId>,
}

impl Subcomponent {
    /// Builds a subcomponent from a set of node indices of `g`.
    pub fn from_nodes(g: &TaskGraph, id: impl Into<SubId>, nodes: &[usize]) -> Self {
        let mut inside = BTreeSet::new();
        inside.extend(nodes.iter().copied());
        let mut inputs = BTreeSet::new();
        let mut outputs = BTreeSet::new();
        for &n in &inside {
            if g.is_task(n) {
                for &v in g.pred(n) {
                    if !inside.contains(&v) {
                        inputs.insert(v);
                    }
                }
            } else if g.is_output(n) || g.succ(n).iter().any(|c| !inside.contains(c)) {
                outputs.insert(n);
            }
        }
        let ids = |s: BTreeSet<usize>| s.into_iter().map(|i| g.id(i).to_string()).collect();
        Subcomponent {
            id: id.into(),
            node_ids: ids(inside),
            input_values: ids(inputs),
            output_values: ids(outputs),
        }
    }

    /// Dense indices of the member nodes in `g`.
    pub fn indices(&self, g: &TaskGraph) -> Vec<usize> {
        self.node_ids.iter().filter_map(|id| g.index_of(id)).collect()
    }
}

/// Classifies every task by a forward sweep from the model inputs.
pub fn mark_constant_tasks(g: &TaskGraph) -> BTreeMap<NodeId, TaskClass> {
    let nc = non_constant_mask(g);
    g.task_indices()
        .map(|t| {
            let class = if nc[t] { TaskClass::NonConstant } else { TaskClass::Constant };
            (g.id(t).to_string(), class)
        })
        .collect()
}

/// `mask[i]` is true for non-constant tasks and for values they produce or
/// that are model inputs.
fn non_constant_mask(g: &TaskGraph) -> Vec<bool> {
    let mut live = vec![false; g.len()];
    let mut stack: Vec<usize> = g.inputs().to_vec();
    for &i in &stack {
        live[i] = true;
    }
    while let Some(u) = stack.pop() {
        for &v in g.succ(u) {
            if !live[v] {
                live[v] = true;
                stack.push(v);
            }
        }
    }
    live
}

/// Result of atomic-level partitioning over a graph with cloned constants.
#[derive(Debug, Clone)]
pub struct AtomicPartition {
    pub graph: TaskGraph,
    pub atoms: Vec<Subcomponent>,
    /// Clone id to the id of the node it was copied from.
    pub origin: BTreeMap<NodeId, NodeId>,
    owner: Vec<usize>,
    members: Vec<Vec<usize>>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct PartitionJson<'a> {
    atoms: &'a [Subcomponent],
    clones: &'a BTreeMap<NodeId, NodeId>,
}

impl AtomicPartition {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Atom owning node `n` of [`AtomicPartition::graph`].
    pub fn owner(&self, n: usize) -> usize {
        self.owner[n]
    }

    /// Node indices of atom `a`, ascending.
    pub fn members(&self, a: usize) -> &[usize] {
        &self.members[a]
    }

    /// Atoms consuming a value owned by `a`. Atom indices are a topological
    /// order of this DAG.
    pub fn succ(&self, a: usize) -> &[usize] {
        &self.succ[a]
    }

    pub fn pred(&self, a: usize) -> &[usize] {
        &self.pred[a]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.atoms.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(PartitionJson {
            atoms: &self.atoms,
            clones: &self.origin,
        })
        .expect("partition serializes")
    }
}

pub fn count_atoms(p: &AtomicPartition) -> usize {
    p.atoms.len()
}

pub fn atom_id(i: usize) -> SubId {
    format!("a{i:06}")
}

/// Forms atomic subcomponents by walking the graph backward from its outputs.
pub fn build_atomic_subcomponents(g: &TaskGraph) -> Result<AtomicPartition, AtomicError> {
    let live = non_constant_mask(g);
    let topo = g.topo_indices()?;
    let mut pos = vec![0usize; g.len()];
    for (p, &n) in topo.iter().enumerate() {
        pos[n] = p;
    }
    let anchors: Vec<usize> = topo.iter().copied().filter(|&n| g.is_task(n) && live[n]).collect();
    if anchors.is_empty() {
        return Err(AtomicError::NoNonConstantTask);
    }

    // Constant cone of each atom: constant tasks and non-input source values
    // reachable backward from its anchor through constant nodes only.
    // Visiting anchors in reverse topological order matches the backward walk;
    // the resulting sets do not depend on the order.
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); g.len()];
    let mut stamp = vec![usize::MAX; g.len()];
    for a in (0..anchors.len()).rev() {
        let mut stack = vec![anchors[a]];
        while let Some(u) = stack.pop() {
            for &v in g.pred(u) {
                if live[v] || stamp[v] == a {
                    continue;
                }
                stamp[v] = a;
                users[v].push(a);
                if let Some(p) = g.producer(v) {
                    if stamp[p] != a {
                        stamp[p] = a;
                        users[p].push(a);
                        stack.push(p);
                    }
                }
            }
        }
    }
    for u in users.iter_mut() {
        u.sort_unstable();
    }

    // Every node needs a home.
    let mut atom_of_anchor = vec![usize::MAX; g.len()];
    for (a, &t) in anchors.iter().enumerate() {
        atom_of_anchor[t] = a;
    }
    let mut home = vec![usize::MAX; g.len()];
    for n in 0..g.len() {
        if live[n] {
            if g.is_task(n) {
                home[n] = atom_of_anchor[n];
            } else if let Some(p) = g.producer(n) {
                home[n] = atom_of_anchor[p];
            } else {
                // model input: first consumer in topological order
                home[n] = g
                    .succ(n)
                    .iter()
                    .min_by_key(|&&c| pos[c])
                    .map(|&c| atom_of_anchor[c])
                    .ok_or_else(|| AtomicError::Orphan(g.id(n).to_string()))?;
            }
        } else if users[n].len() == 1 {
            home[n] = users[n][0];
        }
    }
    if let Some(&o) = g.outputs().iter().find(|&&o| !live[o] && users[o].is_empty()) {
        return Err(AtomicError::DanglingOutput(g.id(o).to_string()));
    }
    if let Some(n) = (0..g.len()).find(|&n| !live[n] && users[n].is_empty()) {
        return Err(AtomicError::Orphan(g.id(n).to_string()));
    }

    // Materialise clones for constant nodes shared by several atoms.
    let shared = |n: usize| !live[n] && users[n].len() > 1;
    let clone_id = |n: usize, a: usize| format!("{}@{}", g.id(n), atom_id(a));
    let mut nodes = Vec::with_capacity(g.len());
    let mut origin = BTreeMap::new();
    let mut clone_owner = std::collections::HashMap::new();
    for n in 0..g.len() {
        if shared(n) {
            for &a in &users[n] {
                let id = clone_id(n, a);
                origin.insert(id.clone(), g.id(n).to_string());
                clone_owner.insert(id.clone(), a);
                nodes.push(Node { id, kind: g.node(n).kind.clone() });
            }
        } else {
            nodes.push(g.node(n).clone());
        }
    }
    let mut edges = Vec::with_capacity(g.edges().len());
    for &(u, v) in g.edges() {
        match (shared(u), shared(v)) {
            (false, false) => edges.push((g.id(u).to_string(), g.id(v).to_string())),
            (true, false) => edges.push((clone_id(u, home[v]), g.id(v).to_string())),
            (true, true) => {
                for &a in &users[v] {
                    edges.push((clone_id(u, a), clone_id(v, a)));
                }
            }
            (false, true) => unreachable!("constant cones are closed under predecessors"),
        }
    }
    let outputs = g.outputs().iter().map(|&o| {
        if shared(o) {
            clone_id(o, users[o][0])
        } else {
            g.id(o).to_string()
        }
    });
    let inputs = g.inputs().iter().map(|&i| g.id(i).to_string());
    let cloned = TaskGraph::new(nodes, edges, inputs, outputs)?;

    // Ownership in the cloned graph.
    let owner = (0..cloned.len())
        .map(|n| {
            let id = cloned.id(n);
            clone_owner.get(id).copied().unwrap_or_else(|| home[g.index_of(id).unwrap()])
        })
        .collect();
    Ok(assemble(cloned, owner, anchors.len(), origin))
}

fn assemble(graph: TaskGraph, owner: Vec<usize>, n_atoms: usize, origin: BTreeMap<NodeId, NodeId>) -> AtomicPartition {
    let mut members = vec![Vec::new(); n_atoms];
    for (n, &a) in owner.iter().enumerate() {
        members[a].push(n);
    }
    let mut succ = vec![Vec::new(); n_atoms];
    let mut pred = vec![Vec::new(); n_atoms];
    for &(u, v) in graph.edges() {
        let (a, b) = (owner[u], owner[v]);
        if a != b {
            succ[a].push(b);
            pred[b].push(a);
        }
    }
    for l in succ.iter_mut().chain(pred.iter_mut()) {
        l.sort_unstable();
        l.dedup();
    }
    let atoms = members
        .iter()
        .enumerate()
        .map(|(a, m)| Subcomponent::from_nodes(&graph, atom_id(a), m))
        .collect();
    AtomicPartition {
        graph,
        atoms,
        origin,
        owner,
        members,
        succ,
        pred,
    }
}
