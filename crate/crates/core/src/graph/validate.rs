use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::{NodeId, TaskGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Cycle { nodes: Vec<NodeId> },
    NonBipartite { src: NodeId, dst: NodeId },
    MultiProducer { value: NodeId, producers: Vec<NodeId> },
    /// A parameter whose size scales with the batch.
    BatchScaledParam { value: NodeId },
    InputNotValue { id: NodeId },
    OutputNotValue { id: NodeId },
    ProducedInput { value: NodeId },
    /// A model output reachable from neither a model input nor a parameter.
    UnreachableOutput { value: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
            Violation::NonBipartite { src, dst } => write!(f, "non-bipartite edge {src} -> {dst}"),
            Violation::MultiProducer { value, producers } => {
                write!(f, "value {value} has multiple producers: {}", producers.join(", "))
            }
            Violation::BatchScaledParam { value } => {
                write!(f, "parameter {value} has non-zero bytes_per_sample")
            }
            Violation::InputNotValue { id } => write!(f, "model input {id} is not a value"),
            Violation::OutputNotValue { id } => write!(f, "model output {id} is not a value"),
            Violation::ProducedInput { value } => write!(f, "model input {value} has a producer"),
            Violation::UnreachableOutput { value } => {
                write!(f, "model output {value} is reachable from no input or parameter")
            }
        }
    }
}

/// Reports every broken graph invariant. An empty list means the graph is valid.
pub fn validate_graph(g: &TaskGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let id = |i: usize| g.id(i).to_string();

    let mut pg = DiGraph::<usize, ()>::with_capacity(g.len(), g.edges().len());
    let handles: Vec<_> = (0..g.len()).map(|i| pg.add_node(i)).collect();
    for &(s, d) in g.edges() {
        pg.add_edge(handles[s], handles[d], ());
    }
    let mut cycles: Vec<Vec<usize>> = tarjan_scc(&pg)
        .into_iter()
        .filter(|scc| scc.len() > 1 || g.succ(pg[scc[0]]).contains(&pg[scc[0]]))
        .map(|scc| {
            let mut v: Vec<usize> = scc.into_iter().map(|h| pg[h]).collect();
            v.sort_unstable();
            v
        })
        .collect();
    cycles.sort();
    for c in cycles {
        out.push(Violation::Cycle {
            nodes: c.into_iter().map(id).collect(),
        });
    }

    for &(s, d) in g.edges() {
        if g.is_task(s) == g.is_task(d) {
            out.push(Violation::NonBipartite { src: id(s), dst: id(d) });
        }
    }

    for v in g.value_indices() {
        let producers: Vec<usize> = g.pred(v).iter().copied().filter(|&p| g.is_task(p)).collect();
        if producers.len() > 1 {
            out.push(Violation::MultiProducer {
                value: id(v),
                producers: producers.into_iter().map(id).collect(),
            });
        }
        let info = g.value(v).unwrap();
        if info.is_param && info.bytes_per_sample != 0 {
            out.push(Violation::BatchScaledParam { value: id(v) });
        }
    }

    for &i in g.inputs() {
        if g.is_task(i) {
            out.push(Violation::InputNotValue { id: id(i) });
        } else if !g.pred(i).is_empty() {
            out.push(Violation::ProducedInput { value: id(i) });
        }
    }
    for &o in g.outputs() {
        if g.is_task(o) {
            out.push(Violation::OutputNotValue { id: id(o) });
        }
    }

    let from_inputs = reach(g, g.inputs().iter().copied());
    let from_params = reach(g, params(g));
    for &o in g.outputs() {
        if !g.is_task(o) && !from_inputs[o] && !from_params[o] {
            out.push(Violation::UnreachableOutput { value: id(o) });
        }
    }
    out
}

/// Model outputs that depend only on parameters/constants. These are legal
/// but cannot be placed in any atomic subcomponent.
pub fn constant_outputs(g: &TaskGraph) -> Vec<NodeId> {
    let from_inputs = reach(g, g.inputs().iter().copied());
    g.outputs()
        .iter()
        .filter(|&&o| !from_inputs[o])
        .map(|&o| g.id(o).to_string())
        .collect()
}

fn params(g: &TaskGraph) -> impl Iterator<Item = usize> + '_ {
    g.value_indices().filter(|&v| g.value(v).map_or(false, |x| x.is_param))
}

fn reach(g: &TaskGraph, seeds: impl Iterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; g.len()];
    let mut stack: Vec<usize> = seeds.collect();
    for &s in &stack {
        seen[s] = true;
    }
    while let Some(u) = stack.pop() {
        for &v in g.succ(u) {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}
