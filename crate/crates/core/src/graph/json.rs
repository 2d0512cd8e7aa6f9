use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{validate_graph, GraphError, Node, NodeKind, TaskGraph, TaskInfo, ValueInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Task,
    Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<TaskInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<ValueInfo>,
}

/// On-disk form of a task graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<(String, String)>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl GraphFile {
    pub fn from_graph(g: &TaskGraph) -> Self {
        let nodes = g
            .nodes()
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Task(t) => NodeRecord {
                    id: n.id.clone(),
                    kind: KindTag::Task,
                    task: Some(t.clone()),
                    value: None,
                },
                NodeKind::Value(v) => NodeRecord {
                    id: n.id.clone(),
                    kind: KindTag::Value,
                    task: None,
                    value: Some(*v),
                },
            })
            .collect();
        GraphFile {
            nodes,
            edges: g
                .edges()
                .iter()
                .map(|&(s, d)| (g.id(s).to_string(), g.id(d).to_string()))
                .collect(),
            inputs: g.inputs().iter().map(|&i| g.id(i).to_string()).collect(),
            outputs: g.outputs().iter().map(|&i| g.id(i).to_string()).collect(),
        }
    }

    pub fn into_graph(self) -> Result<TaskGraph, GraphError> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for rec in self.nodes {
            let kind = match (rec.kind, rec.task, rec.value) {
                (KindTag::Task, Some(t), None) => NodeKind::Task(t),
                (KindTag::Value, None, Some(v)) => NodeKind::Value(v),
                (tag, _, _) => {
                    return Err(GraphError::Parse(format!(
                        "node {:?}: kind {:?} needs exactly its matching payload object",
                        rec.id, tag
                    )))
                }
            };
            nodes.push(Node { id: rec.id, kind });
        }
        TaskGraph::new(nodes, self.edges, self.inputs, self.outputs)
    }
}

/// Parses a graph file and rejects it unless every invariant holds.
pub fn load_graph<R: Read>(reader: R) -> Result<TaskGraph, GraphError> {
    let file: GraphFile = serde_json::from_reader(reader).map_err(|e| GraphError::Parse(e.to_string()))?;
    let g = file.into_graph()?;
    let violations = validate_graph(&g);
    if violations.is_empty() {
        Ok(g)
    } else {
        Err(GraphError::Validation(violations))
    }
}

pub fn save_graph<W: Write>(g: &TaskGraph, writer: W) -> Result<(), GraphError> {
    serde_json::to_writer(writer, &GraphFile::from_graph(g)).map_err(|e| GraphError::Parse(e.to_string()))
}
