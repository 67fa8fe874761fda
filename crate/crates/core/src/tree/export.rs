//! Graphviz and JSON views of the tree topology.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{DgtTree, NodeId, Phase};
use crate::error::Result;

/// One node of the JSON topology export.
#[derive(Debug, Clone, Serialize)]
pub struct NodeSummary {
    pub id: NodeId,
    pub path_name: String,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub phase: Phase,
    pub videos: Vec<String>,
    pub stored_params: usize,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph; labels are path names with video counts, filled by phase.
pub fn to_dot(tree: &DgtTree) -> Result<String> {
    let mut out = String::from("digraph dgt {\n  node [shape=box, style=filled];\n");
    let order = tree.breadth_first();
    for &id in &order {
        let n = tree.node(id)?;
        let colour = match n.phase {
            Phase::Base => "lightblue",
            Phase::Grow => "palegreen",
        };
        let _ = writeln!(
            out,
            "  n{id} [label=\"{}\\nvideos: {}\", fillcolor={colour}];",
            escape(&tree.path_name(id)?),
            n.videos.len()
        );
    }
    for &id in &order {
        for c in &tree.node(id)?.children {
            let _ = writeln!(out, "  n{id} -> n{c};");
        }
    }
    out.push_str("}\n");
    Ok(out)
}

pub fn to_json(tree: &DgtTree) -> Result<String> {
    let nodes = tree
        .breadth_first()
        .into_iter()
        .map(|id| {
            let n = tree.node(id)?;
            Ok(NodeSummary {
                id,
                path_name: tree.path_name(id)?,
                depth: n.depth,
                parent: n.parent,
                children: n.children.clone(),
                phase: n.phase,
                videos: n.videos.clone(),
                stored_params: n.num_params(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (full, inference) = tree.param_count();
    let doc = serde_json::json!({
        "num_blocks": tree.num_blocks(),
        "full_params": full,
        "inference_params": inference,
        "nodes": nodes,
    });
    Ok(serde_json::to_string_pretty(&doc).expect("plain data serializes"))
}

impl DgtTree {
    pub fn export_dot(&self, path: &Path) -> Result<()> {
        fs::write(path, to_dot(self)?)?;
        Ok(())
    }

    pub fn export_json(&self, path: &Path) -> Result<()> {
        fs::write(path, to_json(self)?)?;
        Ok(())
    }
}
