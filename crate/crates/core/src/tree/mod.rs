//! Tree of decoder-block suffixes. A node at depth `d` stores decoder blocks
//! `d..L`; the network for a node is the shared parameters plus the root's
//! blocks, overwritten along the root-to-node path.

mod checkpoint;
mod export;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::fisher::FisherDiag;
use crate::micronet::{self, DecoderBlock, NetConfig, NetworkParams, ParamScope, SharedParams};

pub use checkpoint::{load, save, FORMAT_VERSION};
pub use export::{to_dot, to_json, NodeSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Grow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgtNode {
    pub id: NodeId,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Position among all children the parent ever created; used in path names.
    pub ordinal: usize,
    pub videos: Vec<String>,
    /// Decoder blocks `depth..L`.
    pub blocks: Vec<DecoderBlock>,
    pub fisher: Option<FisherDiag>,
    pub phase: Phase,
}

impl DgtNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(DecoderBlock::num_params).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Cap on node depth; never above `L - 1`.
    #[serde(default)]
    pub max_depth: Option<usize>,
}

thread_local! {
    static SEARCHES: Cell<usize> = const { Cell::new(0) };
}

/// Number of greedy searches run on this thread.
pub fn search_count() -> usize {
    SEARCHES.with(Cell::get)
}

pub fn reset_search_count() {
    SEARCHES.with(|c| c.set(0));
}

#[derive(Debug, Clone)]
pub struct DgtTree {
    net_config: NetConfig,
    config: TreeConfig,
    shared: SharedParams,
    nodes: BTreeMap<NodeId, DgtNode>,
    root: NodeId,
    next_id: u64,
    /// Which node each video is assigned to.
    owner: HashMap<String, NodeId>,
    /// Children created per parent, including discarded ones.
    spawned: HashMap<NodeId, usize>,
    /// Set once pretraining is done; shared parameters never change again.
    shared_frozen: bool,
}

impl DgtTree {
    /// Tree with a single depth-0 node holding all `L` blocks.
    pub fn create_root(
        config: TreeConfig,
        net_config: NetConfig,
        shared: SharedParams,
        blocks: Vec<DecoderBlock>,
    ) -> Result<Self> {
        net_config.validate()?;
        let l = net_config.num_blocks();
        if blocks.len() != l {
            return Err(DgtError::validation(format!("root needs {l} decoder blocks, got {}", blocks.len())));
        }
        // shape check through the network constructor
        let params = NetworkParams::from_parts(net_config.clone(), shared, blocks)?;
        if let Some(m) = config.max_depth {
            if m > l - 1 {
                return Err(DgtError::Config(format!("max_depth {m} exceeds {}", l - 1)));
            }
        }
        let NetworkParams { shared, decoder, .. } = params;
        let root = NodeId(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root,
            DgtNode {
                id: root,
                depth: 0,
                parent: None,
                children: Vec::new(),
                ordinal: 0,
                videos: Vec::new(),
                blocks: decoder,
                fisher: None,
                phase: Phase::Base,
            },
        );
        let tree = Self {
            net_config,
            config,
            shared,
            nodes,
            root,
            next_id: 1,
            owner: HashMap::new(),
            spawned: HashMap::new(),
            shared_frozen: false,
        };
        tree.check_invariants()?;
        Ok(tree)
    }

    pub fn from_params(config: TreeConfig, params: NetworkParams) -> Result<Self> {
        Self::create_root(config, params.config, params.shared, params.decoder)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net_config
    }

    pub fn config(&self) -> TreeConfig {
        self.config
    }

    pub fn shared(&self) -> &SharedParams {
        &self.shared
    }

    /// Decoder depth `L`.
    pub fn num_blocks(&self) -> usize {
        self.net_config.num_blocks()
    }

    pub fn max_depth(&self) -> usize {
        let hard = self.num_blocks() - 1;
        self.config.max_depth.map_or(hard, |m| m.min(hard))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&DgtNode> {
        self.nodes.get(&id).ok_or(DgtError::UnknownNode(id.0))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut DgtNode> {
        self.nodes.get_mut(&id).ok_or(DgtError::UnknownNode(id.0))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &DgtNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    /// Node ids in breadth-first order from the root.
    pub fn breadth_first(&self) -> Vec<NodeId> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            order.extend(self.nodes[&order[i]].children.iter().copied());
            i += 1;
        }
        order
    }

    /// Root-to-node path, inclusive.
    pub fn path(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }

    /// `depth_ordinal` pairs joined by `|`, e.g. `0_0|1_3|2_2`.
    pub fn path_name(&self, id: NodeId) -> Result<String> {
        Ok(self
            .path(id)?
            .iter()
            .map(|n| {
                let node = &self.nodes[n];
                format!("{}_{}", node.depth, node.ordinal)
            })
            .collect::<Vec<_>>()
            .join("|"))
    }

    /// New node under `parent` holding copies of the parent's last
    /// `L - (depth + 1)` blocks.
    pub fn instantiate_child(&mut self, parent: NodeId, phase: Phase) -> Result<NodeId> {
        let max_depth = self.max_depth();
        let p = self.node(parent)?;
        if p.depth >= max_depth {
            return Err(DgtError::DepthLimit {
                node: parent.0,
                depth: p.depth,
                max_depth,
            });
        }
        let depth = p.depth + 1;
        let blocks = p.blocks[1..].to_vec();
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let ordinal = {
            let n = self.spawned.entry(parent).or_insert(0);
            *n += 1;
            *n - 1
        };
        self.nodes.insert(
            id,
            DgtNode {
                id,
                depth,
                parent: Some(parent),
                children: Vec::new(),
                ordinal,
                videos: Vec::new(),
                blocks,
                fisher: None,
                phase,
            },
        );
        self.node_mut(parent)?.children.push(id);
        self.check_invariants()?;
        Ok(id)
    }

    /// Independent network for `id`: root blocks overwritten along the path.
    pub fn generate_network(&self, id: NodeId) -> Result<NetworkParams> {
        let path = self.path(id)?;
        let mut params = NetworkParams {
            config: self.net_config.clone(),
            shared: self.shared.clone(),
            decoder: self.nodes[&self.root].blocks.clone(),
        };
        for n in &path[1..] {
            let node = &self.nodes[n];
            micronet::swap_decoder_blocks(&mut params, &node.blocks, node.depth)?;
        }
        Ok(params)
    }

    /// Replaces the node's blocks with the decoder suffix of `params`.
    pub fn store_trained_blocks(&mut self, id: NodeId, params: &NetworkParams) -> Result<()> {
        let depth = self.node(id)?.depth;
        if params.decoder.len() != self.num_blocks() {
            return Err(DgtError::dimension("decoder", self.num_blocks(), params.decoder.len()));
        }
        for (old, new) in self.nodes[&id].blocks.iter().zip(&params.decoder[depth..]) {
            for (a, b) in old.tensors().iter().zip(new.tensors()) {
                b.expect_shape(&format!("decoder.{}", new.index), a.shape())?;
            }
        }
        self.node_mut(id)?.blocks = params.decoder[depth..].to_vec();
        self.check_invariants()
    }

    /// Replaces the shared parameters (only sensible before any children exist).
    pub fn set_shared(&mut self, params: &NetworkParams) -> Result<()> {
        if self.len() != 1 {
            return Err(DgtError::State("shared parameters can only change on a root-only tree".into()));
        }
        if self.shared_frozen {
            return Err(DgtError::State("shared parameters are frozen".into()));
        }
        params.validate()?;
        if params.config != self.net_config {
            return Err(DgtError::validation("network configuration differs from the tree's"));
        }
        self.shared = params.shared.clone();
        self.store_trained_blocks(self.root, params)
    }

    pub fn shared_frozen(&self) -> bool {
        self.shared_frozen
    }

    pub fn freeze_shared(&mut self) {
        self.shared_frozen = true;
    }

    /// Fisher scope of a node's stored blocks.
    pub fn fisher_scope(&self, id: NodeId) -> Result<ParamScope> {
        Ok(ParamScope::DecoderFrom(self.node(id)?.depth))
    }

    pub fn set_fisher(&mut self, id: NodeId, fisher: Option<FisherDiag>) -> Result<()> {
        if let Some(f) = &fisher {
            let scope = self.fisher_scope(id)?;
            if f.scope != scope {
                return Err(DgtError::validation(format!(
                    "fisher scope {:?} does not match node scope {scope:?}",
                    f.scope
                )));
            }
            let blocks = &self.nodes[&id].blocks;
            let shapes: Vec<&[usize]> = blocks.iter().flat_map(|b| b.tensors().map(|t| t.shape())).collect();
            if shapes.len() != f.tensors.len() {
                return Err(DgtError::dimension("fisher", shapes.len(), f.tensors.len()));
            }
            for (s, t) in shapes.iter().zip(&f.tensors) {
                t.expect_shape("fisher", s)?;
            }
        }
        self.node_mut(id)?.fisher = fisher;
        Ok(())
    }

    pub fn owner_of(&self, video: &str) -> Option<NodeId> {
        self.owner.get(video).copied()
    }

    pub fn assign_video(&mut self, id: NodeId, video: &str) -> Result<()> {
        self.node(id)?;
        if let Some(n) = self.owner.get(video) {
            return Err(DgtError::validation(format!("video `{video}` is already assigned to node {n}")));
        }
        self.owner.insert(video.to_string(), id);
        self.node_mut(id)?.videos.push(video.to_string());
        Ok(())
    }

    /// Removes `video` from a non-root node; the root takes it over.
    pub fn remove_video(&mut self, id: NodeId, video: &str) -> Result<()> {
        if id == self.root {
            return Err(DgtError::validation("videos cannot be removed from the root"));
        }
        self.move_video(id, self.root, video)
    }

    /// Moves `video` from node `from` to node `to`.
    pub fn move_video(&mut self, from: NodeId, to: NodeId, video: &str) -> Result<()> {
        self.node(to)?;
        if self.owner.get(video) != Some(&from) {
            return Err(DgtError::validation(format!("video `{video}` is not assigned to node {from}")));
        }
        self.node_mut(from)?.videos.retain(|v| v != video);
        self.node_mut(to)?.videos.push(video.to_string());
        self.owner.insert(video.to_string(), to);
        Ok(())
    }

    /// Drops a childless non-root node; its videos move to its parent.
    pub fn discard_leaf(&mut self, id: NodeId) -> Result<Vec<String>> {
        let node = self.node(id)?;
        let Some(parent) = node.parent else {
            return Err(DgtError::validation("the root cannot be discarded"));
        };
        if !node.is_leaf() {
            return Err(DgtError::validation(format!("node {id} has children and cannot be discarded")));
        }
        let node = self.nodes.remove(&id).expect("checked above");
        self.node_mut(parent)?.children.retain(|c| *c != id);
        for v in &node.videos {
            self.owner.insert(v.clone(), parent);
        }
        self.node_mut(parent)?.videos.extend(node.videos.iter().cloned());
        self.check_invariants()?;
        Ok(node.videos)
    }

    /// `(full, inference)` parameter counts: everything stored versus one
    /// generated network.
    pub fn param_count(&self) -> (usize, usize) {
        let shared = self.shared.num_params();
        let stored: usize = self.nodes.values().map(DgtNode::num_params).sum();
        let inference = shared + self.nodes[&self.root].num_params();
        (shared + stored, inference)
    }

    /// Starting at the root, descend into the best child while it beats its
    /// parent; ties keep the parent. Candidates at one level are scored in
    /// parallel.
    pub fn greedy_search<F>(&self, score: F) -> Result<(NodeId, f32)>
    where
        F: Fn(NodeId, &NetworkParams) -> Result<f32> + Sync,
    {
        SEARCHES.with(|c| c.set(c.get() + 1));
        let eval = |id: NodeId| -> Result<f32> {
            let s = score(id, &self.generate_network(id)?)?;
            if s.is_nan() {
                return Err(DgtError::Invariant(format!("score of node {id} is NaN")));
            }
            Ok(s)
        };
        let mut cur = self.root;
        let mut cur_score = eval(cur)?;
        loop {
            let children = &self.nodes[&cur].children;
            if children.is_empty() {
                return Ok((cur, cur_score));
            }
            let scores: Vec<f32> = children.par_iter().map(|&c| eval(c)).collect::<Result<_>>()?;
            let mut best = None;
            for (&c, &s) in children.iter().zip(&scores) {
                if s > cur_score && best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((c, s));
                }
            }
            match best {
                Some((c, s)) => {
                    cur = c;
                    cur_score = s;
                }
                None => return Ok((cur, cur_score)),
            }
        }
    }

    /// Structural checks: single rooted tree, suffix storage, depth bound and
    /// consistent video ownership.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(DgtError::Invariant(msg));
        let l = self.num_blocks();
        let root = self.node(self.root)?;
        if root.parent.is_some() || root.depth != 0 {
            return fail("root must have depth 0 and no parent".into());
        }
        let reach = self.breadth_first();
        if reach.len() != self.nodes.len() {
            return fail(format!("{} nodes reachable of {}", reach.len(), self.nodes.len()));
        }
        for node in self.nodes.values() {
            if node.depth > self.max_depth() {
                return fail(format!("node {} at depth {} exceeds {}", node.id, node.depth, self.max_depth()));
            }
            if node.blocks.len() != l - node.depth
                || node.blocks.iter().enumerate().any(|(i, b)| b.index != node.depth + i)
            {
                return fail(format!("node {} does not store blocks {}..{l}", node.id, node.depth));
            }
            for c in &node.children {
                let child = self.node(*c)?;
                if child.parent != Some(node.id) || child.depth != node.depth + 1 {
                    return fail(format!("broken link {} -> {c}", node.id));
                }
            }
            for v in &node.videos {
                if self.owner.get(v) != Some(&node.id) {
                    return fail(format!("video `{v}` listed at node {} but owned elsewhere", node.id));
                }
            }
        }
        let listed: usize = self.nodes.values().map(|n| n.videos.len()).sum();
        if listed != self.owner.len() {
            return fail("video ownership table disagrees with node lists".into());
        }
        Ok(())
    }

    pub(crate) fn next_id(&self) -> u64 {
        self.next_id
    }

    pub(crate) fn spawned(&self, id: NodeId) -> usize {
        self.spawned.get(&id).copied().unwrap_or(0)
    }

    pub(crate) fn from_raw_parts(
        net_config: NetConfig,
        config: TreeConfig,
        shared: SharedParams,
        nodes: Vec<DgtNode>,
        next_id: u64,
        spawned: HashMap<NodeId, usize>,
        shared_frozen: bool,
    ) -> Result<Self> {
        let root = nodes
            .iter()
            .find(|n| n.parent.is_none())
            .map(|n| n.id)
            .ok_or_else(|| DgtError::Corrupt("no root node".into()))?;
        let mut owner = HashMap::new();
        for n in &nodes {
            for v in &n.videos {
                if owner.insert(v.clone(), n.id).is_some() {
                    return Err(DgtError::Corrupt(format!("video `{v}` assigned twice")));
                }
            }
        }
        if nodes.iter().any(|n| n.id.0 >= next_id) {
            return Err(DgtError::Corrupt("node id beyond the id counter".into()));
        }
        let tree = Self {
            net_config,
            config,
            shared,
            nodes: nodes.into_iter().map(|n| (n.id, n)).collect(),
            root,
            next_id,
            owner,
            spawned,
            shared_frozen,
        };
        tree.check_invariants().map_err(|e| DgtError::Corrupt(e.to_string()))?;
        Ok(tree)
    }

    /// Structure and bitwise tensor equality.
    pub fn bitwise_eq(&self, other: &DgtTree) -> bool {
        let fisher_eq = |a: &Option<FisherDiag>, b: &Option<FisherDiag>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.scope == b.scope
                    && a.normalized == b.normalized
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.bitwise_eq(y))
            }
            _ => false,
        };
        let shared_eq = self
            .shared
            .layers()
            .zip(other.shared.layers())
            .all(|(a, b)| a.stride == b.stride && a.weight.bitwise_eq(&b.weight) && a.bias.bitwise_eq(&b.bias));
        self.net_config == other.net_config
            && self.config == other.config
            && self.root == other.root
            && self.next_id == other.next_id
            && self.shared_frozen == other.shared_frozen
            && shared_eq
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|((ia, a), (ib, b))| {
                ia == ib
                    && a.depth == b.depth
                    && a.parent == b.parent
                    && a.children == b.children
                    && a.ordinal == b.ordinal
                    && a.videos == b.videos
                    && a.phase == b.phase
                    && a.blocks.len() == b.blocks.len()
                    && a.blocks.iter().zip(&b.blocks).all(|(x, y)| x.bitwise_eq(y))
                    && fisher_eq(&a.fisher, &b.fisher)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> DgtTree {
        let p = NetworkParams::init(&NetConfig::default(), 5).unwrap();
        DgtTree::from_params(TreeConfig::default(), p).unwrap()
    }

    fn perturb(tree: &mut DgtTree, id: NodeId, by: f32) {
        let mut p = tree.generate_network(id).unwrap();
        let depth = tree.node(id).unwrap().depth;
        for b in &mut p.decoder[depth..] {
            for t in b.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += by);
            }
        }
        tree.store_trained_blocks(id, &p).unwrap();
    }

    #[test]
    fn root_holds_every_block() {
        let t = tree();
        let root = t.node(t.root()).unwrap();
        assert_eq!(root.blocks.len(), 4);
        assert_eq!(root.depth, 0);
        let (full, inference) = t.param_count();
        assert_eq!(full, inference);
        assert_eq!(full, t.shared().num_params() + root.num_params());
    }

    #[test]
    fn wrong_block_count_is_rejected() {
        let p = NetworkParams::init(&NetConfig::default(), 5).unwrap();
        let err = DgtTree::create_root(TreeConfig::default(), p.config.clone(), p.shared.clone(), p.decoder[1..].to_vec());
        assert!(matches!(err, Err(DgtError::Validation(_))));
    }

    #[test]
    fn child_suffixes_and_depth_limit() {
        let mut t = tree();
        let c1 = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let n1 = t.node(c1).unwrap();
        assert_eq!(n1.blocks.iter().map(|b| b.index).collect::<Vec<_>>(), vec![1, 2, 3]);
        let c2 = t.instantiate_child(c1, Phase::Base).unwrap();
        let c3 = t.instantiate_child(c2, Phase::Grow).unwrap();
        assert_eq!(t.node(c3).unwrap().blocks.len(), 1);
        assert_eq!(t.node(c3).unwrap().blocks[0].index, 3);
        let err = t.instantiate_child(c3, Phase::Base).unwrap_err();
        assert!(matches!(err, DgtError::DepthLimit { depth: 3, max_depth: 3, .. }));
    }

    #[test]
    fn configured_depth_cap() {
        let p = NetworkParams::init(&NetConfig::default(), 5).unwrap();
        let mut t = DgtTree::from_params(TreeConfig { max_depth: Some(1) }, p.clone()).unwrap();
        let c = t.instantiate_child(t.root(), Phase::Base).unwrap();
        assert!(t.instantiate_child(c, Phase::Base).is_err());
        assert!(DgtTree::from_params(TreeConfig { max_depth: Some(4) }, p).is_err());
    }

    #[test]
    fn generation_composes_the_path() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        perturb(&mut t, a, 1.0);
        let b = t.instantiate_child(a, Phase::Base).unwrap();
        perturb(&mut t, b, 2.0);
        let c = t.instantiate_child(b, Phase::Base).unwrap();
        perturb(&mut t, c, 4.0);
        let root_net = t.generate_network(t.root()).unwrap();
        let net = t.generate_network(c).unwrap();
        assert!(net.decoder[0].bitwise_eq(&t.node(t.root()).unwrap().blocks[0]));
        assert!(net.decoder[1].bitwise_eq(&t.node(a).unwrap().blocks[0]));
        assert!(net.decoder[2].bitwise_eq(&t.node(b).unwrap().blocks[0]));
        assert!(net.decoder[3].bitwise_eq(&t.node(c).unwrap().blocks[0]));
        // block 3 of c = root's + 1 (copied via a) + 2 (via b) + 4
        let d = net.decoder[3].conv1.bias.data()[0] - root_net.decoder[3].conv1.bias.data()[0];
        assert_eq!(d, 7.0);
    }

    #[test]
    fn generated_network_is_independent() {
        let t = tree();
        let mut net = t.generate_network(t.root()).unwrap();
        net.decoder[0].conv1.bias.data_mut()[0] = 99.0;
        assert_ne!(t.node(t.root()).unwrap().blocks[0].conv1.bias.data()[0], 99.0);
    }

    #[test]
    fn siblings_differ_only_in_their_suffix() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let b = t.instantiate_child(t.root(), Phase::Base).unwrap();
        perturb(&mut t, a, 0.5);
        perturb(&mut t, b, -0.5);
        let na = t.generate_network(a).unwrap();
        let nb = t.generate_network(b).unwrap();
        let ta = na.named_tensors();
        let tb = nb.named_tensors();
        for ((name, x), (_, y)) in ta.iter().zip(&tb) {
            let in_suffix = ["decoder.1", "decoder.2", "decoder.3"].iter().any(|p| name.starts_with(p));
            assert_eq!(!x.bitwise_eq(y), in_suffix, "{name}");
        }
    }

    #[test]
    fn store_isolated_and_counted() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let b = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let before_root = t.node(t.root()).unwrap().blocks.clone();
        let before_b = t.node(b).unwrap().blocks.clone();
        let old = t.generate_network(a).unwrap();
        perturb(&mut t, a, 1.0);
        assert_eq!(t.node(t.root()).unwrap().blocks, before_root);
        assert_eq!(t.node(b).unwrap().blocks, before_b);
        let new = t.generate_network(a).unwrap();
        let changed = old
            .decoder
            .iter()
            .zip(&new.decoder)
            .filter(|(x, y)| !x.bitwise_eq(y))
            .count();
        assert_eq!(changed, 3);
    }

    #[test]
    fn accounting_grows_by_the_suffix() {
        let mut t = tree();
        let (full0, inf0) = t.param_count();
        let root_blocks = t.node(t.root()).unwrap().blocks.clone();
        t.instantiate_child(t.root(), Phase::Base).unwrap();
        let (full1, inf1) = t.param_count();
        let suffix: usize = root_blocks[1..].iter().map(DecoderBlock::num_params).sum();
        assert_eq!(full1 - full0, suffix);
        assert_eq!(inf1, inf0);
    }

    #[test]
    fn video_membership() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        t.assign_video(a, "v1").unwrap();
        assert!(t.assign_video(t.root(), "v1").is_err());
        t.remove_video(a, "v1").unwrap();
        assert!(t.node(a).unwrap().videos.is_empty());
        assert_eq!(t.node(t.root()).unwrap().videos, vec!["v1".to_string()]);
        assert!(t.remove_video(t.root(), "v1").is_err());
        assert!(t.remove_video(a, "v1").is_err());
    }

    #[test]
    fn discarded_leaf_returns_videos() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let b = t.instantiate_child(a, Phase::Base).unwrap();
        t.assign_video(b, "x").unwrap();
        assert!(t.discard_leaf(a).is_err());
        assert_eq!(t.discard_leaf(b).unwrap(), vec!["x".to_string()]);
        assert_eq!(t.owner_of("x"), Some(a));
        // ids and ordinals are not reused
        let c = t.instantiate_child(a, Phase::Base).unwrap();
        assert_ne!(c, b);
        assert_eq!(t.path_name(c).unwrap(), "0_0|1_0|2_1");
    }

    #[test]
    fn greedy_search_rules() {
        let mut t = tree();
        assert_eq!(t.greedy_search(|_, _| Ok(0.3)).unwrap().0, t.root());
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let b = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let scores = HashMap::from([(t.root(), 0.6), (a, 0.8), (b, 0.5)]);
        let (n, s) = t.greedy_search(|id, _| Ok(scores[&id])).unwrap();
        assert_eq!((n, s), (a, 0.8));
        assert_eq!(t.greedy_search(|_, _| Ok(0.5)).unwrap().0, t.root());
    }

    #[test]
    fn fisher_scope_is_checked() {
        let mut t = tree();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let net = t.generate_network(a).unwrap();
        let good = FisherDiag::zeros(&net, ParamScope::DecoderFrom(1));
        let bad = FisherDiag::zeros(&net, ParamScope::DecoderFrom(0));
        t.set_fisher(a, Some(good)).unwrap();
        assert!(t.set_fisher(a, Some(bad)).is_err());
    }
}
