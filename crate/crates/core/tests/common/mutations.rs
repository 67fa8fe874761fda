//! Random tree mutation sequences and the structural checks run after each.

use dgt_core::fisher::FisherDiag;
use dgt_core::micronet::{NetConfig, NetworkParams};
use dgt_core::tree::{self, DgtTree, NodeId, Phase, TreeConfig};

/// `(kind, a, b)`; `a` and `b` pick nodes, videos or values.
pub type Op = (u8, u64, u64);

pub fn small_config() -> NetConfig {
    NetConfig {
        encoder_channels: vec![2, 2, 2, 2],
        reference_channels: vec![2],
        combiner_channels: 2,
        decoder_channels: vec![3, 2, 2, 2],
        width: 16,
        height: 16,
    }
}

pub fn base_tree(seed: u64, max_depth: Option<usize>) -> DgtTree {
    let params = NetworkParams::init(&small_config(), seed).unwrap();
    DgtTree::from_params(TreeConfig { max_depth }, params).unwrap()
}

fn pick(t: &DgtTree, a: u64) -> NodeId {
    let ids = t.node_ids();
    ids[(a % ids.len() as u64) as usize]
}

/// Applies one mutation; invalid requests (depth limit, root discard) are
/// expected to fail without changing the tree.
pub fn apply(t: &mut DgtTree, op: Op) {
    let (kind, a, b) = op;
    let before = t.clone();
    let result = match kind % 6 {
        0 | 1 => {
            let phase = if b % 2 == 0 { Phase::Base } else { Phase::Grow };
            t.instantiate_child(pick(t, a), phase).map(|_| ())
        }
        2 => {
            let id = pick(t, a);
            let mut p = t.generate_network(id).unwrap();
            let d = t.node(id).unwrap().depth;
            let delta = (b % 97) as f32 * 1e-3 + 1e-3;
            for blk in &mut p.decoder[d..] {
                for w in blk.tensors_mut() {
                    for v in w.data_mut() {
                        *v += delta;
                    }
                }
            }
            t.store_trained_blocks(id, &p)
        }
        3 => {
            let video = format!("v{}", b % 16);
            match t.owner_of(&video) {
                Some(owner) => t.move_video(owner, pick(t, a), &video),
                None => t.assign_video(pick(t, a), &video),
            }
        }
        4 => {
            let id = pick(t, a);
            let res = t.discard_leaf(id);
            if id == t.root() || !before.node(id).unwrap().is_leaf() {
                assert!(res.is_err());
                assert!(t.bitwise_eq(&before));
            }
            res.map(|_| ())
        }
        _ => {
            let id = pick(t, a);
            let scope = t.fisher_scope(id).unwrap();
            let net = t.generate_network(id).unwrap();
            let z = FisherDiag::zeros(&net, scope);
            let level = (b % 11) as f32 / 10.0;
            let f = FisherDiag::new(scope, z.tensors.iter().map(|x| x.map(|_| level)).collect(), true).unwrap();
            t.set_fisher(id, Some(f))
        }
    };
    if result.is_err() && kind % 6 != 4 {
        assert!(t.bitwise_eq(&before), "failed op {op:?} changed the tree");
    }
}

/// `(full, inference)` parameter totals computed from the node depths:
/// shared plus every stored suffix, and shared plus one block per level.
pub fn closed_form(t: &DgtTree) -> (usize, usize) {
    let sizes: Vec<usize> = t.node(t.root()).unwrap().blocks.iter().map(|b| b.num_params()).collect();
    let shared = t.shared().num_params();
    let full = shared + t.nodes().map(|n| sizes[n.depth..].iter().sum::<usize>()).sum::<usize>();
    (full, shared + sizes.iter().sum::<usize>())
}

/// Every structural property; returns the first violation.
pub fn check_all(t: &DgtTree, dir: &std::path::Path) -> Result<(), String> {
    let l = t.num_blocks();
    t.check_invariants().map_err(|e| e.to_string())?;
    for n in t.nodes() {
        if n.blocks.len() != l - n.depth {
            return Err(format!("node {} at depth {} stores {} blocks", n.id, n.depth, n.blocks.len()));
        }
        if n.blocks.iter().enumerate().any(|(i, b)| b.index != n.depth + i) {
            return Err(format!("node {} stores blocks out of order", n.id));
        }
        if n.depth > t.max_depth() || n.depth > l - 1 {
            return Err(format!("node {} exceeds the depth bound", n.id));
        }
        // composition: block j comes from the deepest path node with depth <= j
        let path = t.path(n.id).unwrap();
        let net = t.generate_network(n.id).unwrap();
        if net.shared != *t.shared() {
            return Err("generated network changed the shared parameters".into());
        }
        for j in 0..l {
            let owner = path.iter().rev().map(|&p| t.node(p).unwrap()).find(|p| p.depth <= j).unwrap();
            if !net.decoder[j].bitwise_eq(&owner.blocks[j - owner.depth]) {
                return Err(format!("block {j} of node {} does not come from node {}", n.id, owner.id));
            }
        }
    }
    if t.param_count() != closed_form(t) {
        return Err(format!("param_count {:?} disagrees with the closed form {:?}", t.param_count(), closed_form(t)));
    }
    let path = dir.join("tree.json");
    tree::save(t, &path).map_err(|e| e.to_string())?;
    let back = tree::load(&path).map_err(|e| e.to_string())?;
    if !back.bitwise_eq(t) {
        return Err("checkpoint round trip is not bitwise equal".into());
    }
    Ok(())
}
