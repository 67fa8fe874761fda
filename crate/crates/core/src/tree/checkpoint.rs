//! Checkpoint pair: a JSON manifest describing topology and tensor layout,
//! plus one little-endian f32 blob holding every tensor back to back.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DgtNode, DgtTree, NodeId, Phase, TreeConfig};
use crate::error::{DgtError, Result};
use crate::fisher::FisherDiag;
use crate::micronet::{ConvLayer, DecoderBlock, NetConfig, ParamScope, SharedParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRef {
    shape: Vec<usize>,
    /// Offset in f32 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerRef {
    weight: TensorRef,
    bias: TensorRef,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct BlockRef {
    index: usize,
    conv1: LayerRef,
    conv2: LayerRef,
}

#[derive(Serialize, Deserialize)]
struct FisherRef {
    scope: ParamScope,
    normalized: bool,
    tensors: Vec<TensorRef>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    path_name: String,
    depth: usize,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    ordinal: usize,
    /// Children ever created under this node.
    spawned: usize,
    phase: Phase,
    videos: Vec<String>,
    blocks: Vec<BlockRef>,
    fisher: Option<FisherRef>,
}

#[derive(Serialize, Deserialize)]
struct SharedRef {
    encoder_cur: Vec<LayerRef>,
    encoder_ref: Vec<LayerRef>,
    combiner: Vec<LayerRef>,
    head: LayerRef,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    file: String,
    /// Total f32 elements.
    elements: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_blocks: usize,
    net_config: NetConfig,
    tree_config: TreeConfig,
    next_id: u64,
    #[serde(default)]
    shared_frozen: bool,
    shared: SharedRef,
    nodes: Vec<NodeRecord>,
    blob: BlobInfo,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Default)]
struct Writer {
    data: Vec<u8>,
    elements: usize,
}

impl Writer {
    fn put(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.elements;
        for v in t.data() {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.elements += t.len();
        TensorRef {
            shape: t.shape().to_vec(),
            offset,
        }
    }

    fn layer(&mut self, l: &ConvLayer) -> LayerRef {
        LayerRef {
            weight: self.put(&l.weight),
            bias: self.put(&l.bias),
            stride: l.stride,
        }
    }
}

struct Reader {
    values: Vec<f32>,
}

impl Reader {
    fn take(&self, r: &TensorRef) -> Result<Tensor> {
        let n: usize = r.shape.iter().product();
        let end = r
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.values.len())
            .ok_or_else(|| DgtError::Corrupt(format!("tensor at offset {} runs past the blob", r.offset)))?;
        Tensor::new(r.shape.clone(), self.values[r.offset..end].to_vec()).map_err(|e| DgtError::Corrupt(e.to_string()))
    }

    fn layer(&self, l: &LayerRef) -> Result<ConvLayer> {
        ConvLayer::new(self.take(&l.weight)?, self.take(&l.bias)?, l.stride).map_err(|e| DgtError::Corrupt(e.to_string()))
    }

    fn block(&self, b: &BlockRef) -> Result<DecoderBlock> {
        Ok(DecoderBlock {
            index: b.index,
            conv1: self.layer(&b.conv1)?,
            conv2: self.layer(&b.conv2)?,
        })
    }
}

fn layer_refs(l: &LayerRef) -> [&TensorRef; 2] {
    [&l.weight, &l.bias]
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `path` (manifest) and `path` with a `.bin` extension (blob).
pub fn save(tree: &DgtTree, path: &Path) -> Result<()> {
    let mut w = Writer::default();
    let s = tree.shared();
    let shared = SharedRef {
        encoder_cur: s.encoder_cur.iter().map(|l| w.layer(l)).collect(),
        encoder_ref: s.encoder_ref.iter().map(|l| w.layer(l)).collect(),
        combiner: s.combiner.iter().map(|l| w.layer(l)).collect(),
        head: w.layer(&s.head),
    };
    let mut nodes = Vec::with_capacity(tree.len());
    for id in tree.breadth_first() {
        let n = tree.node(id)?;
        let blocks = n
            .blocks
            .iter()
            .map(|b| BlockRef {
                index: b.index,
                conv1: w.layer(&b.conv1),
                conv2: w.layer(&b.conv2),
            })
            .collect();
        let fisher = n.fisher.as_ref().map(|f| FisherRef {
            scope: f.scope,
            normalized: f.normalized,
            tensors: f.tensors.iter().map(|t| w.put(t)).collect(),
        });
        nodes.push(NodeRecord {
            id,
            path_name: tree.path_name(id)?,
            depth: n.depth,
            parent: n.parent,
            children: n.children.clone(),
            ordinal: n.ordinal,
            spawned: tree.spawned(id),
            phase: n.phase,
            videos: n.videos.clone(),
            blocks,
            fisher,
        });
    }
    let blob_path = path.with_extension("bin");
    let file = blob_path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| DgtError::validation(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_blocks: tree.num_blocks(),
        net_config: tree.net_config().clone(),
        tree_config: tree.config(),
        next_id: tree.next_id(),
        shared_frozen: tree.shared_frozen(),
        shared,
        nodes,
        blob: BlobInfo {
            file,
            elements: w.elements,
            sha256: hex(&Sha256::digest(&w.data)),
        },
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob_path, &w.data)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DgtError::Invariant(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            DgtError::Truncated(format!("manifest ends early: {e}"))
        } else {
            DgtError::Corrupt(format!("manifest: {e}"))
        }
    })?;
    if probe.format_version != FORMAT_VERSION {
        return Err(DgtError::Version {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_str(text).map_err(|e| DgtError::Corrupt(format!("manifest: {e}")))
}

pub fn load(path: &Path) -> Result<DgtTree> {
    let text = fs::read_to_string(path)?;
    let m = parse_manifest(&text)?;
    let blob_path = path.with_file_name(&m.blob.file);
    let bytes = fs::read(&blob_path)?;
    let expected = m.blob.elements * 4;
    if bytes.len() < expected {
        return Err(DgtError::Truncated(format!("blob has {} bytes, manifest needs {expected}", bytes.len())));
    }
    if bytes.len() != expected {
        return Err(DgtError::Corrupt(format!("blob has {} bytes, manifest needs {expected}", bytes.len())));
    }
    if hex(&Sha256::digest(&bytes)) != m.blob.sha256 {
        return Err(DgtError::Corrupt("blob checksum mismatch".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let r = Reader { values };

    // every element of the blob is claimed by exactly one tensor
    let mut all: Vec<&TensorRef> = Vec::new();
    for l in m.shared.encoder_cur.iter().chain(&m.shared.encoder_ref).chain(&m.shared.combiner) {
        all.extend(layer_refs(l));
    }
    all.extend(layer_refs(&m.shared.head));
    for n in &m.nodes {
        for b in &n.blocks {
            all.extend(layer_refs(&b.conv1));
            all.extend(layer_refs(&b.conv2));
        }
        all.extend(n.fisher.iter().flat_map(|f| &f.tensors));
    }
    let mut refs: Vec<(usize, usize)> = all.iter().map(|t| (t.offset, t.shape.iter().product())).collect();
    refs.sort_unstable();
    let mut next = 0;
    for (offset, len) in refs {
        if offset != next {
            return Err(DgtError::Corrupt(format!("tensor layout gap or overlap at element {offset}")));
        }
        next = offset + len;
    }
    if next != m.blob.elements {
        return Err(DgtError::Corrupt(format!(
            "manifest shapes cover {next} elements, blob holds {}",
            m.blob.elements
        )));
    }

    let layers = |ls: &[LayerRef]| ls.iter().map(|l| r.layer(l)).collect::<Result<Vec<_>>>();
    let shared = SharedParams {
        encoder_cur: layers(&m.shared.encoder_cur)?,
        encoder_ref: layers(&m.shared.encoder_ref)?,
        combiner: layers(&m.shared.combiner)?,
        head: r.layer(&m.shared.head)?,
    };
    if m.num_blocks != m.net_config.num_blocks() {
        return Err(DgtError::Corrupt("block count disagrees with the network configuration".into()));
    }
    let mut spawned = HashMap::new();
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for n in &m.nodes {
        let blocks = n.blocks.iter().map(|b| r.block(b)).collect::<Result<Vec<_>>>()?;
        let fisher = match &n.fisher {
            None => None,
            Some(f) => {
                let tensors = f.tensors.iter().map(|t| r.take(t)).collect::<Result<Vec<_>>>()?;
                Some(FisherDiag::new(f.scope, tensors, f.normalized).map_err(|e| DgtError::Corrupt(e.to_string()))?)
            }
        };
        if n.spawned > 0 {
            spawned.insert(n.id, n.spawned);
        }
        nodes.push(DgtNode {
            id: n.id,
            depth: n.depth,
            parent: n.parent,
            children: n.children.clone(),
            ordinal: n.ordinal,
            videos: n.videos.clone(),
            blocks,
            fisher,
            phase: n.phase,
        });
    }
    let tree = DgtTree::from_raw_parts(m.net_config, m.tree_config, shared, nodes, m.next_id, spawned, m.shared_frozen)?;
    // the network constructor checks every shape against the configuration
    tree.generate_network(tree.root())
        .and_then(|p| p.validate())
        .map_err(|e| DgtError::Corrupt(e.to_string()))?;
    for rec in &m.nodes {
        if tree.path_name(rec.id)? != rec.path_name {
            return Err(DgtError::Corrupt(format!("path name of node {} does not match topology", rec.id)));
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::NetworkParams;

    fn small_tree() -> DgtTree {
        let p = NetworkParams::init(&NetConfig::default(), 9).unwrap();
        let mut t = DgtTree::from_params(TreeConfig::default(), p).unwrap();
        let a = t.instantiate_child(t.root(), Phase::Base).unwrap();
        let b = t.instantiate_child(a, Phase::Grow).unwrap();
        t.assign_video(b, "clip").unwrap();
        let net = t.generate_network(a).unwrap();
        let mut f = FisherDiag::zeros(&net, ParamScope::DecoderFrom(1));
        f.tensors[0].fill(0.25);
        t.set_fisher(a, Some(f)).unwrap();
        t
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        let t = small_tree();
        save(&t, &path).unwrap();
        let back = load(&path).unwrap();
        assert!(t.bitwise_eq(&back));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        save(&small_tree(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(DgtError::Version { found: 7, expected: 1 })));
    }

    #[test]
    fn shape_inconsistent_with_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        save(&small_tree(), &path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["shared"]["head"]["bias"]["shape"] = serde_json::json!([2]);
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(load(&path), Err(DgtError::Corrupt(_))));
    }

    #[test]
    fn truncated_and_tampered_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        save(&small_tree(), &path).unwrap();
        let blob = path.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();

        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(DgtError::Truncated(_))));

        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        fs::write(&blob, &flipped).unwrap();
        assert!(matches!(load(&path), Err(DgtError::Corrupt(_))));

        fs::write(&blob, &bytes).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(DgtError::Truncated(_))));
    }
}
