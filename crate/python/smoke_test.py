"""Smoke test for the `dgt` extension module.

Build and install first:  maturin build --release -m crates/python/Cargo.toml
then pip install the produced wheel and run  python python/smoke_test.py
"""

import json
import os
import tempfile

import dgt

CONFIG = """
[train]
lr_pretrain = 1e-3
lr_node = 2e-3
lr_grow = 2e-3
epochs_root = 8
epochs_node = 4
"""


def main():
    videos = dgt.generate_domain("ytlike", 2, seed=1) + dgt.generate_domain("cdlike", 2, seed=2)
    assert len(videos) == 4
    v = videos[0]
    data, shape = v.frame(0)
    assert shape == [3, 48, 64] and len(data) == 3 * 48 * 64
    assert v.label_map(v.labelled_frames()[0]) is not None

    again = dgt.generate_domain("ytlike", 2, seed=1)
    assert again[0].frame(3) == videos[0].frame(3)

    tree = dgt.Tree(seed=0)
    assert len(tree) == 1 and not tree.shared_frozen
    full, inference = tree.param_count()
    assert full == inference

    tree.pretrain(videos, CONFIG)
    assert tree.shared_frozen
    n = tree.build(videos, CONFIG)
    assert n == len(tree) >= 2
    assert tree.param_count()[1] == inference

    held = dgt.generate_domain("heldout", 1, seed=3)[0]
    before = len(tree)
    name, created = tree.grow(held, 1, CONFIG)
    assert len(tree) - before == int(created)
    assert name in tree.path_names()

    name, labels = tree.segment(held)
    assert len(labels) == held.num_frames and len(labels[0]) == 48 * 64
    _, f = tree.evaluate(held)
    assert 0.0 <= f <= 1.0

    topo = json.loads(tree.to_json())
    assert "digraph" in tree.to_dot() and topo

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "tree.json")
        tree.save(path)
        back = dgt.Tree.load(path)
        assert back.path_names() == tree.path_names()
        assert back.param_count() == tree.param_count()
        dgt.write_folder_dataset([held], d)
        loaded = dgt.load_folder_dataset(d)
        assert loaded[0].label_map(0) == held.label_map(0)

    mask = [1.0] * 12 + [0.0] * 4
    assert dgt.jaccard(mask, mask, 4, 4) == 1.0
    assert dgt.boundary_f(mask, mask, 4, 4, 1) == 1.0
    rows = [[0.9, None], [0.8, 0.7]]
    f_mean, cf = dgt.aggregates(rows)
    assert abs(f_mean - (0.9 + 0.75) / 2) < 1e-12 and abs(cf - 0.025) < 1e-12

    try:
        dgt.generate_domain("nope", 1, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")
    try:
        dgt.Tree.load(os.path.join(tempfile.gettempdir(), "missing", "tree.json"))
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint loaded")

    print("smoke test passed:", len(tree), "nodes")


if __name__ == "__main__":
    main()
