"""Shared fixtures: small hand-checkable graphs and builders."""
import numpy as np
import pytest

from fedemb.graph import Graph, build_csr
from fedemb.partition import PartitionAssignment

MASK_NONE, MASK_TRAIN, MASK_VAL, MASK_TEST = 0, 1, 2, 3


def make_graph(num_nodes, und_edges, labels=None, num_classes=2, masks=None,
               features=None, feature_dim=4, seed=0):
    """Build a Graph from an undirected edge list with canonical CSR."""
    und = np.asarray(und_edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    offsets, targets = build_csr(num_nodes, src, dst)
    rng = np.random.default_rng(seed)
    if features is None:
        features = rng.standard_normal((num_nodes, feature_dim)).astype(np.float32)
    features = np.asarray(features, dtype=np.float32)
    if labels is None:
        labels = rng.integers(0, num_classes, size=num_nodes)
    labels = np.asarray(labels, dtype=np.uint32)
    if masks is None:
        masks = np.ones(num_nodes, dtype=np.uint8)  # everything train
    masks = np.asarray(masks, dtype=np.uint8)
    return Graph(
        num_nodes=num_nodes,
        num_edges=int(targets.size),
        csr_offsets=offsets,
        csr_targets=targets,
        features=features,
        labels=labels,
        num_classes=num_classes,
        train_mask=masks == MASK_TRAIN,
        val_mask=masks == MASK_VAL,
        test_mask=masks == MASK_TEST,
    )


def cycle_edges(n):
    return [(i, (i + 1) % n) for i in range(n)]


def clique_edges(n, base=0):
    return [(base + i, base + j) for i in range(n) for j in range(i + 1, n)]


def two_cliques_graph(m=6, **kw):
    """Two disconnected cliques of m nodes each; parts are findable with 0 cut."""
    edges = clique_edges(m, 0) + clique_edges(m, m)
    return make_graph(2 * m, edges, **kw)


# Ten-node, three-client worked example. Letters A..J map to ids 0..9.
TRI_NAMES = "ABCDEFGHIJ"
TRI_EDGES = [
    (0, 4),  # A-E  cross 0|1
    (1, 5),  # B-F  cross 0|2
    (4, 5),  # E-F  cross 1|2
    (6, 7),  # G-H  cross 2|1
    (0, 2),  # A-C
    (0, 3),  # A-D
    (1, 2),  # B-C
    (4, 8),  # E-I
    (7, 8),  # H-I
    (5, 6),  # F-G
    (6, 9),  # G-J
]
TRI_PARTS = np.array([0, 0, 0, 0, 1, 2, 2, 1, 1, 2], dtype=np.int64)
# per client: locals, remotes (sorted global), push set (sorted global)
TRI_EXPECT = {
    0: dict(locals=[0, 1, 2, 3], remotes=[4, 5], push=[0, 1]),
    1: dict(locals=[4, 7, 8], remotes=[0, 5, 6], push=[4, 7]),
    2: dict(locals=[5, 6, 9], remotes=[1, 4, 7], push=[5, 6]),
}


@pytest.fixture
def tri_graph():
    # every client gets train nodes; val/test spread over the rest
    masks = np.array(
        [
            MASK_TRAIN,  # A
            MASK_TRAIN,  # B
            MASK_VAL,    # C
            MASK_TEST,   # D
            MASK_TRAIN,  # E
            MASK_TRAIN,  # F
            MASK_TRAIN,  # G
            MASK_TRAIN,  # H
            MASK_TEST,   # I
            MASK_TEST,   # J
        ],
        dtype=np.uint8,
    )
    labels = np.array([0, 1, 0, 1, 2, 0, 1, 2, 0, 1], dtype=np.uint32)
    g = make_graph(10, TRI_EDGES, labels=labels, num_classes=3, masks=masks, seed=11)
    pa = PartitionAssignment(part_of=TRI_PARTS.copy(), num_parts=3)
    return g, pa
