"""Graph container, binary dataset I/O, and synthetic graph generation.

Graphs are undirected but stored as symmetric CSR: every undirected edge
appears as two directed entries, and no self loops are stored (the model
layer adds the self term itself). Neighbor lists are kept sorted by node id
so reductions over them always run in the same order.

On-disk layout of a dataset directory (all binary files little-endian):

    meta.txt       key=value lines: num_nodes, num_edges, feature_dim, num_classes
    offsets.bin    (num_nodes+1) x u64   CSR row offsets
    targets.bin    num_edges x u64       CSR column indices
    features.bin   num_nodes x feature_dim x f32, row-major
    labels.bin     num_nodes x u32       (max class id + 1 == unlabeled sentinel)
    masks.bin      num_nodes x u8        0=none 1=train 2=val 3=test
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_NONE = 0
MASK_TRAIN = 1
MASK_VAL = 2
MASK_TEST = 3

META_KEYS = ("num_nodes", "num_edges", "feature_dim", "num_classes")


class GraphFormatError(ValueError):
    """A dataset directory is missing files or internally inconsistent."""


@dataclass
class Graph:
    """In-memory graph: symmetric CSR adjacency plus node payloads."""

    num_nodes: int
    num_edges: int  # directed entries; 2x the undirected edge count
    csr_offsets: np.ndarray  # int64, shape (num_nodes + 1,)
    csr_targets: np.ndarray  # int64, shape (num_edges,)
    features: np.ndarray  # float32, shape (num_nodes, feature_dim)
    labels: np.ndarray  # uint32, shape (num_nodes,)
    num_classes: int
    train_mask: np.ndarray = field(repr=False)
    val_mask: np.ndarray = field(repr=False)
    test_mask: np.ndarray = field(repr=False)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def unlabeled_sentinel(self) -> int:
        # labels equal to num_classes mean "no label"
        return self.num_classes

    def degree(self, v: int) -> int:
        return int(self.csr_offsets[v + 1] - self.csr_offsets[v])


def neighbors(g: Graph, v: int) -> np.ndarray:
    """Neighbor ids of v in stored (ascending) order."""
    return g.csr_targets[g.csr_offsets[v] : g.csr_offsets[v + 1]]


def validate_graph(g: Graph) -> None:
    """Check structural invariants; raise GraphFormatError on violation."""
    if g.csr_offsets.shape != (g.num_nodes + 1,):
        raise GraphFormatError("offsets length does not match num_nodes")
    if g.csr_offsets[0] != 0 or g.csr_offsets[-1] != g.num_edges:
        raise GraphFormatError("offsets do not span num_edges")
    if np.any(np.diff(g.csr_offsets) < 0):
        raise GraphFormatError("offsets not monotone")
    if g.csr_targets.shape != (g.num_edges,):
        raise GraphFormatError("targets length does not match num_edges")
    if g.num_edges and (g.csr_targets.min() < 0 or g.csr_targets.max() >= g.num_nodes):
        raise GraphFormatError("edge target out of range")
    src = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.csr_offsets))
    if np.any(src == g.csr_targets):
        raise GraphFormatError("self loop stored in adjacency")
    if g.num_edges > 1:
        # strictly increasing per row: sorted neighbor ids, no duplicate edges
        same_row = src[1:] == src[:-1]
        if np.any(same_row & (g.csr_targets[1:] <= g.csr_targets[:-1])):
            raise GraphFormatError("neighbor list not sorted or duplicate edge")
    # symmetry: the multiset of (u,v) must equal the multiset of (v,u)
    n = np.int64(g.num_nodes)
    fwd = np.sort(src * n + g.csr_targets)
    rev = np.sort(g.csr_targets * n + src)
    if not np.array_equal(fwd, rev):
        raise GraphFormatError("adjacency is not symmetric")
    if g.features.shape[0] != g.num_nodes:
        raise GraphFormatError("feature row count does not match num_nodes")
    if g.labels.shape != (g.num_nodes,):
        raise GraphFormatError("label count does not match num_nodes")
    if g.labels.max(initial=0) > g.num_classes:
        raise GraphFormatError("label exceeds unlabeled sentinel")
    masks = [g.train_mask, g.val_mask, g.test_mask]
    for m in masks:
        if m.shape != (g.num_nodes,) or m.dtype != np.bool_:
            raise GraphFormatError("mask must be bool of length num_nodes")
    overlap = (
        g.train_mask.astype(np.int8) + g.val_mask.astype(np.int8) + g.test_mask.astype(np.int8)
    )
    if np.any(overlap > 1):
        raise GraphFormatError("masks overlap")
    masked = g.train_mask | g.val_mask | g.test_mask
    if np.any(g.labels[masked] >= g.num_classes):
        raise GraphFormatError("masked node carries the unlabeled sentinel")
    if not np.all(np.isfinite(g.features)):
        raise GraphFormatError("non-finite feature value")


def _read_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = int(value.strip())
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise GraphFormatError(f"meta.txt missing keys: {missing}")
    return meta


def _read_array(path: Path, dtype, count: int) -> np.ndarray:
    if not path.is_file():
        raise GraphFormatError(f"missing file: {path.name}")
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != count:
        raise GraphFormatError(f"{path.name}: expected {count} items, found {arr.size}")
    return arr


def load_graph(path: str | Path) -> Graph:
    """Load a dataset directory. Raises GraphFormatError on any inconsistency."""
    root = Path(path)
    meta_path = root / "meta.txt"
    if not meta_path.is_file():
        raise GraphFormatError(f"missing file: {meta_path}")
    meta = _read_meta(meta_path)
    n, m = meta["num_nodes"], meta["num_edges"]
    d, c = meta["feature_dim"], meta["num_classes"]

    offsets = _read_array(root / "offsets.bin", "<u8", n + 1).astype(np.int64)
    targets = _read_array(root / "targets.bin", "<u8", m).astype(np.int64)
    features = _read_array(root / "features.bin", "<f4", n * d).reshape(n, d)
    labels = _read_array(root / "labels.bin", "<u4", n)
    mask_codes = _read_array(root / "masks.bin", "u1", n)
    if mask_codes.max(initial=0) > MASK_TEST:
        raise GraphFormatError("mask byte out of range")

    g = Graph(
        num_nodes=n,
        num_edges=m,
        csr_offsets=offsets,
        csr_targets=targets,
        features=features,
        labels=labels,
        num_classes=c,
        train_mask=mask_codes == MASK_TRAIN,
        val_mask=mask_codes == MASK_VAL,
        test_mask=mask_codes == MASK_TEST,
    )
    validate_graph(g)
    return g


def save_graph(g: Graph, path: str | Path) -> None:
    """Write a dataset directory (see module docstring for the layout)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"num_nodes={g.num_nodes}",
        f"num_edges={g.num_edges}",
        f"feature_dim={g.feature_dim}",
        f"num_classes={g.num_classes}",
    ]
    (root / "meta.txt").write_text("\n".join(lines) + "\n")
    g.csr_offsets.astype("<u8").tofile(root / "offsets.bin")
    g.csr_targets.astype("<u8").tofile(root / "targets.bin")
    np.ascontiguousarray(g.features, dtype="<f4").tofile(root / "features.bin")
    g.labels.astype("<u4").tofile(root / "labels.bin")
    codes = np.zeros(g.num_nodes, dtype=np.uint8)
    codes[g.train_mask] = MASK_TRAIN
    codes[g.val_mask] = MASK_VAL
    codes[g.test_mask] = MASK_TEST
    codes.tofile(root / "masks.bin")


def build_csr(num_nodes: int, edge_src: np.ndarray, edge_dst: np.ndarray):
    """Build canonical CSR (rows sorted by target id) from directed edge arrays."""
    order = np.lexsort((edge_dst, edge_src))
    src = np.asarray(edge_src, dtype=np.int64)[order]
    dst = np.asarray(edge_dst, dtype=np.int64)[order]
    counts = np.bincount(src, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, dst


def edges_of(g: Graph):
    """Directed edge arrays (src, dst) in stored order."""
    src = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.csr_offsets))
    return src, g.csr_targets


@dataclass
class SbmSpec:
    """Stochastic block model parameters for synthetic graphs.

    Labels equal the block id modulo num_classes, features are Gaussian
    around a per-class center (feature_noise scales the spread), and masks
    split the nodes 60/20/20 train/val/test from a seeded permutation.
    """

    blocks: int
    nodes_per_block: int
    p_intra: float
    p_inter: float
    feature_dim: int
    num_classes: int
    seed: int
    feature_noise: float = 1.0


def synth_graph(spec: SbmSpec) -> Graph:
    """Generate a block-model graph; identical spec always yields an identical graph."""
    rng = np.random.default_rng(spec.seed)
    b, npb = spec.blocks, spec.nodes_per_block
    n = b * npb

    src_parts: list[np.ndarray] = []
    dst_parts: list[np.ndarray] = []
    for bi in range(b):
        for bj in range(bi, b):
            p = spec.p_intra if bi == bj else spec.p_inter
            draw = rng.random((npb, npb))
            if bi == bj:
                # strictly-upper triangle: each unordered pair once, no self loops
                iu, ju = np.triu_indices(npb, k=1)
                hit = draw[iu, ju] < p
                u = iu[hit] + bi * npb
                v = ju[hit] + bj * npb
            else:
                iu, ju = np.nonzero(draw < p)
                u = iu + bi * npb
                v = ju + bj * npb
            if u.size:
                src_parts.extend([u, v])
                dst_parts.extend([v, u])

    if src_parts:
        edge_src = np.concatenate(src_parts)
        edge_dst = np.concatenate(dst_parts)
    else:
        edge_src = np.empty(0, dtype=np.int64)
        edge_dst = np.empty(0, dtype=np.int64)
    offsets, targets = build_csr(n, edge_src, edge_dst)

    labels = (np.arange(n) // npb % spec.num_classes).astype(np.uint32)
    centers = rng.normal(0.0, 1.0, size=(spec.num_classes, spec.feature_dim))
    noise = rng.normal(0.0, 1.0, size=(n, spec.feature_dim))
    features = (centers[labels] + spec.feature_noise * noise).astype(np.float32)

    perm = rng.permutation(n)
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:n_train]] = True
    val_mask[perm[n_train : n_train + n_val]] = True
    test_mask[perm[n_train + n_val :]] = True

    g = Graph(
        num_nodes=n,
        num_edges=int(targets.size),
        csr_offsets=offsets,
        csr_targets=targets,
        features=features,
        labels=labels,
        num_classes=spec.num_classes,
        train_mask=train_mask,
        val_mask=val_mask,
        test_mask=test_mask,
    )
    validate_graph(g)
    return g


def parse_synth_string(text: str) -> SbmSpec:
    """Parse "blocks=4,nodes_per_block=500,p_intra=0.05,..." into an SbmSpec."""
    if text.startswith("synth:"):
        text = text[len("synth:"):]
    fields = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, _, value = item.partition("=")
        fields[key.strip()] = value.strip()
    try:
        return SbmSpec(
            blocks=int(fields["blocks"]),
            nodes_per_block=int(fields["nodes_per_block"]),
            p_intra=float(fields["p_intra"]),
            p_inter=float(fields["p_inter"]),
            feature_dim=int(fields["feature_dim"]),
            num_classes=int(fields["num_classes"]),
            seed=int(fields["seed"]),
            feature_noise=float(fields.get("feature_noise", "1.0")),
        )
    except KeyError as exc:
        raise ValueError(f"synth spec missing field {exc}") from exc
