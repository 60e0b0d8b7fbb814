"""Vertex partitioning and per-client subgraph construction.

The built-in partitioner is a seeded greedy streaming pass: vertices are
visited in BFS order from seeded roots and each goes to the part with the
most already-assigned neighbors, subject to a hard balance cap of
ceil(1.05 * n / k). Ties fall to the least-loaded part, then the lowest
index. A partition can also be imported from a text file with one part id
per line.

A client's subgraph holds its local vertices plus a 1-hop halo of remote
vertices, with every edge incident on at least one local vertex. Remote
vertices carry no features, labels, or masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, GraphFormatError, build_csr, edges_of, load_graph, save_graph


@dataclass
class PartitionAssignment:
    part_of: np.ndarray  # int64, part id per vertex
    num_parts: int

    def part_sizes(self) -> np.ndarray:
        return np.bincount(self.part_of, minlength=self.num_parts)


def balance_cap(num_nodes: int, k: int) -> int:
    return math.ceil(1.05 * num_nodes / k)


def partition(g: Graph, k: int, seed: int) -> PartitionAssignment:
    """Greedy BFS streaming partition into k balanced parts."""
    if not 1 <= k <= g.num_nodes:
        raise ValueError(f"k={k} out of range for {g.num_nodes} nodes")
    n = g.num_nodes
    cap = balance_cap(n, k)
    part_of = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    # affinity[v, p]: assigned neighbors of v in part p, maintained incrementally
    affinity = np.zeros((n, k), dtype=np.int64)

    rng = np.random.default_rng(seed)
    root_order = rng.permutation(n)
    offsets, targets = g.csr_offsets, g.csr_targets

    from collections import deque

    queue: deque[int] = deque()
    root_pos = 0
    for _ in range(n):
        while queue and part_of[queue[0]] >= 0:
            queue.popleft()
        if not queue:
            while part_of[root_order[root_pos]] >= 0:
                root_pos += 1
            queue.append(int(root_order[root_pos]))
        v = queue.popleft()
        open_parts = sizes < cap
        score = np.where(open_parts, affinity[v], -1)
        best = int(np.lexsort((np.arange(k), sizes, -score))[0])
        part_of[v] = best
        sizes[best] += 1
        nbrs = targets[offsets[v] : offsets[v + 1]]
        affinity[nbrs, best] += 1
        for u in nbrs:
            if part_of[u] < 0:
                queue.append(int(u))

    # every part must be non-empty: pull loose vertices out of the largest part
    for p in range(k):
        if sizes[p] == 0:
            donor = int(np.argmax(sizes))
            members = np.nonzero(part_of == donor)[0]
            inside = affinity[members, donor]
            victim = int(members[np.lexsort((members, inside))[0]])
            nbrs = targets[offsets[victim] : offsets[victim + 1]]
            affinity[nbrs, donor] -= 1
            affinity[nbrs, p] += 1
            part_of[victim] = p
            sizes[donor] -= 1
            sizes[p] += 1

    pa = PartitionAssignment(part_of=part_of, num_parts=k)
    assert pa.part_sizes().max() <= cap
    return pa


def edge_cut(g: Graph, assignment) -> int:
    """Number of directed CSR entries whose endpoints live in different parts."""
    part_of = assignment.part_of if isinstance(assignment, PartitionAssignment) else assignment
    src, dst = edges_of(g)
    return int(np.count_nonzero(part_of[src] != part_of[dst]))


def write_partition_file(pa: PartitionAssignment, path: str | Path) -> None:
    Path(path).write_text("\n".join(str(int(p)) for p in pa.part_of) + "\n")


def read_partition_file(path: str | Path, num_nodes: int, num_parts: int | None = None) -> PartitionAssignment:
    """Read a text partition (one part id per line); validates range and length."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != num_nodes:
        raise GraphFormatError(f"partition file has {len(lines)} lines, graph has {num_nodes} nodes")
    part_of = np.array([int(x) for x in lines], dtype=np.int64)
    k = num_parts if num_parts is not None else int(part_of.max()) + 1
    if part_of.min() < 0 or part_of.max() >= k:
        raise GraphFormatError("partition id out of range")
    return PartitionAssignment(part_of=part_of, num_parts=k)


@dataclass
class CrossEdgeManifest:
    """Per-client cut edges: (local vertex, remote vertex, owner of remote)."""

    num_parts: int
    local: list[np.ndarray]
    remote: list[np.ndarray]
    owner: list[np.ndarray]

    def slice_for(self, client_id: int):
        return self.local[client_id], self.remote[client_id], self.owner[client_id]

    def total_cut_entries(self) -> int:
        return int(sum(a.size for a in self.local))


@dataclass
class PartitionedSubgraph:
    """One client's local vertices plus its 1-hop remote halo.

    Subgraph indices place local vertices first (in ascending global id
    order), then remote vertices (also ascending). The CSR covers every
    edge with at least one local endpoint; remote-remote edges are absent,
    so each remote row lists only local neighbors.
    """

    client_id: int
    local_nodes: np.ndarray  # global ids, sorted
    remote_nodes: np.ndarray  # global ids, sorted
    offsets: np.ndarray
    targets: np.ndarray  # subgraph indices
    features: np.ndarray  # rows for local nodes only
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    push_nodes: np.ndarray  # global ids with >=1 cross edge in the full graph
    num_classes: int

    @property
    def n_local(self) -> int:
        return int(self.local_nodes.size)

    @property
    def n_remote(self) -> int:
        return int(self.remote_nodes.size)

    @property
    def n_sub(self) -> int:
        return self.n_local + self.n_remote

    @property
    def pull_nodes(self) -> np.ndarray:
        # what this client fetches from the store: exactly its remote halo
        return self.remote_nodes

    def global_ids(self) -> np.ndarray:
        return np.concatenate([self.local_nodes, self.remote_nodes])

    def to_global(self, sub_idx: np.ndarray) -> np.ndarray:
        return self.global_ids()[sub_idx]

    def local_index(self, global_ids: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.local_nodes, global_ids)
        if np.any(idx >= self.n_local) or np.any(self.local_nodes[idx] != global_ids):
            raise KeyError("global id is not local to this client")
        return idx

    def sub_index(self, global_ids: np.ndarray) -> np.ndarray:
        """Map global ids (local or remote) to subgraph indices."""
        gids = np.asarray(global_ids, dtype=np.int64)
        out = np.empty(gids.shape, dtype=np.int64)
        li = np.searchsorted(self.local_nodes, gids)
        is_local = (li < self.n_local) & (self.local_nodes[np.minimum(li, self.n_local - 1)] == gids)
        out[is_local] = li[is_local]
        rest = ~is_local
        if np.any(rest):
            ri = np.searchsorted(self.remote_nodes, gids[rest])
            if np.any(ri >= self.n_remote) or np.any(self.remote_nodes[ri] != gids[rest]):
                raise KeyError("global id not present in subgraph")
            out[rest] = ri + self.n_local
        return out

    def is_remote_sub(self, sub_idx: np.ndarray) -> np.ndarray:
        return np.asarray(sub_idx) >= self.n_local

    def row(self, sub_idx: int) -> np.ndarray:
        return self.targets[self.offsets[sub_idx] : self.offsets[sub_idx + 1]]

    def local_train_nodes(self) -> np.ndarray:
        """Global ids of local train-mask vertices, ascending."""
        return self.local_nodes[self.train_mask]

    def local_only_csr(self):
        """CSR over local indices with remote columns dropped (for inference)."""
        keep = self.targets < self.n_local
        deg = np.diff(self.offsets)[: self.n_local]
        # recompute per-row kept counts for local rows only
        row_of = np.repeat(np.arange(self.n_sub, dtype=np.int64), np.diff(self.offsets))
        sel = (row_of < self.n_local) & keep
        src = row_of[sel]
        dst = self.targets[sel]
        offsets = np.zeros(self.n_local + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=self.n_local), out=offsets[1:])
        del deg
        return offsets, dst


def build_subgraphs(g: Graph, pa: PartitionAssignment):
    """Split a graph into per-client subgraphs with 1-hop halos.

    Returns (subgraphs, manifest). Local-local edges are copied verbatim;
    each cut edge (u local, v remote) also contributes the reversed entry so
    remote rows list their local neighbors.
    """
    src, dst = edges_of(g)
    src_part = pa.part_of[src]
    dst_part = pa.part_of[dst]

    subs = []
    man_local, man_remote, man_owner = [], [], []
    for k in range(pa.num_parts):
        local_nodes = np.nonzero(pa.part_of == k)[0].astype(np.int64)
        mine = src_part == k
        internal = mine & (dst_part == k)
        cross = mine & (dst_part != k)
        cut_u = src[cross]
        cut_v = dst[cross]

        remote_nodes = np.unique(cut_v)
        push_nodes = np.unique(cut_u)
        n_local = local_nodes.size

        # subgraph index lookup over locals then remotes
        def to_sub(ids):
            out = np.empty(ids.size, dtype=np.int64)
            li = np.searchsorted(local_nodes, ids)
            lmask = (li < n_local) & (local_nodes[np.minimum(li, max(n_local - 1, 0))] == ids) if n_local else np.zeros(ids.size, bool)
            out[lmask] = li[lmask]
            rmask = ~lmask
            if np.any(rmask):
                out[rmask] = np.searchsorted(remote_nodes, ids[rmask]) + n_local
            return out

        e_src = np.concatenate([src[internal], cut_u, cut_v])
        e_dst = np.concatenate([dst[internal], cut_v, cut_u])
        s_src = to_sub(e_src)
        # sort rows by global id of the target so reductions stay canonical
        order = np.lexsort((e_dst, s_src))
        s_src = s_src[order]
        s_dst = to_sub(e_dst[order])
        n_sub = n_local + remote_nodes.size
        offsets = np.zeros(n_sub + 1, dtype=np.int64)
        np.cumsum(np.bincount(s_src, minlength=n_sub), out=offsets[1:])

        subs.append(
            PartitionedSubgraph(
                client_id=k,
                local_nodes=local_nodes,
                remote_nodes=remote_nodes,
                offsets=offsets,
                targets=s_dst,
                features=g.features[local_nodes],
                labels=g.labels[local_nodes],
                train_mask=g.train_mask[local_nodes],
                val_mask=g.val_mask[local_nodes],
                test_mask=g.test_mask[local_nodes],
                push_nodes=push_nodes,
                num_classes=g.num_classes,
            )
        )
        cut_order = np.lexsort((cut_v, cut_u))
        man_local.append(cut_u[cut_order])
        man_remote.append(cut_v[cut_order])
        man_owner.append(pa.part_of[cut_v[cut_order]])

    manifest = CrossEdgeManifest(
        num_parts=pa.num_parts, local=man_local, remote=man_remote, owner=man_owner
    )
    return subs, manifest


def boundary_fraction(g: Graph, assignment) -> float:
    """Fraction of vertices incident on at least one cut edge."""
    if g.num_nodes == 0:
        return 0.0
    part_of = assignment.part_of if isinstance(assignment, PartitionAssignment) else assignment
    src, dst = edges_of(g)
    cross = part_of[src] != part_of[dst]
    touched = np.unique(np.concatenate([src[cross], dst[cross]]))
    return touched.size / g.num_nodes


def save_subgraph(sub: PartitionedSubgraph, path: str | Path) -> None:
    """Dataset-directory format plus remote.bin (u8 flags) and idmap.bin (u64)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n_sub = sub.n_sub
    d = sub.features.shape[1]
    feats = np.zeros((n_sub, d), dtype="<f4")
    feats[: sub.n_local] = sub.features
    labels = np.full(n_sub, sub.num_classes, dtype="<u4")
    labels[: sub.n_local] = sub.labels
    codes = np.zeros(n_sub, dtype=np.uint8)
    codes[: sub.n_local][sub.train_mask] = 1
    codes[: sub.n_local][sub.val_mask] = 2
    codes[: sub.n_local][sub.test_mask] = 3

    lines = [
        f"num_nodes={n_sub}",
        f"num_edges={sub.targets.size}",
        f"feature_dim={d}",
        f"num_classes={sub.num_classes}",
        f"client_id={sub.client_id}",
    ]
    (root / "meta.txt").write_text("\n".join(lines) + "\n")
    sub.offsets.astype("<u8").tofile(root / "offsets.bin")
    sub.targets.astype("<u8").tofile(root / "targets.bin")
    feats.tofile(root / "features.bin")
    labels.tofile(root / "labels.bin")
    codes.tofile(root / "masks.bin")
    flags = np.zeros(n_sub, dtype=np.uint8)
    flags[sub.n_local :] = 1
    flags.tofile(root / "remote.bin")
    sub.global_ids().astype("<u8").tofile(root / "idmap.bin")


def load_subgraph(path: str | Path) -> PartitionedSubgraph:
    root = Path(path)
    meta = {}
    for line in (root / "meta.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip():
            meta[key.strip()] = int(value)
    n_sub, m = meta["num_nodes"], meta["num_edges"]
    d = meta["feature_dim"]

    offsets = np.fromfile(root / "offsets.bin", dtype="<u8").astype(np.int64)
    targets = np.fromfile(root / "targets.bin", dtype="<u8").astype(np.int64)
    feats = np.fromfile(root / "features.bin", dtype="<f4").reshape(n_sub, d)
    labels = np.fromfile(root / "labels.bin", dtype="<u4")
    codes = np.fromfile(root / "masks.bin", dtype=np.uint8)
    flags = np.fromfile(root / "remote.bin", dtype=np.uint8)
    idmap = np.fromfile(root / "idmap.bin", dtype="<u8").astype(np.int64)
    if offsets.size != n_sub + 1 or targets.size != m or flags.size != n_sub or idmap.size != n_sub:
        raise GraphFormatError("subgraph files inconsistent with meta.txt")
    if np.any(np.diff(np.nonzero(flags)[0]) != 1) and np.any(flags[: int(np.argmax(flags))] != 0):
        raise GraphFormatError("remote flags are not a suffix of the index space")
    n_local = int(np.count_nonzero(flags == 0))
    if np.any(flags[:n_local] != 0):
        raise GraphFormatError("remote flags are not a suffix of the index space")

    local_nodes = idmap[:n_local]
    remote_nodes = idmap[n_local:]
    # push set: local vertices adjacent to any remote vertex in the stored halo
    row_of = np.repeat(np.arange(n_sub, dtype=np.int64), np.diff(offsets))
    cross = (row_of < n_local) & (targets >= n_local)
    push_nodes = np.unique(local_nodes[row_of[cross]]) if np.any(cross) else np.empty(0, dtype=np.int64)

    return PartitionedSubgraph(
        client_id=meta.get("client_id", 0),
        local_nodes=local_nodes,
        remote_nodes=remote_nodes,
        offsets=offsets,
        targets=targets,
        features=feats[:n_local].astype(np.float32),
        labels=labels[:n_local],
        train_mask=codes[:n_local] == 1,
        val_mask=codes[:n_local] == 2,
        test_mask=codes[:n_local] == 3,
        push_nodes=push_nodes,
        num_classes=meta["num_classes"],
    )
