"""Halo pruning and minibatch neighborhood sampling over a client subgraph.

Sampling obeys three placement rules:

 1. roots (hop 0) are local train vertices only;
 2. at hops 1..L-1 both local and remote vertices may be drawn, but a remote
    vertex is a leaf: it is never expanded further, its cached embedding
    stands in for the whole branch;
 3. at hop L only local vertices may be drawn, because raw input features
    for remote vertices are never available.

The result is a list of L bipartite blocks. Block l (1-based) feeds model
layer l: its destinations sit at hop L-l, its sources at hop L-l+1, and the
sources always include the destinations themselves for the self term.
Remote sources of block l carry required cache layer l-1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partition import PartitionedSubgraph


@dataclass
class Fanout:
    """Per-hop sampling caps, hop 1 nearest the targets."""

    values: tuple[int, ...]

    def __post_init__(self):
        self.values = tuple(int(v) for v in self.values)
        if any(v < 0 for v in self.values):
            raise ValueError("fanout values must be non-negative")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Block:
    """One bipartite sampling block, consumed by model layer `layer`."""

    layer: int
    dst_ids: np.ndarray  # global ids, sorted, all local
    src_ids: np.ndarray  # global ids, sorted; superset of dst_ids
    src_is_remote: np.ndarray  # bool per source
    src_cache_layer: np.ndarray  # layer-1 for remote sources, 0 otherwise
    edge_src: np.ndarray  # index into src_ids
    edge_dst: np.ndarray  # index into dst_ids; includes one self edge per dst
    counts: np.ndarray  # in-degree per destination, self included

    @property
    def n_dst(self) -> int:
        return int(self.dst_ids.size)

    @property
    def n_src(self) -> int:
        return int(self.src_ids.size)

    def local_src_positions(self) -> np.ndarray:
        return np.nonzero(~self.src_is_remote)[0]


@dataclass
class ComputationGraph:
    """Blocks in layer order: blocks[0] is consumed by layer 1."""

    blocks: list[Block]
    targets: np.ndarray  # global ids, sorted (== blocks[-1].dst_ids)

    @property
    def num_layers(self) -> int:
        return len(self.blocks)


def required_pull_set(sub: PartitionedSubgraph) -> np.ndarray:
    """Remote vertices whose cached embeddings a round-level pull must fetch."""
    return sub.remote_nodes.copy()


def prune(sub: PartitionedSubgraph, retain: int | None, seed) -> PartitionedSubgraph:
    """Cap each local vertex at `retain` remote neighbors.

    The kept remote neighbors are a uniform random subset per local vertex;
    dropped ones lose both directed entries, and remote vertices left with
    no incident edge leave the halo (and with it the pull set) entirely.
    retain=None means no limit and returns the subgraph unchanged.
    """
    if retain is None:
        return sub
    if retain < 0:
        raise ValueError("retain must be >= 0 or None")

    rng = np.random.default_rng(seed)
    n_local = sub.n_local
    row_of = np.repeat(np.arange(sub.n_sub, dtype=np.int64), np.diff(sub.offsets))
    local_row = row_of < n_local
    tgt = sub.targets

    # local-local entries survive untouched
    ll = local_row & (tgt < n_local)
    keep_src_g = [sub.local_nodes[row_of[ll]]]
    keep_dst_g = [sub.local_nodes[tgt[ll]]]

    cross = local_row & (tgt >= n_local)
    cross_rows = np.unique(row_of[cross])
    kept_u, kept_v = [], []
    for v_sub in cross_rows:
        row = sub.row(int(v_sub))
        rem = row[row >= n_local]  # sorted by global id already
        if retain == 0:
            continue
        if rem.size > retain:
            pick_pos = rng.choice(rem.size, size=retain, replace=False)
            rem = rem[np.sort(pick_pos)]
        kept_u.append(np.full(rem.size, sub.local_nodes[v_sub], dtype=np.int64))
        kept_v.append(sub.remote_nodes[rem - n_local])

    if kept_u:
        u = np.concatenate(kept_u)
        v = np.concatenate(kept_v)
        keep_src_g.extend([u, v])
        keep_dst_g.extend([v, u])

    e_src = np.concatenate(keep_src_g) if keep_src_g else np.empty(0, np.int64)
    e_dst = np.concatenate(keep_dst_g) if keep_dst_g else np.empty(0, np.int64)

    remote_nodes = np.unique(np.concatenate(kept_v)) if kept_u else np.empty(0, np.int64)
    n_sub = n_local + remote_nodes.size

    def to_sub(ids):
        out = np.searchsorted(sub.local_nodes, ids)
        if n_local:
            lmask = (out < n_local) & (sub.local_nodes[np.minimum(out, n_local - 1)] == ids)
        else:
            lmask = np.zeros(ids.size, bool)
        rmask = ~lmask
        if np.any(rmask):
            out[rmask] = np.searchsorted(remote_nodes, ids[rmask]) + n_local
        return out

    s_src = to_sub(e_src)
    order = np.lexsort((e_dst, s_src))
    s_src = s_src[order]
    s_dst = to_sub(e_dst[order])
    offsets = np.zeros(n_sub + 1, dtype=np.int64)
    np.cumsum(np.bincount(s_src, minlength=n_sub), out=offsets[1:])

    return PartitionedSubgraph(
        client_id=sub.client_id,
        local_nodes=sub.local_nodes,
        remote_nodes=remote_nodes,
        offsets=offsets,
        targets=s_dst,
        features=sub.features,
        labels=sub.labels,
        train_mask=sub.train_mask,
        val_mask=sub.val_mask,
        test_mask=sub.test_mask,
        push_nodes=sub.push_nodes,  # cut-derived, independent of pruning
        num_classes=sub.num_classes,
    )


def sample_minibatch(
    sub: PartitionedSubgraph,
    targets: np.ndarray,
    fanout: Fanout,
    seed,
) -> ComputationGraph:
    """Sample an L-hop computation graph for a batch of local train targets.

    Per hop h (1..L) every local frontier vertex draws min(f_h, deg)
    neighbors uniformly without replacement from its subgraph row; at hop L
    the candidate set is restricted to local neighbors. Each hop draws one
    uniform key per candidate edge and keeps the f_h smallest keys per
    destination, so the result is a pure function of (seed, targets).
    """
    rng = np.random.default_rng(seed)
    L = len(fanout)
    tg = np.unique(np.asarray(targets, dtype=np.int64))
    if tg.size == 0:
        raise ValueError("empty target batch")
    t_local = sub.local_index(tg)  # raises if any target is remote/foreign
    if not np.all(sub.train_mask[t_local]):
        raise ValueError("targets must carry the train mask")

    gid = sub.global_ids()
    n_local = sub.n_local
    blocks_rev: list[Block] = []
    frontier_g = tg
    frontier_sub = t_local

    for l in range(L, 0, -1):
        hop = L - l + 1
        f = fanout.values[hop - 1]
        dst_g = frontier_g
        dst_sub = frontier_sub
        ndst = dst_g.size

        # ragged gather of all candidate rows at once
        starts = sub.offsets[dst_sub]
        lens = sub.offsets[dst_sub + 1] - starts
        total = int(lens.sum())
        prefix = np.concatenate(([0], np.cumsum(lens)[:-1]))
        flat = sub.targets[np.arange(total) + np.repeat(starts - prefix, lens)]
        row_id = np.repeat(np.arange(ndst, dtype=np.int64), lens)
        if l == 1:  # raw features of remote vertices never leave their client
            local = flat < n_local
            flat, row_id = flat[local], row_id[local]

        # keep the f smallest random keys per destination: a uniform
        # f-subset without replacement, in one draw for the whole hop
        keys = rng.random(flat.size)
        order = np.lexsort((keys, row_id))
        srow = row_id[order]
        seg = np.concatenate(([0], np.cumsum(np.bincount(srow, minlength=ndst))))
        rank = np.arange(flat.size) - seg[srow]
        kept = order[rank < f]
        kept_flat, kept_row = flat[kept], row_id[kept]

        # one self edge per destination plus its sampled sources,
        # ordered per destination by ascending global id
        src_sub_all = np.concatenate((dst_sub, kept_flat))
        src_row_all = np.concatenate((np.arange(ndst, dtype=np.int64), kept_row))
        g_all = np.empty(src_sub_all.size, dtype=np.int64)
        g_all[:ndst] = dst_g
        g_all[ndst:] = gid[kept_flat]
        order2 = np.lexsort((g_all, src_row_all))
        all_src_g = g_all[order2]
        counts = np.bincount(src_row_all, minlength=ndst).astype(np.int64)
        src_ids = np.unique(all_src_g)
        edge_src = np.searchsorted(src_ids, all_src_g)
        edge_dst = np.repeat(np.arange(dst_g.size, dtype=np.int64), counts)

        ri = np.searchsorted(sub.remote_nodes, src_ids)
        if sub.n_remote:
            src_is_remote = (ri < sub.n_remote) & (sub.remote_nodes[np.minimum(ri, sub.n_remote - 1)] == src_ids)
        else:
            src_is_remote = np.zeros(src_ids.size, dtype=bool)
        cache_layer = np.where(src_is_remote, l - 1, 0).astype(np.int64)

        blocks_rev.append(
            Block(
                layer=l,
                dst_ids=dst_g,
                src_ids=src_ids,
                src_is_remote=src_is_remote,
                src_cache_layer=cache_layer,
                edge_src=edge_src,
                edge_dst=edge_dst,
                counts=counts,
            )
        )
        frontier_g = src_ids[~src_is_remote]
        frontier_sub = sub.sub_index(frontier_g)

    blocks = list(reversed(blocks_rev))
    return ComputationGraph(blocks=blocks, targets=tg)
