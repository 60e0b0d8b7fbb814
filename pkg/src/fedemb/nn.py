"""Dense graph-conv model: forward, hand-derived backward, Adam, inference.

Every layer computes h^l(v) = act(mean({h^{l-1}(u) : u in {v} + S(v)}) @ W_l + b_l)
where S(v) is the sampled (or, for inference, full local) neighborhood.
The activation is ReLU except at the final layer, which emits raw logits.
Cached remote rows enter the mean as constants and receive no gradient.

The whole pipeline runs in float32; float64 is supported only so gradient
checks can run at full precision.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampler import Block, ComputationGraph


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )

    def allclose(self, other: "ModelParams", rtol=0.0, atol=0.0) -> bool:
        return all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    def equal_bits(self, other: "ModelParams") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


def glorot_init(dims, seed, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases; one RNG stream, layers in order."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ModelParams(weights, biases)


def params_to_bytes(params: ModelParams) -> bytes:
    """Wire blob: u32 num_layers, u32 dims[L+1], then f32 LE W1,b1,...,WL,bL."""
    dims = params.dims
    head = struct.pack(f"<I{len(dims)}I", params.num_layers, *dims)
    chunks = [head]
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> ModelParams:
    (num_layers,) = struct.unpack_from("<I", blob, 0)
    dims = struct.unpack_from(f"<{num_layers + 1}I", blob, 4)
    off = 4 + 4 * (num_layers + 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    if off != len(blob):
        raise ValueError("model blob length does not match header dims")
    return ModelParams(weights, biases)


def save_model(params: ModelParams, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    dims = ",".join(str(d) for d in params.dims)
    (root / "meta.txt").write_text(f"num_layers={params.num_layers}\ndims={dims}\n")
    with open(root / "params.bin", "wb") as fh:
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path: str | Path) -> ModelParams:
    root = Path(path)
    meta = dict(
        line.split("=", 1) for line in (root / "meta.txt").read_text().splitlines() if "=" in line
    )
    dims = [int(x) for x in meta["dims"].split(",")]
    raw = (root / "params.bin").read_bytes()
    off = 0
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    return ModelParams(weights, biases)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    @classmethod
    def create(cls, params: ModelParams, lr: float) -> "AdamState":
        st = cls(lr=lr)
        st.m_w = [np.zeros_like(w) for w in params.weights]
        st.v_w = [np.zeros_like(w) for w in params.weights]
        st.m_b = [np.zeros_like(b) for b in params.biases]
        st.v_b = [np.zeros_like(b) for b in params.biases]
        return st


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> None:
    """One Adam update, in place. Zero gradients leave parameters unchanged."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for m, v, p, g in (
        list(zip(state.m_w, state.v_w, params.weights, grads.weights))
        + list(zip(state.m_b, state.v_b, params.biases, grads.biases))
    ):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        mhat = m / c1
        vhat = v / c2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def _segment_sum(values: np.ndarray, seg_idx: np.ndarray, n_seg: int) -> np.ndarray:
    out = np.zeros((n_seg, values.shape[1]), dtype=values.dtype)
    np.add.at(out, seg_idx, values)
    return out


def _aggregate(h_src: np.ndarray, blk: Block) -> np.ndarray:
    """Mean over self + sampled sources; edge order is sorted per destination."""
    total = _segment_sum(h_src[blk.edge_src], blk.edge_dst, blk.n_dst)
    return total / blk.counts.astype(h_src.dtype)[:, None]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over the batch; returns (loss, dLoss/dLogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    n = logits.shape[0]
    idx = np.arange(n)
    logp = z[idx, labels] - np.log(denom[:, 0])
    loss = float(-logp.mean())
    dlogits = probs
    dlogits[idx, labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


def forward_blocks(params: ModelParams, cg: ComputationGraph, feat_fn, cache_fn):
    """Run the sampled forward pass; returns per-block intermediates.

    feat_fn(ids) must return input rows for local ids; cache_fn(ids, layer)
    returns cached embedding rows for remote ids. Block sources that are
    local must exactly equal the previous block's destinations.
    """
    L = params.num_layers
    if cg.num_layers != L:
        raise ValueError(f"computation graph has {cg.num_layers} blocks, model has {L} layers")
    dtype = params.dtype
    steps = []
    h_prev = None
    for i, blk in enumerate(cg.blocks):
        layer = i + 1
        if i == 0:
            if np.any(blk.src_is_remote):
                raise ValueError("remote source in the deepest block")
            h_src = np.ascontiguousarray(feat_fn(blk.src_ids), dtype=dtype)
        else:
            prev = cg.blocks[i - 1]
            local_pos = blk.local_src_positions()
            if not np.array_equal(blk.src_ids[local_pos], prev.dst_ids):
                raise ValueError("block frontier mismatch: local sources != previous destinations")
            d_prev = h_prev.shape[1]
            h_src = np.zeros((blk.n_src, d_prev), dtype=dtype)
            h_src[local_pos] = h_prev
            rem = np.nonzero(blk.src_is_remote)[0]
            if rem.size:
                h_src[rem] = np.ascontiguousarray(
                    cache_fn(blk.src_ids[rem], layer - 1), dtype=dtype
                )
        agg = _aggregate(h_src, blk)
        pre = agg @ params.weights[i] + params.biases[i]
        h_out = np.maximum(pre, 0) if layer < L else pre
        steps.append({"h_src": h_src, "agg": agg, "pre": pre, "h_out": h_out})
        h_prev = h_out
    return steps


def loss_and_grad(
    params: ModelParams,
    cg: ComputationGraph,
    feat_fn,
    cache_fn,
    labels: np.ndarray,
):
    """Loss plus exact gradients for every weight and bias.

    Gradients flow through local sources only; cached remote rows are
    treated as constants.
    """
    steps = forward_blocks(params, cg, feat_fn, cache_fn)
    logits = steps[-1]["h_out"]
    loss, dcur = softmax_cross_entropy(logits, np.asarray(labels, dtype=np.int64))

    L = params.num_layers
    gw = [None] * L
    gb = [None] * L
    for i in range(L - 1, -1, -1):
        blk = cg.blocks[i]
        st = steps[i]
        if i + 1 < L:  # hidden layers ReLU'd; final layer is linear
            dcur = dcur * (st["pre"] > 0)
        gw[i] = st["agg"].T @ dcur
        gb[i] = dcur.sum(axis=0)
        if i == 0:
            break
        dagg = dcur @ params.weights[i].T
        contrib = dagg[blk.edge_dst] / blk.counts.astype(dagg.dtype)[blk.edge_dst, None]
        dsrc = np.zeros((blk.n_src, dagg.shape[1]), dtype=dagg.dtype)
        np.add.at(dsrc, blk.edge_src, contrib)
        dcur = dsrc[blk.local_src_positions()]  # remote rows: constants, gradient dropped
    return loss, ModelParams(gw, gb)


def csr_self_edges(offsets: np.ndarray, targets: np.ndarray):
    """Edge arrays over a CSR with one self edge per row, sorted per row by id."""
    n = offsets.size - 1
    deg = np.diff(offsets)
    dst = np.concatenate([np.repeat(np.arange(n, dtype=np.int64), deg), np.arange(n, dtype=np.int64)])
    src = np.concatenate([targets.astype(np.int64), np.arange(n, dtype=np.int64)])
    order = np.lexsort((src, dst))
    return src[order], dst[order], (deg + 1)


def layerwise_inference(
    params: ModelParams,
    offsets: np.ndarray,
    targets: np.ndarray,
    features: np.ndarray,
    upto_layer: int | None = None,
) -> list[np.ndarray]:
    """Full-neighborhood inference over a CSR whose every row has features.

    Returns [h^1, ..., h^upto]; h^L (if reached) is raw logits. Used for
    the embedding push (local edges only, up to L-1) and for evaluation on
    the whole graph (up to L).
    """
    L = params.num_layers
    upto = L if upto_layer is None else int(upto_layer)
    if not 1 <= upto <= L:
        raise ValueError(f"upto_layer {upto} out of range 1..{L}")
    dtype = params.dtype
    src, dst, counts = csr_self_edges(offsets, targets)
    n = offsets.size - 1
    denom = counts.astype(dtype)[:, None]
    h = np.ascontiguousarray(features, dtype=dtype)
    out = []
    for l in range(1, upto + 1):
        agg = _segment_sum(h[src], dst, n) / denom
        pre = agg @ params.weights[l - 1] + params.biases[l - 1]
        h = np.maximum(pre, 0) if l < L else pre
        out.append(h)
    return out
