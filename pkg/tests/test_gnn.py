"""Model math against independent oracles.

The oracles come first and share nothing with the implementation under
test: a dense-matrix forward pass and central finite differences of the
scalar loss.
"""
import numpy as np
import pytest

from fedemb.nn import (
    AdamState,
    ModelParams,
    adam_step,
    forward_blocks,
    glorot_init,
    layerwise_inference,
    load_model,
    loss_and_grad,
    params_from_bytes,
    params_to_bytes,
    save_model,
    softmax_cross_entropy,
)
from fedemb.partition import PartitionAssignment, build_subgraphs
from fedemb.sampler import Fanout, sample_minibatch

from conftest import make_graph


# --- oracles ---


def dense_forward(weights, biases, offsets, targets, features, num_layers):
    """Dense-adjacency reference: mean over {v} u N(v), affine, ReLU below L."""
    n = offsets.size - 1
    a_hat = np.eye(n, dtype=np.float64)
    for v in range(n):
        for u in targets[offsets[v]: offsets[v + 1]]:
            a_hat[v, u] = 1.0
    a_hat /= a_hat.sum(axis=1, keepdims=True)
    h = features.astype(np.float64)
    outs = []
    for l in range(num_layers):
        h = a_hat @ h @ weights[l] + biases[l]
        if l < num_layers - 1:
            h = np.maximum(h, 0)
        outs.append(h)
    return outs


def numeric_grads(params, loss_fn, h=1e-4):
    """Central finite differences of loss_fn() wrt every parameter entry."""
    out_w, out_b = [], []
    for group, sink in ((params.weights, out_w), (params.biases, out_b)):
        for arr in group:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = arr[idx]
                arr[idx] = keep + h
                lp = loss_fn()
                arr[idx] = keep - h
                lm = loss_fn()
                arr[idx] = keep
                g[idx] = (lp - lm) / (2.0 * h)
            sink.append(g)
    return ModelParams(out_w, out_b)


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(
        analytic.weights + analytic.biases, numeric.weights + numeric.biases
    ):
        denom = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst


def adam_reference(param, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam, scalar-looped, independent of the implementation."""
    p = param.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads_seq, start=1):
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def single_part_blocks(g, batch, fanout, seed):
    pa = PartitionAssignment(part_of=np.zeros(g.num_nodes, dtype=np.int64), num_parts=1)
    subs, _ = build_subgraphs(g, pa)
    sub = subs[0]
    cg = sample_minibatch(sub, batch, fanout, seed)
    feat_fn = lambda ids: sub.features[sub.local_index(ids)].astype(np.float64)
    labels = sub.labels.astype(np.int64)[sub.local_index(cg.targets)]
    return cg, feat_fn, labels


def no_cache(ids, layer):
    raise AssertionError("no remote rows expected here")


def random_connected_graph(n, rng, extra, **kw):
    edges = [tuple(sorted((i, (i + 1) % n))) for i in range(n)]
    for _ in range(extra):
        u, v = rng.choice(n, 2, replace=False)
        edges.append(tuple(sorted((int(u), int(v)))))
    return make_graph(n, sorted(set(edges)), **kw)


GRAD_H = 1e-4
# central differences lie within h of a ReLU kink, so every probe point
# must keep all hidden pre-activations clear of zero by a wide margin
KINK_MARGIN = 1e-3


def kink_margin(params, cg, feat_fn, cache_fn):
    steps = forward_blocks(params, cg, feat_fn, cache_fn)
    pres = [st["pre"] for st in steps[:-1]]
    return min((float(np.abs(p).min()) for p in pres), default=float("inf"))


def jitter_biases(params, rng, scale=0.3):
    # zero-init biases put dead neighborhoods exactly on the kink
    for b in params.biases:
        b += rng.uniform(-scale, scale, size=b.shape)


def gradcheck_instance(tag, trial, n_lo, n_hi, depths=(2, 3)):
    """Random (params, blocks, labels) at a point where the loss is smooth.

    Draws landing any hidden pre-activation within KINK_MARGIN of zero are
    rejected and redrawn; finite differences are meaningless there.
    """
    for attempt in range(64):
        r = np.random.default_rng(np.random.SeedSequence([tag, trial, attempt]))
        n = int(r.integers(n_lo, n_hi))
        L = int(r.choice(depths))
        g = random_connected_graph(
            n, r, extra=n // 2, num_classes=3, seed=int(r.integers(0, 2**31))
        )
        dims = [g.feature_dim] + [4] * (L - 1) + [3]
        params = glorot_init(
            dims, np.random.SeedSequence([tag, trial, attempt, 1]), dtype=np.float64
        )
        jitter_biases(params, r)
        batch = np.sort(r.choice(n, size=min(4, n), replace=False))
        cg, feat_fn, labels = single_part_blocks(
            g, batch, Fanout((10_000,) * L),
            np.random.SeedSequence([tag, trial, attempt, 2]),
        )
        if kink_margin(params, cg, feat_fn, no_cache) > KINK_MARGIN:
            return params, cg, feat_fn, labels
    raise AssertionError("no kink-free draw in 64 attempts")


# --- hand-frozen forward case ---


def test_forward_one_layer_frozen_values():
    # two nodes joined by an edge; W = I, b = (0.5, -0.5)
    g = make_graph(
        2, [(0, 1)],
        features=np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32),
        labels=[0, 1], num_classes=2,
    )
    params = ModelParams(
        [np.eye(2, dtype=np.float64)], [np.array([0.5, -0.5], dtype=np.float64)]
    )
    outs = layerwise_inference(params, g.csr_offsets, g.csr_targets,
                               g.features.astype(np.float64), 1)
    # both rows aggregate to mean([1,2],[3,4]) = [2,3]; +b = [2.5, 2.5]
    assert np.array_equal(outs[0], [[2.5, 2.5], [2.5, 2.5]])
    loss, dlogits = softmax_cross_entropy(outs[0], np.array([0, 1]))
    assert loss == pytest.approx(0.6931471805599453, abs=1e-12)
    assert np.allclose(dlogits, [[-0.25, 0.25], [0.25, -0.25]], atol=1e-12)


def test_softmax_ce_matches_direct_formula():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((7, 4))
    labels = rng.integers(0, 4, size=7)
    loss, grad = softmax_cross_entropy(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(7), labels]).mean()
    assert loss == pytest.approx(want, rel=1e-12)
    onehot = np.zeros_like(p)
    onehot[np.arange(7), labels] = 1.0
    assert np.allclose(grad, (p - onehot) / 7, atol=1e-12)


def test_softmax_ce_is_stable_for_huge_logits():
    logits = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
    loss, grad = softmax_cross_entropy(logits, np.array([0, 0]))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


# --- gradcheck ---


def test_gradcheck_small_graphs_dev():
    for trial in range(6):
        params, cg, feat_fn, labels = gradcheck_instance(4200, trial, 5, 16)
        _, grads = loss_and_grad(params, cg, feat_fn, no_cache, labels)
        fd = numeric_grads(
            params,
            lambda: loss_and_grad(params, cg, feat_fn, no_cache, labels)[0],
            h=GRAD_H,
        )
        assert max_rel_err(grads, fd) < 1e-5


def test_gradcheck_under_sampled_fanout():
    """Sampling changes the minibatch graph, not the calculus on it."""
    rng = np.random.default_rng(8)
    g = random_connected_graph(14, rng, extra=10, num_classes=3, seed=8)
    dims = [g.feature_dim, 4, 3]
    params = glorot_init(dims, np.random.SeedSequence([88]), dtype=np.float64)
    jitter_biases(params, rng)
    cg, feat_fn, labels = single_part_blocks(
        g, np.array([0, 3, 7]), Fanout((2, 2)), np.random.SeedSequence([8, 1])
    )
    assert kink_margin(params, cg, feat_fn, no_cache) > KINK_MARGIN
    _, grads = loss_and_grad(params, cg, feat_fn, no_cache, labels)
    fd = numeric_grads(
        params, lambda: loss_and_grad(params, cg, feat_fn, no_cache, labels)[0]
    )
    assert max_rel_err(grads, fd) < 1e-5


def test_gradcheck_with_remote_cached_rows(tri_graph):
    """Cached remote sources are constants; gradients must still check out."""
    g, pa = tri_graph
    subs, _ = build_subgraphs(g, pa)
    sub = subs[0]
    L = 2
    dims = [g.feature_dim, 5, g.num_classes]
    params = glorot_init(dims, np.random.SeedSequence([9]), dtype=np.float64)
    rng = np.random.default_rng(3)
    jitter_biases(params, rng)
    cache_vals = {1: rng.standard_normal((sub.remote_nodes.size, dims[1]))}

    def cache_fn(ids, layer):
        idx = np.searchsorted(sub.remote_nodes, ids)
        return cache_vals[layer][idx]

    feat_fn = lambda ids: sub.features[sub.local_index(ids)].astype(np.float64)
    batch = sub.local_train_nodes()
    cg = sample_minibatch(sub, batch, Fanout((10_000,) * L), np.random.SeedSequence([4]))
    assert any(b.src_is_remote.any() for b in cg.blocks), "fixture must hit the remote path"
    labels = sub.labels.astype(np.int64)[sub.local_index(cg.targets)]
    assert kink_margin(params, cg, feat_fn, cache_fn) > KINK_MARGIN
    _, grads = loss_and_grad(params, cg, feat_fn, cache_fn, labels)
    fd = numeric_grads(
        params, lambda: loss_and_grad(params, cg, feat_fn, cache_fn, labels)[0]
    )
    assert max_rel_err(grads, fd) < 1e-5


# --- inference paths agree ---


def test_layerwise_inference_matches_dense_reference():
    rng = np.random.default_rng(5)
    g = random_connected_graph(12, rng, extra=8, num_classes=3, seed=5)
    dims = [g.feature_dim, 6, 3]
    params = glorot_init(dims, np.random.SeedSequence([7]), dtype=np.float64)
    outs = layerwise_inference(params, g.csr_offsets, g.csr_targets,
                               g.features.astype(np.float64), 2)
    ref = dense_forward(params.weights, params.biases, g.csr_offsets,
                        g.csr_targets, g.features, 2)
    for a, b in zip(outs, ref):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_block_forward_agrees_with_inference_at_full_fanout():
    rng = np.random.default_rng(15)
    g = random_connected_graph(13, rng, extra=9, num_classes=3, seed=15)
    L = 3
    dims = [g.feature_dim, 5, 5, 3]
    params = glorot_init(dims, np.random.SeedSequence([2]), dtype=np.float64)
    batch = np.arange(g.num_nodes)
    cg, feat_fn, labels = single_part_blocks(
        g, batch, Fanout((10_000,) * L), np.random.SeedSequence([2, 2])
    )
    from fedemb.nn import forward_blocks

    steps = forward_blocks(params, cg, feat_fn, no_cache)
    logits_blocks = steps[-1]["h_out"]
    logits_full = layerwise_inference(
        params, g.csr_offsets, g.csr_targets, g.features.astype(np.float64), L
    )[-1]
    order = np.argsort(cg.targets)
    assert np.allclose(logits_blocks[order], logits_full, rtol=1e-10, atol=1e-12)


# --- optimizer ---


def test_adam_matches_reference_three_steps():
    rng = np.random.default_rng(1)
    w0 = rng.standard_normal((3, 2)).astype(np.float32)
    b0 = rng.standard_normal(2).astype(np.float32)
    params = ModelParams([w0.copy()], [b0.copy()])
    state = AdamState.create(params, lr=0.05)
    gw_seq = [rng.standard_normal((3, 2)).astype(np.float32) for _ in range(3)]
    gb_seq = [rng.standard_normal(2).astype(np.float32) for _ in range(3)]
    for gw, gb in zip(gw_seq, gb_seq):
        adam_step(params, ModelParams([gw], [gb]), state)
    ref_w = adam_reference(w0, gw_seq, lr=0.05)
    ref_b = adam_reference(b0, gb_seq, lr=0.05)
    assert np.allclose(params.weights[0], ref_w, rtol=1e-5, atol=1e-6)
    assert np.allclose(params.biases[0], ref_b, rtol=1e-5, atol=1e-6)
    assert state.t == 3


def test_adam_zero_grad_keeps_params():
    params = ModelParams(
        [np.array([[1.0, -2.0]], dtype=np.float32)],
        [np.array([0.5], dtype=np.float32)],
    )
    before = params.copy()
    state = AdamState.create(params, lr=0.1)
    zero = ModelParams(
        [np.zeros_like(params.weights[0])], [np.zeros_like(params.biases[0])]
    )
    adam_step(params, zero, state)
    adam_step(params, zero, state)
    assert params.equal_bits(before)


def test_adam_updates_in_place():
    params = ModelParams(
        [np.ones((2, 2), dtype=np.float32)], [np.zeros(2, dtype=np.float32)]
    )
    w_ref = params.weights[0]
    state = AdamState.create(params, lr=0.1)
    g = ModelParams([np.ones((2, 2), dtype=np.float32)], [np.ones(2, dtype=np.float32)])
    adam_step(params, g, state)
    assert params.weights[0] is w_ref  # same buffer, mutated
    assert not np.array_equal(w_ref, np.ones((2, 2), dtype=np.float32))


# --- serialization ---


def test_params_blob_roundtrip_bitwise():
    params = glorot_init([7, 5, 3], np.random.SeedSequence([1]))
    blob = params_to_bytes(params)
    back = params_from_bytes(blob)
    assert back.equal_bits(params)
    assert back.dims == (7, 5, 3)


def test_params_blob_rejects_bad_length():
    params = glorot_init([4, 3], np.random.SeedSequence([2]))
    blob = params_to_bytes(params)
    with pytest.raises(ValueError):
        params_from_bytes(blob[:-4])


def test_save_load_model_dir(tmp_path):
    params = glorot_init([6, 4, 2], np.random.SeedSequence([3]))
    save_model(params, tmp_path / "model")
    back = load_model(tmp_path / "model")
    assert back.equal_bits(params)


def test_glorot_deterministic_and_bounded():
    a = glorot_init([9, 7, 4], np.random.SeedSequence([5]))
    b = glorot_init([9, 7, 4], np.random.SeedSequence([5]))
    assert a.equal_bits(b)
    c = glorot_init([9, 7, 4], np.random.SeedSequence([6]))
    assert not a.equal_bits(c)
    for w, (fi, fo) in zip(a.weights, [(9, 7), (7, 4)]):
        bound = np.sqrt(6.0 / (fi + fo))
        assert np.abs(w).max() <= bound
    for bias in a.biases:
        assert np.count_nonzero(bias) == 0
