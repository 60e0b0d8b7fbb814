"""Federated training runtime.

One aggregation core coordinates K clients through numbered rounds:
register, fetch the current model, train locally, report back; the Kth
report triggers a sample-weighted average and publishes the next model.
Clients that train with cached neighbor embeddings pull their halo once
per round and push refreshed boundary embeddings at the end of the round,
optionally overlapping the push with the final local epoch.
"""
from __future__ import annotations

import multiprocessing
import struct
import sys
import threading
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .config import RunConfig
from .graph import Graph, load_graph, parse_synth_string, synth_graph
from .nn import (
    AdamState,
    ModelParams,
    adam_step,
    glorot_init,
    layerwise_inference,
    loss_and_grad,
    params_from_bytes,
    params_to_bytes,
)
from .partition import (
    PartitionAssignment,
    PartitionedSubgraph,
    build_subgraphs,
    partition,
    read_partition_file,
)
from .sampler import Fanout, prune, sample_minibatch
from .store import EmbeddingClient, EmbeddingStore
from .wire import InprocConnection, ProtocolError, TcpConnection, TcpServer

# Purpose tags keep independently consumed RNG streams disjoint even when
# the remaining context integers collide.
TAG_INIT = 101
TAG_SHUFFLE = 102
TAG_SAMPLE = 103
TAG_PRUNE = 104


def seed_seq(root_seed: int, tag: int, *ctx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed), int(tag), *(int(c) for c in ctx)])


def derive_rng(root_seed: int, tag: int, *ctx: int) -> np.random.Generator:
    return np.random.default_rng(seed_seq(root_seed, tag, *ctx))


def model_dims(num_layers: int, feature_dim: int, hidden_dim: int, num_classes: int):
    if num_layers == 1:
        return [feature_dim, num_classes]
    return [feature_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]


def fedavg(param_sets: list, sample_counts) -> ModelParams:
    """Sample-weighted average, accumulated in float64 and cast back."""
    if not param_sets:
        raise ValueError("fedavg: no client updates")
    total = float(np.sum(np.asarray(sample_counts, dtype=np.float64)))
    if total <= 0:
        raise ValueError("fedavg: total sample count is zero")
    acc_w = [np.zeros(w.shape, dtype=np.float64) for w in param_sets[0].weights]
    acc_b = [np.zeros(b.shape, dtype=np.float64) for b in param_sets[0].biases]
    for p, n in zip(param_sets, sample_counts):
        scale = float(n) / total
        for i, w in enumerate(p.weights):
            acc_w[i] += w.astype(np.float64) * scale
        for i, b in enumerate(p.biases):
            acc_b[i] += b.astype(np.float64) * scale
    return ModelParams(
        [w.astype(np.float32) for w in acc_w],
        [b.astype(np.float32) for b in acc_b],
    )


def evaluate(params: ModelParams, g: Graph) -> float:
    """Test accuracy of the model run over the full (unpartitioned) graph."""
    mask = g.test_mask
    if not bool(np.any(mask)):
        raise ValueError("evaluate: graph has no test nodes")
    outs = layerwise_inference(
        params, g.csr_offsets, g.csr_targets, g.features, params.num_layers
    )
    pred = np.argmax(outs[-1], axis=1).astype(np.int64)
    truth = g.labels.astype(np.int64)
    return float(np.mean(pred[mask] == truth[mask]))


@dataclass
class RoundPlan:
    """Per-round training schedule shared by every client."""

    epochs: int
    batch_size: int
    fanout: Fanout
    lr: float
    use_embeddings: bool
    overlap_push: bool

    def __post_init__(self):
        # overlapping needs a non-final epoch to snapshot from
        if self.overlap_push and self.epochs < 2:
            self.overlap_push = False


@dataclass
class ClientReport:
    client_id: int
    round: int
    num_train_samples: int
    pull_s: float
    sample_s: float
    train_s: float
    push_s: float
    round_s: float

    def timings(self):
        return (self.pull_s, self.sample_s, self.train_s, self.push_s, self.round_s)


@dataclass
class GlobalModelState:
    """Everything the harness needs after a run."""

    params: ModelParams
    round: int
    history: list = field(default_factory=list)  # (round, wall_s, test_accuracy)
    round_params: list = field(default_factory=list)  # model after each round, 0..R
    client_timings: dict = field(default_factory=dict)  # r -> cid -> (n, 5 timings, wall)
    key_counts: dict = field(default_factory=dict)  # r -> cid -> cumulative pulled/pushed
    store_stats: dict = field(default_factory=dict)  # r -> (num_keys, bytes_resident)


class AggregationCore:
    """Round-synchronous model server.

    The initial model is withheld until every client has registered, which
    doubles as the start barrier. put_model from the Kth client triggers
    aggregation, evaluation, and publication of the next round's model
    atomically under one lock, so no client can observe a half-built round.
    """

    def __init__(self, num_clients: int, num_rounds: int, initial_blob: bytes,
                 evaluate_fn=None, on_round_complete=None, timeout_s: float = 300.0):
        if num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        self.num_clients = num_clients
        self.num_rounds = num_rounds
        self.timeout_s = timeout_s
        self._evaluate = evaluate_fn
        self._hook = on_round_complete
        self._cond = threading.Condition()
        self._initial_blob = bytes(initial_blob)
        self.models: dict[int, bytes] = {}
        self.registered: set[int] = set()
        self.reports: dict[int, dict] = {}
        self.barrier_arrivals: dict[int, set] = {}
        self.barriers_released: set[int] = set()
        self.history: list = []
        self.failed: str | None = None
        self._t0 = time.perf_counter()
        if self._evaluate is not None:
            acc0 = self._evaluate(params_from_bytes(self._initial_blob))
            self.history.append((0, self._wall(), acc0))

    def _wall(self) -> float:
        return time.perf_counter() - self._t0

    def abort(self, reason: str) -> None:
        with self._cond:
            if self.failed is None:
                self.failed = reason
            self._cond.notify_all()

    def _raise_if_failed(self):
        if self.failed is not None:
            raise ProtocolError(wire.ERR_STATE, f"run aborted: {self.failed}")

    def register(self, client_id: int) -> None:
        with self._cond:
            self._raise_if_failed()
            if not (0 <= client_id < self.num_clients):
                raise ProtocolError(wire.ERR_BAD_CLIENT, f"client id {client_id} out of range")
            if client_id in self.registered:
                raise ProtocolError(wire.ERR_STATE, f"client {client_id} already registered")
            self.registered.add(client_id)
            if len(self.registered) == self.num_clients:
                self.models[0] = self._initial_blob
            self._cond.notify_all()

    def get_model(self, round_id: int, timeout: float | None = None) -> bytes:
        if not (0 <= round_id <= self.num_rounds):
            raise ProtocolError(wire.ERR_BAD_ROUND, f"round {round_id} out of range")
        deadline = self.timeout_s if timeout is None else timeout
        with self._cond:
            ok = self._cond.wait_for(
                lambda: round_id in self.models or self.failed is not None, deadline
            )
            self._raise_if_failed()
            if not ok:
                raise ProtocolError(wire.ERR_TIMEOUT, f"model for round {round_id} not ready")
            return self.models[round_id]

    def put_model(self, client_id: int, round_id: int, n_samples: int,
                  blob: bytes, timings) -> None:
        with self._cond:
            self._raise_if_failed()
            if client_id not in self.registered:
                raise ProtocolError(wire.ERR_STATE, f"client {client_id} not registered")
            if not (1 <= round_id <= self.num_rounds):
                raise ProtocolError(wire.ERR_BAD_ROUND, f"round {round_id} out of range")
            per_round = self.reports.setdefault(round_id, {})
            if client_id in per_round:
                raise ProtocolError(
                    wire.ERR_STATE, f"duplicate report from client {client_id} in round {round_id}"
                )
            per_round[client_id] = (int(n_samples), bytes(blob), tuple(timings), self._wall())
            if len(per_round) == self.num_clients:
                self._finish_round(round_id, per_round)
            self._cond.notify_all()

    def _finish_round(self, round_id: int, per_round: dict) -> None:
        cids = sorted(per_round)
        models = [params_from_bytes(per_round[c][1]) for c in cids]
        counts = [per_round[c][0] for c in cids]
        merged = fedavg(models, counts)
        if self._evaluate is not None:
            acc = self._evaluate(merged)
            self.history.append((round_id, self._wall(), acc))
        if self._hook is not None:
            self._hook(round_id)
        self.models[round_id] = params_to_bytes(merged)

    def round_done(self, client_id: int, phase: int, timeout: float | None = None) -> None:
        """Barrier: returns once every client has reported the same phase."""
        deadline = self.timeout_s if timeout is None else timeout
        with self._cond:
            self._raise_if_failed()
            if client_id not in self.registered:
                raise ProtocolError(wire.ERR_STATE, f"client {client_id} not registered")
            arrived = self.barrier_arrivals.setdefault(phase, set())
            if client_id in arrived:
                raise ProtocolError(
                    wire.ERR_STATE, f"client {client_id} already at barrier {phase}"
                )
            arrived.add(client_id)
            if len(arrived) == self.num_clients and phase not in self.barriers_released:
                self.barriers_released.add(phase)
                # phase 0 closes the pretrain push; snapshot store counters.
                # later phases are covered by the post-aggregation hook.
                if phase == 0 and self._hook is not None:
                    self._hook(phase)
            self._cond.notify_all()
            ok = self._cond.wait_for(
                lambda: phase in self.barriers_released or self.failed is not None, deadline
            )
            self._raise_if_failed()
            if not ok:
                raise ProtocolError(wire.ERR_TIMEOUT, f"barrier {phase} timed out")

    def finished(self) -> bool:
        with self._cond:
            return self.failed is None and self.num_rounds in self.models

    def wait_finished(self, timeout: float) -> bool:
        with self._cond:
            return self._cond.wait_for(
                lambda: self.num_rounds in self.models or self.failed is not None, timeout
            ) and self.failed is None

    # --- wire dispatch ---

    def handle(self, state: dict, opcode: int, payload: bytes) -> tuple[int, bytes]:
        if opcode == wire.OP_REGISTER:
            cid = wire.dec_u32(payload, "register")
            self.register(cid)
            state["client_id"] = cid
            return opcode | wire.RESP_BIT, b""
        if opcode == wire.OP_GET_MODEL:
            round_id = wire.dec_u32(payload, "get_model")
            blob = self.get_model(round_id)
            return opcode | wire.RESP_BIT, struct.pack("<I", round_id) + blob
        if opcode == wire.OP_PUT_MODEL:
            cid = state.get("client_id")
            if cid is None:
                raise ProtocolError(wire.ERR_STATE, "put_model before register")
            off = 16
            if len(payload) < off:
                raise ProtocolError(wire.ERR_BAD_PAYLOAD, "put_model payload truncated")
            round_id, n_samples, blob_len = struct.unpack_from("<IQI", payload, 0)
            if len(payload) != off + blob_len + 40:
                raise ProtocolError(wire.ERR_BAD_PAYLOAD, "put_model payload length mismatch")
            blob = payload[off : off + blob_len]
            timings = struct.unpack_from("<5d", payload, off + blob_len)
            self.put_model(cid, round_id, n_samples, blob, timings)
            return opcode | wire.RESP_BIT, struct.pack("<I", round_id)
        if opcode == wire.OP_ROUND_DONE:
            cid = state.get("client_id")
            if cid is None:
                raise ProtocolError(wire.ERR_STATE, "round_done before register")
            phase = wire.dec_u32(payload, "round_done")
            self.round_done(cid, phase)
            return opcode | wire.RESP_BIT, struct.pack("<I", phase)
        raise ProtocolError(wire.ERR_BAD_OPCODE, f"aggregation server: opcode 0x{opcode:02x}")


class AggregationClient:
    """Thin wire client for the aggregation server."""

    def __init__(self, conn):
        self.conn = conn

    def register(self, client_id: int) -> None:
        op, payload = self.conn.request(wire.OP_REGISTER, struct.pack("<I", client_id))
        wire.check_response(op, payload, wire.OP_REGISTER)

    def get_model(self, round_id: int) -> bytes:
        op, payload = self.conn.request(wire.OP_GET_MODEL, struct.pack("<I", round_id))
        body = wire.check_response(op, payload, wire.OP_GET_MODEL)
        (echoed,) = struct.unpack_from("<I", body, 0)
        if echoed != round_id:
            raise wire.FrameError(f"get_model echoed round {echoed}, wanted {round_id}")
        return body[4:]

    def put_model(self, round_id: int, n_samples: int, blob: bytes, timings) -> None:
        payload = (
            struct.pack("<IQI", round_id, n_samples, len(blob))
            + bytes(blob)
            + struct.pack("<5d", *timings)
        )
        op, resp = self.conn.request(wire.OP_PUT_MODEL, payload)
        wire.check_response(op, resp, wire.OP_PUT_MODEL)

    def round_done(self, phase: int) -> None:
        op, payload = self.conn.request(wire.OP_ROUND_DONE, struct.pack("<I", phase))
        wire.check_response(op, payload, wire.OP_ROUND_DONE)

    def close(self) -> None:
        self.conn.close()


class FederatedClient:
    """One participant: local subgraph, training loop, store traffic."""

    def __init__(self, client_id: int, sub: PartitionedSubgraph, plan: RoundPlan,
                 num_rounds: int, seed: int, retain: int | None,
                 agg_conn, emb_conn_factory=None, window: int = 8192):
        self.client_id = client_id
        self.plan = plan
        self.num_rounds = num_rounds
        self.seed = seed
        self.window = window
        self.agg = AggregationClient(agg_conn)
        self._emb_factory = emb_conn_factory
        self.emb: EmbeddingClient | None = None
        self._emb_push: EmbeddingClient | None = None
        effective = retain if plan.use_embeddings else 0
        self.sub = prune(sub, effective, seed_seq(seed, TAG_PRUNE, client_id))
        off, tgt = self.sub.local_only_csr()
        self._local_offsets = off
        self._local_targets = tgt
        self.train_nodes = self.sub.local_train_nodes()
        self._labels = self.sub.labels.astype(np.int64)
        self.reports: list[ClientReport] = []

    # feature/cache accessors handed to the model code
    def _features_of(self, global_ids: np.ndarray) -> np.ndarray:
        return self.sub.features[self.sub.local_index(global_ids)]

    @staticmethod
    def _cache_fn_from(cache: dict | None):
        def fn(global_ids: np.ndarray, layer: int) -> np.ndarray:
            if cache is None or layer not in cache:
                raise RuntimeError(f"no cached embeddings for layer {layer}")
            nodes, mat = cache[layer]
            idx = np.searchsorted(nodes, global_ids)
            if np.any(idx >= nodes.size) or np.any(nodes[idx] != global_ids):
                raise RuntimeError("cache miss for remote vertex")
            return mat[idx]

        return fn

    def _boundary_rows(self, params: ModelParams) -> list:
        """Hidden activations of this client's push set, one block per layer."""
        upto = params.num_layers - 1
        if upto < 1 or self.sub.push_nodes.size == 0:
            return []
        outs = layerwise_inference(
            params, self._local_offsets, self._local_targets, self.sub.features, upto
        )
        pos = self.sub.local_index(self.sub.push_nodes)
        return [h[pos] for h in outs]

    def _send_boundary(self, emb: EmbeddingClient, rows_per_layer: list, version: int) -> int:
        nodes = self.sub.push_nodes
        written = 0
        for layer, rows in enumerate(rows_per_layer, start=1):
            layers = np.full(nodes.size, layer, dtype=np.uint8)
            versions = np.full(nodes.size, version, dtype=np.uint32)
            written += emb.batch_set(nodes, layers, versions, rows)
        return written

    def _check_manifest(self, man_local: np.ndarray, man_remote: np.ndarray) -> None:
        push = np.unique(np.asarray(man_local, dtype=np.int64))
        if push.size != self.sub.push_nodes.size or np.any(push != self.sub.push_nodes):
            raise RuntimeError(
                f"client {self.client_id}: server manifest push set disagrees with local graph"
            )
        halo = np.unique(np.asarray(man_remote, dtype=np.int64))
        if self.sub.pull_nodes.size and not np.all(np.isin(self.sub.pull_nodes, halo)):
            raise RuntimeError(
                f"client {self.client_id}: pull set not covered by server manifest"
            )

    def _pull_halo(self, num_layers: int) -> dict | None:
        pull = self.sub.pull_nodes
        if pull.size == 0 or num_layers < 2:
            return {}
        nodes = np.tile(pull, num_layers - 1)
        layers = np.repeat(np.arange(1, num_layers, dtype=np.int64), pull.size)
        mat, _versions = self.emb.batch_get(nodes, layers)
        return {
            l: (pull, mat[(l - 1) * pull.size : l * pull.size])
            for l in range(1, num_layers)
        }

    def run_session(self) -> None:
        try:
            self.agg.register(self.client_id)
            blob = self.agg.get_model(0)
            params0 = params_from_bytes(blob)
            if self.plan.use_embeddings:
                self.emb = EmbeddingClient(self._emb_factory(), window=self.window)
                self.emb.hello(self.client_id)
                man_local, man_remote, _owners = self.emb.remote_neighbors()
                self._check_manifest(man_local, man_remote)
                rows = self._boundary_rows(params0)
                if rows:
                    self._send_boundary(self.emb, rows, 0)
            self.agg.round_done(0)
            blob_in = blob
            for r in range(1, self.num_rounds + 1):
                if r > 1:
                    blob_in = self.agg.get_model(r - 1)
                params = params_from_bytes(blob_in)
                report = self.run_round(r, params)
                self.agg.put_model(
                    r, report.num_train_samples, params_to_bytes(params), report.timings()
                )
                self.reports.append(report)
        finally:
            for client in (self.emb, self._emb_push):
                if client is not None:
                    try:
                        client.close()
                    except Exception:
                        pass
            try:
                self.agg.close()
            except Exception:
                pass

    def run_round(self, round_id: int, params: ModelParams) -> ClientReport:
        plan = self.plan
        t_round = time.perf_counter()
        pull_s = sample_s = train_s = push_s = 0.0

        cache = None
        if plan.use_embeddings:
            t0 = time.perf_counter()
            cache = self._pull_halo(params.num_layers)
            pull_s = time.perf_counter() - t0
        # nobody may overwrite the store with this round's embeddings until
        # every client has finished reading the previous round's
        self.agg.round_done(round_id)
        cache_fn = self._cache_fn_from(cache)

        adam = AdamState.create(params, plan.lr)
        overlap = plan.overlap_push and plan.use_embeddings
        worker: threading.Thread | None = None
        worker_box: dict = {}

        n_samples = 0
        for e in range(plan.epochs):
            rng = derive_rng(self.seed, TAG_SHUFFLE, self.client_id, round_id, e)
            order = rng.permutation(self.train_nodes)
            for bi, start in enumerate(range(0, order.size, plan.batch_size)):
                batch = order[start : start + plan.batch_size]
                t0 = time.perf_counter()
                cg = sample_minibatch(
                    self.sub,
                    batch,
                    plan.fanout,
                    seed_seq(self.seed, TAG_SAMPLE, self.client_id, round_id, e, bi),
                )
                sample_s += time.perf_counter() - t0
                t0 = time.perf_counter()
                labels = self._labels[self.sub.local_index(cg.targets)]
                _loss, grads = loss_and_grad(
                    params, cg, self._features_of, cache_fn, labels
                )
                adam_step(params, grads, adam)
                train_s += time.perf_counter() - t0
                n_samples += int(batch.size)
            if overlap and e == plan.epochs - 2:
                # boundary rows come from the pre-final-epoch parameters;
                # computing them here keeps the worker free of any numpy
                # work that would contend with the final epoch
                rows = self._boundary_rows(params)
                worker = threading.Thread(
                    target=self._overlap_push,
                    args=(rows, round_id, worker_box),
                    daemon=True,
                )
                worker.start()

        if plan.use_embeddings:
            t0 = time.perf_counter()
            if worker is not None:
                # push started during the last epoch; bill only the residual wait
                worker.join()
                if "error" in worker_box:
                    raise worker_box["error"]
            else:
                rows = self._boundary_rows(params)
                if rows:
                    self._send_boundary(self.emb, rows, round_id)
            push_s = time.perf_counter() - t0

        round_s = time.perf_counter() - t_round
        return ClientReport(
            client_id=self.client_id,
            round=round_id,
            num_train_samples=n_samples,
            pull_s=pull_s,
            sample_s=sample_s,
            train_s=train_s,
            push_s=push_s,
            round_s=round_s,
        )

    def _overlap_push(self, rows: list, version: int, box: dict) -> None:
        try:
            if not rows:
                return
            if self._emb_push is None:
                self._emb_push = EmbeddingClient(self._emb_factory(), window=self.window)
                self._emb_push.hello(self.client_id)
            self._send_boundary(self._emb_push, rows, version)
        except Exception as exc:  # surfaced by the joining thread
            box["error"] = exc


# --- orchestration ---


def dataset_for(cfg: RunConfig) -> Graph:
    if cfg.dataset.startswith("synth:"):
        return synth_graph(parse_synth_string(cfg.dataset))
    return load_graph(cfg.dataset)


def partition_for(cfg: RunConfig, g: Graph) -> PartitionAssignment:
    if cfg.partition_file:
        return read_partition_file(cfg.partition_file, g.num_nodes, cfg.clients)
    return partition(g, cfg.clients, cfg.seed)


def build_plan(cfg: RunConfig) -> RoundPlan:
    return RoundPlan(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        fanout=Fanout(cfg.fanout),
        lr=cfg.lr,
        use_embeddings=cfg.use_embeddings(),
        overlap_push=cfg.effective_overlap(),
    )


def _initial_params(cfg: RunConfig, g: Graph) -> ModelParams:
    dims = model_dims(cfg.num_layers, g.feature_dim, cfg.hidden_dim, g.num_classes)
    return glorot_init(dims, seed_seq(cfg.seed, TAG_INIT))


def orchestrate(cfg: RunConfig, g: Graph | None = None,
                pa: PartitionAssignment | None = None) -> GlobalModelState:
    """Run a full federated session and return the aggregated results."""
    cfg.validate()
    if g is None:
        g = dataset_for(cfg)
    if pa is None:
        pa = partition_for(cfg, g)
    subs, manifest = build_subgraphs(g, pa)
    plan = build_plan(cfg)
    init_blob = params_to_bytes(_initial_params(cfg, g))

    emb_core = EmbeddingStore(manifest, cfg.num_layers) if plan.use_embeddings else None
    key_counts: dict = {}
    store_stats: dict = {}

    def on_round_complete(r: int) -> None:
        if emb_core is not None:
            key_counts[r] = emb_core.counters_snapshot()
            s = emb_core.stats()
            store_stats[r] = (s.num_keys, s.bytes_resident)
        else:
            key_counts[r] = {}
            store_stats[r] = (0, 0)

    agg = AggregationCore(
        cfg.clients,
        cfg.rounds,
        init_blob,
        evaluate_fn=lambda p: evaluate(p, g),
        on_round_complete=on_round_complete,
        timeout_s=cfg.rpc_timeout_s,
    )

    if cfg.transport == "inproc":
        _run_inproc(cfg, plan, subs, agg, emb_core)
    else:
        _run_tcp(cfg, agg, emb_core)

    final = params_from_bytes(agg.models[cfg.rounds])
    state = GlobalModelState(
        params=final,
        round=cfg.rounds,
        history=list(agg.history),
        round_params=[params_from_bytes(agg.models[r]) for r in range(cfg.rounds + 1)],
        client_timings={
            r: {cid: (rep[0], rep[2], rep[3]) for cid, rep in per.items()}
            for r, per in agg.reports.items()
        },
        key_counts=key_counts,
        store_stats=store_stats,
    )
    return state


def _run_inproc(cfg, plan, subs, agg, emb_core) -> None:
    errors: dict[int, BaseException] = {}

    def run_one(cid: int) -> None:
        try:
            emb_factory = None
            if plan.use_embeddings:
                emb_factory = lambda: InprocConnection(emb_core)
            fc = FederatedClient(
                cid, subs[cid], plan, cfg.rounds, cfg.seed, cfg.effective_retain(),
                InprocConnection(agg), emb_factory, window=cfg.pipeline_window,
            )
            fc.run_session()
        except BaseException as exc:
            errors[cid] = exc
            agg.abort(f"client {cid}: {exc!r}")

    threads = [
        threading.Thread(target=run_one, args=(cid,), daemon=True)
        for cid in range(cfg.clients)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(cfg.rpc_timeout_s)
    alive = [t for t in threads if t.is_alive()]
    if alive:
        agg.abort("client threads stalled")
        raise RuntimeError("run did not finish within the timeout")
    if errors:
        cid = sorted(errors)[0]
        raise RuntimeError(f"client {cid} failed: {errors[cid]!r}") from errors[cid]


def _client_process_main(cfg_json: str, client_id: int, agg_port: int, emb_port: int) -> None:
    """Entry point for one spawned client process (tcp transport)."""
    try:
        # the overlap push worker shares this process with the trainer; a
        # finer switch interval keeps its socket I/O progressing while the
        # trainer runs short CPU-bound steps
        sys.setswitchinterval(0.002)
        cfg = RunConfig.from_json(cfg_json)
        g = dataset_for(cfg)
        pa = partition_for(cfg, g)
        subs, _manifest = build_subgraphs(g, pa)
        plan = build_plan(cfg)
        agg_conn = TcpConnection("127.0.0.1", agg_port, timeout=cfg.rpc_timeout_s)
        emb_factory = None
        if plan.use_embeddings:
            emb_factory = lambda: TcpConnection(
                "127.0.0.1", emb_port, timeout=cfg.rpc_timeout_s
            )
        fc = FederatedClient(
            client_id, subs[client_id], plan, cfg.rounds, cfg.seed,
            cfg.effective_retain(), agg_conn, emb_factory, window=cfg.pipeline_window,
        )
        fc.run_session()
    except Exception:
        traceback.print_exc(file=sys.stderr)
        sys.exit(1)


def _run_tcp(cfg, agg, emb_core) -> None:
    agg_server = TcpServer(agg, delay_s=cfg.net_delay_s)
    emb_server = TcpServer(emb_core, delay_s=cfg.net_delay_s) if emb_core is not None else None
    procs: list = []
    try:
        ctx = multiprocessing.get_context("spawn")
        cfg_json = cfg.to_json()
        emb_port = emb_server.port if emb_server is not None else 0
        procs = [
            ctx.Process(
                target=_client_process_main,
                args=(cfg_json, cid, agg_server.port, emb_port),
                daemon=True,
            )
            for cid in range(cfg.clients)
        ]
        for p in procs:
            p.start()
        deadline = time.monotonic() + cfg.rpc_timeout_s
        while not agg.finished():
            if agg.failed is not None:
                raise RuntimeError(f"run aborted: {agg.failed}")
            dead = [
                (i, p.exitcode) for i, p in enumerate(procs)
                if not p.is_alive() and p.exitcode not in (0, None)
            ]
            if dead:
                cid, code = dead[0]
                agg.abort(f"client process {cid} exited with {code}")
                raise RuntimeError(f"client process {cid} exited with code {code}")
            if time.monotonic() > deadline:
                agg.abort("orchestrator timeout")
                raise RuntimeError("run did not finish within the timeout")
            time.sleep(0.05)
        for p in procs:
            p.join(cfg.rpc_timeout_s)
            if p.is_alive():
                raise RuntimeError("client process failed to exit after the final round")
            if p.exitcode != 0:
                raise RuntimeError(f"client process exited with code {p.exitcode}")
    finally:
        for p in procs:
            if p.is_alive():
                p.terminate()
        agg_server.close()
        if emb_server is not None:
            emb_server.close()
