"""In-memory embedding store: keyed vectors behind the shared wire protocol.

Keys are (node id, layer) with layer restricted to 1..L-1; storing a
layer-0 vector is rejected because raw input features must never leave
their owning client. Values keep the exact bytes they arrived with, so a
get returns bit-identical vectors. Batches apply atomically under one
lock: a concurrent reader sees either none or all of a batch.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import wire
from .partition import CrossEdgeManifest
from .wire import ProtocolError


@dataclass
class StoreStats:
    num_keys: int
    bytes_resident: int


class EmbeddingStore:
    """Server core; drives both transports through handle()."""

    def __init__(self, manifest: CrossEdgeManifest | None, num_layers: int, dim: int | None = None):
        self.manifest = manifest
        self.num_layers = int(num_layers)
        self._dim = dim
        self._kv: dict[tuple[int, int], tuple[bytes, int]] = {}
        self._lock = threading.RLock()
        self.frames_by_opcode: dict[int, int] = {}
        self.pulled_keys_total = 0
        self.pushed_keys_total = 0
        self.per_client: dict[int, dict[str, int]] = {}

    # ------------------------------------------------------------- direct API

    def _client_slot(self, client_id) -> dict:
        slot = self.per_client.setdefault(
            int(client_id) if client_id is not None else -1, {"pulled": 0, "pushed": 0}
        )
        return slot

    def batch_set(self, nodes, layers, versions, vectors: np.ndarray, client_id=None) -> int:
        """Store a batch atomically; validates every record before any write."""
        vectors = np.ascontiguousarray(vectors, dtype="<f4")
        with self._lock:
            dim = vectors.shape[1] if vectors.ndim == 2 else 0
            if dim == 0:
                raise ProtocolError(wire.ERR_MALFORMED, "batch_set: empty vectors")
            if self._dim is None:
                self._dim = dim
            elif dim != self._dim:
                raise ProtocolError(
                    wire.ERR_DIM_MISMATCH, f"batch_set: dim {dim} != store dim {self._dim}"
                )
            for layer in np.unique(layers):
                if not 1 <= layer <= self.num_layers - 1:
                    raise ProtocolError(
                        wire.ERR_LAYER_RANGE,
                        f"batch_set: layer {int(layer)} outside 1..{self.num_layers - 1} "
                        "(layer 0 holds raw features and never leaves its client)",
                    )
            raw = vectors.tobytes()
            width = 4 * dim
            for i, (node, layer, version) in enumerate(zip(nodes, layers, versions)):
                self._kv[(int(node), int(layer))] = (raw[i * width : (i + 1) * width], int(version))
            self.pushed_keys_total += len(nodes)
            self._client_slot(client_id)["pushed"] += len(nodes)
            return len(nodes)

    def batch_get(self, nodes, layers, client_id=None):
        """Fetch a batch atomically, in request order. Missing keys are errors."""
        with self._lock:
            rows = []
            versions = np.empty(len(nodes), dtype=np.int64)
            for i, (node, layer) in enumerate(zip(nodes, layers)):
                hit = self._kv.get((int(node), int(layer)))
                if hit is None:
                    raise ProtocolError(
                        wire.ERR_MISSING_KEY, f"batch_get: no value for key ({int(node)},{int(layer)})"
                    )
                rows.append(hit[0])
                versions[i] = hit[1]
            self.pulled_keys_total += len(nodes)
            self._client_slot(client_id)["pulled"] += len(nodes)
            if not rows:
                return np.empty((0, self._dim or 0), dtype=np.float32), versions
            mat = np.frombuffer(b"".join(rows), dtype="<f4").reshape(len(rows), -1)
            return mat, versions

    def stats(self) -> StoreStats:
        with self._lock:
            total = sum(len(raw) for raw, _ in self._kv.values())
            return StoreStats(num_keys=len(self._kv), bytes_resident=total)

    def version_of(self, node: int, layer: int) -> int | None:
        with self._lock:
            hit = self._kv.get((int(node), int(layer)))
            return None if hit is None else hit[1]

    def counters_snapshot(self) -> dict[int, dict[str, int]]:
        with self._lock:
            return {cid: dict(slot) for cid, slot in self.per_client.items()}

    def frames_handled(self, opcode: int | None = None) -> int:
        with self._lock:
            if opcode is None:
                return sum(self.frames_by_opcode.values())
            return self.frames_by_opcode.get(opcode, 0)

    # --------------------------------------------------------------- protocol

    def handle(self, state: dict, opcode: int, payload: bytes):
        with self._lock:
            self.frames_by_opcode[opcode] = self.frames_by_opcode.get(opcode, 0) + 1
        if opcode == wire.OP_HELLO:
            cid = wire.dec_u32(payload, "hello")
            if self.manifest is not None and cid >= self.manifest.num_parts:
                raise ProtocolError(wire.ERR_MALFORMED, f"hello: unknown client {cid}")
            state["client_id"] = cid
            return wire.OP_HELLO | wire.RESP_BIT, b""
        if opcode == wire.OP_GET_NEIGHBORS:
            cid = state.get("client_id")
            if cid is None:
                raise ProtocolError(wire.ERR_NO_HELLO, "get_neighbors before hello")
            if self.manifest is None:
                raise ProtocolError(wire.ERR_STATE, "no cut manifest loaded")
            local, remote, owner = self.manifest.slice_for(cid)
            return wire.OP_GET_NEIGHBORS | wire.RESP_BIT, wire.enc_neighbors(local, remote, owner)
        if opcode == wire.OP_BATCH_GET:
            nodes, layers = wire.dec_keys(payload)
            mat, versions = self.batch_get(nodes, layers, client_id=state.get("client_id"))
            return wire.OP_BATCH_GET | wire.RESP_BIT, wire.enc_records(nodes, layers, versions, mat)
        if opcode == wire.OP_BATCH_SET:
            nodes, layers, versions, vecs = wire.dec_records(payload)
            n = self.batch_set(nodes, layers, versions, vecs, client_id=state.get("client_id"))
            return wire.OP_BATCH_SET | wire.RESP_BIT, wire.enc_u32(n)
        if opcode == wire.OP_STATS:
            st = self.stats()
            return wire.OP_STATS | wire.RESP_BIT, struct.pack("<QQ", st.num_keys, st.bytes_resident)
        raise ProtocolError(wire.ERR_BAD_OPCODE, f"unknown opcode {opcode:#x}")


class EmbeddingClient:
    """Typed wrapper over a Connection; chunks large batches into a pipeline."""

    def __init__(self, conn: wire.Connection, window: int = 8192):
        self.conn = conn
        self.window = max(1, int(window))

    def hello(self, client_id: int) -> None:
        op, pl = self.conn.request(wire.OP_HELLO, wire.enc_u32(client_id))
        wire.check_response(op, pl, wire.OP_HELLO)

    def remote_neighbors(self):
        op, pl = self.conn.request(wire.OP_GET_NEIGHBORS, b"")
        return wire.dec_neighbors(wire.check_response(op, pl, wire.OP_GET_NEIGHBORS))

    def batch_get(self, nodes: np.ndarray, layers: np.ndarray):
        """Pipelined get; returns (float32 matrix, versions) in request order."""
        nodes = np.asarray(nodes, dtype=np.int64)
        layers = np.asarray(layers, dtype=np.int64)
        frames = [
            (wire.OP_BATCH_GET, wire.enc_keys(nodes[i : i + self.window], layers[i : i + self.window]))
            for i in range(0, nodes.size, self.window)
        ]
        mats, vers = [], []
        for op, pl in self.conn.request_many(frames):
            body = wire.check_response(op, pl, wire.OP_BATCH_GET)
            _, _, v, mat = wire.dec_records(body)
            mats.append(np.array(mat, dtype=np.float32))
            vers.append(v)
        if not mats:
            return np.empty((0, 0), dtype=np.float32), np.empty(0, dtype=np.int64)
        return np.concatenate(mats), np.concatenate(vers)

    def batch_set(self, nodes, layers, versions, vectors: np.ndarray) -> int:
        nodes = np.asarray(nodes, dtype=np.int64)
        layers = np.asarray(layers, dtype=np.int64)
        versions = np.asarray(versions, dtype=np.int64)
        frames = []
        for i in range(0, nodes.size, self.window):
            j = i + self.window
            frames.append(
                (wire.OP_BATCH_SET, wire.enc_records(nodes[i:j], layers[i:j], versions[i:j], vectors[i:j]))
            )
        done = 0
        for op, pl in self.conn.request_many(frames):
            done += wire.dec_u32(wire.check_response(op, pl, wire.OP_BATCH_SET), "set ack")
        return done

    def stats(self) -> StoreStats:
        op, pl = self.conn.request(wire.OP_STATS, b"")
        body = wire.check_response(op, pl, wire.OP_STATS)
        num_keys, total = struct.unpack("<QQ", body)
        return StoreStats(num_keys=num_keys, bytes_resident=total)

    def close(self):
        self.conn.close()
