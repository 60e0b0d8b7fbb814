"""Federated GNN training over partitioned subgraphs with an embedding store."""

from .config import RunConfig
from .graph import Graph, SbmSpec, load_graph, save_graph, synth_graph
from .nn import ModelParams, glorot_init, params_from_bytes, params_to_bytes
from .partition import build_subgraphs, edge_cut, partition
from .runtime import GlobalModelState, evaluate, fedavg, orchestrate
from .sampler import Fanout, prune, sample_minibatch
from .store import EmbeddingClient, EmbeddingStore

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "Graph",
    "SbmSpec",
    "load_graph",
    "save_graph",
    "synth_graph",
    "ModelParams",
    "glorot_init",
    "params_from_bytes",
    "params_to_bytes",
    "build_subgraphs",
    "edge_cut",
    "partition",
    "GlobalModelState",
    "evaluate",
    "fedavg",
    "orchestrate",
    "Fanout",
    "prune",
    "sample_minibatch",
    "EmbeddingClient",
    "EmbeddingStore",
    "__version__",
]
