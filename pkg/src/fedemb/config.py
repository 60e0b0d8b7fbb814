"""Run configuration: defaults, config-file parsing, CLI overrides.

Config files are flat key=value lines (# comments allowed). Every key has
the same name as the RunConfig field; CLI flags override file values,
which override defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

MODES = ("vanilla", "embc", "opes")
TRANSPORTS = ("inproc", "tcp")


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_retain(raw: str):
    v = raw.strip().lower()
    if v in ("inf", "none", "unlimited", ""):
        return None
    n = int(v)
    if n < 0:
        raise ValueError("retain must be >= 0 or 'inf'")
    return n


def _parse_fanout(raw: str):
    return tuple(int(x) for x in str(raw).replace(" ", "").split(",") if x)


@dataclass
class RunConfig:
    # dataset: a directory path, or "synth:blocks=..,nodes_per_block=..,..."
    dataset: str = ""
    mode: str = "opes"
    clients: int = 4
    rounds: int = 30
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.001
    num_layers: int = 3
    hidden_dim: int = 32
    fanout: tuple = (10, 10, 10)
    retain: int | None = 4
    overlap: bool = False
    seed: int = 7
    transport: str = "inproc"
    partition_file: str | None = None
    out_dir: str = "runs/out"
    pipeline_window: int = 8192
    net_delay_s: float = 0.0
    rpc_timeout_s: float = 300.0

    def validate(self) -> None:
        if not self.dataset:
            raise ValueError("config: dataset is required")
        if self.mode not in MODES:
            raise ValueError(f"config: mode must be one of {MODES}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"config: transport must be one of {TRANSPORTS}")
        if self.clients < 1:
            raise ValueError("config: clients must be >= 1")
        if self.rounds < 0:
            raise ValueError("config: rounds must be >= 0")
        if self.epochs < 1:
            raise ValueError("config: epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("config: batch_size must be >= 1")
        if self.num_layers < 1:
            raise ValueError("config: num_layers must be >= 1")
        if len(self.fanout) != self.num_layers:
            raise ValueError("config: fanout must list one value per layer")
        if self.mode != "vanilla" and self.num_layers < 2:
            raise ValueError("config: embedding exchange needs num_layers >= 2")
        if self.seed < 0:
            raise ValueError("config: seed must be >= 0")
        if self.retain is not None and self.retain < 0:
            raise ValueError("config: retain must be >= 0 or unlimited")

    # mode semantics: vanilla never touches the store; embc is the unlimited
    # no-overlap configuration; opes honors retain/overlap as given
    def use_embeddings(self) -> bool:
        return self.mode != "vanilla"

    def effective_retain(self) -> int | None:
        if self.mode == "vanilla":
            return 0
        if self.mode == "embc":
            return None
        return self.retain

    def effective_overlap(self) -> bool:
        return bool(self.overlap) and self.mode == "opes"

    def to_json(self) -> str:
        d = asdict(self)
        d["fanout"] = list(self.fanout)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        d["fanout"] = tuple(d["fanout"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        cfg = cls()
        pairs = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
        cfg.apply(pairs)
        return cfg

    def apply(self, pairs: dict) -> None:
        """Apply string key/value overrides with per-field coercion."""
        for key, raw in pairs.items():
            if key not in _PARSERS:
                raise ValueError(f"config: unknown key {key!r}")
            setattr(self, key, _PARSERS[key](raw))


_PARSERS = {
    "dataset": str,
    "mode": lambda v: str(v).lower(),
    "clients": int,
    "rounds": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "num_layers": int,
    "hidden_dim": int,
    "fanout": _parse_fanout,
    "retain": _parse_retain,
    "overlap": _parse_bool,
    "seed": int,
    "transport": str,
    "partition_file": lambda v: str(v) or None,
    "out_dir": str,
    "pipeline_window": int,
    "net_delay_s": float,
    "rpc_timeout_s": float,
}
