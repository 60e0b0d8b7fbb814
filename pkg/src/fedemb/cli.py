"""Command line harness.

Verbs:
  synth      write a synthetic block-structured dataset to a directory
  partition  compute and save a partition assignment for a dataset
  run        execute a federated training run and write metrics
  tta        compare time-to-accuracy across finished runs
  footprint  report store occupancy and key traffic for finished runs
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig
from .graph import SbmSpec, load_graph, save_graph, synth_graph
from .metrics import MetricsRow, analyze_tta, footprint_report, write_metrics
from .partition import boundary_fraction, edge_cut, partition, write_partition_file
from .runtime import GlobalModelState, dataset_for, orchestrate, partition_for


def rows_from_state(cfg: RunConfig, state: GlobalModelState) -> list:
    rows = []
    for r, wall, acc in state.history:
        rows.append(
            MetricsRow(
                scope="server", round=r, test_accuracy=acc, wall_clock_s=wall
            )
        )
    track_keys = cfg.use_embeddings()

    def cum(r: int, cid: int, kind: str) -> int:
        return state.key_counts.get(r, {}).get(cid, {}).get(kind, 0)

    for r in range(1, cfg.rounds + 1):
        per = state.client_timings.get(r, {})
        for cid in sorted(per):
            n, t5, wall = per[cid]
            pull_s, sample_s, train_s, push_s, round_s = t5
            rows.append(
                MetricsRow(
                    scope=f"client_{cid}",
                    round=r,
                    pull_s=pull_s,
                    sample_s=sample_s,
                    train_s=train_s,
                    push_s=push_s,
                    round_s=round_s,
                    wall_clock_s=wall,
                    pulled_keys=(cum(r, cid, "pulled") - cum(r - 1, cid, "pulled"))
                    if track_keys
                    else None,
                    pushed_keys=(cum(r, cid, "pushed") - cum(r - 1, cid, "pushed"))
                    if track_keys
                    else None,
                )
            )
    return rows


def run_experiment(cfg: RunConfig) -> tuple:
    """Run one configuration end to end and write metrics.csv + summary.json."""
    cfg.validate()
    g = dataset_for(cfg)
    pa = partition_for(cfg, g)
    state = orchestrate(cfg, g, pa)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = rows_from_state(cfg, state)
    write_metrics(rows, out / "metrics.csv")

    last = state.key_counts.get(cfg.rounds, {})
    pretrain_stats = state.store_stats.get(0, (0, 0))
    final_stats = state.store_stats.get(cfg.rounds, pretrain_stats)
    summary = {
        "mode": cfg.mode,
        "retain": cfg.retain if cfg.mode == "opes" else (None if cfg.mode == "embc" else 0),
        "overlap": cfg.effective_overlap(),
        "clients": cfg.clients,
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "transport": cfg.transport,
        "dataset": cfg.dataset,
        "edge_cut_entries": int(edge_cut(g, pa)),
        "boundary_fraction": float(boundary_fraction(g, pa)),
        "store_keys_after_pretrain": int(pretrain_stats[0]),
        "store_bytes_after_pretrain": int(pretrain_stats[1]),
        "store_keys_final": int(final_stats[0]),
        "store_bytes_final": int(final_stats[1]),
        "total_pulled_keys": int(sum(c.get("pulled", 0) for c in last.values())),
        "total_pushed_keys": int(sum(c.get("pushed", 0) for c in last.values())),
        "final_test_accuracy": float(state.history[-1][2]),
        "peak_test_accuracy": float(max(a for _r, _w, a in state.history)),
        "total_wall_s": float(state.history[-1][1]),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return out, state


def _cmd_synth(args) -> int:
    spec = SbmSpec(
        blocks=args.blocks,
        nodes_per_block=args.nodes_per_block,
        p_intra=args.p_intra,
        p_inter=args.p_inter,
        feature_dim=args.feature_dim,
        num_classes=args.classes,
        seed=args.seed,
        feature_noise=args.noise,
    )
    g = synth_graph(spec)
    save_graph(g, args.out)
    print(
        f"wrote {g.num_nodes} nodes, {g.num_edges} directed edge entries, "
        f"{g.num_classes} classes to {args.out}"
    )
    return 0


def _cmd_partition(args) -> int:
    g = load_graph(args.data)
    pa = partition(g, args.clients, args.seed)
    write_partition_file(pa, args.out)
    cut = edge_cut(g, pa)
    frac = boundary_fraction(g, pa)
    sizes = ",".join(str(int(s)) for s in pa.part_sizes())
    print(
        f"partitioned {g.num_nodes} nodes into {args.clients} parts "
        f"(sizes {sizes}); cut entries {cut}; boundary fraction {frac:.4f}"
    )
    print(f"wrote assignment to {args.out}")
    return 0


def _cmd_run(args) -> int:
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig()
    overrides = {}
    for key in (
        "dataset", "mode", "clients", "rounds", "epochs", "batch_size", "lr",
        "num_layers", "hidden_dim", "fanout", "retain", "seed", "transport",
        "partition_file", "out_dir", "pipeline_window", "net_delay_s",
        "rpc_timeout_s",
    ):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = str(val)
    if args.overlap:
        overrides["overlap"] = "true"
    if args.no_overlap:
        overrides["overlap"] = "false"
    cfg.apply(overrides)
    out, state = run_experiment(cfg)
    final = state.history[-1]
    print(
        f"run complete: mode={cfg.mode} rounds={cfg.rounds} "
        f"final_test_accuracy={final[2]:.4f} wall={final[1]:.2f}s"
    )
    print(f"metrics: {out / 'metrics.csv'}")
    print(f"summary: {out / 'summary.json'}")
    return 0


def _cmd_tta(args) -> int:
    res = analyze_tta(args.metrics, nominal=args.nominal)
    print(f"nominal accuracy: {res.nominal:.4f}")
    for run, ratio in zip(res.runs, res.ratios):
        tta = "unreached" if run.tta_s is None else f"{run.tta_s:.3f}s"
        speed = "n/a" if ratio is None else f"{ratio:.3f}x"
        print(f"  {run.path}: peak={run.peak:.4f} tta={tta} speedup={speed}")
    if args.json:
        payload = {
            "nominal": res.nominal,
            "runs": [
                {"path": r.path, "peak": r.peak, "tta_s": r.tta_s, "speedup": ratio}
                for r, ratio in zip(res.runs, res.ratios)
            ],
        }
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n")
        print(f"wrote {args.json}")
    return 0


def _cmd_footprint(args) -> int:
    for rec in footprint_report(args.run_dirs):
        retain = "inf" if rec["retain"] is None else rec["retain"]
        print(
            f"{rec['run_dir']}: mode={rec['mode']} retain={retain} "
            f"keys={rec['store_keys_after_pretrain']} "
            f"bytes={rec['store_bytes_after_pretrain']} "
            f"pulled={rec['total_pulled_keys']} pushed={rec['total_pushed_keys']} "
            f"peak_acc={rec['peak_test_accuracy']}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedemb", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--blocks", type=int, default=4)
    ps.add_argument("--nodes-per-block", type=int, default=500)
    ps.add_argument("--p-intra", type=float, default=0.05)
    ps.add_argument("--p-inter", type=float, default=0.02)
    ps.add_argument("--feature-dim", type=int, default=16)
    ps.add_argument("--classes", type=int, default=4)
    ps.add_argument("--noise", type=float, default=1.0)
    ps.add_argument("--seed", type=int, default=7)
    ps.add_argument("--out", required=True)
    ps.set_defaults(fn=_cmd_synth)

    pp = sub.add_parser("partition", help="partition a dataset")
    pp.add_argument("--data", required=True)
    pp.add_argument("--clients", type=int, default=4)
    pp.add_argument("--seed", type=int, default=7)
    pp.add_argument("--out", required=True)
    pp.set_defaults(fn=_cmd_partition)

    pr = sub.add_parser("run", help="run a federated training experiment")
    pr.add_argument("--config", help="key=value config file")
    pr.add_argument("--dataset", "--data", dest="dataset")
    pr.add_argument("--mode", choices=("vanilla", "embc", "opes"))
    pr.add_argument("--clients", type=int)
    pr.add_argument("--rounds", type=int)
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--batch-size", dest="batch_size", type=int)
    pr.add_argument("--lr", type=float)
    pr.add_argument("--num-layers", dest="num_layers", type=int)
    pr.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    pr.add_argument("--fanout", help="comma-separated, one per layer")
    pr.add_argument("--retain", help="per-vertex remote neighbor cap, or 'inf'")
    pr.add_argument("--overlap", action="store_true", default=False)
    pr.add_argument("--no-overlap", action="store_true", default=False)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--transport", choices=("inproc", "tcp"))
    pr.add_argument("--partition-file", dest="partition_file")
    pr.add_argument("--out-dir", dest="out_dir")
    pr.add_argument("--pipeline-window", dest="pipeline_window", type=int)
    pr.add_argument("--net-delay-s", dest="net_delay_s", type=float)
    pr.add_argument("--rpc-timeout-s", dest="rpc_timeout_s", type=float)
    pr.set_defaults(fn=_cmd_run)

    pt = sub.add_parser("tta", help="time-to-accuracy comparison")
    pt.add_argument("metrics", nargs="+", help="metrics.csv files; first is the baseline")
    pt.add_argument(
        "--nominal", type=float, default=None,
        help="explicit nominal accuracy (default: lowest peak minus 0.01)",
    )
    pt.add_argument("--json", help="also write the analysis as JSON")
    pt.set_defaults(fn=_cmd_tta)

    pf = sub.add_parser("footprint", help="store footprint of finished runs")
    pf.add_argument("run_dirs", nargs="+")
    pf.set_defaults(fn=_cmd_footprint)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
