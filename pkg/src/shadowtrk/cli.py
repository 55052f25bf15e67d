"""Command-line entry point: generate, train, evaluate and two benchmarks.

Every command writes ``run.json`` (the resolved configuration) next to its
outputs. Options can also come from a flat ``key = value`` file given with
``--config``; keys are flag names without the leading dashes. Explicit flags
win over the file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import EventFormatError, PRESETS, gen_config_dict, generate_dataset, generate_event, load_dataset, preset, write_dataset
from .ignn import load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, bulk_shadow, prepare_graph, shadow_reference
from .tracks import classify_edges, connected_components, threshold_sweep
from .trainer import (
    RingGroup,
    TrainConfig,
    allreduce_coalesced,
    allreduce_per_tensor,
    evaluate_events,
    fit,
)

log = logging.getLogger("shadowtrk")

METRICS_HEADER = ["epoch", "mode", "loss", "val_precision", "val_recall", "steps", "allreduce_calls", "skipped_graphs"]
TIMING_HEADER = ["epoch", "t_sample_s", "t_forward_s", "t_backward_s", "t_allreduce_s", "t_optimizer_s", "t_train_s", "t_epoch_s"]
EVAL_HEADER = ["split", "threshold", "true_positives", "false_positives", "false_negatives", "precision", "recall"]
TRACKS_HEADER = ["event_id", "n_vertices", "n_edges", "predicted_edges", "track_candidates"]
BENCH_SAMPLING_HEADER = ["k", "batch_size", "depth", "fanout", "n_vertices", "n_edges", "repeats",
                         "t_bulk_s", "t_reference_s", "speedup"]
BENCH_ALLREDUCE_HEADER = ["workers", "n_tensors", "elements", "path", "calls_per_step", "steps",
                          "median_step_s", "total_s"]


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        (out_dir / "run.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


# --- argument handling -----------------------------------------------------

def _on_off(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("list entries must be positive integers")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = args._subparser
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for key, text in read_config_file(args.config).items():
        if key not in actions:
            raise UsageError(f"{args.config}: unknown option {key!r} for '{args.command}'")
        act = actions[key]
        try:
            values[key] = act.type(text) if act.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        if act.choices is not None and values[key] not in act.choices:
            raise UsageError(f"{args.config}: {key} must be one of {sorted(act.choices)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _add_common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="flat key = value file with defaults for this command")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="global random seed (default: %(default)s)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--mode", choices=("minibatch", "fullgraph"), default="minibatch",
                   help="minibatch subgraph sampling or whole event graphs (default: %(default)s)")
    g.add_argument("--batch-size", "-b", type=int, default=256, help="roots per minibatch (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=30, help="(default: %(default)s)")
    g.add_argument("--hidden", type=int, default=64, help="hidden width f (default: %(default)s)")
    g.add_argument("--layers", type=int, default=8, help="message-passing rounds L (default: %(default)s)")
    g.add_argument("--mlp-depth", type=int, default=2, help="hidden layers per MLP (default: %(default)s)")
    g.add_argument("--activation", choices=("relu", "tanh", "sigmoid"), default="relu",
                   help="hidden activation (default: %(default)s)")
    g.add_argument("--depth", "--d", type=int, default=3, help="sampling depth d (default: %(default)s)")
    g.add_argument("--fanout", "--s", type=int, default=6, help="sampling fanout s (default: %(default)s)")
    g.add_argument("--bulk", "--k", type=int, default=1, help="minibatches sampled per bulk call k (default: %(default)s)")
    g.add_argument("--workers", type=int, default=1, help="data-parallel workers W (default: %(default)s)")
    g.add_argument("--coalesce", type=_on_off, default=True, metavar="on|off",
                   help="one all-reduce over all gradients instead of one per tensor (default: on)")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--pos-weight", type=float, default=1.0, help="weight of true edges in the loss (default: %(default)s)")
    g.add_argument("--symmetrize", type=_on_off, default=True, metavar="on|off",
                   help="sample along both edge directions (default: on)")
    g.add_argument("--roots-only-loss", type=_on_off, default=False, metavar="on|off",
                   help="restrict the loss to edges touching a batch root (default: off)")
    g.add_argument("--activation-budget", type=int, default=2_000_000_000,
                   help="full-graph mode skips graphs with edges*hidden*layers above this (default: %(default)s)")
    g.add_argument("--threshold", type=float, default=0.5, help="validation decision threshold (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowtrk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: %(default)s)")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="write a synthetic event dataset")
    _add_common(p, "data")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ex3-mini", help="(default: %(default)s)")
    p.add_argument("--n-events", type=int, default=100, help="(default: %(default)s)")
    p.add_argument("--n-tracks", type=int, default=None, help="override the preset's tracks per event")
    p.add_argument("--noise-hits", type=int, default=None, help="override the preset's noise hits per event")
    p.set_defaults(_subparser=p)

    p = subs.add_parser("train", help="train an edge classifier; writes a checkpoint and CSV metrics")
    _add_common(p, "run")
    p.add_argument("--data", required=True, help="dataset directory (from 'generate')")
    _add_model_flags(p)
    p.add_argument("--plot", action="store_true", help="also write SVG convergence and epoch-time charts")
    p.set_defaults(_subparser=p)

    p = subs.add_parser("evaluate", help="edge precision/recall of a checkpoint plus a threshold sweep")
    _add_common(p, "eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="(default: %(default)s)")
    p.add_argument("--threshold", type=float, default=0.5, help="(default: %(default)s)")
    p.add_argument("--sweep", type=_float_list, default=[round(0.05 * i, 2) for i in range(1, 20)],
                   help="comma-separated thresholds for the precision-recall curve (default: 0.05,...,0.95)")
    p.add_argument("--min-track-len", type=int, default=3, help="(default: %(default)s)")
    p.set_defaults(_subparser=p)

    p = subs.add_parser("bench-sampling", help="time bulk sampling against repeated per-batch sampling")
    _add_common(p, "bench")
    p.add_argument("--data", default=None, help="dataset directory; without it one event is generated")
    p.add_argument("--event", type=int, default=0, help="event index within the training split (default: %(default)s)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ex3", help="generated event preset (default: %(default)s)")
    p.add_argument("--n-tracks", type=int, default=None)
    p.add_argument("--noise-hits", type=int, default=None)
    p.add_argument("--k", type=_int_list, default=[1, 2, 4, 8], help="bulk counts (default: 1,2,4,8)")
    p.add_argument("--batch-size", "-b", type=int, default=256, help="(default: %(default)s)")
    p.add_argument("--depth", "--d", type=int, default=3, help="(default: %(default)s)")
    p.add_argument("--fanout", "--s", type=int, default=6, help="(default: %(default)s)")
    p.add_argument("--repeats", type=int, default=5, help="timed repetitions; the median is reported (default: %(default)s)")
    p.set_defaults(_subparser=p)

    p = subs.add_parser("bench-allreduce", help="time coalesced against per-tensor gradient all-reduce")
    _add_common(p, "bench")
    p.add_argument("--workers", type=_int_list, default=[1, 2, 4], help="world sizes (default: 1,2,4)")
    p.add_argument("--tensors", type=int, default=34, help="gradient tensors per step (default: %(default)s)")
    p.add_argument("--shape", type=_int_list, default=[64, 64], help="rows,cols of each tensor (default: 64,64)")
    p.add_argument("--steps", type=int, default=20, help="(default: %(default)s)")
    p.set_defaults(_subparser=p)
    return parser


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_") and k not in ("log_level",)}


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])


# --- commands --------------------------------------------------------------

def cmd_generate(args) -> RunManifest:
    overrides = {"seed": args.seed}
    if args.n_tracks is not None:
        overrides["n_tracks"] = args.n_tracks
    if args.noise_hits is not None:
        overrides["noise_hits"] = args.noise_hits
    if args.n_events < 3:
        raise UsageError("--n-events must be at least 3 (train/val/test each need an event)")
    cfg = preset(args.preset, **overrides)
    out = _prepare_out(args.out)
    events = generate_dataset(cfg, args.n_events)
    write_dataset(out, events, args.seed, {"preset": args.preset, **gen_config_dict(cfg)})
    return RunManifest("generate", _resolved(args), args.seed,
                       outputs={"manifest": "manifest.json", "split": "split.json", "events": "events/"})


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, hidden=args.hidden, layers=args.layers,
        depth=args.depth, fanout=args.fanout, bulk=args.bulk, workers=args.workers,
        learning_rate=args.lr, pos_weight=args.pos_weight, seed=args.seed, mode=args.mode,
        coalesce=args.coalesce, mlp_depth=args.mlp_depth, activation=args.activation,
        symmetrize=args.symmetrize, roots_only_loss=args.roots_only_loss,
        activation_budget=args.activation_budget, threshold=args.threshold,
    )


def cmd_train(args) -> RunManifest:
    cfg = _train_config(args)
    data = load_dataset(args.data, ("train", "val"))
    if not data["train"]:
        raise UsageError(f"{args.data}: no training events")
    out = _prepare_out(args.out)
    params, history = fit(data["train"], data["val"], cfg)
    metrics_rows, timing_rows = [], []
    for m in history:
        metrics_rows.append({"epoch": m.epoch, "mode": m.mode, "loss": m.loss, "val_precision": m.val_precision,
                             "val_recall": m.val_recall, "steps": m.steps, "allreduce_calls": m.allreduce_calls,
                             "skipped_graphs": m.skipped_graphs})
        t = m.times
        timing_rows.append({"epoch": m.epoch, "t_sample_s": t.get("sample", 0.0), "t_forward_s": t["forward"],
                            "t_backward_s": t["backward"], "t_allreduce_s": t["allreduce"],
                            "t_optimizer_s": t["optimizer"], "t_train_s": m.t_train, "t_epoch_s": m.wall})
    _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows)
    _write_csv(out / "timing.csv", TIMING_HEADER, timing_rows)
    save_checkpoint(out / "model.ckpt", params)
    outputs = {"checkpoint": "model.ckpt", "metrics": "metrics.csv", "timing": "timing.csv"}
    if args.plot:
        outputs.update(write_plots(out, metrics_rows, timing_rows))
    return RunManifest("train", {**_resolved(args), "train_config": cfg.to_dict()}, args.seed, outputs=outputs)


def write_plots(out: Path, metrics_rows, timing_rows) -> dict:
    """SVG charts; any failure is logged and never propagates."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        epochs = [r["epoch"] for r in metrics_rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("val_precision", "val_recall"):
            ax.plot(epochs, [np.nan if r[key] is None else r[key] for r in metrics_rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.savefig(out / "convergence.svg")
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 4))
        bottom = np.zeros(len(timing_rows))
        for key in ("t_sample_s", "t_forward_s", "t_backward_s", "t_allreduce_s", "t_optimizer_s"):
            vals = np.array([r[key] for r in timing_rows])
            ax.bar(epochs, vals, bottom=bottom, label=key)
            bottom += vals
        ax.set_xlabel("epoch")
        ax.set_ylabel("seconds")
        ax.legend()
        fig.savefig(out / "epoch_time.svg")
        plt.close(fig)
        return {"convergence_plot": "convergence.svg", "epoch_time_plot": "epoch_time.svg"}
    except Exception as exc:  # plotting is best effort
        log.warning("plotting skipped: %s", exc)
        return {}


def cmd_evaluate(args) -> RunManifest:
    params = load_checkpoint(args.checkpoint)
    events = load_dataset(args.data, (args.split,))[args.split]
    if not events:
        raise UsageError(f"{args.data}: split {args.split!r} is empty")
    arch = params.arch
    for e in events:
        if e.node_features.shape[1] != arch.node_in or e.edge_features.shape[1] != arch.edge_in:
            raise UsageError(
                f"architecture mismatch: checkpoint expects {arch.node_in}/{arch.edge_in} vertex/edge features, "
                f"event {e.event_id} has {e.node_features.shape[1]}/{e.edge_features.shape[1]}"
            )
    out = _prepare_out(args.out)
    metrics, logits = evaluate_events(params, events, args.threshold)
    sweep = threshold_sweep(logits, [e.labels for e in events], args.sweep)

    def row(m):
        return {"split": args.split, "threshold": float(m.threshold), "true_positives": m.true_positives,
                "false_positives": m.false_positives, "false_negatives": m.false_negatives,
                "precision": m.precision, "recall": m.recall}

    track_rows = []
    for e, z in zip(events, logits):
        mask = classify_edges(z, args.threshold)
        found = connected_components(e.adjacency(), mask, args.min_track_len)
        track_rows.append({"event_id": e.event_id, "n_vertices": e.n, "n_edges": e.m,
                           "predicted_edges": int(mask.sum()), "track_candidates": len(found.tracks)})
    _write_csv(out / "metrics.csv", EVAL_HEADER, [row(metrics)])
    _write_csv(out / "pr_curve.csv", EVAL_HEADER, [row(m) for m in sweep])
    _write_csv(out / "tracks.csv", TRACKS_HEADER, track_rows)
    print(f"{args.split}: precision={_fmt(metrics.precision)} recall={_fmt(metrics.recall)} "
          f"at threshold {args.threshold}")
    return RunManifest("evaluate", _resolved(args), None, outputs={"metrics": "metrics.csv", "pr_curve": "pr_curve.csv", "tracks": "tracks.csv"})


def _bench_graph(args):
    if args.data:
        events = load_dataset(args.data, ("train",))["train"]
        if not 0 <= args.event < len(events):
            raise UsageError(f"--event {args.event} out of range for {len(events)} training events")
        return events[args.event]
    overrides = {"seed": args.seed}
    if args.n_tracks is not None:
        overrides["n_tracks"] = args.n_tracks
    if args.noise_hits is not None:
        overrides["noise_hits"] = args.noise_hits
    return generate_event(preset(args.preset, **overrides), np.random.default_rng([args.seed, 0]), "bench")


def bench_sampling(graph, ks, batch_size, depth, fanout, repeats, seed) -> list[dict]:
    """Median wall time of one bulk call versus k reference calls on the same roots."""
    rows = []
    for k in ks:
        cfg = SamplerConfig(depth, fanout, batch_size, k)
        roots_rng = np.random.default_rng([seed, k])
        n_roots = min(graph.n, batch_size * k)
        perm = roots_rng.permutation(graph.n)[:n_roots]
        batches = [perm[i : i + batch_size] for i in range(0, n_roots, batch_size)]
        t_bulk, t_ref = [], []
        for rep in range(repeats):
            rngs = [np.random.default_rng([seed, k, rep, i]) for i in range(len(batches))]
            t0 = time.perf_counter()
            bulk_shadow(graph, batches, cfg, rngs)
            t_bulk.append(time.perf_counter() - t0)
            rngs = [np.random.default_rng([seed, k, rep, i]) for i in range(len(batches))]
            t0 = time.perf_counter()
            for b, r in zip(batches, rngs):
                shadow_reference(graph, b, cfg, r)
            t_ref.append(time.perf_counter() - t0)
        tb, tr = statistics.median(t_bulk), statistics.median(t_ref)
        rows.append({"k": k, "batch_size": batch_size, "depth": depth, "fanout": fanout, "n_vertices": graph.n,
                     "n_edges": graph.edges.nnz, "repeats": repeats, "t_bulk_s": tb, "t_reference_s": tr,
                     "speedup": tr / tb if tb > 0 else None})
    return rows


def cmd_bench_sampling(args) -> RunManifest:
    event = _bench_graph(args)
    graph = prepare_graph(event.csr(), True)
    rows = bench_sampling(graph, args.k, args.batch_size, args.depth, args.fanout, args.repeats, args.seed)
    out = _prepare_out(args.out)
    _write_csv(out / "bench_sampling.csv", BENCH_SAMPLING_HEADER, rows)
    for r in rows:
        print(f"k={r['k']}: bulk {r['t_bulk_s']:.4f}s reference {r['t_reference_s']:.4f}s speedup {r['speedup']:.2f}x")
    return RunManifest("bench-sampling", _resolved(args), args.seed, outputs={"timing": "bench_sampling.csv"})


def bench_allreduce(world_sizes, shapes, steps, seed) -> list[dict]:
    """Per-step reduction time of both paths on random gradient tensors.

    ``shapes`` lists one shape per gradient tensor.
    """
    import threading

    rows = []
    for w in world_sizes:
        rng = np.random.default_rng([seed, w])
        grads = [[rng.standard_normal(shape) for shape in shapes] for _ in range(w)]
        for path in ("per_tensor", "coalesced"):
            comms = RingGroup(w).communicators()
            times = [[0.0] * steps for _ in range(w)]

            def run(rank):
                comm = comms[rank]
                mine = grads[rank]
                for step in range(steps):
                    t0 = time.perf_counter()
                    if path == "coalesced":
                        allreduce_coalesced(np.concatenate([g.reshape(-1) for g in mine]), comm)
                    else:
                        allreduce_per_tensor(mine, comm)
                    times[rank][step] = time.perf_counter() - t0

            threads = [threading.Thread(target=run, args=(r,)) for r in range(w)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            step_times = [max(times[r][s] for r in range(w)) for s in range(steps)]
            rows.append({"workers": w, "n_tensors": len(shapes), "elements": sum(int(np.prod(s)) for s in shapes),
                         "path": path, "calls_per_step": comms[0].calls // steps, "steps": steps,
                         "median_step_s": statistics.median(step_times), "total_s": sum(step_times)})
    return rows


def cmd_bench_allreduce(args) -> RunManifest:
    if len(args.shape) != 2:
        raise UsageError("--shape takes rows,cols")
    rows = bench_allreduce(args.workers, [tuple(args.shape)] * args.tensors, args.steps, args.seed)
    out = _prepare_out(args.out)
    _write_csv(out / "bench_allreduce.csv", BENCH_ALLREDUCE_HEADER, rows)
    for r in rows:
        print(f"W={r['workers']} {r['path']}: {r['calls_per_step']} calls/step, median {r['median_step_s']:.6f}s")
    return RunManifest("bench-allreduce", _resolved(args), args.seed, outputs={"timing": "bench_allreduce.csv"})


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench-sampling": cmd_bench_sampling,
    "bench-allreduce": cmd_bench_allreduce,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        manifest = COMMANDS[args.command](args)
        manifest.write(Path(args.out))
    except (UsageError, ValueError, KeyError, OSError, EventFormatError) as exc:
        print(f"shadowtrk {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
