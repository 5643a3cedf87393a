"""Command-line entry point: generate, train, run, sweep, bench.

Exit codes: 0 success, 2 usage error, 1 runtime failure.  Diagnostics go to
stderr; with ``--stdout`` the command's primary data (summary JSON, sweep
CSV, bench JSON) is echoed on stdout and nothing else is.

Option values resolve as: command-line flag, then ``--config`` JSON file
(flat keys, optionally overridden by a section named after the command),
then built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .pipeline import (Models, StageCosts, evaluate, run_blocking, run_low_latency,
                       summary_json, write_records_csv)
from .propagation import (DivergenceError, PropagationConfig, PropagationNets, build_banks,
                          classify, propagate, train_propagation)
from .scheduler import (DeviationPredictor, predict_deviation, parse_policy, sweep_thresholds,
                        train_scheduler, write_sweep_csv)
from .synthvideo import (SPLITS, build_extractors, extract, extract_high, generate_sequence,
                         load_sequence, save_sequence, scene_meta, split_configs)
from .tensor_nn import load_params, save_params

log = logging.getLogger("lowlatseg")


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


DEFAULTS = {
    "generate": dict(seed=0, sequences=8, length=30, split="translating", out="data"),
    "train": dict(data="data", epochs=50, seed=0, lr=None, out_dir="runs", propagation=None,
                  no_fusion=False, no_correlation=False, k=9),
    "run": dict(data="data", sequence=0, propagation=None, scheduler=None, mode="low-latency",
                policy="fixed:5", clock="sim:17", costs="61,299,20,38", out_dir="runs",
                stdout=False),
    "sweep": dict(data="data", propagation=None, scheduler=None, mode="blocking", family=None,
                  thresholds=None, clock="sim:17", costs="61,299,20,38", out_dir="runs",
                  stdout=False),
    "bench": dict(propagation=None, scheduler=None, costs="61,299,20,38", repeats=5, seed=0,
                  out_dir="runs", stdout=False),
}

DEFAULT_GRIDS = {
    "fixed": [1, 2, 3, 4, 5, 6, 8, 10, 15, 30],
    "featdiff": [0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.2, 0.3],
    "adaptive": [0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3, 1.0],
}


# ------------------------------------------------------------------ parsing

def _parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option defaults")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="lowlatseg", description=__doc__.splitlines()[0],
                                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    g = sub.add_parser("generate", help="write synthetic sequences")
    g.add_argument("--seed", type=int)
    g.add_argument("--sequences", type=int)
    g.add_argument("--length", type=int)
    g.add_argument("--split", choices=sorted(SPLITS) + ["mixed"])
    g.add_argument("--out")

    t = sub.add_parser("train", help="train the propagation or scheduler module")
    t.add_argument("stage", choices=["propagation", "scheduler"])
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out-dir")
    t.add_argument("--propagation", help="propagation checkpoint (scheduler stage)")
    t.add_argument("--no-fusion", action="store_true", default=None,
                   help="classifier sees propagated high-level features only")
    t.add_argument("--no-correlation", action="store_true", default=None,
                   help="kernel predictor sees only the reduced feature pair")
    t.add_argument("--k", type=int, help="kernel size of the spatially variant convolution")

    def run_like(sp):
        sp.add_argument("--data")
        sp.add_argument("--propagation")
        sp.add_argument("--scheduler")
        sp.add_argument("--mode", choices=["blocking", "low-latency"])
        sp.add_argument("--clock", help="sim[:fps] or wall")
        sp.add_argument("--costs", help="s_l,s_h,schedule,propagate in ms")
        sp.add_argument("--out-dir")
        sp.add_argument("--stdout", action="store_true", default=None)

    r = sub.add_parser("run", help="run the pipeline over one sequence")
    run_like(r)
    r.add_argument("--sequence", type=int, help="sequence index within a dataset directory")
    r.add_argument("--policy", help="fixed:<n> | featdiff:<tau> | adaptive:<theta>")

    s = sub.add_parser("sweep", help="update ratio vs mIoU per policy family")
    run_like(s)
    s.add_argument("--family", action="append", choices=sorted(DEFAULT_GRIDS))
    s.add_argument("--thresholds", help="comma-separated values (single family only)")

    b = sub.add_parser("bench", help="per-module latency table")
    b.add_argument("--propagation")
    b.add_argument("--scheduler")
    b.add_argument("--costs")
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out-dir")
    b.add_argument("--stdout", action="store_true", default=None)
    return p


def _resolve(args: argparse.Namespace) -> dict:
    file_cfg = {}
    config = getattr(args, "config", None)
    if config:
        try:
            raw = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        file_cfg.update(raw.get(args.command, {}))
    defaults = DEFAULTS[args.command]
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        log.warning("ignoring unknown config keys: %s", ", ".join(sorted(unknown)))
    out = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        out[key] = value if value is not None else file_cfg.get(key, default)
    if args.command == "train":
        out["stage"] = args.stage
    return out


def _parse_costs(text) -> StageCosts:
    if isinstance(text, StageCosts):
        return text
    parts = str(text).split(",")
    if len(parts) != 4:
        raise UsageError("--costs needs four comma-separated values")
    try:
        return StageCosts(*(float(x) for x in parts))
    except ValueError as exc:
        raise UsageError(f"bad --costs: {exc}") from None


def _parse_clock(text: str) -> tuple[str, float]:
    kind, _, fps = str(text).partition(":")
    if kind == "wall" and not fps:
        return "wall", 17.0
    if kind == "sim":
        try:
            value = float(fps) if fps else 17.0
        except ValueError:
            raise UsageError(f"bad frame rate in --clock {text!r}") from None
        if not value > 0 or not math.isfinite(value):
            raise UsageError("frame rate must be positive")
        return "sim", value
    raise UsageError(f"--clock must be sim[:fps] or wall, got {text!r}")


def _policy(text):
    try:
        return parse_policy(str(text))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ artifacts

def _extractor_tensor(c_l, c_h, seed=1234, high_k=5):
    return {"config.extractors": np.array([c_l, c_h, seed, high_k], dtype=float)}


def save_propagation(path, nets: PropagationNets) -> None:
    tensors = dict(nets.config_tensors())
    tensors.update(_extractor_tensor(nets.cfg.c_l, nets.cfg.c_h))
    tensors.update(nets.params())
    save_params(path, tensors)


def load_propagation(path):
    """Return ``(nets, (low_extractor, high_extractor))`` from a checkpoint."""
    tensors = load_params(path)
    try:
        nets = PropagationNets.from_tensors(tensors)
        c_l, c_h, seed, high_k = (int(v) for v in tensors["config.extractors"])
    except KeyError as exc:
        raise ValueError(f"{path}: not a propagation checkpoint (missing {exc})") from None
    return nets, build_extractors(c_l, c_h, seed, high_k)


def save_scheduler(path, predictor: DeviationPredictor) -> None:
    save_params(path, predictor.params())


def load_scheduler(path) -> DeviationPredictor:
    tensors = load_params(path)
    try:
        return DeviationPredictor.from_tensors(tensors)
    except KeyError as exc:
        raise ValueError(f"{path}: not a scheduler checkpoint (missing {exc})") from None


def load_dataset(path) -> list[tuple[str, list, list]]:
    """Sequences under ``path``; ``path`` may itself be one sequence directory."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    if (path / "frames").is_dir():
        return [(path.name, *load_sequence(path))]
    dirs = sorted(d for d in path.iterdir() if (d / "frames").is_dir())
    if not dirs:
        raise FileNotFoundError(f"{path}: no sequence directories found")
    return [(d.name, *load_sequence(d)) for d in dirs]


def _checkpoint(cfg, key, default_name):
    path = Path(cfg[key]) if cfg[key] else Path(cfg["out_dir"]) / default_name
    return path


def _write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, value in enumerate(curve):
            w.writerow([i, repr(float(value))])


def _emit(cfg, text: str) -> None:
    if cfg.get("stdout"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ------------------------------------------------------------------ commands

def cmd_generate(cfg) -> int:
    if cfg["sequences"] < 1:
        raise UsageError("--sequences must be >= 1")
    if cfg["length"] < 1:
        raise UsageError("--length must be >= 1")
    out = Path(cfg["out"])
    configs = split_configs(cfg["split"], cfg["sequences"], cfg["seed"])
    for n, scene in enumerate(configs):
        frames, labels = generate_sequence(scene, cfg["length"])
        meta = {"seed": scene.seed, "num_classes": scene.num_classes, "split": cfg["split"],
                "dataset_seed": cfg["seed"], "index": n, "length": cfg["length"],
                "config": scene_meta(scene)}
        save_sequence(out / f"seq_{n:03d}", frames, labels, meta)
    log.info("wrote %d sequences to %s", len(configs), out)
    return 0


def cmd_train(cfg) -> int:
    if cfg["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    out_dir = Path(cfg["out_dir"])
    if cfg["stage"] == "propagation":
        seqs = load_dataset(cfg["data"])
        try:
            pcfg = PropagationConfig(k=cfg["k"], use_fusion=not cfg["no_fusion"],
                                     correlation=not cfg["no_correlation"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        nets = PropagationNets.init(pcfg, cfg["seed"])
        banks = build_banks([(f, l) for _, f, l in seqs], build_extractors(pcfg.c_l, pcfg.c_h))
        lr = cfg["lr"] if cfg["lr"] is not None else 1e-3
        curve = train_propagation(banks, nets, epochs=cfg["epochs"], lr=lr, seed=cfg["seed"])
        out_dir.mkdir(parents=True, exist_ok=True)
        save_propagation(out_dir / "propagation.kprm", nets)
        _write_loss_csv(out_dir / "propagation_loss.csv", curve)
    else:
        ckpt = _checkpoint(cfg, "propagation", "propagation.kprm")
        if not ckpt.is_file():
            raise FileNotFoundError(f"scheduler training needs a propagation checkpoint; "
                                    f"{ckpt} not found (run `train propagation` first)")
        nets, extractors = load_propagation(ckpt)
        seqs = load_dataset(cfg["data"])
        banks = build_banks([(f, l) for _, f, l in seqs], extractors)
        predictor = DeviationPredictor.init(nets.cfg.c_l, nets.cfg.c_r, cfg["seed"])
        lr = cfg["lr"] if cfg["lr"] is not None else 1e-3
        curve = train_scheduler(banks, nets, predictor, epochs=cfg["epochs"], lr=lr,
                                seed=cfg["seed"], gap_range=nets.cfg.gap_range)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_scheduler(out_dir / "scheduler.kprm", predictor)
        _write_loss_csv(out_dir / "scheduler_loss.csv", curve)
    log.info("trained %s for %d epochs; outputs in %s", cfg["stage"], cfg["epochs"], out_dir)
    return 0


def _models(cfg, need_scheduler: bool) -> Models:
    nets, (low, high) = load_propagation(_checkpoint(cfg, "propagation", "propagation.kprm"))
    deviation = None
    sched = _checkpoint(cfg, "scheduler", "scheduler.kprm")
    if sched.is_file():
        deviation = load_scheduler(sched)
    elif need_scheduler:
        raise FileNotFoundError(f"adaptive policy needs a scheduler checkpoint; {sched} not found")
    return Models(low, high, nets, deviation)


def cmd_run(cfg) -> int:
    policy = _policy(cfg["policy"])
    costs = _parse_costs(cfg["costs"])
    clock, fps = _parse_clock(cfg["clock"])
    seqs = load_dataset(cfg["data"])
    if not 0 <= cfg["sequence"] < len(seqs):
        raise UsageError(f"--sequence must be in [0, {len(seqs) - 1}]")
    name, frames, labels = seqs[cfg["sequence"]]
    models = _models(cfg, policy.__class__.__name__ == "Adaptive")
    runner = run_blocking if cfg["mode"] == "blocking" else run_low_latency
    records = runner(frames, models, policy, costs, labels=labels, clock=clock, fps=fps)
    summary = evaluate(records, labels, models.num_classes)
    summary.update(basic_latency_ms=costs.basic_ms, blocking_key_latency_ms=costs.blocking_key_ms,
                   mode=cfg["mode"], policy=str(policy), sequence=name, clock=str(cfg["clock"]))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records_csv(out_dir / "run.csv", records)
    text = summary_json(summary)
    (out_dir / "summary.json").write_text(text + "\n")
    _emit(cfg, text)
    log.info("%s: mIoU %.4f, update ratio %.3f", name, summary["mean_miou"], summary["update_ratio"])
    return 0


def _parse_thresholds(text, family):
    try:
        values = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --thresholds: {exc}") from None
    if not values:
        raise UsageError("--thresholds is empty")
    if family == "fixed" and any(v < 1 or v != int(v) for v in values):
        raise UsageError("fixed intervals must be integers >= 1")
    return [int(v) for v in values] if family == "fixed" else values


def sweep_runner(seqs, models: Models, mode: str, costs: StageCosts, clock="sim", fps=17.0):
    """``run(policy) -> (update_ratio, mean_miou)`` pooled over every frame of ``seqs``.

    Features are computed once and reused for every policy.
    """
    banks = build_banks([(f, l) for _, f, l in seqs], (models.low, models.high))
    runner = run_blocking if mode == "blocking" else run_low_latency

    def run(policy):
        keys = scores = count = 0
        for (_, frames, labels), bank in zip(seqs, banks):
            records = runner(frames, models, policy, costs, labels=labels, clock=clock, fps=fps,
                             bank=bank)
            keys += sum(r.is_keyframe for r in records)
            scores += sum(r.miou for r in records)
            count += len(records)
        return keys / count, scores / count

    return run


def cmd_sweep(cfg) -> int:
    families = cfg["family"] or sorted(DEFAULT_GRIDS)
    if isinstance(families, str):
        families = [families]
    if cfg["thresholds"] is not None and len(families) != 1:
        raise UsageError("--thresholds needs exactly one --family")
    grids = {f: (_parse_thresholds(cfg["thresholds"], f) if cfg["thresholds"] is not None
                 else DEFAULT_GRIDS[f]) for f in families}
    costs = _parse_costs(cfg["costs"])
    clock, fps = _parse_clock(cfg["clock"])
    models = _models(cfg, "adaptive" in families)
    run = sweep_runner(load_dataset(cfg["data"]), models, cfg["mode"], costs, clock, fps)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for family in families:
        rows = sweep_thresholds(family, run, grids[family])
        path = out_dir / f"sweep_{family}.csv"
        write_sweep_csv(path, rows)
        _emit(cfg, path.read_text())
        log.info("wrote %s", path)
    return 0


def _ratio(num, den):
    return None if den == 0 else num / den


def _median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def cmd_bench(cfg) -> int:
    costs = _parse_costs(cfg["costs"])
    if cfg["repeats"] < 1:
        raise UsageError("--repeats must be >= 1")
    basic = costs.basic_ms
    out = {}
    for name, value in (("s_l", costs.s_l_ms), ("s_h", costs.s_h_ms),
                        ("schedule", costs.schedule_ms), ("propagate", costs.propagate_ms),
                        ("non_key", costs.non_key_ms), ("blocking_key", costs.blocking_key_ms)):
        out[f"sim_{name}_ms"] = value
        out[f"sim_R_{name}"] = _ratio(value, basic)
    out["sim_basic_ms"] = basic
    if basic == 0:
        log.warning("basic network cost is zero; simulated ratios reported as null")

    ckpt = _checkpoint(cfg, "propagation", "propagation.kprm")
    if ckpt.is_file():
        nets, (low, high) = load_propagation(ckpt)
    else:
        log.warning("%s not found; timing freshly initialized modules", ckpt)
        nets = PropagationNets.init(PropagationConfig(), cfg["seed"])
        low, high = build_extractors(nets.cfg.c_l, nets.cfg.c_h)
    sched = _checkpoint(cfg, "scheduler", "scheduler.kprm")
    predictor = (load_scheduler(sched) if sched.is_file()
                 else DeviationPredictor.init(nets.cfg.c_l, nets.cfg.c_r, cfg["seed"]))
    frames, _ = generate_sequence(split_configs("translating", 1, cfg["seed"])[0], 2)
    f_l0, f_l1 = extract(frames[0], low), extract(frames[1], low)
    f_h0 = extract_high(f_l0, high)
    reps = cfg["repeats"]
    wall = {
        "s_l": _median_ms(lambda: extract(frames[1], low), reps),
        "s_h": _median_ms(lambda: extract_high(f_l1, high), reps),
        "schedule": _median_ms(lambda: predict_deviation(f_l0, f_l1, predictor), reps),
        "propagate": _median_ms(lambda: propagate(f_l0, f_l1, f_h0, nets), reps),
    }
    wall["classify"] = _median_ms(lambda: classify(f_l1, f_h0, nets), reps)
    wall["basic"] = wall["s_l"] + wall["s_h"] + wall["classify"]
    wall["non_key"] = wall["s_l"] + wall["schedule"] + wall["propagate"]
    for name, value in wall.items():
        out[f"wall_{name}_ms"] = value
        if name != "basic":
            out[f"wall_R_{name}"] = _ratio(value, wall["basic"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(out, sort_keys=True)
    (out_dir / "bench.json").write_text(text + "\n")
    _emit(cfg, text)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "run": cmd_run,
            "sweep": cmd_sweep, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, OSError, ValueError, KeyError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
