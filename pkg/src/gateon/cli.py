"""Command-line entry point: ``gateon {run,baselines,metrics,sweep,export-plots}``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as M
from .errors import ContractViolation, IdxFormatError, NonFiniteLossError
from .harness import ExperimentConfig, run_experiment, run_isolated_baselines

log = logging.getLogger("gateon")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.variant is not None:
        overrides["relevance"] = args.variant
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.context_mode is not None:
        overrides["context_mode"] = args.context_mode
    return cfg.replace(**overrides) if overrides else cfg.validate()


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def cmd_baselines(args) -> int:
    cfg = _load_config(args)
    accs = run_isolated_baselines(cfg)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.yaml")
        with open(out / "isolated.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["task", "accuracy"])
            for k, a in enumerate(accs):
                wr.writerow([k, repr(a)])
    print(json.dumps({"isolated": accs, "mean": float(np.mean(accs))}, indent=2))
    return 0


def read_isolated(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["accuracy"]) for r in csv.DictReader(fh)])


def cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    ledger = M.MetricsLedger.from_csv(run_dir / "ledger.csv")
    if args.isolated:
        ledger.isolated = read_isolated(args.isolated)
    summary = M.summarize(ledger)
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _sweep_one(cfg_dict: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    with threadpool_limits(1):
        res = run_experiment(cfg)
    return {"out_dir": cfg.out_dir, **res.summary}


def sweep_configs(base: ExperimentConfig, epsilons, variants, seeds, out: Path) -> list[ExperimentConfig]:
    cfgs = []
    for eps, var, seed in itertools.product(epsilons, variants, seeds):
        name = f"eps{eps:g}_{var}_seed{seed}"
        cfgs.append(base.replace(epsilon=eps, relevance=var, seed=seed, name=name,
                                 out_dir=str(out / name)))
    return cfgs


def cmd_sweep(args) -> int:
    base = _load_config(args)
    out = Path(args.out or base.out_dir or "sweep")
    epsilons = args.epsilons or [base.epsilon]
    variants = args.variants or [base.relevance]
    seeds = args.seeds or [base.seed]
    cfgs = sweep_configs(base, epsilons, variants, seeds, out)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_sweep_one, [c.to_dict() for c in cfgs]))
    else:
        rows = [_sweep_one(c.to_dict()) for c in cfgs]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{len(rows)} runs written under {out}")
    return 0


def export_plots(run_dir: Path, dest: Path) -> list[Path]:
    """Write ``x,y`` CSV series from a finished run directory."""
    dest.mkdir(parents=True, exist_ok=True)
    written = []

    def series(name, xs, ys, header=("x", "y")):
        path = dest / name
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            wr.writerows(zip(xs, ys))
        written.append(path)

    ledger = M.MetricsLedger.from_csv(run_dir / "ledger.csv")
    imm = ledger.immediate()
    series("immediate_accuracy.csv", range(1, len(imm) + 1), imm, ("task", "accuracy"))
    cont = [M.continual_accuracy(ledger, k) for k in range(ledger.n_tasks)]
    series("continual_accuracy.csv", range(1, len(cont) + 1), cont, ("task", "accuracy"))

    mean_path = run_dir / "availability_mean.csv"
    if mean_path.exists():
        a = np.loadtxt(mean_path, delimiter=",", skiprows=1, ndmin=1)
        series("availability_mean.csv", range(1, len(a) + 1), a, ("step", "mean_A"))
    avail_path = run_dir / "availability.csv"
    if avail_path.exists():
        per = {}
        with open(avail_path, newline="") as fh:
            for r in csv.DictReader(fh):
                per.setdefault((int(r["layer"]), int(r["step"])), []).append(float(r["A"]))
        for layer in sorted({l for l, _ in per}):
            steps = sorted(s for l, s in per if l == layer)
            series(f"availability_layer{layer}.csv", steps,
                   [float(np.mean(per[(layer, s)])) for s in steps], ("step", "mean_A"))
    locked_path = run_dir / "task_locked.csv"
    if locked_path.exists():
        curves = {}
        with open(locked_path, newline="") as fh:
            for r in csv.DictReader(fh):
                curves.setdefault(int(r["task"]), []).append(float(r["accuracy"]))
        if len(curves) > 1:
            avg = M.task_locked_accuracy([curves[k] for k in sorted(curves)])
            series("task_locked_accuracy.csv", range(1, len(avg) + 1), avg, ("eval", "accuracy"))
    events_path = run_dir / "detector_events.jsonl"
    tasks_path = run_dir / "tasks.json"
    if events_path.exists() and tasks_path.exists():
        with open(events_path) as fh:
            events = [json.loads(line) for line in fh if line.strip()]
        switches = json.loads(tasks_path.read_text())["switch_steps"]
        detected = [e["step"] for e in events if e["kind"] != "stay"]
        series("detected_switches.csv", range(1, len(detected) + 1), detected, ("n", "step"))
        rate = M.missed_detection_rate(events, switches)
        series("missed_detection.csv", [len(switches)], [rate], ("switches", "missed_rate"))
    return written


def cmd_export_plots(args) -> int:
    run_dir = Path(args.run_dir)
    written = export_plots(run_dir, Path(args.out) if args.out else run_dir / "plots")
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bit-exact runs)")
    common.add_argument("--variant", choices=["p_taylor", "n_grad", "n_layerwise", "n_activity"])
    common.add_argument("--epsilon", type=float)
    common.add_argument("--context-mode", choices=["given", "inferred"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gateon", description="Gated continual-learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train one task sequence").set_defaults(fn=cmd_run)
    sub.add_parser("baselines", parents=[common],
                   help="isolated per-task vanilla baselines").set_defaults(fn=cmd_baselines)
    m = sub.add_parser("metrics", parents=[common], help="recompute metrics from a ledger")
    m.add_argument("run_dir")
    m.add_argument("--isolated", help="isolated.csv from the baselines command")
    m.set_defaults(fn=cmd_metrics)
    s = sub.add_parser("sweep", parents=[common], help="grid over epsilon, variant and seed")
    s.add_argument("--epsilons", type=float, nargs="+")
    s.add_argument("--variants", nargs="+", choices=["p_taylor", "n_grad", "n_layerwise", "n_activity"])
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)
    e = sub.add_parser("export-plots", parents=[common], help="emit x,y CSV series from a run")
    e.add_argument("run_dir")
    e.set_defaults(fn=cmd_export_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.fn(args)
    except (ContractViolation, IdxFormatError, FileNotFoundError, NonFiniteLossError) as exc:
        print(f"gateon: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
