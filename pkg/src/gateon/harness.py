"""Experiment runner: tasks -> gated network -> plasticity -> detector -> metrics."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import metrics as M
from .detector import ContextDetector
from .errors import ContractViolation, NonFiniteLossError
from .network import GatedNetwork
from .numerics import Rng
from .plasticity import Availability, ObstructedOptimizer, RelevanceVariant, compute_relevance
from .tasks import Dataset, Family, load_mnist, make_tasks, minibatch_stream

log = logging.getLogger(__name__)

METHODS = ("gateon", "gating_only", "obstruction_only", "vanilla")


@dataclass
class ExperimentConfig:
    name: str = "run"
    # task stream
    family: str = "permuted"
    n_tasks: int = 10
    steps_per_task: int = 100
    batch_size: int = 256
    angles: list | None = None
    pairs: list | None = None
    # architecture
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [400, 400])
    conv_channels: list = field(default_factory=lambda: [8, 16])
    kernel: int = 3
    pool: int = 4
    batch_norm: bool = False
    gate_output: bool = False
    renorm_output: bool = False
    dtype: str = "float64"
    # plasticity
    method: str = "gateon"
    relevance: str = "n_grad"
    epsilon: float = 0.0
    eta_A: float = 0.01
    eta_A_conv: float = 0.004
    # optimizer
    optimizer: str = "adam"
    lr: float = 5e-3
    modulate: str = "step"
    # context routing
    context_mode: str = "given"
    detector: dict = field(default_factory=lambda: {"m": 1, "theta": 1.01, "eta_L": 0.02, "eta_C": 0.02})
    # evaluation / bookkeeping
    seed: int = 0
    data_seed: int | None = None
    eval_size: int | None = None
    eval_every: int = 0
    availability_every: int = 0
    save_checkpoint: bool = True
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        Family(self.family)
        RelevanceVariant(self.relevance)
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {METHODS}")
        if self.context_mode not in ("given", "inferred"):
            raise ContractViolation("context_mode must be 'given' or 'inferred'")
        if self.arch not in ("mlp", "conv"):
            raise ContractViolation("arch must be 'mlp' or 'conv'")
        if self.n_tasks < 1 or self.steps_per_task < 0 or self.batch_size < 1:
            raise ContractViolation("n_tasks >= 1, steps_per_task >= 0, batch_size >= 1 required")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractViolation("epsilon must lie in [0, 1]")
        return self

    @property
    def granularity(self) -> str:
        return "parameter" if RelevanceVariant(self.relevance).per_parameter else "neuron"

    @property
    def uses_gates(self) -> bool:
        return self.method in ("gateon", "gating_only")

    @property
    def uses_availability(self) -> bool:
        return self.method in ("gateon", "obstruction_only")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()


@dataclass
class RunResult:
    config: ExperimentConfig
    ledger: M.MetricsLedger
    summary: dict
    net: GatedNetwork
    task_contexts: list
    detector: ContextDetector | None = None
    availability_rows: list = field(default_factory=list)
    availability_means: list = field(default_factory=list)
    switch_steps: list = field(default_factory=list)
    seconds: float = 0.0


def build_network(cfg: ExperimentConfig) -> GatedNetwork:
    common = dict(batch_norm=cfg.batch_norm, gate_output=cfg.gate_output,
                  renorm_output=cfg.renorm_output, use_gates=cfg.uses_gates,
                  seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    if cfg.arch == "mlp":
        return GatedNetwork.mlp([784, *cfg.hidden, 10], **common)
    return GatedNetwork.convnet(channels=tuple(cfg.conv_channels), kernel=cfg.kernel,
                                pool=cfg.pool, hidden=tuple(cfg.hidden), **common)


def _eval_set(task, test: Dataset, cfg: ExperimentConfig):
    x, y = task.apply(test, np.dtype(cfg.dtype))
    if cfg.eval_size is not None and cfg.eval_size < len(y):
        idx = np.sort(Rng(cfg.seed, 7, task.index).permutation(len(y))[:cfg.eval_size])
        x, y = x[idx], y[idx]
    return x, y


def run_experiment(cfg: ExperimentConfig, train: Dataset | None = None,
                   test: Dataset | None = None, data_root=None) -> RunResult:
    """Train the configured task sequence and fill the accuracy ledger."""
    cfg.validate()
    t_start = time.perf_counter()
    train = train if train is not None else load_mnist("train", data_root)
    test = test if test is not None else load_mnist("test", data_root)
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    tasks = make_tasks(cfg.family, cfg.n_tasks, data_seed, cfg.angles,
                       [tuple(p) for p in cfg.pairs] if cfg.pairs else None)

    net = build_network(cfg)
    net.allocate_context()
    avail = (Availability(net, cfg.granularity, cfg.eta_A, cfg.epsilon, cfg.eta_A_conv)
             if cfg.uses_availability else None)
    opt = ObstructedOptimizer(net, cfg.lr, cfg.optimizer, modulate=cfg.modulate)
    detector = ContextDetector(**cfg.detector) if cfg.context_mode == "inferred" else None

    ledger = M.MetricsLedger(len(tasks))
    eval_sets = {}
    task_contexts: list[int] = []
    curves: list[list] = []
    avail_rows: list = []
    avail_means: list = []
    switch_steps: list[int] = []
    ctx = 0
    step = 0
    dtype = np.dtype(cfg.dtype)

    for k, task in enumerate(tasks):
        if k > 0:
            switch_steps.append(step)
        if detector is None:
            if k > 0:
                ctx = net.allocate_context() if k >= net.n_contexts else k
                opt.reset()
        curve = []
        eval_sets[k] = _eval_set(task, test, cfg)
        stream = minibatch_stream(task, train, cfg.batch_size, cfg.steps_per_task,
                                  seed=Rng(cfg.seed, 6, k).integers(0, 2**62), dtype=dtype)
        for t, (x, y) in enumerate(stream):
            loss, _ = net.loss_and_grad(x, y, ctx)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at task {k}, step {t}")
            if detector is not None:
                kind, new_ctx = detector.observe(
                    loss, lambda c: net.loss(x, y, c), net.allocate_context)
                if new_ctx != ctx:
                    ctx = new_ctx
                    opt.reset()
                    loss, _ = net.loss_and_grad(x, y, ctx)
            mu = compute_relevance(net, cfg.relevance) if avail is not None else None
            opt.step(avail)
            if avail is not None:
                avail.update(mu)
            step += 1
            if avail is not None and cfg.availability_every and step % cfg.availability_every == 0:
                avail_rows.extend(avail.snapshot_rows(step))
            if avail is not None:
                avail_means.append(avail.mean())
            if cfg.eval_every and (t + 1) % cfg.eval_every == 0:
                curve.append(net.accuracy(*eval_sets[k], ctx))
        task_contexts.append(ctx)
        curves.append(curve)
        for j in range(k + 1):
            ledger.record(j, k, net.accuracy(*eval_sets[j], task_contexts[j]))
        log.info("%s task %d/%d ctx=%d immediate=%.4f", cfg.name, k + 1, len(tasks), ctx,
                 ledger.acc[k, k])

    if cfg.eval_every:
        ledger.task_locked = {k: c for k, c in enumerate(curves)}
    result = RunResult(cfg, ledger, M.summarize(ledger), net, task_contexts, detector,
                       avail_rows, avail_means, switch_steps)
    result.summary["n_contexts"] = net.n_contexts
    result.seconds = time.perf_counter() - t_start
    if cfg.out_dir:
        write_result(result, Path(cfg.out_dir))
    return result


def run_isolated_baselines(cfg: ExperimentConfig, train: Dataset | None = None,
                           test: Dataset | None = None, data_root=None) -> list[float]:
    """Immediate accuracy of a fresh vanilla network trained on each task alone."""
    train = train if train is not None else load_mnist("train", data_root)
    test = test if test is not None else load_mnist("test", data_root)
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    tasks = make_tasks(cfg.family, cfg.n_tasks, data_seed, cfg.angles,
                       [tuple(p) for p in cfg.pairs] if cfg.pairs else None)
    accs = []
    for task in tasks:
        single = cfg.replace(method="vanilla", context_mode="given", n_tasks=1, out_dir=None)
        net = build_network(single)
        net.allocate_context()
        opt = ObstructedOptimizer(net, cfg.lr, cfg.optimizer)
        stream = minibatch_stream(task, train, cfg.batch_size, cfg.steps_per_task,
                                  seed=Rng(cfg.seed, 6, task.index).integers(0, 2**62),
                                  dtype=np.dtype(cfg.dtype))
        for x, y in stream:
            loss, _ = net.loss_and_grad(x, y, 0)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss in isolated task {task.index}")
            opt.step(None)
        accs.append(net.accuracy(*_eval_set(task, test, cfg), 0))
    return accs


def write_result(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.config.dump(out / "config.yaml")
    result.ledger.to_csv(out / "ledger.csv")
    with open(out / "metrics.json", "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
    with open(out / "tasks.json", "w") as fh:
        json.dump({"task_contexts": result.task_contexts,
                   "switch_steps": result.switch_steps}, fh)
    if result.availability_rows:
        from .plasticity import write_availability_csv
        write_availability_csv(out / "availability.csv", result.availability_rows)
    if result.availability_means:
        np.savetxt(out / "availability_mean.csv", np.asarray(result.availability_means),
                   delimiter=",", header="mean_A", comments="")
    if result.detector is not None:
        result.detector.write_events(out / "detector_events.jsonl")
    if result.ledger.task_locked:
        with open(out / "task_locked.csv", "w") as fh:
            fh.write("task,index,accuracy\n")
            for k, c in result.ledger.task_locked.items():
                for i, a in enumerate(c):
                    fh.write(f"{k},{i},{a!r}\n")
    if result.config.save_checkpoint:
        result.net.save(out / "checkpoint.npz")
