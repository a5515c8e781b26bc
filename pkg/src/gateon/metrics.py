"""Continual-learning measurements computed from an accuracy ledger.

``acc[k, j]`` is the test accuracy on task ``k`` right after training task
``j`` (``j >= k``); cells with ``j < k`` are NaN. Accuracies are fractions;
percentages appear only in reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class MetricsLedger:
    n_tasks: int
    acc: np.ndarray = None
    isolated: np.ndarray | None = None
    task_locked: dict = field(default_factory=dict)  # task -> (steps, accuracies)

    def __post_init__(self):
        if self.acc is None:
            self.acc = np.full((self.n_tasks, self.n_tasks), np.nan)
        self.acc = np.asarray(self.acc, dtype=np.float64)

    def record(self, task: int, after: int, accuracy: float) -> None:
        if after < task:
            raise ContractViolation("accuracy can only be recorded after the task was trained")
        if not 0.0 <= accuracy <= 1.0:
            raise ContractViolation(f"accuracy {accuracy} outside [0, 1]")
        self.acc[task, after] = accuracy

    def row(self, k: int) -> np.ndarray:
        r = self.acc[k, k:]
        if np.isnan(r).any():
            raise ContractViolation(f"ledger row {k} not fully populated")
        return r

    def immediate(self) -> np.ndarray:
        return np.array([self.acc[k, k] for k in range(self.n_tasks)])

    # csv ------------------------------------------------------------------
    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["task", "after_task", "accuracy"])
            for k in range(self.n_tasks):
                for j in range(k, self.n_tasks):
                    if not np.isnan(self.acc[k, j]):
                        wr.writerow([k, j, repr(float(self.acc[k, j]))])

    @classmethod
    def from_csv(cls, path, n_tasks: int | None = None) -> "MetricsLedger":
        with open(path, newline="") as fh:
            rows = [(int(r["task"]), int(r["after_task"]), float(r["accuracy"]))
                    for r in csv.DictReader(fh)]
        if n_tasks is None:
            n_tasks = 1 + max(max(k, j) for k, j, _ in rows)
        ledger = cls(n_tasks)
        for k, j, a in rows:
            ledger.record(k, j, a)
        return ledger


def continual_accuracy(ledger: MetricsLedger, k: int | None = None) -> float:
    """Mean accuracy on task ``k`` over all evaluations from ``t_k`` to the end.

    Without ``k``, the average of the per-task values.
    """
    if k is None:
        return float(np.mean([continual_accuracy(ledger, i) for i in range(ledger.n_tasks)]))
    return float(np.mean(ledger.row(k)))


def forgetting_rate(ledger: MetricsLedger, k: int | None = None, include_last: bool = True) -> float:
    """Immediate minus continual accuracy; negative values mean backward transfer."""
    if k is None:
        ks = range(ledger.n_tasks if include_last else ledger.n_tasks - 1)
        return float(np.mean([forgetting_rate(ledger, i) for i in ks]))
    return float(ledger.row(k)[0] - continual_accuracy(ledger, k))


def accuracy_deviation(ledger: MetricsLedger, isolated_mean: float | None = None) -> float:
    """Relative gap of mean immediate accuracy to the isolated baseline, as a fraction."""
    if isolated_mean is None:
        if ledger.isolated is None:
            raise ContractViolation("isolated baseline accuracies are required")
        isolated_mean = float(np.mean(ledger.isolated))
    if isolated_mean == 0:
        raise ContractViolation("isolated baseline accuracy is zero")
    return float((np.mean(ledger.immediate()) - isolated_mean) / isolated_mean)


def task_locked_accuracy(curves) -> np.ndarray:
    """Average accuracy-vs-step curves of tasks 2..K (the first curve is skipped).

    ``curves`` is a sequence of equally long arrays, one per task, each
    indexed by steps since that task's switch.
    """
    curves = [np.asarray(c, dtype=np.float64) for c in curves]
    if len(curves) < 2:
        raise ContractViolation("need at least two tasks")
    later = curves[1:]
    if any(c.shape != later[0].shape for c in later):
        raise ContractViolation("task-locked curves must share one step grid")
    return np.mean(later, axis=0)


def binarize(v: np.ndarray) -> np.ndarray:
    return (np.asarray(v) > 0).astype(np.float64)


def pearson_matrix(columns: np.ndarray) -> np.ndarray:
    """Pearson correlation between columns; zero-variance columns correlate as 0."""
    x = np.asarray(columns, dtype=np.float64)
    xc = x - x.mean(axis=0)
    norm = np.sqrt((xc * xc).sum(axis=0))
    ok = norm > 0
    safe = np.where(ok, norm, 1.0)
    z = xc / safe
    c = z.T @ z
    c[~ok, :] = 0.0
    c[:, ~ok] = 0.0
    return np.clip(c, -1.0, 1.0)


def context_correlation(v: np.ndarray, contexts=None) -> np.ndarray:
    """Correlation between binarized gating-weight columns of one layer.

    ``v`` is ``(units, contexts)``; ``contexts`` optionally selects and
    orders the columns (e.g. tasks sorted by rotation angle).
    """
    v = np.asarray(v)
    if v.ndim != 2:
        raise ContractViolation("gating weights must be (units, contexts)")
    if contexts is not None:
        v = v[:, list(contexts)]
    return pearson_matrix(binarize(v))


def missed_detection_rate(events, switch_steps, tolerance: int = 6) -> float:
    """Fraction of true switch steps with no detector switch within ``tolerance`` steps after.

    ``events`` are detector events (objects or dicts with ``step`` and
    ``kind``); stays are ignored.
    """
    switch_steps = list(switch_steps)
    if not switch_steps:
        return 0.0
    detected = []
    for e in events:
        kind = e["kind"] if isinstance(e, dict) else e.kind
        step = e["step"] if isinstance(e, dict) else e.step
        if kind != "stay":
            detected.append(step)
    detected = np.asarray(detected)
    missed = 0
    for s in switch_steps:
        if not np.any((detected >= s) & (detected <= s + tolerance)):
            missed += 1
    return missed / len(switch_steps)


def summarize(ledger: MetricsLedger) -> dict:
    out = {
        "continual_accuracy": continual_accuracy(ledger),
        "immediate_accuracy": float(np.mean(ledger.immediate())),
        "forgetting_rate": forgetting_rate(ledger),
        "forgetting_rate_excl_last": (forgetting_rate(ledger, include_last=False)
                                      if ledger.n_tasks > 1 else 0.0),
        "final_accuracy": float(np.nanmean(ledger.acc[:, -1])),
    }
    if ledger.isolated is not None:
        out["isolated_accuracy"] = float(np.mean(ledger.isolated))
        out["accuracy_deviation_pct"] = 100.0 * accuracy_deviation(ledger)
    return out


def write_matrix_csv(path, matrix: np.ndarray, labels=None) -> None:
    matrix = np.asarray(matrix)
    labels = list(range(matrix.shape[0])) if labels is None else list(labels)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([""] + labels)
        for lab, row in zip(labels, matrix):
            wr.writerow([lab] + [repr(float(v)) for v in row])
