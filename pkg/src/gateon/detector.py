"""Unsupervised change-point detection and context routing.

The detector watches the training loss. When the minimum loss over the
last ``m`` steps exceeds ``theta`` times its running average while the
network is confident in the active context, the current batch is scored
under every known context: the first one whose loss is below the threshold
is reactivated, otherwise a fresh context is allocated.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .errors import ContractViolation

STAY, REACTIVATE, CREATE = "stay", "reactivate", "create"
CONFIDENCE_GATE = 0.9


@dataclass
class DetectorEvent:
    step: int
    kind: str
    context: int
    loss_avg: float
    window_min: float
    confidence: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class ContextDetector:
    m: int = 1
    theta: float = 1.01
    eta_L: float = 0.02
    eta_C: float = 0.02
    active: int = 0
    n_contexts: int = 1
    loss_avg: float | None = None
    confidence: list = field(default_factory=lambda: [0.0])
    events: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ContractViolation("window m must be >= 1")
        if self.theta <= 1:
            raise ContractViolation("threshold theta must exceed 1")
        self.window = deque(maxlen=self.m)

    def update_loss_average(self, loss: float) -> None:
        if not math.isfinite(loss) or loss < 0:
            raise ContractViolation(f"loss must be finite and non-negative, got {loss}")
        if self.loss_avg is None:
            self.loss_avg = float(loss)
        else:
            self.loss_avg += self.eta_L * (loss - self.loss_avg)
        self.window.append(float(loss))

    def update_confidence(self, active: int | None = None) -> None:
        active = self.active if active is None else active
        if not 0 <= active < self.n_contexts:
            raise ContractViolation(f"context {active} does not exist")
        for k in range(self.n_contexts):
            target = 1.0 if k == active else 0.0
            self.confidence[k] += self.eta_C * (target - self.confidence[k])

    def change_point(self) -> bool:
        return (len(self.window) > 0
                and min(self.window) > self.theta * self.loss_avg
                and self.confidence[self.active] > CONFIDENCE_GATE)

    def route(self, evaluate: Callable[[int], float], allocate: Callable[[], int]):
        """Decide stay / reactivate / create after a loss update.

        ``evaluate(k)`` returns the current batch loss under context ``k``;
        ``allocate()`` creates a context in the network and returns its index.
        Returns ``(kind, context)``.
        """
        kind = STAY
        window_min = min(self.window) if self.window else float("nan")
        if self.change_point():
            threshold = self.theta * self.loss_avg
            new_loss = None
            for k in range(self.n_contexts):
                lk = evaluate(k)
                if lk < threshold:
                    kind, self.active, new_loss = REACTIVATE, k, lk
                    break
            if kind == STAY:
                k = allocate()
                if k != self.n_contexts:
                    raise ContractViolation("network and detector disagree on context count")
                self.n_contexts += 1
                self.confidence.append(0.0)
                kind, self.active = CREATE, k
                new_loss = evaluate(k)
            # re-seed the running average under the new context
            self.loss_avg = float(new_loss)
            self.window.clear()
        self.events.append(DetectorEvent(self.step, kind, self.active, float(self.loss_avg),
                                         window_min, float(self.confidence[self.active])))
        return kind, self.active

    def observe(self, loss: float, evaluate, allocate):
        """One detector step: loss average, routing, confidence. Returns ``(kind, context)``."""
        self.update_loss_average(loss)
        kind, ctx = self.route(evaluate, allocate)
        self.update_confidence(ctx)
        self.step += 1
        return kind, ctx

    def switch_events(self) -> list[DetectorEvent]:
        return [e for e in self.events if e.kind != STAY]

    def write_events(self, path, only_switches: bool = False) -> None:
        with open(path, "w") as fh:
            for e in (self.switch_events() if only_switches else self.events):
                fh.write(e.to_json() + "\n")


def simulate_stream(losses, detector: ContextDetector, context_losses=None):
    """Drive a detector with a scripted loss stream (no network).

    ``context_losses(step, k)`` gives the loss the current batch would have
    under context ``k``; by default every context sees the streamed loss,
    so a change point always creates a new context.
    """
    allocated = [detector.n_contexts]

    def allocate():
        allocated[0] += 1
        return allocated[0] - 1

    kinds = []
    for t, loss in enumerate(losses):
        ev = (lambda k, t=t, loss=loss: loss if context_losses is None else context_losses(t, k))
        kinds.append(detector.observe(float(loss), ev, allocate))
    return kinds

