"""Relevance estimation, availability dynamics and the obstructed optimizer.

A unit (parameter, neuron or conv channel) that keeps mattering for the loss
loses availability, and its feedforward updates are scaled down by that
availability. Gating weights are never obstructed.
"""

from __future__ import annotations

import csv
import enum
import math

import numpy as np

from .errors import ContractViolation
from .network import GatedConv2d, GatedNetwork, Layer


class RelevanceVariant(str, enum.Enum):
    P_TAYLOR = "p_taylor"        # per parameter, (dL/dtheta * theta)^2
    N_GRAD = "n_grad"            # per neuron, (dL/dx * x)^2
    N_LAYERWISE = "n_layerwise"  # per neuron, outgoing weight norm * x^2
    N_ACTIVITY = "n_activity"    # per neuron, x^2

    @property
    def per_parameter(self) -> bool:
        return self is RelevanceVariant.P_TAYLOR


OBSTRUCTED = ("w", "b", "gamma", "beta")


# -- relevance ---------------------------------------------------------------

def relevance_p_taylor(net: GatedNetwork) -> list[dict]:
    """Per-parameter relevance from the last backward pass, one dict per unit layer."""
    out = []
    for layer in net.unit_layers:
        out.append({name: (layer.grads[name] * layer.params[name]) ** 2
                    for name in OBSTRUCTED if name in layer.params})
    return out


def _unit_terms(layer: Layer, values: np.ndarray) -> np.ndarray:
    """Reshape cached activity-like arrays to (samples, units, positions)."""
    if isinstance(layer, GatedConv2d):
        B, C = values.shape[:2]
        return values.reshape(B, C, -1)
    return values[:, :, None]


def relevance_n_grad(net: GatedNetwork, per_sample: bool = False) -> list[np.ndarray]:
    """Per-neuron ``(dL/dx * x)^2`` on the gated output.

    By default ``L`` is the minibatch loss, so the product is summed over
    samples (and over positions for conv channels) before squaring: the
    first-order loss change from silencing the unit for the whole batch.
    ``per_sample=True`` instead averages the squared per-sample effects.
    """
    out = []
    for layer in net.unit_layers:
        c = layer.cache
        x = _unit_terms(layer, c["out"])
        d = _unit_terms(layer, c["dout"])
        if per_sample:
            out.append(np.mean(((d * x.shape[0]) * x).sum(axis=2) ** 2, axis=0))
        else:
            out.append((d * x).sum(axis=(0, 2)) ** 2)
    return out


def relevance_n_activity(net: GatedNetwork) -> list[np.ndarray]:
    """Per-neuron mean squared gated activity (spatial mean for conv channels)."""
    return [np.mean(_unit_terms(l, l.cache["out"]) ** 2, axis=(0, 2)) for l in net.unit_layers]


def _outgoing_sq_norm(layer: Layer, nxt: Layer) -> tuple[np.ndarray, int]:
    """Sum of squared outgoing weights per unit of ``layer`` and the fan-out count."""
    w = nxt.params["w"]
    if isinstance(nxt, GatedConv2d):
        return (w ** 2).sum(axis=(0, 2, 3)), nxt.c_out
    n_units = layer.n_units
    sq = (w ** 2).sum(axis=0)
    if sq.shape[0] != n_units:
        # dense layer fed by a flattened (pooled) conv map, channel-major
        sq = sq.reshape(n_units, -1).sum(axis=1)
    return sq, nxt.n_units


def relevance_n_layerwise(net: GatedNetwork) -> list[np.ndarray]:
    """Per-neuron ``(sum_j w_ji^2 / N) * x_i^2`` with ``w`` the next layer's weights.

    The last unit layer has no downstream weights and falls back to
    :func:`relevance_n_grad`.
    """
    units = net.unit_layers
    act = relevance_n_activity(net)
    grad = relevance_n_grad(net)
    out = []
    for i, layer in enumerate(units):
        if i + 1 == len(units):
            out.append(grad[i])
            continue
        sq, fan_out = _outgoing_sq_norm(layer, units[i + 1])
        out.append(sq / fan_out * act[i])
    return out


def compute_relevance(net: GatedNetwork, variant: RelevanceVariant):
    variant = RelevanceVariant(variant)
    return {
        RelevanceVariant.P_TAYLOR: relevance_p_taylor,
        RelevanceVariant.N_GRAD: relevance_n_grad,
        RelevanceVariant.N_LAYERWISE: relevance_n_layerwise,
        RelevanceVariant.N_ACTIVITY: relevance_n_activity,
    }[variant](net)


# -- normalization and availability -------------------------------------------

def normalize_relevance(mu, unit_count: int | None = None) -> np.ndarray:
    """``unit_count * mu / sum(mu)``; all-zero relevance maps to all zeros."""
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu < 0):
        raise ContractViolation("relevance must be non-negative")
    if unit_count is None:
        unit_count = mu.size
    total = mu.sum()
    if total <= 0 or not np.isfinite(total):
        return np.zeros_like(mu)
    return unit_count * mu / total


def availability_update(A, mu_norm, eta_A: float, epsilon: float) -> np.ndarray:
    """``clip(A * (1 - eta_A * (mu_norm - epsilon)), 0, 1)``."""
    if eta_A < 0:
        raise ContractViolation("eta_A must be non-negative")
    return np.clip(A * (1.0 - eta_A * (np.asarray(mu_norm) - epsilon)), 0.0, 1.0)


def recovery_time(T: float, a: float, b: float, epsilon: float, eta_A: float) -> float:
    """Steps at relevance ``b`` needed to undo ``T`` steps at relevance ``a``."""
    if not (a > epsilon > b >= 0):
        raise ContractViolation("need a > epsilon > b >= 0")
    if not 0 < eta_A * (a - epsilon) < 1:
        raise ContractViolation("need 0 < eta_A * (a - epsilon) < 1")
    return -T * math.log1p(-eta_A * (a - epsilon)) / math.log1p(-eta_A * (b - epsilon))


class Availability:
    """Availability arrays for every unit layer of a network.

    ``granularity`` is ``"parameter"`` (one value per w/b/gamma/beta entry)
    or ``"neuron"`` (one value per neuron or conv channel, covering the
    unit's incoming weights, bias and batch-norm scale/shift).
    """

    def __init__(self, net: GatedNetwork, granularity: str = "neuron",
                 eta_A: float | list[float] = 0.01, epsilon: float = 0.0,
                 eta_A_conv: float | None = 0.004):
        if granularity not in ("parameter", "neuron"):
            raise ContractViolation(f"unknown granularity {granularity!r}")
        if epsilon < 0 or epsilon > 1:
            raise ContractViolation("epsilon must lie in [0, 1]")
        self.granularity = granularity
        self.epsilon = epsilon
        layers = net.unit_layers
        if isinstance(eta_A, (int, float)):
            etas = [eta_A_conv if (eta_A_conv is not None and isinstance(l, GatedConv2d)) else eta_A
                    for l in layers]
        else:
            etas = list(eta_A)
        if any(e < 0 for e in etas):
            raise ContractViolation("eta_A must be non-negative")
        self.eta_A = etas
        if granularity == "neuron":
            self.A = [np.ones(l.n_units) for l in layers]
        else:
            self.A = [{n: np.ones(l.params[n].shape) for n in OBSTRUCTED if n in l.params}
                      for l in layers]

    def unit_count(self, i: int) -> int:
        if self.granularity == "neuron":
            return self.A[i].size
        return sum(a.size for a in self.A[i].values())

    def update(self, relevance) -> list:
        """Normalize ``relevance`` per layer and integrate it into ``A``."""
        norms = []
        for i, mu in enumerate(relevance):
            eta = self.eta_A[i]
            if self.granularity == "neuron":
                mu_norm = normalize_relevance(mu, self.A[i].size)
                self.A[i] = availability_update(self.A[i], mu_norm, eta, self.epsilon)
            else:
                names = list(self.A[i])
                flat = np.concatenate([mu[n].ravel() for n in names])
                flat_norm = normalize_relevance(flat, flat.size)
                mu_norm, off = {}, 0
                for n in names:
                    size = self.A[i][n].size
                    mu_norm[n] = flat_norm[off:off + size].reshape(self.A[i][n].shape)
                    off += size
                    self.A[i][n] = availability_update(self.A[i][n], mu_norm[n], eta, self.epsilon)
            norms.append(mu_norm)
        return norms

    def scale_for(self, i: int, layer: Layer, name: str) -> np.ndarray:
        """Availability broadcast to the shape of ``layer.params[name]``."""
        if self.granularity == "parameter":
            return self.A[i][name]
        a = self.A[i]
        p = layer.params[name]
        return a.reshape((-1,) + (1,) * (p.ndim - 1))

    def fill(self, value: float) -> None:
        for i in range(len(self.A)):
            if self.granularity == "neuron":
                self.A[i][:] = value
            else:
                for a in self.A[i].values():
                    a[:] = value

    def mean(self) -> float:
        if self.granularity == "neuron":
            vals = np.concatenate(self.A)
        else:
            vals = np.concatenate([a.ravel() for d in self.A for a in d.values()])
        return float(vals.mean())

    def snapshot_rows(self, step: int):
        """``(layer, unit, A, step)`` rows; parameter granularity reports per-neuron means."""
        for i, a in enumerate(self.A):
            if self.granularity == "parameter":
                w = a["w"]
                a = w.reshape(w.shape[0], -1).mean(axis=1)
            for j, val in enumerate(a):
                yield i, j, float(val), step


def write_availability_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "unit", "A", "step"])
        for r in rows:
            wr.writerow([r[0], r[1], repr(r[2]), r[3]])


# -- optimizer ---------------------------------------------------------------

class ObstructedOptimizer:
    """SGD or Adam whose feedforward step is multiplied by availability.

    ``modulate="step"`` scales the final update (a frozen unit never moves,
    even with non-zero Adam moments); ``modulate="gradient"`` scales the
    gradient before it reaches the moments.
    """

    def __init__(self, net: GatedNetwork, lr: float = 5e-3, kind: str = "adam",
                 betas=(0.9, 0.999), eps: float = 1e-8, modulate: str = "step"):
        if kind not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {kind!r}")
        if modulate not in ("step", "gradient"):
            raise ContractViolation(f"unknown modulation {modulate!r}")
        self.net = net
        self.lr = lr
        self.kind = kind
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.modulate = modulate
        self.reset()

    def reset(self) -> None:
        """Drop moment buffers; called at every context switch."""
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, availability: Availability | None = None) -> None:
        self.t += 1
        unit_index = {id(l): i for i, l in enumerate(self.net.unit_layers)}
        for li, layer in enumerate(self.net.layers):
            ui = unit_index.get(id(layer))
            for name, p in layer.params.items():
                g = layer.grads.get(name)
                if g is None:
                    continue
                if name == "v":
                    if not self.net.use_gates:
                        continue
                    scale = None
                elif availability is not None and ui is not None:
                    scale = availability.scale_for(ui, layer, name)
                    if scale.shape != p.shape and scale.size != p.shape[0]:
                        raise ContractViolation("availability does not match parameter shape")
                else:
                    scale = None
                if scale is not None and self.modulate == "gradient":
                    g = g * scale
                upd = self._direction(li, name, g)
                if scale is not None and self.modulate == "step":
                    upd = upd * scale
                p -= self.lr * upd

    def _direction(self, li: int, name: str, g: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return g
        key = (li, name)
        m = self.m.get(key)
        if m is None or m.shape != g.shape:
            # v grows when contexts are added; restart its moments then
            m = self.m[key] = np.zeros_like(g)
            self.v[key] = np.zeros_like(g)
        v = self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)
