"""Shared oracles for the test suite."""

import numpy as np

from gateon import numerics as nx
from gateon.network import GatedConv2d, GatedDense, GatedNetwork, MaxPool2d, Reshape


def rel_err(a, b, floor: float = 1e-4) -> float:
    """Norm-wise relative error; the floor keeps round-off on true zeros from counting."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grads(net: GatedNetwork, x, y, context: int, h: float = 1e-6) -> dict:
    """Central differences of the training-mode loss for every parameter array."""
    out = {}
    for li, name, p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = net.loss(x, y, context, training=True)
            p[idx] = old - h
            lm = net.loss(x, y, context, training=True)
            p[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[(li, name)] = g
    return out


def analytic_grads(net: GatedNetwork, x, y, context: int) -> dict:
    net.loss_and_grad(x, y, context, training=True)
    return {(li, name): net.layers[li].grads[name].copy() for li, name, _ in net.parameters()}


def random_dense_net(rng: nx.Rng, batch_norm: bool, depth: int | None = None,
                     gate_output: bool = True, n_contexts: int = 2):
    depth = depth or int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)] + [int(rng.integers(2, 5))]
    net = GatedNetwork.mlp(sizes, batch_norm=batch_norm, gate_output=gate_output,
                           seed=int(rng.integers(0, 2**31)))
    for _ in range(n_contexts):
        net.allocate_context()
    return net, sizes


def random_conv_net(rng: nx.Rng, batch_norm: bool):
    seed = int(rng.integers(0, 2**31))
    r = nx.Rng(seed)
    c1, c2 = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    layers = [Reshape((1, 7, 7)),
              GatedConv2d(1, c1, 2, batch_norm=batch_norm, rng=r.child(0)),
              GatedConv2d(c1, c2, 2, batch_norm=batch_norm, rng=r.child(1)),
              MaxPool2d(2),
              GatedDense(c2 * 2 * 2, 3, "identity", gated=True, rng=r.child(2))]
    net = GatedNetwork(layers, seed=seed)
    net.allocate_context()
    net.allocate_context()
    return net


def gate_margin_ok(net: GatedNetwork, context: int, margin: float = 1e-3) -> bool:
    """Finite differences are unreliable when a gate weight sits on the kink at 0."""
    return all(np.all(np.abs(l.params["v"][:, context]) > margin) for l in net.gated_layers)


def parameter_zeroing_oracle(net: GatedNetwork, x, y, context: int):
    """Taylor relevance and exact ``(L|theta=0 - L)^2`` for every obstructed weight entry.

    Entries whose both values are exactly zero (gated-off units) are dropped.
    """
    from gateon.plasticity import OBSTRUCTED, relevance_p_taylor

    base = net.loss(x, y, context)
    net.loss_and_grad(x, y, context, training=False)
    taylor = relevance_p_taylor(net)
    t_all, o_all = [], []
    for layer, rel in zip(net.unit_layers, taylor):
        for name in OBSTRUCTED:
            if name not in layer.params:
                continue
            p = layer.params[name]
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = 0.0
                o = (net.loss(x, y, context) - base) ** 2
                p[idx] = old
                t = rel[name][idx]
                if t == 0 and o == 0:
                    continue
                t_all.append(t)
                o_all.append(o)
    return np.array(t_all), np.array(o_all)


def neuron_zeroing_oracle(net: GatedNetwork, x, y, context: int, variant="n_grad"):
    """Neuron relevance and exact ``(L|x_i=0 - L)^2`` for every active unit."""
    from gateon.plasticity import compute_relevance

    base = net.loss(x, y, context)
    net.loss_and_grad(x, y, context, training=False)
    rel = compute_relevance(net, variant)
    t_all, o_all = [], []
    for li, layer in enumerate(net.layers):
        if not layer.has_units:
            continue
        ui = net.unit_layers.index(layer)
        for i in range(layer.n_units):
            if layer.gated and net.use_gates and nx.rectified_tanh(layer.params["v"][i, context]) == 0:
                continue
            mask = np.ones(layer.n_units)
            mask[i] = 0.0
            logits = net.forward(x, context, False, unit_masks={li: mask})
            o = (nx.softmax_cross_entropy(logits, y)[0] - base) ** 2
            t_all.append(rel[ui][i])
            o_all.append(o)
    return np.array(t_all), np.array(o_all)


class ToyWorld:
    """Scripted losses: a context that owns the current task sees ``low``, others ``high``.

    A freshly created context adopts the task it was created on.
    """

    def __init__(self, low=1.0, high=2.0, noise=0.0, seed=0):
        self.low, self.high, self.noise = low, high, noise
        self.owner: dict[int, object] = {0: None}
        self.rng = np.random.default_rng(seed)

    def loss(self, task, ctx) -> float:
        if self.owner.get(ctx) is None:
            self.owner[ctx] = task
        base = self.low if self.owner[ctx] == task else self.high
        return base * (1 + self.noise * self.rng.uniform(-1, 1))

    def run(self, detector, schedule):
        """Feed ``schedule`` (one task label per step); returns the per-step contexts."""
        contexts = []

        def allocate():
            k = len(self.owner)
            self.owner[k] = None
            return k

        for t, task in enumerate(schedule):
            loss = self.loss(task, detector.active)
            _, ctx = detector.observe(loss, lambda k, task=task: self.loss(task, k), allocate)
            contexts.append(ctx)
        return contexts
