"""Context-gated feedforward networks with explicit backward passes.

Every unit ``i`` of a gated layer computes

    x_i = g_i * f(a_i),   g_i = rectified_tanh(v[i, k])

where ``a`` is the (optionally batch-normalized) pre-activation and ``k`` is
the active context. Gating weights ``v`` hold one column per context and
grow as contexts are allocated.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractViolation


class Layer:
    """Base class. Parametric layers expose ``params`` / ``grads`` dicts."""

    kind = "layer"
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def allocate_context(self, rng: nx.Rng) -> None:
        pass

    def config(self) -> dict:
        return {"kind": self.kind}

    @property
    def has_units(self) -> bool:
        return "w" in self.params


class GatedDense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, activation: str = "relu", *,
                 gated: bool = True, batch_norm: bool = False,
                 rng: nx.Rng | None = None, dtype=nx.DEFAULT_DTYPE):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.gated = gated
        self.batch_norm = batch_norm
        self.dtype = np.dtype(dtype)
        self._f, self._df = nx.ACTIVATIONS[activation]
        rng = rng or nx.Rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.params["w"] = rng.uniform(-bound, bound, (n_out, n_in)).astype(self.dtype)
        self.params["b"] = rng.uniform(-bound, bound, n_out).astype(self.dtype)
        if gated:
            self.params["v"] = np.zeros((n_out, 0), dtype=self.dtype)
        if batch_norm:
            self.params["gamma"] = np.ones(n_out, dtype=self.dtype)
            self.params["beta"] = np.zeros(n_out, dtype=self.dtype)
            # running statistics are kept per context
            self.running_mean = np.zeros((0, n_out), dtype=self.dtype)
            self.running_var = np.zeros((0, n_out), dtype=self.dtype)

    @property
    def n_units(self) -> int:
        return self.n_out

    @property
    def n_contexts(self) -> int:
        return self.params["v"].shape[1] if self.gated else 0

    def config(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "activation": self.activation, "gated": self.gated,
                "batch_norm": self.batch_norm}

    def allocate_context(self, rng: nx.Rng) -> None:
        if self.gated:
            col = rng.normal((self.n_units, 1), dtype=self.dtype)
            self.params["v"] = np.concatenate([self.params["v"], col], axis=1)
        if self.batch_norm:
            self.running_mean = np.vstack([self.running_mean, np.zeros(self.n_units, self.dtype)])
            self.running_var = np.vstack([self.running_var, np.ones(self.n_units, self.dtype)])

    def gate(self, context: int, use_gates: bool = True) -> np.ndarray:
        if not (self.gated and use_gates):
            return np.ones(self.n_out, dtype=self.dtype)
        return nx.rectified_tanh(self.params["v"][:, context])

    def forward(self, x, context: int, training: bool = False, use_gates: bool = True,
                unit_mask=None):
        x_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.n_in:
            raise ContractViolation(f"dense layer expects {self.n_in} inputs, got {x.shape[1]}")
        w, b = self.params["w"], self.params["b"]
        a = x @ w.T + b
        bn_cache = None
        if self.batch_norm:
            z, bn_cache = nx.batch_norm_forward(
                a, self.params["gamma"], self.params["beta"],
                self.running_mean[context], self.running_var[context], training)
        else:
            z = a
        h = self._f(z)
        g = self.gate(context, use_gates)
        out = h * g
        if unit_mask is not None:
            out = out * unit_mask
        self.cache = dict(x=x, x_shape=x_shape, a=a, z=z, h=h, g=g, out=out, context=context,
                          bn=bn_cache, use_gates=use_gates, mask=unit_mask)
        return out

    def backward(self, dout):
        c = self.cache
        if c is None:
            raise ContractViolation("backward called without a forward cache")
        if c["mask"] is not None:
            dout = dout * c["mask"]
        c["dout"] = dout
        g, h, z = c["g"], c["h"], c["z"]
        grads = {}
        if self.gated:
            dv = np.zeros_like(self.params["v"])
            if c["use_gates"]:
                dg = (dout * h).sum(axis=0)
                dv[:, c["context"]] = dg * nx.rectified_tanh_grad(self.params["v"][:, c["context"]])
            grads["v"] = dv
        dz = dout * g * self._df(z)
        if self.batch_norm:
            da, grads["gamma"], grads["beta"] = nx.batch_norm_backward(dz, c["bn"])
        else:
            da = dz
        grads["w"] = da.T @ c["x"]
        grads["b"] = da.sum(axis=0)
        self.grads = grads
        return (da @ self.params["w"]).reshape(c["x_shape"])


class GatedConv2d(Layer):
    """Valid-padding, stride-1 convolution with one gate per output channel."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int, activation: str = "relu", *,
                 gated: bool = True, batch_norm: bool = False,
                 rng: nx.Rng | None = None, dtype=nx.DEFAULT_DTYPE):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.activation = activation
        self.gated = gated
        self.batch_norm = batch_norm
        self.dtype = np.dtype(dtype)
        self._f, self._df = nx.ACTIVATIONS[activation]
        rng = rng or nx.Rng(0)
        fan_in = c_in * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.params["w"] = rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)).astype(self.dtype)
        self.params["b"] = rng.uniform(-bound, bound, c_out).astype(self.dtype)
        if gated:
            self.params["v"] = np.zeros((c_out, 0), dtype=self.dtype)
        if batch_norm:
            self.params["gamma"] = np.ones(c_out, dtype=self.dtype)
            self.params["beta"] = np.zeros(c_out, dtype=self.dtype)
            self.running_mean = np.zeros((0, c_out), dtype=self.dtype)
            self.running_var = np.zeros((0, c_out), dtype=self.dtype)

    @property
    def n_units(self) -> int:
        return self.c_out

    @property
    def n_contexts(self) -> int:
        return self.params["v"].shape[1] if self.gated else 0

    def config(self) -> dict:
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "activation": self.activation,
                "gated": self.gated, "batch_norm": self.batch_norm}

    allocate_context = GatedDense.allocate_context

    def gate(self, context: int, use_gates: bool = True) -> np.ndarray:
        if not (self.gated and use_gates):
            return np.ones(self.c_out, dtype=self.dtype)
        return nx.rectified_tanh(self.params["v"][:, context])

    def forward(self, x, context: int, training: bool = False, use_gates: bool = True,
                unit_mask=None):
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ContractViolation(f"conv layer expects (B, {self.c_in}, H, W), got {x.shape}")
        B, _, H, W = x.shape
        K = self.kernel
        if H < K or W < K:
            raise ContractViolation(f"input {H}x{W} smaller than kernel {K}")
        Ho, Wo = H - K + 1, W - K + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (K, K), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, self.c_in * K * K)
        w2 = self.params["w"].reshape(self.c_out, -1)
        a = cols @ w2.T + self.params["b"]  # (B*Ho*Wo, C_out)
        bn_cache = None
        if self.batch_norm:
            z, bn_cache = nx.batch_norm_forward(
                a, self.params["gamma"], self.params["beta"],
                self.running_mean[context], self.running_var[context], training)
        else:
            z = a
        h = self._f(z)
        g = self.gate(context, use_gates)
        out2 = h * g
        if unit_mask is not None:
            out2 = out2 * unit_mask
        out = out2.reshape(B, Ho, Wo, self.c_out).transpose(0, 3, 1, 2)
        self.cache = dict(x_shape=x.shape, cols=cols, z=z, h=h, g=g, out=out,
                          context=context, bn=bn_cache, use_gates=use_gates,
                          mask=unit_mask, hw=(Ho, Wo))
        return out

    def backward(self, dout):
        c = self.cache
        if c is None:
            raise ContractViolation("backward called without a forward cache")
        B, C_in, H, W = c["x_shape"]
        Ho, Wo = c["hw"]
        K = self.kernel
        c["dout"] = dout
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        if c["mask"] is not None:
            d2 = d2 * c["mask"]
        g, h, z = c["g"], c["h"], c["z"]
        grads = {}
        if self.gated:
            dv = np.zeros_like(self.params["v"])
            if c["use_gates"]:
                dg = (d2 * h).sum(axis=0)
                dv[:, c["context"]] = dg * nx.rectified_tanh_grad(self.params["v"][:, c["context"]])
            grads["v"] = dv
        dz = d2 * g * self._df(z)
        if self.batch_norm:
            da, grads["gamma"], grads["beta"] = nx.batch_norm_backward(dz, c["bn"])
        else:
            da = dz
        w2 = self.params["w"].reshape(self.c_out, -1)
        grads["w"] = (da.T @ c["cols"]).reshape(self.params["w"].shape)
        grads["b"] = da.sum(axis=0)
        self.grads = grads
        dcols = (da @ w2).reshape(B, Ho, Wo, C_in, K, K)
        dx = np.zeros(c["x_shape"], dtype=dcols.dtype)
        for i in range(K):
            for j in range(K):
                dx[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, size: int = 4):
        super().__init__()
        self.size = size

    def config(self) -> dict:
        return {"kind": self.kind, "size": self.size}

    def forward(self, x, context: int, training: bool = False, **_):
        B, C, H, W = x.shape
        s = self.size
        Ho, Wo = H // s, W // s
        if Ho == 0 or Wo == 0:
            raise ContractViolation(f"pool size {s} larger than input {H}x{W}")
        xc = x[:, :, :Ho * s, :Wo * s].reshape(B, C, Ho, s, Wo, s)
        blocks = xc.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, s * s)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        self.cache = dict(x_shape=x.shape, idx=idx)
        return out

    def backward(self, dout):
        B, C, H, W = self.cache["x_shape"]
        s = self.size
        Ho, Wo = dout.shape[2], dout.shape[3]
        blocks = np.zeros((B, C, Ho, Wo, s * s), dtype=dout.dtype)
        np.put_along_axis(blocks, self.cache["idx"][..., None], dout[..., None], axis=-1)
        dx = np.zeros(self.cache["x_shape"], dtype=dout.dtype)
        dx[:, :, :Ho * s, :Wo * s] = (
            blocks.reshape(B, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * s, Wo * s))
        return dx


class Reshape(Layer):
    """Reshape flat inputs to images (or images back to flat vectors)."""

    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def config(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape)}

    def forward(self, x, context: int, training: bool = False, **_):
        self.cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self.cache)


class OutputRenorm(Layer):
    """Divide logits by their root-mean-square over the whole batch."""

    kind = "renorm"
    eps = 1e-8

    def forward(self, x, context: int, training: bool = False, **_):
        r = np.sqrt(np.mean(x * x) + self.eps)
        self.cache = (x, r)
        return x / r

    def backward(self, dout):
        x, r = self.cache
        return (dout - x * np.sum(dout * x) / (x.size * r * r)) / r


class GatedNetwork:
    """Ordered stack of layers ending in logits; softmax lives in the loss.

    ``use_gates=False`` pins every gate to exactly 1 (used by the
    obstruction-only and vanilla ablations).
    """

    def __init__(self, layers: list[Layer], *, use_gates: bool = True, seed: int = 0):
        self.layers = layers
        self.use_gates = use_gates
        self.seed = seed
        self._ctx_rng = nx.Rng(seed, 0xC0)
        self.n_contexts = 0

    # -- construction -----------------------------------------------------
    @classmethod
    def mlp(cls, sizes, *, batch_norm=False, gate_output=False, renorm_output=False,
            use_gates=True, seed=0, dtype=nx.DEFAULT_DTYPE) -> "GatedNetwork":
        """``sizes = [n_in, h1, ..., n_classes]``; hidden layers use ReLU."""
        rng = nx.Rng(seed, 0x11)
        layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(GatedDense(
                a, b, "identity" if last else "relu",
                gated=gate_output if last else True,
                batch_norm=batch_norm and not last, rng=rng.child(i), dtype=dtype))
        if renorm_output:
            layers.append(OutputRenorm())
        return cls(layers, use_gates=use_gates, seed=seed)

    @classmethod
    def convnet(cls, image_hw=(28, 28), channels=(8, 16), kernel=3, pool=4,
                hidden=(64,), n_classes=10, *, batch_norm=False, gate_output=False,
                renorm_output=False, use_gates=True, seed=0, dtype=nx.DEFAULT_DTYPE):
        """Conv stack (valid padding) -> max pool -> dense hidden layers -> output."""
        rng = nx.Rng(seed, 0x22)
        layers: list[Layer] = [Reshape((1,) + tuple(image_hw))]
        c_prev, (H, W) = 1, image_hw
        for i, c in enumerate(channels):
            layers.append(GatedConv2d(c_prev, c, kernel, gated=True, batch_norm=batch_norm,
                                      rng=rng.child(i), dtype=dtype))
            c_prev, H, W = c, H - kernel + 1, W - kernel + 1
        layers.append(MaxPool2d(pool))
        H, W = H // pool, W // pool
        sizes = [c_prev * H * W, *hidden, n_classes]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(GatedDense(a, b, "identity" if last else "relu",
                                     gated=gate_output if last else True,
                                     batch_norm=batch_norm and not last,
                                     rng=rng.child(100 + i), dtype=dtype))
        if renorm_output:
            layers.append(OutputRenorm())
        return cls(layers, use_gates=use_gates, seed=seed)

    @property
    def unit_layers(self) -> list[Layer]:
        """Layers owning feedforward weights (dense and conv), in order."""
        return [l for l in self.layers if l.has_units]

    @property
    def gated_layers(self) -> list[Layer]:
        return [l for l in self.layers if getattr(l, "gated", False)]

    def allocate_context(self) -> int:
        k = self.n_contexts
        for i, layer in enumerate(self.layers):
            layer.allocate_context(self._ctx_rng.child(k, i))
        self.n_contexts += 1
        return k

    def _check_context(self, context: int) -> None:
        if not 0 <= context < self.n_contexts:
            raise ContractViolation(f"context {context} not allocated (have {self.n_contexts})")

    # -- passes -----------------------------------------------------------
    def forward(self, x, context: int, training: bool = False, unit_masks=None):
        self._check_context(context)
        h = x
        for i, layer in enumerate(self.layers):
            mask = None if unit_masks is None else unit_masks.get(i)
            if mask is not None:
                h = layer.forward(h, context, training, use_gates=self.use_gates, unit_mask=mask)
            else:
                h = layer.forward(h, context, training, use_gates=self.use_gates)
        return h

    def backward(self, dlogits) -> None:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)

    def loss_and_grad(self, x, y, context: int, training: bool = True):
        """Forward + backward on a batch; gradients land in ``layer.grads``."""
        logits = self.forward(x, context, training)
        loss, dlogits = nx.softmax_cross_entropy(logits, y)
        self.backward(dlogits)
        return loss, logits

    def loss(self, x, y, context: int, training: bool = False) -> float:
        return nx.softmax_cross_entropy(self.forward(x, context, training), y)[0]

    def predict(self, x, context: int, batch_size: int = 2000) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size], context, False).argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, x, y, context: int) -> float:
        return float(np.mean(self.predict(x, context) == np.asarray(y)))

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield i, name, p

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        meta = {"format": "gateon-checkpoint/1", "seed": self.seed,
                "use_gates": self.use_gates, "n_contexts": self.n_contexts,
                "layers": [l.config() for l in self.layers]}
        arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                arrays[f"{i}.{name}"] = p
            if getattr(layer, "batch_norm", False):
                arrays[f"{i}.running_mean"] = layer.running_mean
                arrays[f"{i}.running_var"] = layer.running_var
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "GatedNetwork":
        with np.load(Path(path)) as data:
            meta = json.loads(data["__meta__"].tobytes().decode())
            layers = []
            for i, cfg in enumerate(meta["layers"]):
                layer = _layer_from_config(cfg, data[f"{i}.w"].dtype if f"{i}.w" in data else None)
                for name in list(layer.params):
                    layer.params[name] = data[f"{i}.{name}"].copy()
                if getattr(layer, "batch_norm", False):
                    layer.running_mean = data[f"{i}.running_mean"].copy()
                    layer.running_var = data[f"{i}.running_var"].copy()
                layers.append(layer)
        net = cls(layers, use_gates=meta["use_gates"], seed=meta["seed"])
        net.n_contexts = meta["n_contexts"]
        return net


def _layer_from_config(cfg: dict, dtype) -> Layer:
    kind = cfg["kind"]
    dtype = dtype or nx.DEFAULT_DTYPE
    if kind == "dense":
        return GatedDense(cfg["n_in"], cfg["n_out"], cfg["activation"], gated=cfg["gated"],
                          batch_norm=cfg["batch_norm"], dtype=dtype)
    if kind == "conv":
        return GatedConv2d(cfg["c_in"], cfg["c_out"], cfg["kernel"], cfg["activation"],
                           gated=cfg["gated"], batch_norm=cfg["batch_norm"], dtype=dtype)
    if kind == "maxpool":
        return MaxPool2d(cfg["size"])
    if kind == "reshape":
        return Reshape(cfg["shape"])
    if kind == "renorm":
        return OutputRenorm()
    raise ContractViolation(f"unknown layer kind {kind!r}")
