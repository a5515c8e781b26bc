"""MNIST ingestion and the continual-learning task families.

Task ``k`` of a family is a pure transform of the base dataset:

* permuted: a fixed pixel permutation (task 0 is the identity),
* rotated: rotation about the image centre (counterclockwise degrees,
  bilinear interpolation, zero fill),
* shuffled: a permutation of the 10 labels,
* split: a digit pair relabelled to {0, 1}.
"""

from __future__ import annotations

import enum
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (BadMagicError, ContractViolation, CountMismatchError,
                     InvalidLabelError, TruncatedFileError)
from .numerics import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28
N_PIXELS = SIDE * SIDE
N_CLASSES = 10
DATA_ENV = "GATEON_DATA"

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)


# -- IDX format -------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08 or (expect_magic is not None and magic != expect_magic):
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= N_CLASSES:
        raise InvalidLabelError(f"label {int(labels.max())} outside 0..9")
    return Dataset((images / np.float32(255.0)).astype(np.float32), labels.astype(np.int64), split)


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, "data/mnist"))


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name}[.gz] not found under {root} (set ${DATA_ENV})")


def load_mnist(split: str = "train", root=None) -> Dataset:
    root = data_root(root)
    img, lab = _FILES[split]
    return load_idx(_find(root, img), _find(root, lab), split)


# -- task definitions --------------------------------------------------------

class Family(str, enum.Enum):
    PERMUTED = "permuted"
    ROTATED = "rotated"
    SHUFFLED = "shuffled"
    SPLIT = "split"


@dataclass(frozen=True)
class TaskDef:
    index: int
    family: Family
    params: dict = field(default_factory=dict)
    seed: int = 0

    # transforms ---------------------------------------------------------
    def transform_inputs(self, x: np.ndarray) -> np.ndarray:
        """Map flat images ``(n, 784)`` to the task's inputs."""
        if self.family is Family.PERMUTED:
            return x[:, np.asarray(self.params["perm"])]
        if self.family is Family.ROTATED:
            angle = self.params["angle"]
            if angle == 0:
                return x
            return np.asarray(rotation_matrix(float(angle)) @ x.T).T.astype(x.dtype, copy=False)
        return x

    def transform_labels(self, y: np.ndarray) -> np.ndarray:
        if self.family is Family.SHUFFLED:
            return np.asarray(self.params["label_perm"])[y]
        if self.family is Family.SPLIT:
            return (y == self.params["digits"][1]).astype(np.int64)
        return y

    def select(self, ds: Dataset) -> Dataset:
        """Restrict the dataset to the samples this task uses."""
        if self.family is Family.SPLIT:
            a, b = self.params["digits"]
            return ds.subset(np.flatnonzero((ds.labels == a) | (ds.labels == b)))
        return ds

    def apply(self, ds: Dataset, dtype=np.float64):
        """Full transformed ``(x, y)`` arrays for a dataset split."""
        ds = self.select(ds)
        x = self.transform_inputs(ds.flat.astype(dtype))
        return x, self.transform_labels(ds.labels)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        params = {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v)
                  for k, v in self.params.items()}
        return {"index": self.index, "family": self.family.value, "params": params, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDef":
        params = dict(d["params"])
        for key in ("perm", "label_perm", "digits"):
            if key in params:
                params[key] = tuple(params[key])
        return cls(d["index"], Family(d["family"]), params, d.get("seed", 0))


def make_permuted(k: int, seed: int = 0) -> TaskDef:
    if k < 0:
        raise ContractViolation("task index must be >= 0")
    perm = np.arange(N_PIXELS) if k == 0 else Rng(seed, 1, k).permutation(N_PIXELS)
    return TaskDef(k, Family.PERMUTED, {"perm": tuple(int(i) for i in perm)}, seed)


def make_rotated(k: int, seed: int = 0, angle: float | None = None) -> TaskDef:
    """Task ``k`` rotates by ``angle`` degrees, or by a seeded uniform angle in [0, 360)."""
    if k < 0:
        raise ContractViolation("task index must be >= 0")
    if angle is None:
        angle = 0.0 if k == 0 else float(Rng(seed, 2, k).uniform(0.0, 360.0))
    return TaskDef(k, Family.ROTATED, {"angle": float(angle)}, seed)


def make_shuffled(k: int, seed: int = 0) -> TaskDef:
    if k < 0:
        raise ContractViolation("task index must be >= 0")
    perm = np.arange(N_CLASSES) if k == 0 else Rng(seed, 3, k).permutation(N_CLASSES)
    return TaskDef(k, Family.SHUFFLED, {"label_perm": tuple(int(i) for i in perm)}, seed)


CANONICAL_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


def random_pairs(seed: int, n_pairs: int = 5):
    digits = Rng(seed, 4).permutation(N_CLASSES)
    return tuple((int(digits[2 * i]), int(digits[2 * i + 1])) for i in range(n_pairs))


def make_split(pairs=CANONICAL_PAIRS, seed: int = 0) -> list[TaskDef]:
    seen: set[int] = set()
    tasks = []
    for k, (a, b) in enumerate(pairs):
        if a == b or a in seen or b in seen:
            raise ContractViolation(f"digit pairs overlap at {(a, b)}")
        if not (0 <= a < N_CLASSES and 0 <= b < N_CLASSES):
            raise ContractViolation(f"digit out of range in {(a, b)}")
        seen.update((a, b))
        tasks.append(TaskDef(k, Family.SPLIT, {"digits": (int(a), int(b))}, seed))
    return tasks


def make_tasks(family, n_tasks: int, seed: int = 0, angles=None, pairs=None) -> list[TaskDef]:
    family = Family(family)
    if family is Family.PERMUTED:
        return [make_permuted(k, seed) for k in range(n_tasks)]
    if family is Family.ROTATED:
        return [make_rotated(k, seed, None if angles is None else angles[k]) for k in range(n_tasks)]
    if family is Family.SHUFFLED:
        return [make_shuffled(k, seed) for k in range(n_tasks)]
    pairs = pairs or CANONICAL_PAIRS
    return make_split(pairs[:n_tasks], seed)


# -- rotation ----------------------------------------------------------------

def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


@lru_cache(maxsize=256)
def rotation_matrix(angle: float, side: int = SIDE) -> sp.csr_matrix:
    """Sparse ``(side^2, side^2)`` operator rotating flat images counterclockwise.

    Row ``o`` holds the bilinear weights of the source pixels sampled by
    output pixel ``o``; samples falling outside the image contribute 0.
    """
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    centre = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    xo, yo = cc - centre, centre - rr
    # inverse rotation gives the source location of each output pixel
    xs = xo * cos + yo * sin
    ys = -xo * sin + yo * cos
    r_src = _snap(centre - ys).ravel()
    c_src = _snap(centre + xs).ravel()
    r0, c0 = np.floor(r_src), np.floor(c_src)
    fr, fc = r_src - r0, c_src - c0
    rows, cols, vals = [], [], []
    out_idx = np.arange(side * side)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            r = (r0 + dr).astype(int)
            c = (c0 + dc).astype(int)
            w = wr * wc
            ok = (r >= 0) & (r < side) & (c >= 0) & (c < side) & (w > 0)
            rows.append(out_idx[ok])
            cols.append(r[ok] * side + c[ok])
            vals.append(w[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(side * side, side * side))


def rotate_images(images: np.ndarray, angle: float) -> np.ndarray:
    """Rotate ``(n, 28, 28)`` images; returns the same shape."""
    n = images.shape[0]
    flat = images.reshape(n, -1)
    return np.asarray(rotation_matrix(float(angle)) @ flat.T).T.reshape(images.shape)


# -- minibatches -------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Rng(seed, 5, epoch).permutation(n)


def minibatch_stream(task: TaskDef, dataset: Dataset, batch: int, steps: int, seed: int = 0,
                     dtype=np.float64):
    """Yield ``steps`` transformed minibatches ``(x, y)`` from seeded shuffled epochs.

    Within an epoch samples are drawn without replacement; a batch that
    would cross the epoch boundary is dropped and a new epoch begins.
    """
    ds = task.select(dataset)
    n = len(ds)
    if batch > n:
        raise ContractViolation(f"batch {batch} larger than dataset ({n})")
    flat = ds.flat
    per_epoch = n // batch
    epoch, pos, order = 0, 0, epoch_order(n, seed, 0)
    for _ in range(steps):
        if pos == per_epoch:
            epoch, pos = epoch + 1, 0
            order = epoch_order(n, seed, epoch)
        idx = order[pos * batch:(pos + 1) * batch]
        pos += 1
        x = task.transform_inputs(flat[idx].astype(dtype))
        yield x, task.transform_labels(ds.labels[idx])
