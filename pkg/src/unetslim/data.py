"""Procedural (latent, condition-token) pairs.

Each sample draws 1-3 primitives on a 4x4 grid of anchor positions in a
4x16x16 latent. The token sequence is the exact description of the
primitives, so a latent can be regenerated from its tokens.

Token layout (length 8)::

    [kind_0, pos_0, kind_1, pos_1, kind_2, pos_2, PAD, PAD]

* ``0`` is the null token (reserved for unconditional guidance),
* ``1`` pads unused primitive slots,
* ``2 + 2*kind + level`` encodes kind (bar_h, bar_v, blob, checker) and
  intensity level (0 -> amplitude 0.5, 1 -> amplitude 1.0),
* ``10 + 4*row + col`` encodes the anchor cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .diffkit import ConfigError

PAD = 1
KIND_BASE = 2
POS_BASE = 10
KINDS = ("bar_h", "bar_v", "blob", "checker")
AMPLITUDES = (0.5, 1.0)
GRID = 4
MAX_PRIMS = 3
SEQ_LEN = 8
VOCAB = 32
LATENT_SHAPE = (4, 16, 16)

# per-kind channel loadings
CHANNEL_MIX = np.array(
    [
        [1.0, 0.5, 0.0, -0.5],
        [0.0, 1.0, 0.5, 0.5],
        [-0.5, 0.0, 1.0, 0.5],
        [0.5, -0.5, 0.0, 1.0],
    ]
)


@dataclass(frozen=True)
class Primitive:
    kind: int
    level: int
    row: int
    col: int


@dataclass
class Sample:
    latent: np.ndarray
    tokens: np.ndarray


def encode(prims: list[Primitive]) -> np.ndarray:
    if not 1 <= len(prims) <= MAX_PRIMS:
        raise ValueError(f"need 1..{MAX_PRIMS} primitives, got {len(prims)}")
    tokens = np.full(SEQ_LEN, PAD, dtype=np.int64)
    for i, p in enumerate(prims):
        tokens[2 * i] = KIND_BASE + 2 * p.kind + p.level
        tokens[2 * i + 1] = POS_BASE + GRID * p.row + p.col
    return tokens


def decode(tokens) -> list[Primitive]:
    prims = []
    tokens = np.asarray(tokens)
    for i in range(MAX_PRIMS):
        a, b = int(tokens[2 * i]), int(tokens[2 * i + 1])
        if a == PAD:
            break
        k = a - KIND_BASE
        pos = b - POS_BASE
        if not (0 <= k < 2 * len(KINDS) and 0 <= pos < GRID * GRID):
            raise ValueError(f"tokens {a}, {b} do not describe a primitive")
        prims.append(Primitive(k // 2, k % 2, pos // GRID, pos % GRID))
    return prims


def _pattern(kind: int, cy: float, cx: float, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = y - cy, x - cx
    if kind == 0:
        return ((np.abs(dy) <= 1.0) & (np.abs(dx) <= 4.0)).astype(np.float64)
    if kind == 1:
        return ((np.abs(dx) <= 1.0) & (np.abs(dy) <= 4.0)).astype(np.float64)
    if kind == 2:
        return np.exp(-(dy**2 + dx**2) / (2 * 2.0**2))
    inside = (np.abs(dy) <= 3.0) & (np.abs(dx) <= 3.0)
    sign = np.where(((np.floor(y / 2) + np.floor(x / 2)) % 2) == 0, 1.0, -1.0)
    return inside * sign


def render(prims: list[Primitive], shape=LATENT_SHAPE) -> np.ndarray:
    C, H, W = shape
    cell = H / GRID
    out = np.zeros(shape)
    for p in prims:
        pat = _pattern(p.kind, cell * p.row + cell / 2 - 0.5, cell * p.col + cell / 2 - 0.5, H)
        out += AMPLITUDES[p.level] * CHANNEL_MIX[p.kind][:, None, None] * pat
    return np.clip(out, -1.0, 1.0)


def gen_dataset(seed: int, n: int) -> list[Sample]:
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, MAX_PRIMS + 1))
        cells = rng.choice(GRID * GRID, size=k, replace=False)
        prims = [
            Primitive(int(rng.integers(len(KINDS))), int(rng.integers(2)), int(c) // GRID, int(c) % GRID)
            for c in cells
        ]
        out.append(Sample(render(prims), encode(prims)))
    return out


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.latent for s in samples]), np.stack([s.tokens for s in samples])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: list[Sample], batch_size: int, seed: int, epochs: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffled batches; each epoch drops its last partial batch."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if batch_size > len(dataset):
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
    per_epoch = len(dataset) // batch_size
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_order(len(dataset), seed, epoch)
        for b in range(per_epoch):
            yield stack([dataset[i] for i in order[b * batch_size : (b + 1) * batch_size]])
        epoch += 1


def batch_at(dataset: list[Sample], batch_size: int, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``index``-th batch of :func:`batch_iter` without replaying the stream."""
    if batch_size < 1 or batch_size > len(dataset):
        raise ConfigError(f"bad batch size {batch_size} for dataset of {len(dataset)}")
    per_epoch = len(dataset) // batch_size
    epoch, b = divmod(index, per_epoch)
    order = epoch_order(len(dataset), seed, epoch)
    return stack([dataset[i] for i in order[b * batch_size : (b + 1) * batch_size]])
