"""Contrastive training of the linear descriptor projector.

Each training image contributes a pair of views: the original and one
seeded augmentation. Descriptors are ``normalize(P @ raw_features(view))``
and the NT-Xent gradient is pulled back through the normalization onto
``P``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..descriptor import DEFAULT_DIM, DEFAULT_TILES, Projector, random_projector, raw_features
from ..errors import ArgumentError, FormatError, LengthError
from ..imaging import Image, augment
from ..rng import Rng64
from .losses import nt_xent_grad, nt_xent_loss


@dataclass
class ProjectorLog:
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.epoch_losses[0]

    @property
    def final(self) -> float:
        return self.epoch_losses[-1]

    def to_csv(self) -> str:
        return "epoch,mean_loss\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(self.epoch_losses))


def pair_features(images: Sequence[Image], rng: Rng64, g: int = DEFAULT_TILES) -> np.ndarray:
    """(2n, f) raw features: row 2i is image i, row 2i+1 an augmentation of it."""
    rows = []
    for img in images:
        aug, _ = augment(img, rng)
        rows.append(raw_features(img, g))
        rows.append(raw_features(aug, g))
    return np.stack(rows)


def projected_loss_and_grad(p: np.ndarray, feats: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """NT-Xent of normalized projections and its gradient with respect to ``p``."""
    x = feats @ p.T
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    y = x / norms
    loss = nt_xent_loss(y, tau)
    dy = nt_xent_grad(y, tau)
    # Jacobian of x / |x| is (I - y y^T) / |x|.
    dx = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norms
    return loss, dx.T @ feats


def _batches(n_items: int, batch: int, order: Sequence[int]) -> list[np.ndarray]:
    out = []
    for lo in range(0, n_items - batch + 1, batch):
        items = np.asarray(order[lo : lo + batch])
        out.append(np.stack([2 * items, 2 * items + 1], axis=1).reshape(-1))
    return out


def train_projector(
    images: Sequence[Image],
    rng: Rng64 | int,
    epochs: int = 20,
    lr: float = 1.0,
    tau: float = 0.1,
    batch: int = 16,
    d: int = DEFAULT_DIM,
    g: int = DEFAULT_TILES,
    init: Projector | None = None,
) -> tuple[Projector, ProjectorLog]:
    """Gradient descent on NT-Xent over shuffled batches of ``batch`` items.

    Augmented views are drawn once up front. The log holds the mean batch
    loss over a fixed in-order batching before training and after each epoch.
    """
    if batch < 1:
        raise ArgumentError("batch must be >= 1")
    if len(images) < 2 * batch:
        raise ArgumentError(f"need at least {2 * batch} images, got {len(images)}")
    if epochs < 0:
        raise ArgumentError("epochs must be >= 0")
    rng = rng if isinstance(rng, Rng64) else Rng64(rng)
    init_rng, aug_rng, order_rng = rng.spawn(), rng.spawn(), rng.spawn()
    f = 6 * g * g
    p = np.array((init or random_projector(d, f, init_rng)).matrix)
    feats = pair_features(images, aug_rng, g)
    n = len(images)
    eval_batches = _batches(n, batch, range(n))

    def mean_loss() -> float:
        return float(np.mean([projected_loss_and_grad(p, feats[b], tau)[0] for b in eval_batches]))

    log = ProjectorLog([mean_loss()])
    for _ in range(epochs):
        for b in _batches(n, batch, order_rng.permutation(n)):
            _, grad = projected_loss_and_grad(p, feats[b], tau)
            p -= lr * grad
        log.epoch_losses.append(mean_loss())
    return Projector(p), log


ISCP_MAGIC = b"ISCP"
ISCP_VERSION = 1


def dumps_projector(p: Projector) -> bytes:
    return ISCP_MAGIC + struct.pack("<III", ISCP_VERSION, p.d, p.f) + np.asarray(p.matrix, dtype="<f4").tobytes()


def loads_projector(data: bytes) -> Projector:
    if len(data) < 16 or data[:4] != ISCP_MAGIC:
        raise FormatError("not an ISCP projector file")
    version, d, f = struct.unpack_from("<III", data, 4)
    if version != ISCP_VERSION:
        raise FormatError(f"unsupported ISCP version {version}")
    if len(data) != 16 + 4 * d * f:
        raise LengthError(f"ISCP payload is {len(data) - 16} bytes, expected {4 * d * f}")
    return Projector(np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(d, f))
