"""Soft, hard (alternate-epoch) and restricted-hard (half-batch) mixup."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import FrozenSet, List, Optional

import numpy as np

from .errors import ConfigError


class MixupMode(str, enum.Enum):
    NONE = "none"
    SOFT = "soft"
    HARD = "hard"
    RESTRICTED_HARD = "restricted_hard"

    @classmethod
    def parse(cls, value) -> "MixupMode":
        if value is None:
            return cls.NONE
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown mixup mode {value!r}; expected one of {valid}") from None


@dataclass
class MixupConfig:
    mode: MixupMode = MixupMode.NONE
    alpha: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.mode = MixupMode.parse(self.mode)
        if self.mode is MixupMode.SOFT and not self.alpha > 0:
            raise ConfigError(f"soft mixup needs alpha > 0, got {self.alpha}")


@dataclass
class Batch:
    """N images with their label sets.

    ``weights`` is an (N, c) soft target matrix, present only after soft
    mixup; otherwise targets are the crisp sets in ``labels``.
    """

    images: np.ndarray
    labels: List[FrozenSet[int]]
    num_classes: int
    epoch: int = 0
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def label_matrix(self) -> np.ndarray:
        t = np.zeros((len(self), self.num_classes))
        for n, ls in enumerate(self.labels):
            t[n, list(ls)] = 1.0
        return t


def _partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """A random partner for each index, never itself."""
    if n < 2:
        return np.zeros(n, dtype=int)
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


def soft_mixup(batch: Batch, config: MixupConfig, rng: np.random.Generator,
               lam: Optional[np.ndarray] = None) -> Batch:
    """i_m = lam*i_i + (1-lam)*i_j and t_m = lam*t_i + (1-lam)*t_j, lam ~ Beta(alpha, alpha).

    One weight is drawn per sample; pass ``lam`` to fix the weights.
    """
    if not config.alpha > 0:
        raise ConfigError(f"soft mixup needs alpha > 0, got {config.alpha}")
    n = len(batch)
    j = _partners(n, rng)
    if lam is None:
        lam = rng.beta(config.alpha, config.alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    li = lam.reshape(-1, 1, 1, 1).astype(batch.images.dtype)
    images = li * batch.images + (1 - li) * batch.images[j]
    t = batch.weights if batch.weights is not None else batch.label_matrix()
    weights = lam[:, None] * t + (1 - lam[:, None]) * t[j]
    labels = [frozenset(np.nonzero(row > 0)[0].tolist()) for row in weights]
    return replace(batch, images=images, labels=labels, weights=weights)


def _hard_mix(batch: Batch, idx: np.ndarray, partner: np.ndarray) -> Batch:
    images = batch.images.copy()
    images[idx] = (batch.images[idx] + batch.images[partner]) / 2
    labels = list(batch.labels)
    for i, j in zip(idx, partner):
        labels[i] = batch.labels[i] | batch.labels[j]
    return replace(batch, images=images, labels=labels, weights=None)


def hard_mixup(batch: Batch, config: MixupConfig, rng: np.random.Generator) -> Batch:
    """On odd epochs mix every sample 0.5:0.5 with a random partner and take the label union.

    Even epochs (starting at 0) pass the batch through untouched.
    """
    if batch.epoch % 2 == 0:
        return batch
    n = len(batch)
    return _hard_mix(batch, np.arange(n), _partners(n, rng))


def restricted_hard_mixup(batch: Batch, config: Optional[MixupConfig] = None,
                          rng: Optional[np.random.Generator] = None) -> Batch:
    """Mix sample k with sample k + N/2 for k in the first half; the second half is kept."""
    n = len(batch)
    if n % 2:
        raise ConfigError(f"restricted hard mixup needs an even batch, got {n}")
    half = n // 2
    return _hard_mix(batch, np.arange(half), np.arange(half, n))


def apply_mixup(batch: Batch, config: MixupConfig, rng: np.random.Generator) -> Batch:
    mode = config.mode
    if mode is MixupMode.NONE:
        return batch
    if mode is MixupMode.SOFT:
        return soft_mixup(batch, config, rng)
    if mode is MixupMode.HARD:
        return hard_mixup(batch, config, rng)
    return restricted_hard_mixup(batch, config, rng)
