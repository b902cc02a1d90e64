"""Low-rank adapter pairs: the update of a d x l weight matrix factored as B @ A."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LoraPair:
    """Adapter factor pair: B is d x r, A is r x l, update = B @ A (rank <= r)."""

    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "B", _frozen_array(self.B))
        object.__setattr__(self, "A", _frozen_array(self.A))
        if self.B.ndim != 2 or self.A.ndim != 2:
            raise ValueError("adapter factors must be 2-D")
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(
                f"factor shapes not conformable: B {self.B.shape}, A {self.A.shape}"
            )
        d, r = self.B.shape
        l = self.A.shape[1]
        if r < 1:
            raise ValueError("rank must be at least 1")
        if r > min(d, l):
            raise ValueError(f"rank must satisfy rank <= min(d,l): rank={r}, min(d,l)={min(d, l)}")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def out_dim(self) -> int:
        return self.B.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class FrozenBase:
    """Pre-trained weight matrix, immutable for the duration of an experiment."""

    W0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W0", _frozen_array(self.W0))
        if self.W0.ndim != 2:
            raise ValueError("base weights must be 2-D")


def init_pair(d: int, l: int, rank: int, std: float = 0.02, seed: int = 0) -> LoraPair:
    """Fresh adapter: A gaussian, B zero, so the initial update is exactly zero."""
    if not 1 <= rank <= min(d, l):
        raise ValueError(f"rank must satisfy rank <= min(d,l): rank={rank}, min(d,l)={min(d, l)}")
    a = linalg.gaussian_fill(rank, l, std, seed)
    b = np.zeros((d, rank))
    return LoraPair(B=b, A=a)


def effective_update(pair: LoraPair) -> np.ndarray:
    return linalg.matmul(pair.B, pair.A)


def param_count(pair: LoraPair) -> int:
    return pair.rank * (pair.out_dim + pair.in_dim)


def fold_into_base(base: FrozenBase, delta: np.ndarray) -> FrozenBase:
    """New base with the delta absorbed; the original base object is untouched."""
    if base.W0.shape != delta.shape:
        raise ValueError(f"fold shape mismatch: base {base.W0.shape}, delta {delta.shape}")
    return FrozenBase(W0=base.W0 + delta)
