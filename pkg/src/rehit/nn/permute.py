"""Stable sorting permutations and their application to flattened views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import branch_decision


@dataclass(frozen=True)
class Permutation:
    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        if self.forward.shape != self.inverse.shape:
            raise ValueError("forward and inverse index arrays differ in shape")

    def __len__(self) -> int:
        return self.forward.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.forward.shape

    @classmethod
    def from_forward(cls, forward: np.ndarray) -> "Permutation":
        forward = np.asarray(forward, dtype=np.intp)
        inverse = np.empty_like(forward)
        np.put_along_axis(inverse, forward,
                          np.broadcast_to(np.arange(forward.shape[-1]), forward.shape), axis=-1)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, length: int) -> "Permutation":
        idx = np.arange(length)
        return cls(idx, idx.copy())


def argsort_stable(values, descending: bool = False) -> Permutation:
    """Stable argsort along the last axis; ties keep their original order."""
    values = np.asarray(values)
    if np.isnan(values).any():
        raise ValueError("argsort_stable: NaN in sort keys")
    keys = -values if descending else values
    return branch_decision(lambda: Permutation.from_forward(np.argsort(keys, axis=-1, kind="stable")))


def permute_apply(x, p: Permutation, direction: str = "fwd") -> np.ndarray:
    """Reorder the last axis of ``x`` by ``p`` (``"fwd"``) or undo it (``"inv"``)."""
    x = np.asarray(x)
    if x.shape[-1] != len(p):
        raise ValueError(f"view length {x.shape[-1]} != permutation length {len(p)}")
    if direction == "fwd":
        idx = p.forward
    elif direction == "inv":
        idx = p.inverse
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    idx = np.broadcast_to(idx, x.shape[:-1] + (len(p),))
    return np.take_along_axis(x, idx, axis=-1)
