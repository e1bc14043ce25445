"""Checkpoint weight averaging.

``average`` computes a weighted elementwise mean over tensors whose names
match ``key_filter`` (all tensors when no filter is set). Every other tensor
is copied verbatim from one designated input. With a ``"lang."`` prefix
filter this merges only a language backbone and keeps the vision tower of
the passthrough checkpoint.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .container import TensorContainer
from .errors import MergeError


@dataclass
class MergeSpec:
    inputs: Sequence[TensorContainer | str | os.PathLike]
    weights: Sequence[float] | None = None
    key_filter: str | Sequence[str] | None = None
    passthrough_source: int = 0

    def resolved_weights(self) -> list[float]:
        k = len(self.inputs)
        if self.weights is None:
            return [1.0 / k] * k
        w = [float(x) for x in self.weights]
        if len(w) != k:
            raise MergeError(f"{len(w)} weights given for {k} inputs")
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise MergeError(f"weights must be finite and non-negative, got {w}")
        if abs(math.fsum(w) - 1.0) > 1e-9:
            raise MergeError(f"weights must sum to 1 (got {math.fsum(w)!r})")
        return w

    def matches(self, name: str) -> bool:
        if self.key_filter is None:
            return True
        prefixes = (self.key_filter,) if isinstance(self.key_filter, str) else tuple(self.key_filter)
        return name.startswith(prefixes)


def weighted_sum(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum(w_i * a_i)`` in float64.

    Per element, the products are added in ascending order, so the result is
    identical under any joint permutation of ``(arrays, weights)``.
    """
    products = np.stack([np.float64(w) * np.asarray(a, dtype=np.float64) for a, w in zip(arrays, weights)])
    products.sort(axis=0)
    acc = products[0].copy()
    for p in products[1:]:
        acc += p
    return acc


def _load(x) -> TensorContainer:
    return x if isinstance(x, TensorContainer) else TensorContainer.load(x)


def average(spec: MergeSpec) -> TensorContainer:
    if len(spec.inputs) < 2:
        raise MergeError(f"need at least two inputs to merge, got {len(spec.inputs)}")
    weights = spec.resolved_weights()
    if not 0 <= spec.passthrough_source < len(spec.inputs):
        raise MergeError(f"passthrough source {spec.passthrough_source} out of range")
    models = [_load(x) for x in spec.inputs]
    base = models[spec.passthrough_source]

    for i, m in enumerate(models):
        matched = {n for n in m if spec.matches(n)}
        base_matched = {n for n in base if spec.matches(n)}
        missing = sorted(base_matched - matched)
        extra = sorted(matched - base_matched)
        if missing:
            raise MergeError(f"input {i} is missing tensor(s) {missing}")
        if extra:
            raise MergeError(f"input {i} has tensor(s) {extra} absent from the passthrough source")
        for n in matched:
            if m[n].shape != base[n].shape:
                raise MergeError(f"shape mismatch for tensor {n!r}: {m[n].shape} vs {base[n].shape} (input {i})")

    out = TensorContainer()
    for name, arr in base.items():
        if spec.matches(name):
            out[name] = weighted_sum([m[name] for m in models], weights).astype(np.float32)
        else:
            out[name] = arr.copy()
    return out


@dataclass(frozen=True)
class DiffRow:
    name: str
    max_abs: float
    rms: float


def diff_report(a: TensorContainer, b: TensorContainer) -> list[DiffRow]:
    """Per-tensor max-abs and RMS differences, largest max-abs first."""
    only_a, only_b = sorted(set(a.keys()) - set(b.keys())), sorted(set(b.keys()) - set(a.keys()))
    if only_a or only_b:
        raise MergeError(f"schemas differ: only in first {only_a}, only in second {only_b}")
    rows = []
    for name in a:
        if a[name].shape != b[name].shape:
            raise MergeError(f"shape mismatch for tensor {name!r}: {a[name].shape} vs {b[name].shape}")
        d = a[name].astype(np.float64) - b[name].astype(np.float64)
        rows.append(DiffRow(name, float(np.max(np.abs(d))), float(np.sqrt(np.mean(d * d)))))
    rows.sort(key=lambda r: (-r.max_abs, r.name))
    return rows
