"""Deterministic assignment of manifest samples to data-parallel ranks.

Shuffle algorithm (``splitmix64-v1``), pinned so plans reproduce bit-for-bit
in any language:

* PRNG: SplitMix64. State ``s`` advances by ``0x9E3779B97F4A7C15`` mod 2**64;
  the output is ``mix64(s)`` where ``mix64`` is the SplitMix64 finalizer.
* Bounded draw ``below(n)``: draw ``r`` until ``r >= 2**64 mod n``, return
  ``r mod n`` (unbiased rejection).
* Fisher-Yates, descending: for ``i = n-1 .. 1`` swap ``a[i]`` with
  ``a[below(i+1)]``.
* Epoch ``e > 0`` reseeds with ``mix64(seed + e * 0x9E3779B97F4A7C15)``; epoch 0
  uses ``seed`` itself. ``seed=None`` leaves manifest order untouched.

After the shuffle, position ``i`` is dealt to rank ``i mod dp_ranks``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

from .core import SampleRecord, atomic_write_text, manifest_digest
from .errors import ShardError

PRNG_NAME = "splitmix64-v1"
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

Key = tuple[str, int]


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 64) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n


def epoch_seed(seed: int, epoch: int) -> int:
    if epoch == 0:
        return seed & MASK64
    return mix64(seed + epoch * GOLDEN_GAMMA)


def shuffled_indices(n: int, seed: int | None, epoch: int = 0) -> list[int]:
    order = list(range(n))
    if seed is None:
        return order
    rng = SplitMix64(epoch_seed(seed, epoch))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return order


@dataclass(frozen=True)
class ShardPlan:
    dp_ranks: int
    seed: int | None
    epoch: int
    assignment: tuple[tuple[Key, ...], ...]
    manifest_digest: str
    manifest_path: str | None = None

    def shard(self, rank: int) -> tuple[Key, ...]:
        if not 0 <= rank < self.dp_ranks:
            raise ShardError(f"rank {rank} out of range for {self.dp_ranks} rank(s)")
        return self.assignment[rank]

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignment]

    def fingerprint(self) -> str:
        """Hash of everything the assignment depends on.

        Any change to rank count, seed, epoch or manifest content changes it.
        """
        payload = {
            "dp_ranks": self.dp_ranks,
            "seed": self.seed,
            "epoch": self.epoch,
            "manifest_digest": self.manifest_digest,
            "prng": PRNG_NAME,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        return {
            "dp_ranks": self.dp_ranks,
            "seed": self.seed,
            "epoch": self.epoch,
            "prng": PRNG_NAME,
            "manifest_digest": self.manifest_digest,
            "manifest_path": self.manifest_path,
            "assignment": {str(r): [list(k) for k in keys] for r, keys in enumerate(self.assignment)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardPlan":
        try:
            if d.get("prng", PRNG_NAME) != PRNG_NAME:
                raise ShardError(f"plan was built with PRNG {d['prng']!r}, expected {PRNG_NAME!r}")
            dp = int(d["dp_ranks"])
            raw = d["assignment"]
            assignment = tuple(tuple((str(k[0]), int(k[1])) for k in raw[str(r)]) for r in range(dp))
            plan = cls(dp, d["seed"], int(d["epoch"]), assignment, str(d["manifest_digest"]), d.get("manifest_path"))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, ShardError):
                raise
            raise ShardError(f"malformed plan document: {exc!r}") from None
        if len(raw) != dp:
            raise ShardError(f"plan lists {len(raw)} shards for {dp} rank(s)")
        return plan

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ShardPlan":
        with open(path, encoding="utf-8") as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise ShardError(f"{path}: invalid plan file ({exc.msg})") from None
        return cls.from_dict(d)


def build_plan(
    manifest: Sequence[SampleRecord],
    dp_ranks: int,
    seed: int | None,
    epoch: int = 0,
    manifest_path: str | None = None,
) -> ShardPlan:
    if dp_ranks < 1:
        raise ShardError(f"dp_ranks must be >= 1, got {dp_ranks}")
    if epoch < 0:
        raise ShardError(f"epoch must be >= 0, got {epoch}")
    if seed is not None:
        seed &= MASK64
    order = shuffled_indices(len(manifest), seed, epoch)
    shards: list[list[Key]] = [[] for _ in range(dp_ranks)]
    for pos, idx in enumerate(order):
        shards[pos % dp_ranks].append(manifest[idx].key)
    return ShardPlan(
        dp_ranks=dp_ranks,
        seed=seed,
        epoch=epoch,
        assignment=tuple(tuple(s) for s in shards),
        manifest_digest=manifest_digest(manifest),
        manifest_path=manifest_path,
    )


def rank_stream(plan: ShardPlan, rank: int) -> Iterator[Key]:
    yield from plan.shard(rank)
