"""Consumed-data tracking and exact resume.

A rank's cursor counts samples pulled from its shard. The state is persisted
only at pack boundaries, together with the contents of packs that are still
open in the packer's window at that moment. Restoring those open packs lets a
resumed run reproduce the remaining packs byte for byte without pulling any
sample twice.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

from .core import atomic_write_text
from .errors import CorruptState, StateError, StateMismatch
from .packing import PackEntry
from .sharding import Key, ShardPlan

log = logging.getLogger(__name__)

STATE_VERSION = 1


@dataclass(frozen=True)
class RankCursor:
    rank: int
    cursor: int
    shard_len: int
    last_pack_id: int = -1
    open_packs: tuple[tuple[PackEntry, ...], ...] = ()


@dataclass(frozen=True)
class TrackerState:
    plan_fingerprint: str
    epoch: int
    ranks: tuple[RankCursor, ...]
    pack_config: dict | None = None

    def rank(self, rank: int) -> RankCursor:
        for rc in self.ranks:
            if rc.rank == rank:
                return rc
        raise StateError(f"state does not track rank {rank}")

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "plan_fingerprint": self.plan_fingerprint,
            "epoch": self.epoch,
            "pack_config": self.pack_config,
            "ranks": [
                {
                    "rank": rc.rank,
                    "cursor": rc.cursor,
                    "shard_len": rc.shard_len,
                    "last_pack_id": rc.last_pack_id,
                    "open_packs": [[e.to_dict() for e in p] for p in rc.open_packs],
                }
                for rc in self.ranks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerState":
        if not isinstance(d, dict):
            raise CorruptState("state document is not an object")
        if d.get("version") != STATE_VERSION:
            raise CorruptState(f"state version {d.get('version')!r} is not supported (expected {STATE_VERSION})")
        try:
            ranks = tuple(
                RankCursor(
                    rank=int(r["rank"]),
                    cursor=int(r["cursor"]),
                    shard_len=int(r["shard_len"]),
                    last_pack_id=int(r["last_pack_id"]),
                    open_packs=tuple(tuple(PackEntry.from_dict(e) for e in p) for p in r["open_packs"]),
                )
                for r in d["ranks"]
            )
            state = cls(str(d["plan_fingerprint"]), int(d["epoch"]), ranks, d.get("pack_config"))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptState(f"malformed state document: {exc!r}") from None
        for rc in ranks:
            if not 0 <= rc.cursor <= rc.shard_len:
                raise CorruptState(f"rank {rc.rank}: cursor {rc.cursor} outside shard of {rc.shard_len}")
        return state


def new_state(plan: ShardPlan, ranks: Iterable[int] | None = None, pack_config: dict | None = None) -> TrackerState:
    ranks = range(plan.dp_ranks) if ranks is None else ranks
    cursors = tuple(RankCursor(r, 0, len(plan.shard(r))) for r in ranks)
    return TrackerState(plan.fingerprint(), plan.epoch, cursors, pack_config)


def record_consumed(
    state: TrackerState,
    rank: int,
    n_samples: int,
    pack_id: int | None = None,
    open_packs: Sequence[Sequence[PackEntry]] | None = None,
) -> TrackerState:
    """Return a new state with ``rank``'s cursor advanced by ``n_samples``."""
    rc = state.rank(rank)
    if n_samples < 0:
        raise StateError(f"cannot consume a negative number of samples ({n_samples})")
    if rc.cursor + n_samples > rc.shard_len:
        raise StateError(
            f"rank {rank}: consuming {n_samples} from cursor {rc.cursor} overruns shard of {rc.shard_len}"
        )
    if pack_id is not None and pack_id <= rc.last_pack_id:
        raise StateError(f"rank {rank}: pack id {pack_id} does not follow {rc.last_pack_id}")
    if n_samples == 0 and pack_id is None and open_packs is None:
        log.debug("rank %d: no-op consume at cursor %d", rank, rc.cursor)
        return state
    updated = replace(
        rc,
        cursor=rc.cursor + n_samples,
        last_pack_id=rc.last_pack_id if pack_id is None else pack_id,
        open_packs=rc.open_packs if open_packs is None else tuple(tuple(p) for p in open_packs),
    )
    return replace(state, ranks=tuple(updated if r.rank == rank else r for r in state.ranks))


def verify_plan(plan: ShardPlan, state: TrackerState) -> None:
    if state.plan_fingerprint != plan.fingerprint():
        raise StateMismatch(
            f"tracker state belongs to plan {state.plan_fingerprint[:12]}, live plan is {plan.fingerprint()[:12]}"
        )


def resume_stream(plan: ShardPlan, state: TrackerState, rank: int) -> Iterator[Key]:
    verify_plan(plan, state)
    shard = plan.shard(rank)
    rc = state.rank(rank)
    if rc.shard_len != len(shard) or rc.cursor > len(shard):
        raise StateMismatch(f"rank {rank}: cursor {rc.cursor}/{rc.shard_len} does not match shard of {len(shard)}")
    yield from shard[rc.cursor :]


def checkpoint(state: TrackerState, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(state.to_dict(), indent=1) + "\n")


def restore(path: str | os.PathLike) -> TrackerState:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptState(f"{path}: unreadable state file ({exc.msg})") from None
    return TrackerState.from_dict(d)
