"""Online packing of whole samples into fixed-length sequences.

Samples are atomic: a sample either fits into an open pack in full or goes
to a new one. Each pack carries cumulative segment offsets, which is all a
variable-length attention kernel needs in place of a dense mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import PipelineConfig, SampleRecord, atomic_write_text, visual_tokens_of
from .errors import OversizedSample, PackingError, ResizeInfeasible, ZeroLengthSample

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class PackEntry:
    dataset_id: str
    sample_index: int
    tokens: int
    visual_tokens: int

    @property
    def key(self) -> tuple[str, int]:
        return (self.dataset_id, self.sample_index)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "sample_index": self.sample_index,
            "tokens": self.tokens,
            "visual_tokens": self.visual_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PackEntry":
        return cls(d["dataset_id"], d["sample_index"], d["tokens"], d["visual_tokens"])


@dataclass(frozen=True, slots=True)
class Pack:
    pack_id: int
    entries: tuple[PackEntry, ...]
    used_tokens: int
    pad_tokens: int
    segment_bounds: tuple[int, ...]

    @property
    def sequence_length(self) -> int:
        return self.used_tokens + self.pad_tokens

    @property
    def visual_tokens(self) -> int:
        return sum(e.visual_tokens for e in self.entries)

    @property
    def fill(self) -> float:
        return self.used_tokens / self.sequence_length

    def to_dict(self) -> dict:
        return {
            "pack_id": self.pack_id,
            "entries": [e.to_dict() for e in self.entries],
            "used": self.used_tokens,
            "pad": self.pad_tokens,
            "bounds": list(self.segment_bounds),
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "Pack":
        try:
            entries = tuple(PackEntry.from_dict(e) for e in d["entries"])
            pack = cls(d["pack_id"], entries, d["used"], d["pad"], tuple(d["bounds"]))
        except (KeyError, TypeError) as exc:
            raise PackingError(f"malformed pack record: {exc}") from None
        check_pack(pack)
        return pack


def build_pack(pack_id: int, entries: Sequence[PackEntry], sequence_length: int) -> Pack:
    bounds = [0]
    for e in entries:
        bounds.append(bounds[-1] + e.tokens)
    used = bounds[-1]
    return Pack(pack_id, tuple(entries), used, sequence_length - used, tuple(bounds))


def check_pack(pack: Pack, visual_token_cap: int | None = None) -> None:
    """Raise :class:`PackingError` if ``pack`` breaks a structural invariant."""
    b = pack.segment_bounds
    if not pack.entries:
        raise PackingError(f"pack {pack.pack_id} is empty")
    if pack.pad_tokens < 0:
        raise PackingError(f"pack {pack.pack_id} overflows by {-pack.pad_tokens} tokens")
    if len(b) != len(pack.entries) + 1 or b[0] != 0 or b[-1] != pack.used_tokens:
        raise PackingError(f"pack {pack.pack_id} has inconsistent segment bounds")
    for e, lo, hi in zip(pack.entries, b, b[1:]):
        if hi - lo != e.tokens or e.tokens <= 0:
            raise PackingError(f"pack {pack.pack_id}: segment for {e.key} does not match its length")
    if visual_token_cap is not None and pack.visual_tokens > visual_token_cap:
        raise PackingError(f"pack {pack.pack_id} exceeds the visual token cap")


class _OpenPack:
    __slots__ = ("entries", "used", "visual", "slot")

    def __init__(self, slot: int):
        self.entries: list[PackEntry] = []
        self.used = 0
        self.visual = 0
        self.slot = slot


class _FitTree:
    """Max-segment tree over (remaining tokens, remaining visual tokens) per slot.

    ``first_fit`` returns the lowest slot whose leaf satisfies both budgets;
    internal maxima only prune, so the answer is exact.
    """

    def __init__(self, size: int = 64):
        self.size = size
        self.tok = [-1] * (2 * size)
        self.vis = [-1] * (2 * size)

    def _grow(self) -> None:
        old, n = self.size, self.size * 2
        tok, vis = [-1] * (2 * n), [-1] * (2 * n)
        tok[n : n + old] = self.tok[old : 2 * old]
        vis[n : n + old] = self.vis[old : 2 * old]
        for i in range(n - 1, 0, -1):
            tok[i] = max(tok[2 * i], tok[2 * i + 1])
            vis[i] = max(vis[2 * i], vis[2 * i + 1])
        self.size, self.tok, self.vis = n, tok, vis

    def set(self, slot: int, tok_left: int, vis_left: int) -> None:
        while slot >= self.size:
            self._grow()
        tok, vis = self.tok, self.vis
        i = slot + self.size
        tok[i], vis[i] = tok_left, vis_left
        i >>= 1
        while i:
            tok[i] = max(tok[2 * i], tok[2 * i + 1])
            vis[i] = max(vis[2 * i], vis[2 * i + 1])
            i >>= 1

    def first_fit(self, t: int, v: int) -> int | None:
        tok, vis, size = self.tok, self.vis, self.size
        if tok[1] < t or vis[1] < v:
            return None
        stack = [1]
        while stack:
            i = stack.pop()
            if tok[i] < t or vis[i] < v:
                continue
            if i >= size:
                return i - size
            stack.append(2 * i + 1)
            stack.append(2 * i)
        return None


class OnlinePacker:
    """First-fit packer over a window of open packs.

    An arriving sample joins the first open pack (in creation order) with room
    for both its tokens and its visual tokens, else it opens a new pack. A pack
    is emitted as soon as it is exactly full, when the window overflows (the
    oldest pack goes), or on :meth:`flush`. ``cfg.pack_window=None`` keeps
    every pack open until flushed.

    With ``strict=False``, samples that are oversized, empty or unresizable
    are logged into :attr:`skipped` instead of raising.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        *,
        strict: bool = True,
        next_pack_id: int = 0,
        open_packs: Iterable[Sequence[PackEntry]] = (),
    ):
        self.cfg = cfg
        self.seq_len = cfg.sequence_length
        self.cap = cfg.visual_token_cap
        self._cap = self.cap if self.cap is not None else self.seq_len
        self.window = cfg.pack_window
        self.strict = strict
        self.next_pack_id = next_pack_id
        self.skipped: list[tuple[tuple[str, int], str]] = []
        self._emit_full = True
        self._open: dict[int, _OpenPack] = {}  # slot -> pack; slots grow, so dict order = creation order
        self._next_slot = 0
        self._tree = _FitTree() if self.window is None else None
        for entries in open_packs:
            p = self._new_pack()
            for e in entries:
                self._add(p, e)

    # -- sample admission -------------------------------------------------

    def entry_for(self, sample: SampleRecord) -> PackEntry:
        visual = visual_tokens_of(sample, self.cfg)
        tokens = sample.text_tokens + visual
        if tokens == 0:
            raise ZeroLengthSample(sample.dataset_id, sample.sample_index)
        if tokens > self.seq_len:
            raise OversizedSample(
                sample.dataset_id, sample.sample_index, tokens, f"exceeds sequence length {self.seq_len}"
            )
        if self.cap is not None and visual > self.cap:
            raise OversizedSample(
                sample.dataset_id, sample.sample_index, tokens, f"{visual} visual tokens exceed cap {self.cap}"
            )
        return PackEntry(sample.dataset_id, sample.sample_index, tokens, visual)

    def push(self, sample: SampleRecord) -> list[Pack]:
        try:
            entry = self.entry_for(sample)
        except (PackingError, ResizeInfeasible) as exc:
            if self.strict:
                raise
            log.warning("skipping sample %s: %s", sample.key, exc)
            self.skipped.append((sample.key, str(exc)))
            return []
        return self.push_entry(entry)

    def push_entry(self, e: PackEntry) -> list[Pack]:
        target = self._find(e.tokens, e.visual_tokens)
        if target is None:
            target = self._new_pack()
        self._add(target, e)
        if self._emit_full and target.used == self.seq_len:
            return [self._emit(target)]
        if self.window is not None and len(self._open) > self.window:
            return [self._emit(next(iter(self._open.values())))]
        return []

    def flush(self) -> Iterator[Pack]:
        """Emit remaining open packs oldest first, one at a time."""
        while self._open:
            yield self._emit(next(iter(self._open.values())))

    def open_snapshot(self) -> list[list[PackEntry]]:
        return [list(p.entries) for p in self._open.values()]

    @property
    def open_count(self) -> int:
        return len(self._open)

    # -- internals --------------------------------------------------------

    def _find(self, t: int, v: int) -> _OpenPack | None:
        if self._tree is not None:
            slot = self._tree.first_fit(t, v)
            return None if slot is None else self._open[slot]
        room, cap = self.seq_len - t, self._cap - v
        for p in self._open.values():
            if p.used <= room and p.visual <= cap:
                return p
        return None

    def _new_pack(self) -> _OpenPack:
        p = _OpenPack(self._next_slot)
        self._next_slot += 1
        self._open[p.slot] = p
        return p

    def _add(self, p: _OpenPack, e: PackEntry) -> None:
        p.entries.append(e)
        p.used += e.tokens
        p.visual += e.visual_tokens
        if p.used > self.seq_len or p.visual > self._cap:
            raise PackingError(f"entry {e.key} does not fit its pack")
        if self._tree is not None:
            self._tree.set(p.slot, self.seq_len - p.used, self._cap - p.visual)

    def _emit(self, p: _OpenPack) -> Pack:
        del self._open[p.slot]
        if self._tree is not None:
            self._tree.set(p.slot, -1, -1)
        pack = build_pack(self.next_pack_id, p.entries, self.seq_len)
        self.next_pack_id += 1
        return pack


def pack_stream(samples: Iterable[SampleRecord], cfg: PipelineConfig, *, strict: bool = True) -> Iterator[Pack]:
    packer = OnlinePacker(cfg, strict=strict)
    for s in samples:
        yield from packer.push(s)
    yield from packer.flush()


def pack_offline(samples: Iterable[SampleRecord], cfg: PipelineConfig) -> list[Pack]:
    """First-fit-decreasing baseline; ids follow pack creation order."""
    packer = OnlinePacker(cfg.with_(pack_window=None))
    packer._emit_full = False
    entries = [packer.entry_for(s) for s in samples]
    entries.sort(key=lambda e: e.tokens, reverse=True)  # stable: ties keep input order
    for e in entries:
        packer.push_entry(e)
    return list(packer.flush())


def write_packs(packs: Iterable[Pack], path) -> None:
    atomic_write_text(path, "".join(p.to_line() + "\n" for p in packs))


def read_packs(path) -> list[Pack]:
    packs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                packs.append(Pack.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise PackingError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    return packs


# -- attention metadata -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class MaskDescriptor:
    """Block-diagonal attention mask stored as cumulative segment offsets.

    ``bounds`` is the ``cu_seqlens`` array of variable-length attention
    kernels; padding positions past ``bounds[-1]`` attend to nothing.
    """

    bounds: tuple[int, ...]
    total_length: int
    mode: str = "block_diagonal"

    def __post_init__(self):
        b = self.bounds
        if len(b) < 2 or b[0] != 0 or any(y <= x for x, y in zip(b, b[1:])) or b[-1] > self.total_length:
            raise PackingError(f"invalid segment bounds {b!r} for length {self.total_length}")
        if self.mode != "block_diagonal":
            raise PackingError(f"unsupported mask mode {self.mode!r}")

    @property
    def cu_seqlens(self) -> np.ndarray:
        return np.asarray(self.bounds, dtype=np.int32)

    @property
    def max_seqlen(self) -> int:
        return max(y - x for x, y in zip(self.bounds, self.bounds[1:]))

    def to_dense(self) -> np.ndarray:
        n = self.total_length
        mask = np.zeros((n, n), dtype=bool)
        for lo, hi in zip(self.bounds, self.bounds[1:]):
            mask[lo:hi, lo:hi] = True
        return mask


def mask_descriptor(pack: Pack) -> MaskDescriptor:
    return MaskDescriptor(tuple(pack.segment_bounds), pack.sequence_length)


# -- reporting ----------------------------------------------------------------


@dataclass(frozen=True)
class FillReport:
    pack_count: int
    sample_count: int
    mean_fill: float
    used_tokens: int
    pad_tokens: int
    visual_bucket_edges: tuple[int, ...]
    visual_histogram: tuple[int, ...]
    visual_over_last_edge: int

    def to_dict(self) -> dict:
        return {
            "pack_count": self.pack_count,
            "sample_count": self.sample_count,
            "mean_fill": self.mean_fill,
            "used_tokens": self.used_tokens,
            "pad_tokens": self.pad_tokens,
            "visual_histogram": {
                "edges": list(self.visual_bucket_edges),
                "counts": list(self.visual_histogram),
                "over_last_edge": self.visual_over_last_edge,
            },
        }


def fill_report(packs: Sequence[Pack], bucket_edges: Sequence[int] | None = None) -> FillReport:
    """Aggregate fill ratio and per-pack visual-token histogram.

    Fill is ``sum(used) / sum(sequence_length)``; an empty pack list reports a
    fill of 1.0 (nothing was wasted). Default buckets split ``[0, L]`` into
    eighths of the longest sequence length seen.
    """
    used = sum(p.used_tokens for p in packs)
    total = sum(p.sequence_length for p in packs)
    if bucket_edges is None:
        top = max((p.sequence_length for p in packs), default=8)
        bucket_edges = [round(top * i / 8) for i in range(9)]
    edges = np.asarray(bucket_edges, dtype=np.int64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError(f"bucket edges must be strictly increasing, got {list(bucket_edges)}")
    visual = np.asarray([p.visual_tokens for p in packs], dtype=np.int64)
    counts, _ = np.histogram(visual, bins=edges)
    return FillReport(
        pack_count=len(packs),
        sample_count=sum(len(p.entries) for p in packs),
        mean_fill=used / total if total else 1.0,
        used_tokens=used,
        pad_tokens=total - used,
        visual_bucket_edges=tuple(int(x) for x in edges),
        visual_histogram=tuple(int(c) for c in counts),
        visual_over_last_edge=int(np.sum(visual > edges[-1])),
    )
