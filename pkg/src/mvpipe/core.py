"""Domain types, manifest I/O and configuration defaults."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, ManifestError
from .resolution import PATCH_SIZE, smart_resize

CELL = PATCH_SIZE * PATCH_SIZE

DEFAULT_SEQUENCE_LENGTH = 8192
DEFAULT_MIN_PIXELS = 4 * CELL
DEFAULT_MAX_PIXELS = 1280 * CELL
DEFAULT_PACK_WINDOW = 8


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


@dataclass(frozen=True, slots=True)
class ImageSpec:
    width: int
    height: int

    def __post_init__(self):
        if not (_is_int(self.width) and _is_int(self.height)) or self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive integers, got {self.width}x{self.height}")


@dataclass(frozen=True, slots=True)
class SampleRecord:
    dataset_id: str
    sample_index: int
    text_tokens: int
    images: tuple[ImageSpec, ...] = ()

    @property
    def key(self) -> tuple[str, int]:
        return (self.dataset_id, self.sample_index)


@dataclass(frozen=True)
class PipelineConfig:
    """Packing and resizing knobs.

    ``visual_token_cap`` accepts an int, ``"unlimited"`` (stored as ``None``)
    or ``"auto"``, which resolves to half the sequence length.
    ``pack_window=None`` means an unbounded open-pack window.
    """

    sequence_length: int = DEFAULT_SEQUENCE_LENGTH
    min_pixels: int = DEFAULT_MIN_PIXELS
    max_pixels: int = DEFAULT_MAX_PIXELS
    visual_token_cap: int | str | None = "auto"
    seed: int = 0
    dp_ranks: int = 1
    pack_window: int | None = DEFAULT_PACK_WINDOW
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        if self.sequence_length < 1:
            raise ConfigError(f"sequence_length must be positive, got {self.sequence_length}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}")
        if self.min_pixels < 0 or self.min_pixels > self.max_pixels:
            raise ConfigError(f"min_pixels {self.min_pixels} must lie in [0, max_pixels={self.max_pixels}]")
        if self.max_pixels < self.patch_size**2:
            raise ConfigError(f"max_pixels {self.max_pixels} is below one grid cell")
        cap = self.visual_token_cap
        if cap == "auto":
            cap = self.sequence_length // 2
        elif cap == "unlimited":
            cap = None
        if cap is not None:
            if not _is_int(cap) or cap < 1:
                raise ConfigError(f"visual_token_cap must be a positive integer or 'unlimited', got {cap!r}")
            if cap > self.sequence_length:
                raise ConfigError(f"visual_token_cap {cap} exceeds sequence_length {self.sequence_length}")
        object.__setattr__(self, "visual_token_cap", cap)
        if self.dp_ranks < 1:
            raise ConfigError(f"dp_ranks must be >= 1, got {self.dp_ranks}")
        if self.pack_window is not None and self.pack_window < 1:
            raise ConfigError(f"pack_window must be >= 1 or None, got {self.pack_window}")

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


# SFT variants trained with different sequence lengths and pixel caps; their
# weights are later averaged by ``mvpipe.merge``.
PRESETS: dict[str, PipelineConfig] = {
    "default": PipelineConfig(),
    "sft-2k": PipelineConfig(sequence_length=2048, max_pixels=1280 * CELL),
    "sft-4k": PipelineConfig(sequence_length=4096, max_pixels=3072 * CELL),
    "sft-8k": PipelineConfig(sequence_length=8192, max_pixels=4096 * CELL),
}


def preset(name: str) -> PipelineConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def visual_tokens_of(sample: SampleRecord, cfg: PipelineConfig) -> int:
    return sum(
        smart_resize(img, cfg.min_pixels, cfg.max_pixels, cfg.patch_size).visual_tokens for img in sample.images
    )


def total_tokens(sample: SampleRecord, cfg: PipelineConfig) -> int:
    return sample.text_tokens + visual_tokens_of(sample, cfg)


# -- manifest ---------------------------------------------------------------


def record_to_dict(rec: SampleRecord) -> dict:
    return {
        "dataset_id": rec.dataset_id,
        "sample_index": rec.sample_index,
        "text_tokens": rec.text_tokens,
        "images": [{"w": im.width, "h": im.height} for im in rec.images],
    }


@lru_cache(maxsize=4096)
def _json_str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def record_to_line(rec: SampleRecord) -> str:
    """Compact JSON, identical to ``json.dumps(record_to_dict(rec), separators=(",", ":"))``."""
    images = ",".join(f'{{"w":{im.width},"h":{im.height}}}' for im in rec.images)
    return (
        f'{{"dataset_id":{_json_str(rec.dataset_id)},"sample_index":{rec.sample_index},'
        f'"text_tokens":{rec.text_tokens},"images":[{images}]}}'
    )


def parse_record(obj, line: int | None = None) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", line)
    missing = {"dataset_id", "sample_index", "text_tokens"} - obj.keys()
    if missing:
        raise ManifestError(f"missing field(s) {sorted(missing)}", line)
    ds, idx, text = obj["dataset_id"], obj["sample_index"], obj["text_tokens"]
    if not isinstance(ds, str):
        raise ManifestError("dataset_id must be a string", line)
    if not _is_int(idx) or idx < 0:
        raise ManifestError(f"sample_index must be a non-negative integer, got {idx!r}", line)
    if not _is_int(text):
        raise ManifestError(f"text_tokens must be an integer, got {text!r}", line)
    if text < 0:
        raise ManifestError(f"negative text_tokens {text}", line)
    raw_images = obj.get("images", [])
    if not isinstance(raw_images, list):
        raise ManifestError("images must be an array", line)
    images = []
    for im in raw_images:
        if not isinstance(im, dict) or not _is_int(im.get("w")) or not _is_int(im.get("h")):
            raise ManifestError(f"image entries need integer w and h, got {im!r}", line)
        if im["w"] < 1 or im["h"] < 1:
            raise ManifestError(f"image dimensions must be positive, got {im['w']}x{im['h']}", line)
        images.append(ImageSpec(im["w"], im["h"]))
    return SampleRecord(ds, idx, text, tuple(images))


def parse_manifest_lines(lines: Iterable[str]) -> list[SampleRecord]:
    records: list[SampleRecord] = []
    seen: dict[tuple[str, int], int] = {}
    for lineno, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
        rec = parse_record(obj, lineno)
        if rec.key in seen:
            raise ManifestError(f"duplicate key {rec.key} (first seen on line {seen[rec.key]})", lineno)
        seen[rec.key] = lineno
        records.append(rec)
    return records


def load_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    with open(path, encoding="utf-8", newline="\n") as f:
        return parse_manifest_lines(f)


def write_manifest(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, "".join(record_to_line(r) + "\n" for r in records))


def manifest_digest(records: Iterable[SampleRecord]) -> str:
    """SHA-256 over the canonical line encoding of ``records``."""
    h = hashlib.sha256()
    for r in records:
        h.update(record_to_line(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
