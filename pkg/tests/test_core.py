import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpipe.core import (
    CELL,
    PRESETS,
    ImageSpec,
    PipelineConfig,
    SampleRecord,
    load_manifest,
    manifest_digest,
    record_to_dict,
    record_to_line,
    total_tokens,
    write_manifest,
)
from mvpipe.errors import ConfigError, ManifestError, ResizeInfeasible


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_manifest_preserves_order(tmp_path):
    p = tmp_path / "m.jsonl"
    objs = [
        {"dataset_id": "b", "sample_index": 3, "text_tokens": 10, "images": []},
        {"dataset_id": "a", "sample_index": 0, "text_tokens": 0, "images": [{"w": 56, "h": 56}]},
        {"dataset_id": "b", "sample_index": 1, "text_tokens": 7, "images": []},
    ]
    _write_lines(p, objs)
    recs = load_manifest(p)
    assert [r.key for r in recs] == [("b", 3), ("a", 0), ("b", 1)]
    assert recs[1].images == (ImageSpec(56, 56),)


def test_negative_tokens_names_line(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(
        p,
        [
            {"dataset_id": "a", "sample_index": 0, "text_tokens": 1, "images": []},
            {"dataset_id": "a", "sample_index": 1, "text_tokens": -1, "images": []},
        ],
    )
    with pytest.raises(ManifestError, match="line 2") as info:
        load_manifest(p)
    assert info.value.line == 2


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    rec = {"dataset_id": "a", "sample_index": 0, "text_tokens": 1, "images": []}
    _write_lines(p, [rec, rec])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(p)


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        '{"dataset_id": 1, "sample_index": 0, "text_tokens": 1}',
        '{"dataset_id": "a", "sample_index": 0.5, "text_tokens": 1}',
        '{"dataset_id": "a", "sample_index": 0, "text_tokens": 1, "images": [{"w": 0, "h": 3}]}',
        '{"dataset_id": "a", "sample_index": 0}',
        "[1, 2]",
    ],
)
def test_malformed_lines(tmp_path, line):
    p = tmp_path / "m.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(p)


records = st.lists(
    st.builds(
        lambda i, t, imgs: SampleRecord("ds", i, t, tuple(ImageSpec(w, h) for w, h in imgs)),
        st.integers(0, 10**12),
        st.integers(0, 10**6),
        st.lists(st.tuples(st.integers(1, 5000), st.integers(1, 5000)), max_size=3),
    ),
    max_size=20,
    unique_by=lambda r: r.sample_index,
)


@settings(max_examples=50, deadline=None)
@given(records)
def test_manifest_round_trip(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "m.jsonl"
    write_manifest(recs, p)
    assert load_manifest(p) == recs
    assert manifest_digest(load_manifest(p)) == manifest_digest(recs)


@settings(max_examples=200, deadline=None)
@given(
    st.text(),
    st.integers(0, 2**63),
    st.integers(0, 2**40),
    st.lists(st.tuples(st.integers(1, 10**6), st.integers(1, 10**6)), max_size=3),
)
def test_canonical_line_is_compact_json(ds, idx, text, imgs):
    rec = SampleRecord(ds, idx, text, tuple(ImageSpec(w, h) for w, h in imgs))
    line = record_to_line(rec)
    assert line == json.dumps(record_to_dict(rec), separators=(",", ":"), ensure_ascii=False)
    assert json.loads(line) == record_to_dict(rec)


@pytest.mark.parametrize(
    "sample,expected",
    [
        (SampleRecord("a", 0, 100), 100),
        (SampleRecord("a", 0, 0, (ImageSpec(448, 448),)), 256),
        (SampleRecord("a", 0, 50, (ImageSpec(56, 56), ImageSpec(56, 56))), 58),
    ],
)
def test_total_tokens(sample, expected):
    assert total_tokens(sample, PipelineConfig()) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8000), st.integers(1, 8000), st.integers(4, 8192), st.integers(4, 8192))
def test_total_tokens_monotone_in_max_pixels(w, h, a, b):
    lo, hi = sorted((a, b))
    s = SampleRecord("a", 0, 7, (ImageSpec(w, h),))
    try:
        small = total_tokens(s, PipelineConfig(max_pixels=lo * CELL, min_pixels=4 * CELL))
        big = total_tokens(s, PipelineConfig(max_pixels=hi * CELL, min_pixels=4 * CELL))
    except ResizeInfeasible:
        return
    assert small <= big


def test_default_config():
    cfg = PipelineConfig()
    assert cfg.sequence_length == 8192
    assert cfg.min_pixels == 4 * 28 * 28 and cfg.max_pixels == 1280 * 28 * 28
    assert cfg.visual_token_cap == 4096
    assert cfg.pack_window == 8


@pytest.mark.parametrize(
    "kwargs",
    [
        {"min_pixels": 10 * CELL, "max_pixels": 5 * CELL},
        {"visual_token_cap": 9000},
        {"visual_token_cap": 0},
        {"sequence_length": 0},
        {"max_pixels": 100, "min_pixels": 0},
        {"pack_window": 0},
        {"dp_ranks": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        PipelineConfig(**kwargs)


def test_unlimited_cap():
    assert PipelineConfig(visual_token_cap="unlimited").visual_token_cap is None


def test_presets_follow_sequence_length():
    assert {k: (v.sequence_length, v.max_pixels // CELL) for k, v in PRESETS.items()} == {
        "default": (8192, 1280),
        "sft-2k": (2048, 1280),
        "sft-4k": (4096, 3072),
        "sft-8k": (8192, 4096),
    }
    assert PRESETS["sft-2k"].visual_token_cap == 1024
