"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import contextlib
import math
import random
import struct
import sys
import tempfile
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_manifest, text_samples  # noqa: E402

from mvpipe.container import TensorContainer  # noqa: E402
from mvpipe.core import CELL, PRESETS, ImageSpec, PipelineConfig, SampleRecord, preset  # noqa: E402
from mvpipe.errors import ContainerFormatError, ResizeInfeasible  # noqa: E402
from mvpipe.loader import RankLoader  # noqa: E402
from mvpipe.merge import MergeSpec, average, weighted_sum  # noqa: E402
from mvpipe.packing import PackEntry, build_pack, mask_descriptor, pack_stream  # noqa: E402
from mvpipe.resolution import smart_resize  # noqa: E402
from mvpipe.search import ResolutionGrid, enumerate_grid, run_search, surface_report  # noqa: E402
from mvpipe.sharding import build_plan  # noqa: E402
from mvpipe.tracker import checkpoint, restore  # noqa: E402

RESULTS: dict[int, str] = {}
LINES: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, name: str, limit_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        RESULTS[number] = "FAIL"
        LINES[number] = f"[acceptance {number:2d}] FAIL  {name} ({elapsed:.2f}s): {type(exc).__name__}: {str(exc)[:200]}"
        raise
    elapsed = time.perf_counter() - start
    if elapsed >= limit_s:
        RESULTS[number] = "FAIL"
        LINES[number] = f"[acceptance {number:2d}] FAIL  {name} took {elapsed:.2f}s, limit {limit_s:g}s"
        pytest.fail(f"criterion {number} exceeded its {limit_s:g}s budget ({elapsed:.2f}s)")
    RESULTS[number] = "PASS"
    LINES[number] = f"[acceptance {number:2d}] PASS  {name} ({elapsed:.2f}s < {limit_s:g}s)"


# -- 1 ------------------------------------------------------------------------


def test_01_grid_fidelity():
    with criterion(1, "default resolution grid is the 24 expected configurations", 1.0):
        mins = [3136, 12544, 25088, 50176]
        maxs = [1003520, 1605632, 2007040, 2408448, 3211264, 6422528]
        assert [m // 784 for m in mins] == [4, 16, 32, 64]
        assert [m // 784 for m in maxs] == [1280, 2048, 2560, 3072, 4096, 8192]
        configs = enumerate_grid(ResolutionGrid())
        assert configs == [(mn, mx) for mx in maxs for mn in mins]
        assert len(configs) == 24 and len(set(configs)) == 24


# -- 2 ------------------------------------------------------------------------


def test_02_hyperparameter_fidelity():
    with criterion(2, "default config and SFT presets", 1.0):
        d = PipelineConfig()
        assert d.sequence_length == 8192
        assert (d.min_pixels, d.max_pixels) == (4 * 28 * 28, 1280 * 28 * 28)
        assert PRESETS["default"] == d
        expected = {"sft-2k": (2048, 1280 * 784), "sft-4k": (4096, 3072 * 784), "sft-8k": (8192, 4096 * 784)}
        for name, (seq, mx) in expected.items():
            p = preset(name)
            assert (p.sequence_length, p.max_pixels) == (seq, mx), name
            assert p.min_pixels == 4 * 784


# -- 3 ------------------------------------------------------------------------


def _random_image(rng: random.Random) -> ImageSpec:
    kind = rng.random()
    if kind < 0.6:
        return ImageSpec(rng.randint(1, 4000), rng.randint(1, 4000))
    if kind < 0.9:
        # log-uniform, covers tiny and huge images
        return ImageSpec(int(math.exp(rng.uniform(0, math.log(30000)))), int(math.exp(rng.uniform(0, math.log(30000)))))
    # thin strips
    long, short = rng.randint(500, 30000), rng.randint(1, 60)
    return ImageSpec(long, short) if rng.random() < 0.5 else ImageSpec(short, long)


def test_03_resize_correctness():
    with criterion(3, "resize: 10,000 random images per bound pair", 10.0):
        rng = random.Random(3)
        images = [_random_image(rng) for _ in range(10_000)]
        infeasible_seen = 0
        for mn, mx in enumerate_grid(ResolutionGrid()):
            for img in images:
                w, h = img.width, img.height
                try:
                    r = smart_resize(img, mn, mx)
                except ResizeInfeasible as exc:
                    infeasible_seen += 1
                    cw, ch = exc.candidate
                    area = cw * ch
                    # the rejected candidate must really break the window or the drift bound
                    drift_ok = abs(cw * h - w * ch) * ch <= 28 * (cw + ch) * h and abs(ch * w - h * cw) * cw <= 28 * (
                        cw + ch
                    ) * w
                    assert not (mn <= area <= mx) or not drift_ok, (img, mn, mx, exc.candidate)
                    continue
                assert r.width % 28 == 0 and r.height % 28 == 0 and r.width >= 28 and r.height >= 28
                assert r.visual_tokens == (r.width // 28) * (r.height // 28)
                assert mn <= r.width * r.height <= mx
                # |out_w/out_h - w/h| <= 28 (out_w + out_h) / out_h^2, cross-multiplied
                assert abs(r.width * h - w * r.height) * r.height <= 28 * (r.width + r.height) * h
                again = smart_resize(ImageSpec(r.width, r.height), mn, mx)
                assert (again.width, again.height) == (r.width, r.height)
        assert infeasible_seen > 0


# -- 4 ------------------------------------------------------------------------


def _workload(rng: random.Random, seq: int) -> list[SampleRecord]:
    if rng.random() < 0.05:
        n = 10_000
    else:
        n = int(math.exp(rng.uniform(0, math.log(10_000))))
    out = []
    cap_side = 800 if seq >= 4096 else 560
    for i in range(n):
        images = ()
        if rng.random() < 0.2:
            w = rng.randint(28, cap_side)
            h = rng.randint(max(28, w // 2), min(cap_side, 2 * w))
            images = (ImageSpec(w, h),)
        text = rng.randint(1, seq // 2) if rng.random() < 0.9 else rng.randint(1, seq // 2 + seq // 4)
        out.append(SampleRecord("w", i, text, images))
    return out


def _conserved(samples, packs, seq):
    assert Counter(s.key for s in samples) == Counter(e.key for p in packs for e in p.entries)
    total = 0
    for p in packs:
        assert p.used_tokens + p.pad_tokens == seq
        total += p.used_tokens
    assert len(packs) >= -(-total // seq)
    return total


def test_04_packing_conservation_and_quality():
    with criterion(4, "packing: 1,000 workloads, conservation, lower bound, half-fill", 60.0):
        rng = random.Random(4)
        for _ in range(1000):
            seq = rng.choice([2048, 4096, 8192])
            samples = _workload(rng, seq)
            bounded = PipelineConfig(sequence_length=seq, pack_window=rng.choice([1, 4, 8, 16]))
            packs = list(pack_stream(samples, bounded))
            for p in packs:
                assert p.visual_tokens <= bounded.visual_token_cap
            total = _conserved(samples, packs, seq)
            unbounded = PipelineConfig(sequence_length=seq, pack_window=None, visual_token_cap="unlimited")
            packs = list(pack_stream(samples, unbounded))
            assert _conserved(samples, packs, seq) == total
            assert sum(2 * p.used_tokens < seq for p in packs) <= 1


# -- 5 ------------------------------------------------------------------------


def test_05_mask_oracle():
    with criterion(5, "mask: 1,000 random packs against brute-force block-diagonal", 5.0):
        rng = random.Random(5)
        for _ in range(1000):
            L = rng.randint(1, 64)
            lengths, used = [], 0
            while used < L and (not lengths or rng.random() < 0.8):
                n = rng.randint(1, L - used)
                lengths.append(n)
                used += n
            pack = build_pack(0, [PackEntry("m", i, n, 0) for i, n in enumerate(lengths)], L)
            owner = []
            for seg, n in enumerate(lengths):
                owner += [seg] * n
            owner += [None] * (L - used)
            expect = [[owner[i] is not None and owner[i] == owner[j] for j in range(L)] for i in range(L)]
            assert mask_descriptor(pack).to_dense().tolist() == expect


# -- 6 ------------------------------------------------------------------------


def _packs(plan, manifest, rank, cfg, state=None, stop_after=None):
    loader = RankLoader(plan, manifest, rank, cfg, state)
    lines = []
    for pack in loader:
        lines.append(pack.to_line())
        if stop_after is not None and len(lines) >= stop_after:
            break
    return lines, loader.state


def test_06_resume_equivalence():
    with criterion(6, "resume: 500 interrupted runs byte-identical to uninterrupted", 30.0):
        rng = random.Random(6)
        with tempfile.TemporaryDirectory() as tmp:
            state_path = Path(tmp) / "state.json"
            for _ in range(500):
                seq = rng.choice([2048, 4096, 8192])
                manifest = random_manifest(rng, rng.randint(0, 120), max_text=seq // 2, max_side=560)
                ranks = rng.randint(1, 6)
                seed = rng.choice([None, rng.getrandbits(64)])
                plan = build_plan(manifest, ranks, seed, epoch=rng.randint(0, 3))
                rank = rng.randrange(ranks)
                cfg = PipelineConfig(sequence_length=seq, pack_window=rng.choice([1, 2, 8, None]))
                reference, _ = _packs(plan, manifest, rank, cfg)
                k = rng.randint(0, len(reference))
                if k == 0:
                    head, state = [], None
                else:
                    head, state = _packs(plan, manifest, rank, cfg, stop_after=k)
                    checkpoint(state, state_path)
                    state = restore(state_path)
                tail, _ = _packs(plan, manifest, rank, cfg, state)
                assert "\n".join(head + tail).encode() == "\n".join(reference).encode()


# -- 7 ------------------------------------------------------------------------


def test_07_shard_partition():
    with criterion(7, "sharding: 500 random partitions", 5.0):
        rng = random.Random(7)
        for _ in range(500):
            n = rng.randint(0, 3000)
            ranks = rng.randint(1, 64)
            manifest = text_samples([1] * n)
            plan = build_plan(manifest, ranks, rng.choice([None, rng.getrandbits(64)]))
            shards = [plan.shard(r) for r in range(ranks)]
            seen = set()
            for s in shards:
                assert seen.isdisjoint(s)
                seen.update(s)
            assert seen == {r.key for r in manifest}
            sizes = [len(s) for s in shards]
            assert max(sizes) - min(sizes) <= 1


# -- 8 ------------------------------------------------------------------------


def _random_set(rng: np.random.Generator):
    k = int(rng.integers(2, 6))
    budget = int(np.exp(rng.uniform(0, np.log(1e4))))
    schema, used = {}, 0
    for i in range(int(rng.integers(1, 6))):
        shape = tuple(int(d) for d in rng.integers(1, 12, size=rng.integers(1, 4)))
        if used + math.prod(shape) > budget and schema:
            break
        schema[("lang." if i % 2 == 0 else "vision.") + f"t{i}"] = shape
        used += math.prod(shape)
    scale = 10.0 ** rng.integers(-3, 4)
    models = [
        TensorContainer({n: (rng.standard_normal(s) * scale).astype(np.float32) for n, s in schema.items()})
        for _ in range(k)
    ]
    return models


def _naive(models, weights, name):
    # per element: double products, added smallest first
    cols = [m[name].ravel().tolist() for m in models]
    out = []
    for i in range(len(cols[0])):
        acc = 0.0
        for p in sorted(w * c[i] for w, c in zip(weights, cols)):
            acc += p
        out.append(acc)
    return np.asarray(out, dtype=np.float64).reshape(models[0][name].shape).astype(np.float32)


def _cascade(arrays, weights):
    acc, total = np.asarray(arrays[0], dtype=np.float64), float(weights[0])
    for a, w in zip(arrays[1:], weights[1:]):
        total += float(w)
        t = float(w) / total if total else 0.0
        acc = (1.0 - t) * acc + t * np.asarray(a, dtype=np.float64)
    return acc


def test_08_merge_oracle():
    with criterion(8, "merge: 200 random container sets against naive recomputation", 30.0):
        rng = np.random.default_rng(8)
        for _ in range(200):
            models = _random_set(rng)
            k = len(models)
            weights = None if rng.random() < 0.5 else [float(x) for x in rng.dirichlet(np.ones(k))]
            w = MergeSpec(models, weights).resolved_weights()
            out = average(MergeSpec(models, weights))
            for name in models[0]:
                assert out[name].tobytes() == _naive(models, w, name).tobytes(), name
                stack = np.stack([m[name] for m in models])
                assert np.all(stack.min(axis=0) <= out[name]) and np.all(out[name] <= stack.max(axis=0))
                arrays = [m[name] for m in models]
                direct = weighted_sum(arrays, w)
                norm = np.linalg.norm(direct)
                assert np.linalg.norm(direct - _cascade(arrays, w)) <= 1e-12 * norm or norm == 0
            assert average(MergeSpec([models[0]] * k, weights)).bitwise_equal(models[0])
            src = int(rng.integers(0, k))
            selective = average(MergeSpec(models, weights, key_filter="lang.", passthrough_source=src))
            assert list(selective.keys()) == list(models[src].keys())
            for name in models[src]:
                if not name.startswith("lang."):
                    assert selective[name].tobytes() == models[src][name].tobytes()
                else:
                    assert selective[name].tobytes() == out[name].tobytes()


# -- 9 ------------------------------------------------------------------------


def _quantile(sorted_scores, p):
    pos = p * (len(sorted_scores) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_scores) - 1)
    return sorted_scores[lo] + (pos - lo) * (sorted_scores[hi] - sorted_scores[lo])


def test_09_search_argmax_and_box_stats():
    with criterion(9, "search: 100 tables with ties, box statistics", 5.0):
        rng = random.Random(9)
        grid = ResolutionGrid()
        configs = enumerate_grid(grid)
        for t in range(100):
            table = {c: float(rng.randint(0, 3 if t % 2 else 50)) for c in configs}
            res = run_search(grid, [], lambda c, s: table[c])
            top = max(table.values())
            tied = [c for c in configs if table[c] == top]
            smallest_max = min(c[1] for c in tied)
            expect = (max(c[0] for c in tied if c[1] == smallest_max), smallest_max)
            assert res.best == expect and res.best_score == top
            rows = surface_report(res)
            assert [r.max_pixels for r in rows] == list(grid.max_values)
            for r in rows:
                col = sorted(table[(mn, r.max_pixels)] for mn in grid.min_values)
                want = (col[0], _quantile(col, 0.25), _quantile(col, 0.5), _quantile(col, 0.75), col[-1])
                assert (r.minimum, r.q1, r.median, r.q3, r.maximum) == pytest.approx(want, abs=1e-12)
        small = ResolutionGrid((1, 2, 3, 4), (10,))
        scores = {(1, 10): 1.0, (2, 10): 2.0, (3, 10): 3.0, (4, 10): 4.0}
        (row,) = surface_report(run_search(small, [], lambda c, s: scores[c]))
        assert (row.minimum, row.q1, row.median, row.q3, row.maximum) == (1.0, 1.75, 2.5, 3.25, 4.0)


# -- 10 -----------------------------------------------------------------------


def test_10_container_round_trip():
    with criterion(10, "container: 100 random round-trips, corruption rejected", 10.0):
        rng = np.random.default_rng(10)
        alphabet = ["w", "b", "lang", "vision", "ß", "层", "_", ".", "0"]
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a.mvtc", Path(tmp) / "b.mvtc"
            for _ in range(100):
                c = TensorContainer()
                for i in range(int(rng.integers(0, 8))):
                    name = "".join(rng.choice(alphabet, size=int(rng.integers(1, 6)))) + str(i)
                    shape = tuple(int(d) for d in rng.integers(1, 9, size=rng.integers(1, 5)))
                    data = rng.standard_normal(shape).astype(np.float32)
                    data.ravel()[0] = rng.choice([np.inf, -0.0, 1e-45, np.float32(3.4e38)])
                    c[name] = data
                c.save(a)
                back = TensorContainer.load(a)
                assert list(back.keys()) == list(c.keys())
                for n in c:
                    assert back[n].shape == c[n].shape and back[n].tobytes() == c[n].tobytes()
                back.save(b)
                raw = a.read_bytes()
                assert b.read_bytes() == raw
                assert raw[:4] == b"MVTC" and struct.unpack_from("<II", raw, 4) == (1, len(c))
                with pytest.raises(ContainerFormatError):
                    TensorContainer.from_bytes(bytes([raw[0] ^ 0xFF]) + raw[1:])
                with pytest.raises(ContainerFormatError):
                    TensorContainer.from_bytes(raw[: int(rng.integers(0, len(raw)))])


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    passed = sum(v == "PASS" for v in RESULTS.values())
    print(f"{passed}/10 acceptance criteria passed")
    sys.exit(code)
