"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 I/O, 4 state mismatch.
Failures print one JSON line ``{"error": ..., "exit_code": ..., "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
import tempfile
from pathlib import Path

from . import __version__
from .core import PipelineConfig, atomic_write_text, load_manifest, manifest_digest, preset
from .errors import PipelineError, StateMismatch
from .loader import RankLoader
from .merge import MergeSpec, average
from .packing import OnlinePacker, fill_report, pack_offline, pack_stream, read_packs
from .search import CommandScorer, ResolutionGrid, run_search
from .sharding import ShardPlan, build_plan
from .tracker import checkpoint, restore

log = logging.getLogger("mvpipe")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_STATE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pixels(text: str) -> int:
    """Parse ``1003520`` or ``1280*28*28``."""
    try:
        value = 1
        for part in text.split("*"):
            value *= int(part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a pixel count: {text!r}") from None
    return value


def _pixel_list(text: str) -> list[int]:
    return [_pixels(t) for t in text.split(",") if t.strip()]


def _seed(text: str) -> int | None:
    if text.lower() == "none":
        return None
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer or 'none', got {text!r}") from None


def _cap(text: str):
    if text in ("auto", "unlimited"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"visual cap must be an integer, 'auto' or 'unlimited', got {text!r}") from None


def _window(text: str) -> int | None:
    if text == "unbounded":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be an integer or 'unbounded', got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("packing config (defaults come from --preset)")
    g.add_argument("--preset", default="default", help="default, sft-2k, sft-4k or sft-8k (default: %(default)s)")
    g.add_argument("--seq-len", type=int, help="tokens per pack (preset default 8192)")
    g.add_argument("--min-pixels", type=_pixels, help="resize floor, e.g. 4*28*28")
    g.add_argument("--max-pixels", type=_pixels, help="resize ceiling, e.g. 1280*28*28")
    g.add_argument("--visual-cap", type=_cap, default="auto", help="visual tokens per pack: int, auto (= seq-len/2) or unlimited")
    g.add_argument("--window", type=_window, default=8, help="open-pack window, or 'unbounded' (default: %(default)s)")


def _config(args) -> PipelineConfig:
    base = preset(args.preset)
    return PipelineConfig(
        sequence_length=args.seq_len if args.seq_len is not None else base.sequence_length,
        min_pixels=args.min_pixels if args.min_pixels is not None else base.min_pixels,
        max_pixels=args.max_pixels if args.max_pixels is not None else base.max_pixels,
        visual_token_cap=args.visual_cap,
        pack_window=args.window,
    )


def _print(doc: dict) -> None:
    print(json.dumps(doc, indent=1))


# -- subcommands --------------------------------------------------------------


def cmd_plan(args) -> int:
    manifest = load_manifest(args.manifest)
    plan = build_plan(manifest, args.dp_ranks, args.seed, args.epoch, manifest_path=str(args.manifest))
    plan.save(args.out)
    sizes = plan.sizes()
    _print(
        {
            "plan": str(args.out),
            "samples": len(manifest),
            "dp_ranks": plan.dp_ranks,
            "seed": plan.seed,
            "epoch": plan.epoch,
            "shard_sizes": sizes,
            "imbalance": max(sizes) - min(sizes),
            "fingerprint": plan.fingerprint(),
        }
    )
    return EXIT_OK


def _locate_manifest(plan: ShardPlan, plan_path: Path, override: str | None) -> Path:
    if override:
        return Path(override)
    if not plan.manifest_path:
        raise UsageError("plan does not record its manifest; pass --manifest")
    p = Path(plan.manifest_path)
    if not p.is_absolute() and not p.exists():
        p = plan_path.parent / p
    return p


def _reconcile_output(out: Path, last_pack_id: int) -> None:
    """Drop packs written after the last checkpointed boundary."""
    keep = last_pack_id + 1
    lines = out.read_text(encoding="utf-8").splitlines(keepends=True) if out.exists() else []
    if len(lines) < keep:
        raise StateMismatch(f"{out} holds {len(lines)} pack(s) but the tracker state records {keep}")
    for i, line in enumerate(lines[:keep]):
        if json.loads(line).get("pack_id") != i:
            raise StateMismatch(f"{out}: line {i + 1} is not pack {i}")
    if len(lines) > keep:
        log.warning("discarding %d pack(s) written after the last checkpoint", len(lines) - keep)
        atomic_write_text(out, "".join(lines[:keep]))


def cmd_pack(args, resume: bool = False) -> int:
    cfg = _config(args)
    plan_path = Path(args.plan)
    plan = ShardPlan.load(plan_path)
    manifest = load_manifest(_locate_manifest(plan, plan_path, args.manifest))
    out = Path(args.out)
    state_path = Path(args.state) if args.state else out.with_name(out.name + ".state.json")

    state = None
    if state_path.exists():
        state = restore(state_path)
        _reconcile_output(out, state.rank(args.rank).last_pack_id)
    elif resume:
        raise FileNotFoundError(f"no tracker state at {state_path}")
    else:
        atomic_write_text(out, "")

    loader = RankLoader(plan, manifest, args.rank, cfg, state, strict=args.strict)
    written = 0
    stopped_early = False
    with open(out, "a", encoding="utf-8") as f:
        if args.max_packs == 0:
            stopped_early = True
        else:
            for pack in loader:
                f.write(pack.to_line() + "\n")
                f.flush()
                os.fsync(f.fileno())
                checkpoint(loader.state, state_path)
                written += 1
                if args.max_packs is not None and written >= args.max_packs:
                    stopped_early = True
                    break
    if not stopped_early:
        checkpoint(loader.state, state_path)
    rc = loader.state.rank(args.rank)
    _print(
        {
            "rank": args.rank,
            "packs_written": written,
            "last_pack_id": rc.last_pack_id,
            "cursor": rc.cursor,
            "shard_len": rc.shard_len,
            "complete": rc.cursor == rc.shard_len and not rc.open_packs,
            "skipped": [{"key": list(k), "reason": r} for k, r in loader.skipped],
            "state": str(state_path),
        }
    )
    return EXIT_OK


def cmd_merge(args) -> int:
    spec = MergeSpec(
        inputs=args.inputs,
        weights=[float(w) for w in args.weights.split(",")] if args.weights else None,
        key_filter=args.filter or None,
        passthrough_source=args.passthrough,
    )
    merged = average(spec)
    merged.save(args.out)
    n_merged = sum(1 for n in merged if spec.matches(n))
    _print(
        {
            "out": str(args.out),
            "inputs": [str(p) for p in args.inputs],
            "weights": spec.resolved_weights(),
            "tensors": len(merged),
            "merged": n_merged,
            "copied_from_passthrough": len(merged) - n_merged,
        }
    )
    return EXIT_OK


def cmd_search(args) -> int:
    grid = ResolutionGrid(
        tuple(args.min_grid) if args.min_grid else ResolutionGrid().min_values,
        tuple(args.max_grid) if args.max_grid else ResolutionGrid().max_values,
    )
    manifest = load_manifest(args.manifest)
    with tempfile.TemporaryDirectory(prefix="mvpipe-search-") as tmp:
        scorer = CommandScorer(shlex.split(args.scorer), args.workdir or tmp, timeout=args.timeout)
        result = run_search(grid, manifest, scorer, max_workers=args.workers)
    doc = result.to_dict()
    doc["manifest_digest"] = manifest_digest(manifest)
    atomic_write_text(args.out, json.dumps(doc, indent=1) + "\n")
    _print(
        {
            "report": str(args.out),
            "configs": len(grid),
            "scored": len(result.surface),
            "holes": len(result.holes),
            "best": doc["best"],
        }
    )
    return EXIT_OK


def cmd_stats(args) -> int:
    edges = [int(x) for x in args.buckets.split(",")] if args.buckets else None
    if args.packs:
        packs = read_packs(args.packs)
        _print({"packs": str(args.packs), "report": fill_report(packs, edges).to_dict()})
        return EXIT_OK
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    online = list(pack_stream(manifest, cfg, strict=args.strict))
    offline = pack_offline([s for s in manifest if _packable(s, cfg)] if not args.strict else manifest, cfg)
    _print(
        {
            "manifest": str(args.manifest),
            "sequence_length": cfg.sequence_length,
            "visual_token_cap": cfg.visual_token_cap,
            "window": cfg.pack_window,
            "online": fill_report(online, edges).to_dict(),
            "offline_ffd": fill_report(offline, edges).to_dict(),
        }
    )
    return EXIT_OK


def _packable(sample, cfg) -> bool:
    try:
        OnlinePacker(cfg).entry_for(sample)
    except (PipelineError, ValueError):
        return False
    return True


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvpipe", description="Multimodal packing, resume, merge and resolution-search toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="shard a manifest across data-parallel ranks")
    p.add_argument("manifest")
    p.add_argument("--dp-ranks", type=int, default=1)
    p.add_argument("--seed", type=_seed, default=0, help="shuffle seed, or 'none' to keep manifest order")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    for name, resume in (("pack", False), ("resume", True)):
        p = sub.add_parser(name, help="pack one rank's shard" + (" from saved tracker state" if resume else ""))
        p.add_argument("--plan", required=True)
        p.add_argument("--rank", type=int, default=0)
        p.add_argument("--out", required=True, help="pack records, one JSON object per line")
        p.add_argument("--state", help="tracker state file (default: <out>.state.json)")
        p.add_argument("--manifest", help="override the manifest path recorded in the plan")
        p.add_argument("--strict", action="store_true", help="fail on oversized or empty samples instead of skipping")
        p.add_argument("--max-packs", type=int, help="stop after writing this many packs")
        _add_config_flags(p)
        p.set_defaults(func=lambda a, _r=resume: cmd_pack(a, resume=_r))

    p = sub.add_parser("merge", help="average checkpoint containers")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="comma-separated, must sum to 1 (default uniform)")
    p.add_argument("--filter", action="append", help="only merge tensors with this name prefix (repeatable)")
    p.add_argument("--passthrough", type=int, default=0, help="input index supplying unfiltered tensors")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("search", help="test-time resolution grid search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scorer", required=True, help="command; invoked as <cmd> MIN MAX SUMMARY_JSON")
    p.add_argument("--min-grid", type=_pixel_list, help="comma-separated min_pixels values")
    p.add_argument("--max-grid", type=_pixel_list, help="comma-separated max_pixels values")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timeout", type=float)
    p.add_argument("--workdir", help="keep per-config summary files here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("stats", help="fill report for a manifest (online vs offline) or a pack file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--packs")
    p.add_argument("--buckets", help="visual-token histogram edges, comma-separated")
    p.add_argument("--strict", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_stats)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "merge" and len(args.inputs) < 2:
        return _fail("UsageError", EXIT_USAGE, "merge needs at least two inputs")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("UsageError", EXIT_USAGE, str(exc))
    except PipelineError as exc:
        return _fail(type(exc).__name__, exc.exit_code, str(exc))
    except OSError as exc:
        return _fail(type(exc).__name__, EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc))
    except ValueError as exc:
        return _fail(type(exc).__name__, EXIT_VALIDATION, str(exc))


if __name__ == "__main__":
    sys.exit(main())
