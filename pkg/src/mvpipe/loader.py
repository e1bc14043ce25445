"""Per-rank data loader: shard stream -> resume -> online packing."""

from __future__ import annotations

from typing import Iterator, Sequence

from .core import PipelineConfig, SampleRecord, manifest_digest
from .errors import StateMismatch
from .packing import OnlinePacker, Pack
from .sharding import ShardPlan
from .tracker import TrackerState, new_state, record_consumed, resume_stream, verify_plan


def pack_config_dict(cfg: PipelineConfig) -> dict:
    """The config fields that determine pack contents."""
    return {
        "sequence_length": cfg.sequence_length,
        "min_pixels": cfg.min_pixels,
        "max_pixels": cfg.max_pixels,
        "visual_token_cap": cfg.visual_token_cap,
        "pack_window": cfg.pack_window,
        "patch_size": cfg.patch_size,
    }


class RankLoader:
    """Iterate one rank's packs, keeping :attr:`state` at the last pack boundary.

    After each yielded pack, ``state`` describes the point just past that
    pack; persisting it there makes the run safely resumable. Once iteration
    ends, ``state`` has the cursor at the end of the shard.

    >>> loader = RankLoader(plan, manifest, rank=0, cfg=cfg)      # doctest: +SKIP
    >>> for pack in loader:                                        # doctest: +SKIP
    ...     write(pack); checkpoint(loader.state, path)
    """

    def __init__(
        self,
        plan: ShardPlan,
        manifest: Sequence[SampleRecord],
        rank: int,
        cfg: PipelineConfig,
        state: TrackerState | None = None,
        *,
        strict: bool = True,
        check_manifest: bool = True,
    ):
        if check_manifest and manifest_digest(manifest) != plan.manifest_digest:
            raise StateMismatch("manifest content differs from the one the plan was built from")
        self.plan = plan
        self.rank = rank
        self.cfg = cfg
        self.strict = strict
        plan.shard(rank)  # validates rank
        self._records = {r.key: r for r in manifest}
        config = pack_config_dict(cfg)
        if state is None:
            state = new_state(plan, ranks=[rank], pack_config=config)
        else:
            verify_plan(plan, state)
            if state.pack_config is not None and state.pack_config != config:
                raise StateMismatch(f"packing config changed since checkpoint: {state.pack_config} -> {config}")
        self.state = state
        self.skipped: list[tuple[tuple[str, int], str]] = []

    def __iter__(self) -> Iterator[Pack]:
        rank = self.rank
        rc = self.state.rank(rank)
        packer = OnlinePacker(
            self.cfg, strict=self.strict, next_pack_id=rc.last_pack_id + 1, open_packs=rc.open_packs
        )
        self.skipped = packer.skipped
        pulled = 0
        for key in resume_stream(self.plan, self.state, rank):
            pulled += 1
            for pack in packer.push(self._records[key]):
                self.state = record_consumed(self.state, rank, pulled, pack.pack_id, packer.open_snapshot())
                pulled = 0
                yield pack
        for pack in packer.flush():
            self.state = record_consumed(self.state, rank, pulled, pack.pack_id, packer.open_snapshot())
            pulled = 0
            yield pack
        if pulled:
            self.state = record_consumed(self.state, rank, pulled, None, [])
