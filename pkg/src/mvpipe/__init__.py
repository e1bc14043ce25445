"""Data-plane toolkit for multimodal training: sharding, online packing under
visual-token budgets, exact resume, checkpoint averaging and test-time
resolution search."""

__version__ = "0.1.0"

from .container import TensorContainer
from .core import ImageSpec, PipelineConfig, PRESETS, SampleRecord, load_manifest, total_tokens, write_manifest
from .errors import PipelineError
from .loader import RankLoader
from .merge import MergeSpec, average, diff_report
from .packing import MaskDescriptor, OnlinePacker, Pack, fill_report, mask_descriptor, pack_offline, pack_stream
from .resolution import ResizedImage, smart_resize, visual_tokens
from .search import ResolutionGrid, enumerate_grid, run_search, surface_report
from .sharding import ShardPlan, build_plan, rank_stream
from .tracker import TrackerState, checkpoint, record_consumed, restore, resume_stream
