"""featmill: a miniature real-time SQL feature-computation engine.

One compiled plan serves both an online request path and an offline batch
path over in-memory, per-key, time-ordered event storage. The optimizer
stack (query rewrite, operator fusion, plan caching, pre-aggregation,
parallel execution) is independently toggleable for ablation benchmarking.
"""

from .engine import (
    ConsistencyReport,
    EngineConfig,
    FeatureEngine,
    FeatureRow,
    LanePool,
    LatencyBreakdown,
    write_rows_csv,
    write_rows_jsonl,
)
from .errors import EngineError
from .mlfuncs import MlFunction, MlRegistry
from .plancache import PlanCache
from .planner import OptimizationFlags, PhysicalPlan, build_logical, optimize
from .preagg import PreAggIndex
from .schema import ColumnType, TableSchema
from .server import FeatureServer, Governor, ServerConfig
from .sqlfront import WindowSpec, normalize, parse, tokenize
from .storage import MemoryAccount, StorageEngine

__version__ = "0.1.0"

__all__ = [
    "ColumnType",
    "ConsistencyReport",
    "EngineConfig",
    "EngineError",
    "FeatureEngine",
    "FeatureRow",
    "FeatureServer",
    "Governor",
    "LanePool",
    "LatencyBreakdown",
    "MemoryAccount",
    "MlFunction",
    "MlRegistry",
    "OptimizationFlags",
    "PhysicalPlan",
    "PlanCache",
    "PreAggIndex",
    "ServerConfig",
    "StorageEngine",
    "TableSchema",
    "WindowSpec",
    "build_logical",
    "normalize",
    "optimize",
    "parse",
    "tokenize",
    "write_rows_csv",
    "write_rows_jsonl",
]
