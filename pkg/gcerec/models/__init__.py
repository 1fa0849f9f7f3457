from .records import InteractionRecord, SideInfoMatrix
from .database import GridCell, get_engine, create_tables, session_scope, ranked_cells
from .schemas import (
    RunConfig, DataConfig, FormatSpec, SideInfoSpec, ContextConfig, FilterConfig, GraphConfig,
    TrainConfig, EvalConfig, GridConfig,
    DatasetStats, EpochLog, TrainReport, MetricSummary, EvalReport, RunManifest, GridCellResult,
    ModelKind, ProviderKind, ContextMode, ActivationEnum, NegativeKeyEnum, LongTailMode,
    LR_GRID, BATCH_GRID, DROPOUT_GRID
)

__all__ = [
    "InteractionRecord", "SideInfoMatrix",
    "GridCell", "get_engine", "create_tables", "session_scope", "ranked_cells",
    "RunConfig", "DataConfig", "FormatSpec", "SideInfoSpec", "ContextConfig", "FilterConfig", "GraphConfig",
    "TrainConfig", "EvalConfig", "GridConfig",
    "DatasetStats", "EpochLog", "TrainReport", "MetricSummary", "EvalReport", "RunManifest", "GridCellResult",
    "ModelKind", "ProviderKind", "ContextMode", "ActivationEnum", "NegativeKeyEnum", "LongTailMode",
    "LR_GRID", "BATCH_GRID", "DROPOUT_GRID"
]
