from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from typing import Optional, List, Dict, Literal, Any
from enum import Enum

# 超参数网格
LR_GRID = (0.0001, 0.0005, 0.001, 0.005, 0.01)
BATCH_GRID = (256, 512, 1024, 2048)
DROPOUT_GRID = (0.0, 0.15, 0.5)
DEFAULT_EMBEDDING_SIZE = 64
DEFAULT_MAX_EPOCHS = 150


class ModelKind(str, Enum):
    MF = "mf"
    FM = "fm"
    NCF = "ncf"


class ProviderKind(str, Enum):
    TABLE = "table"
    GCE = "gce"
    GCE_SI = "gce-si"


class ContextMode(str, Enum):
    NONE = "none"              # 不使用上下文 (二部图)
    COLUMNS = "columns"        # 上下文直接来自输入列
    LAST_CLICKED = "last-clicked"


class ActivationEnum(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


class NegativeKeyEnum(str, Enum):
    USER_CONTEXT = "user-context"
    USER = "user"


class LongTailMode(str, Enum):
    ITEMS = "items"
    USERS = "users"


class FormatSpec(BaseModel):
    """分隔文本的列映射"""
    preset: Optional[Literal["ml100k"]] = Field(None, description="预置格式")
    delimiter: str = Field("\t", min_length=1, description="分隔符")
    user_col: int = Field(0, ge=0)
    item_col: int = Field(1, ge=0)
    context_cols: List[int] = Field(default_factory=list)
    timestamp_col: Optional[int] = Field(None, ge=0)
    rating_col: Optional[int] = Field(None, ge=0)
    header: bool = Field(False, description="首行为表头")

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, data: Any):
        if isinstance(data, dict) and data.get("preset") == "ml100k":
            # u.data: user item rating timestamp
            defaults = {"delimiter": "\t", "user_col": 0, "item_col": 1, "rating_col": 2, "timestamp_col": 3}
            return {**defaults, **data}
        return data

    @model_validator(mode="after")
    def check_columns(self):
        used = [self.user_col, self.item_col, *self.context_cols]
        used += [c for c in (self.timestamp_col, self.rating_col) if c is not None]
        if len(used) != len(set(used)):
            raise ValueError(f"列映射存在重复列: {used}")
        return self

    @property
    def max_col(self) -> int:
        cols = [self.user_col, self.item_col, *self.context_cols]
        cols += [c for c in (self.timestamp_col, self.rating_col) if c is not None]
        return max(cols)


class SideInfoSpec(BaseModel):
    """侧信息文件: 每行 "entity_key feature_token" """
    path: str = Field(..., min_length=1)
    field: str = Field("item", description="侧信息所属字段")
    delimiter: Optional[str] = Field(None, description="缺省按空白分隔")


class DataConfig(BaseModel):
    path: str = Field(..., min_length=1, description="交互日志路径")
    format: FormatSpec = Field(default_factory=FormatSpec)
    side_info: List[SideInfoSpec] = Field(default_factory=list)


class ContextConfig(BaseModel):
    mode: ContextMode = ContextMode.LAST_CLICKED
    window: int = Field(1, ge=1, le=10, description="取最近 k 个物品作为 k 个上下文字段")


class FilterConfig(BaseModel):
    min_interactions_per_user: int = Field(3, ge=1)
    top_items: Optional[int] = Field(None, ge=1)
    min_timestamp: Optional[int] = None
    max_timestamp: Optional[int] = None


class GraphConfig(BaseModel):
    context_edges: bool = Field(True, description="多个上下文字段之间是否连边")
    dump_edges: Optional[str] = Field(None, description="调试输出边表路径")


class TrainConfig(BaseModel):
    """训练超参数，默认取值与取值网格一致"""
    learning_rate: float = Field(0.001, gt=0)
    batch_size: int = Field(256, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)
    embedding_size: int = Field(DEFAULT_EMBEDDING_SIZE, ge=1)
    max_epochs: int = Field(DEFAULT_MAX_EPOCHS, ge=1)
    patience: int = Field(5, ge=1)
    seed: int = 0
    num_negatives: int = Field(1, ge=1)
    negative_key: NegativeKeyEnum = NegativeKeyEnum.USER_CONTEXT
    gce_layers: int = Field(1, ge=1)
    activation: ActivationEnum = ActivationEnum.RELU
    per_field_weights: bool = False
    ncf_hidden: List[int] = Field(default_factory=lambda: [128, 64])
    pairwise: Literal["identity", "literal"] = "identity"
    mf_bias: bool = False
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    probe_full_epoch: bool = False
    allow_off_grid: bool = Field(False, description="允许网格以外的取值")

    @field_validator("ncf_hidden")
    @classmethod
    def validate_hidden(cls, v):
        if any(size < 1 for size in v):
            raise ValueError("NCF 隐层大小必须为正")
        return v

    @model_validator(mode="after")
    def check_grid(self):
        if self.allow_off_grid:
            return self
        if self.learning_rate not in LR_GRID:
            raise ValueError(f"learning_rate={self.learning_rate} 不在网格 {LR_GRID} 内")
        if self.batch_size not in BATCH_GRID:
            raise ValueError(f"batch_size={self.batch_size} 不在网格 {BATCH_GRID} 内")
        if self.dropout not in DROPOUT_GRID:
            raise ValueError(f"dropout={self.dropout} 不在网格 {DROPOUT_GRID} 内")
        if self.embedding_size != DEFAULT_EMBEDDING_SIZE:
            raise ValueError(f"embedding_size 固定为 {DEFAULT_EMBEDDING_SIZE}")
        if self.max_epochs > DEFAULT_MAX_EPOCHS:
            raise ValueError(f"max_epochs 不能超过 {DEFAULT_MAX_EPOCHS}")
        return self


class EvalConfig(BaseModel):
    ks: List[int] = Field(default_factory=lambda: [10, 20])
    exclude_train_positives: bool = False

    @field_validator("ks")
    @classmethod
    def validate_ks(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("K 必须为正整数且至少一个")
        return sorted(set(v))


class GridConfig(BaseModel):
    learning_rates: List[float] = Field(default_factory=lambda: list(LR_GRID))
    batch_sizes: List[int] = Field(default_factory=lambda: list(BATCH_GRID))
    dropouts: List[float] = Field(default_factory=lambda: list(DROPOUT_GRID))

    @model_validator(mode="after")
    def check_non_empty(self):
        if not (self.learning_rates and self.batch_sizes and self.dropouts):
            raise ValueError("网格不能为空")
        return self

    @property
    def size(self) -> int:
        return len(self.learning_rates) * len(self.batch_sizes) * len(self.dropouts)


class RunConfig(BaseModel):
    """一次实验的完整配置"""
    name: str = Field("gce", min_length=1)
    data: DataConfig
    context: ContextConfig = Field(default_factory=ContextConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    model: ModelKind = ModelKind.FM
    provider: ProviderKind = ProviderKind.GCE
    seeds: List[int] = Field(default_factory=lambda: list(range(10)), min_length=1)
    output_dir: str = "runs"
    deterministic: bool = Field(False, description="日志中不写耗时，保证逐字节可复现")

    @model_validator(mode="after")
    def check_side_info(self):
        if self.provider == ProviderKind.GCE_SI and not self.data.side_info:
            raise ValueError("provider=gce-si 需要配置 data.side_info")
        return self

    @property
    def run_tag(self) -> str:
        return f"{self.model.value}-{self.provider.value}"


class DatasetStats(BaseModel):
    """数据集统计"""
    users: int
    items: int
    interactions: int
    fields: List[str] = Field(default_factory=list)
    cardinalities: List[int] = Field(default_factory=list)


class EpochLog(BaseModel):
    epoch: int = Field(..., ge=1)
    loss: float
    val_hr10: float = Field(..., ge=0, le=1)
    val_ndcg10: float = Field(..., ge=0, le=1)
    elapsed_s: float = Field(..., ge=0)


class TrainReport(BaseModel):
    seed: int
    epochs: List[EpochLog] = Field(default_factory=list)
    best_epoch: int = 0
    best_val_ndcg10: float = 0.0
    stop_reason: Literal["max_epochs", "patience", "not_started"] = "not_started"

    @model_validator(mode="after")
    def check_epochs(self):
        numbers = [e.epoch for e in self.epochs]
        if numbers != list(range(1, len(numbers) + 1)):
            raise ValueError("epoch 编号必须从 1 开始连续递增")
        if self.best_epoch > len(numbers):
            raise ValueError("best_epoch 不能晚于最后一个 epoch")
        return self


class MetricSummary(BaseModel):
    """某个指标在某个 K 上跨随机种子的均值与标准差"""
    metric: Literal["HR", "NDCG"]
    K: int = Field(..., ge=1)
    mean: float = Field(..., ge=0, le=1)
    std: float = Field(..., ge=0)
    seeds: List[float]
    tasks: int = Field(..., ge=1)

    model_config = ConfigDict(populate_by_name=True)


class EvalReport(BaseModel):
    model: str
    seeds: List[int]
    tasks: int = Field(..., ge=1)
    cells: List[MetricSummary]
    long_tail: Optional[Dict[str, Any]] = None

    def cell(self, metric: str, k: int) -> MetricSummary:
        for c in self.cells:
            if c.metric == metric and c.K == k:
                return c
        raise KeyError(f"{metric}@{k}")


class RunManifest(BaseModel):
    config: Dict[str, Any]
    raw_stats: Optional[DatasetStats] = None
    stats: DatasetStats
    version: str
    split: Dict[str, int] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    train_reports: List[Dict[str, Any]] = Field(default_factory=list)


class GridCellResult(BaseModel):
    cell_index: int
    learning_rate: float
    batch_size: int
    dropout: float
    status: Literal["ok", "failed"]
    val_ndcg10: Optional[float] = None
    val_hr10: Optional[float] = None
    best_epoch: Optional[int] = None
    error: Optional[str] = None

    model_config = ConfigDict(from_attributes=True)
