import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.utils import constants


class StrictModel(BaseModel):
    """Base for configs: unknown keys are rejected, assignments re-validated"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ===== MODULE CONFIGS =====

class InitializerConfig(StrictModel):
    """Per-view feature extractor producing Z(0)"""
    kind: Literal["shallow_conv_1", "shallow_conv_2", "precomputed"] = "precomputed"
    output_dim: Optional[int] = Field(None, gt=0, description="D; follows encoder.view_dim (512) when unset")
    feature_dim: Optional[int] = Field(None, gt=0, description="Row width of precomputed features")
    view_height: int = Field(constants.VIEW_SIZE[0], gt=0)
    view_width: int = Field(constants.VIEW_SIZE[1], gt=0)
    view_channels: int = Field(constants.VIEW_SIZE[2], gt=0)
    bn_momentum: float = Field(constants.BATCH_NORM_MOMENTUM, gt=0, le=1)


class EncoderConfig(StrictModel):
    """View-set encoder: L pre-LN attention blocks"""
    num_blocks: int = Field(constants.NUM_BLOCKS, ge=0)
    num_heads: int = Field(constants.NUM_HEADS, gt=0)
    view_dim: int = Field(constants.VIEW_DIM, gt=0)
    mlp_ratio: int = Field(constants.MLP_RATIO, gt=0)
    dropout_rate: float = Field(constants.DROPOUT_RATE, ge=0, lt=1)
    use_position_encoding: bool = False
    use_class_token: bool = False
    temperature: Optional[float] = Field(None, description="Per-head tau; defaults to sqrt(D/h)")
    max_views: int = Field(constants.MAX_VIEWS, gt=0)
    layer_norm_eps: float = Field(constants.LAYER_NORM_EPS, gt=0)

    @model_validator(mode="after")
    def check_heads_and_temperature(self):
        if self.view_dim % self.num_heads != 0:
            raise ValueError(f"view_dim {self.view_dim} is not divisible by num_heads {self.num_heads}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        return self

    @property
    def head_dim(self) -> int:
        return self.view_dim // self.num_heads

    @property
    def tau(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return math.sqrt(self.view_dim / self.num_heads)


class HeadConfig(StrictModel):
    """Transition and decoder"""
    transition_kind: Literal["max", "mean", "concat_max_mean"] = "concat_max_mean"
    descriptor_dim: Optional[int] = Field(None, gt=0, description="G; derived from D and the transition")
    decoder_hidden: List[int] = Field(default_factory=lambda: list(constants.DECODER_HIDDEN))
    label_smoothing: float = Field(constants.LABEL_SMOOTHING, ge=0, lt=1)
    num_classes: Optional[int] = Field(None, gt=0, description="K; taken from the dataset when unset")

    @field_validator("decoder_hidden", mode="before")
    @classmethod
    def parse_widths(cls, v):
        if isinstance(v, str):
            v = v.strip()
            return [int(part) for part in v.split(",") if part.strip()] if v else []
        if isinstance(v, int):
            return [v]
        return v

    @field_validator("decoder_hidden")
    @classmethod
    def check_widths(cls, v):
        if any(width <= 0 for width in v):
            raise ValueError("decoder widths must be positive")
        return v

    def descriptor_width(self, view_dim: int) -> int:
        width = 2 * view_dim if self.transition_kind == "concat_max_mean" else view_dim
        if self.descriptor_dim is not None and self.descriptor_dim != width:
            raise ValueError(
                f"descriptor_dim {self.descriptor_dim} does not match transition "
                f"'{self.transition_kind}' over D={view_dim} (expected {width})"
            )
        return width


class ScheduleConfig(StrictModel):
    """Stage-2 learning-rate schedule"""
    kind: Literal["warmup_restarts", "cosine"] = "warmup_restarts"
    peak_lr: float = Field(constants.PEAK_LR, gt=0)
    interval_epochs: float = Field(constants.INTERVAL_EPOCHS, gt=0)
    warmup_epochs: float = Field(constants.WARMUP_EPOCHS, ge=0)
    peak_decay: float = Field(constants.PEAK_DECAY, ge=0, lt=1)
    total_epochs: int = Field(constants.TOTAL_EPOCHS, gt=0)

    @model_validator(mode="after")
    def check_warmup(self):
        if self.kind == "warmup_restarts" and not 0 < self.warmup_epochs < self.interval_epochs:
            raise ValueError(
                f"warmup_epochs must lie strictly between 0 and interval_epochs "
                f"({self.warmup_epochs} vs {self.interval_epochs})"
            )
        return self


class OptimizerConfig(StrictModel):
    """Stage-2 optimizer"""
    kind: Literal["adamw", "adam", "sgd"] = "adamw"
    beta1: float = Field(constants.ADAM_BETAS[0], ge=0, lt=1)
    beta2: float = Field(constants.ADAM_BETAS[1], ge=0, lt=1)
    eps: float = Field(constants.ADAM_EPS, gt=0)
    weight_decay: float = Field(constants.WEIGHT_DECAY, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)


class Stage1Config(StrictModel):
    """Initializer pretraining"""
    epochs: int = Field(constants.STAGE1_EPOCHS, ge=0)
    lr: float = Field(constants.STAGE1_LR, gt=0)
    momentum: float = Field(constants.STAGE1_MOMENTUM, ge=0, lt=1)
    skip: bool = False


class TrainConfig(StrictModel):
    """Options shared by both stages"""
    batch_size: int = Field(1, gt=0)
    target: Literal["label", "sublabel"] = "label"
    freeze_initializer: bool = False
    num_views: Optional[int] = Field(None, gt=0, description="Views sampled per shape; all when unset")


class SyntheticSpec(StrictModel):
    """Synthetic multi-view dataset recipe"""
    num_classes: int = Field(8, gt=0)
    subclasses: int = Field(2, gt=0)
    shapes_per_class: int = Field(40, gt=0)
    views: int = Field(constants.MAX_VIEWS, ge=1)
    mode: Literal["feature", "pixel"] = "feature"
    feature_dim: int = Field(32, gt=0)
    image_height: int = Field(16, gt=0)
    image_width: int = Field(16, gt=0)
    image_channels: int = Field(3, gt=0)
    margin: float = Field(5.0, description="Distance scale between class prototypes")
    noise: float = Field(1.0, description="Expected norm of the per-view noise")
    shape_spread: float = Field(0.5, ge=0, description="Norm scale of per-shape offsets")
    subclass_separation: float = Field(0.5, ge=0, description="Subclass offset norm as a fraction of margin")
    identity_viewpoints: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def check_scales(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.mode == "pixel" and self.image_height != self.image_width:
            raise ValueError("pixel mode needs square images so rotations are viewpoint maps")
        return self


class PathsConfig(StrictModel):
    dataset: Optional[str] = None
    split: Optional[str] = None
    output_dir: str = "runs"


class RunConfig(StrictModel):
    """Everything a command needs; every field has a default"""
    seed: int = 0
    initializer: InitializerConfig = Field(default_factory=InitializerConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    @field_validator("split_ratios", mode="before")
    @classmethod
    def parse_ratios(cls, v):
        if isinstance(v, str):
            return tuple(float(part) for part in v.split(","))
        return v

    @field_validator("split_ratios")
    @classmethod
    def check_ratios(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be nonnegative and sum to 1, got {v}")
        return v

    @model_validator(mode="after")
    def check_dims(self):
        if self.initializer.output_dim is not None and self.initializer.output_dim != self.encoder.view_dim:
            raise ValueError(
                f"initializer.output_dim {self.initializer.output_dim} must equal "
                f"encoder.view_dim {self.encoder.view_dim}"
            )
        self.head.descriptor_width(self.encoder.view_dim)
        return self

    def resolved_initializer(self) -> InitializerConfig:
        """Initializer config with output_dim pinned to the encoder width"""
        return self.initializer.model_copy(update={"output_dim": self.encoder.view_dim})


# ===== REPORTS =====

class EpochLog(BaseModel):
    """One row of the training log CSV"""
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_class_acc: Optional[float] = None
    val_inst_acc: Optional[float] = None


class AccuracyReport(BaseModel):
    instance_accuracy: float
    class_accuracy: float
    per_class: Dict[int, float] = {}
    count: int = 0


class RankEntry(BaseModel):
    shape_id: str
    class_prob: float
    relevant: bool = False
    gain: float = 0.0


class RankList(BaseModel):
    """Retrieved shapes for one query, best first"""
    query_id: str
    entries: List[RankEntry] = []

    @model_validator(mode="after")
    def check_entries(self):
        ids = [entry.shape_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"rank list for {self.query_id} has duplicate shape ids")
        if self.query_id in ids:
            raise ValueError(f"rank list for {self.query_id} contains the query itself")
        return self

    @property
    def shape_ids(self) -> List[str]:
        return [entry.shape_id for entry in self.entries]


class QueryMetrics(BaseModel):
    query_id: str
    category: int
    precision: float
    recall: float
    f1: float
    average_precision: float
    ndcg: float


class MetricRow(BaseModel):
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    map: float = Field(ge=0, le=1)
    ndcg: float = Field(ge=0, le=1)


class MetricReport(BaseModel):
    """Micro and macro retrieval metrics at list length N"""
    micro: MetricRow
    macro: MetricRow
    n: int = constants.RANK_LIST_LENGTH
    num_queries: int = 0
