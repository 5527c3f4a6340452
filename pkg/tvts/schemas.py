"""
Schemas for the TVTS toolkit
Pydantic models for configuration, on-disk records and reports
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tvts.errors import ConfigError

PROXIES = ("kway", "pair", "factorial", "videosort", "none")
FACTORIAL_MAX_K = 6

M = TypeVar("M", bound=BaseModel)


class StrictModel(BaseModel):
    """Base for configs: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


def build_config(cls: Type[M], data: Dict[str, Any]) -> M:
    """Validate `data` into `cls`, reporting failures as ConfigError"""
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or cls.__name__}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid {cls.__name__}: {problems}") from exc


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------

class GenConfig(StrictModel):
    """Synthetic corpus generation settings"""

    count: int = Field(default=100, description="Number of videos", ge=1)
    duration: float = Field(default=24.0, description="Seconds per video", gt=0)
    fps: float = Field(default=2.0, description="Stored frames per second", gt=0)
    height: int = Field(default=32, description="Frame height in pixels", ge=1)
    width: int = Field(default=32, description="Frame width in pixels", ge=1)
    patch: int = Field(default=8, description="Patch side the frames must tile into", ge=1)
    window_seconds: float = Field(default=3.0, description="Transcript span l used for the density check", gt=0)
    min_words: int = Field(default=1, description="Minimum words in any window of length l", ge=1)
    workers: int = Field(default=1, description="Generation threads", ge=1)

    @model_validator(mode="after")
    def check_resolution(self) -> "GenConfig":
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"resolution {self.height}x{self.width} is not divisible by patch size {self.patch}"
            )
        if abs(self.duration * self.fps - round(self.duration * self.fps)) > 1e-9:
            raise ValueError(f"duration x fps must be a whole number of frames, got {self.duration * self.fps}")
        return self

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.fps))


class EncoderConfig(StrictModel):
    """Shapes of the video encoder, text encoder and projection heads"""

    hidden_dim: int = Field(default=64, description="Token width D_h", ge=1)
    depth: int = Field(default=4, description="Video transformer blocks", ge=0)
    text_depth: int = Field(default=2, description="Text transformer blocks", ge=0)
    heads: int = Field(default=4, description="Attention heads", ge=1)
    patch: int = Field(default=8, description="Patch side P", ge=1)
    tubelet: int = Field(default=2, description="Frames per cube", ge=1)
    frames: int = Field(default=8, description="Frames per clip M", ge=1)
    height: int = Field(default=32, description="Clip height H", ge=1)
    width: int = Field(default=32, description="Clip width W", ge=1)
    max_text_len: int = Field(default=16, description="Token slots per transcript, [CLS] included", ge=2)
    vocab_size: int = Field(default=0, description="Text vocabulary size; 0 means take it from the corpus", ge=0)
    common_dim: int = Field(default=32, description="Contrastive space width D", ge=1)

    @model_validator(mode="after")
    def check_grid(self) -> "EncoderConfig":
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"H={self.height}, W={self.width} must be divisible by patch size {self.patch}")
        if self.frames % self.tubelet:
            raise ValueError(f"frames M={self.frames} must be divisible by tubelet {self.tubelet}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}")
        return self

    @property
    def num_slices(self) -> int:
        return self.frames // self.tubelet

    @property
    def tokens_per_slice(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def cube_dim(self) -> int:
        return self.tubelet * self.patch * self.patch * 3


class TrainConfig(StrictModel):
    """Pre-training run settings"""

    corpus: Optional[Path] = Field(default=None, description="Corpus directory written by gen-data")
    run_dir: Path = Field(default=Path("runs/default"), description="Where metrics and checkpoints go")
    num_transcripts: int = Field(default=4, description="Transcripts per window K", ge=2)
    window_seconds: float = Field(default=3.0, description="Transcript span l in seconds", gt=0)
    window_seconds_max: Optional[float] = Field(default=None, description="If set, l ~ U[window_seconds, max]")
    batch_size: int = Field(default=32, description="Videos per step B", ge=2)
    steps: int = Field(default=5000, description="Optimizer steps", ge=0)
    lr: float = Field(default=1e-3, description="AdamW learning rate", gt=0)
    weight_decay: float = Field(default=0.05, description="Decoupled weight decay", ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    lambda_sort: float = Field(default=2.0, description="Sort loss weight", ge=0)
    temperature: float = Field(default=0.05, description="InfoNCE temperature", gt=0)
    mask_ratio: float = Field(default=0.75, description="Fraction of tokens removed per slice", ge=0, lt=1)
    seed: int = Field(default=0)
    proxy: Literal["kway", "pair", "factorial", "videosort", "none"] = Field(default="kway")
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    checkpoint_every: int = Field(default=1000, description="Steps between checkpoints; 0 disables", ge=0)
    warmup_steps: int = Field(default=100, description="Linear lr warmup", ge=0)
    grad_clip: float = Field(default=0.0, description="Global-norm clip; 0 disables", ge=0)
    crop_scale: float = Field(default=1.15, description="Random-crop zoom; 1 disables", ge=1.0)
    blank_video: bool = Field(default=False, description="Replace every frame by zeros (control run)")
    post_pretrain_steps: int = Field(default=0, description="Contrastive-only steps after pre-training", ge=0)
    holdout_fraction: float = Field(default=0.1, description="Per-category held-out share", ge=0, lt=1)
    precision: Literal["float64", "float32"] = Field(default="float64")
    resume_from: Optional[Path] = Field(default=None)
    progress: bool = Field(default=True, description="Show a progress bar")
    grad_diagnostics: bool = Field(default=False, description="Separate backward passes per loss term")
    eval_batches: int = Field(default=8, description="Batches for held-out sort accuracy", ge=1)

    @field_validator("window_seconds_max")
    @classmethod
    def validate_window_range(cls, v, info):
        low = info.data.get("window_seconds")
        if v is not None and low is not None and v < low:
            raise ValueError(f"window_seconds_max {v} is below window_seconds {low}")
        return v

    @model_validator(mode="after")
    def check_proxy(self) -> "TrainConfig":
        if self.proxy == "factorial" and self.num_transcripts > FACTORIAL_MAX_K:
            raise ValueError(f"factorial proxy supports K <= {FACTORIAL_MAX_K}, got {self.num_transcripts}")
        tokens = self.encoder.tokens_per_slice
        if round((1.0 - self.mask_ratio) * tokens) < 1:
            raise ValueError(f"mask_ratio {self.mask_ratio} leaves no visible token out of {tokens} per slice")
        return self

    @property
    def span_needed(self) -> float:
        """Seconds covered by the longest possible window"""
        l_max = self.window_seconds_max or self.window_seconds
        return self.num_transcripts * l_max + (self.num_transcripts - 1)


class ProbeConfig(StrictModel):
    """Linear-probe classifier settings"""

    lr: float = Field(default=0.1, gt=0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=384, ge=1)
    weight_decay: float = Field(default=0.0, ge=0)
    seed: int = Field(default=0)


class EvalConfig(StrictModel):
    """Evaluation command settings"""

    checkpoint: Optional[Path] = Field(default=None, description="Checkpoint written by pretrain")
    corpus: Optional[Path] = Field(default=None, description="Overrides the corpus recorded in the checkpoint")
    tasks: List[Literal["zeroshot", "probe", "t2v", "sort"]] = Field(default_factory=lambda: ["zeroshot"])
    out: Path = Field(default=Path("eval_report.json"))
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    index: Optional[Path] = Field(default=None, description="Precomputed embedding index (.npz)")

    @model_validator(mode="after")
    def check_sources(self) -> "EvalConfig":
        if self.checkpoint is None and (self.index is None or set(self.tasks) != {"zeroshot"}):
            raise ValueError("a checkpoint is required unless only zeroshot runs on a precomputed index")
        return self


# -----------------------------------------------------------------------------
# On-disk records
# -----------------------------------------------------------------------------

class WordRecord(BaseModel):
    w: str
    s: float = Field(..., ge=0)


class TranscriptRecord(BaseModel):
    """One line of transcripts.jsonl"""

    video_id: str
    duration_s: float = Field(..., gt=0)
    category: str
    words: List[WordRecord] = Field(default_factory=list)

    @field_validator("words")
    @classmethod
    def validate_order(cls, v):
        for prev, cur in zip(v, v[1:]):
            if cur.s < prev.s:
                raise ValueError(f"timestamps must be nondecreasing ({prev.s} then {cur.s})")
        return v


class ManifestEntry(BaseModel):
    fps: float
    height: int
    width: int
    count: int
    category: str
    frames_sha256: str
    scene: Dict[str, Any] = Field(default_factory=dict)


class Manifest(BaseModel):
    format_version: int = 1
    seed: int
    config: GenConfig
    categories: List[str]
    videos: Dict[str, ManifestEntry]


TIMING_FIELDS = frozenset({"wallclock_ms"})


class MetricsRecord(BaseModel):
    """
    One line of metrics.jsonl.

    Two runs with the same seed and config write identical records except for the
    fields in TIMING_FIELDS, which measure the host rather than the run.
    """

    step: int
    L_align: float
    L_sort: float
    L_total: float
    sort_acc: Optional[float] = None
    wallclock_ms: float = Field(description="Milliseconds since the run started; not reproducible")
    lr: Optional[float] = None
    grad_norm: Optional[float] = None
    grad_norm_align: Optional[float] = None
    grad_norm_sort: Optional[float] = None
    phase: str = "pretrain"

    def reproducible(self) -> Dict[str, Any]:
        """The record without its timing fields"""
        return self.model_dump(exclude=set(TIMING_FIELDS))


# -----------------------------------------------------------------------------
# Reports
# -----------------------------------------------------------------------------

class LossReport(BaseModel):
    """Loss components of one step; total is always align + lambda * sort"""

    L_align: float
    L_sort: float
    lam: float = Field(..., ge=0)
    L_total: float = 0.0
    grad_norm_align: Optional[float] = None
    grad_norm_sort: Optional[float] = None

    @model_validator(mode="after")
    def fill_total(self) -> "LossReport":
        self.L_total = self.L_align + self.lam * self.L_sort
        return self


class RetrievalReport(BaseModel):
    r_at_1: float = Field(..., ge=0, le=1)
    r_at_5: float = Field(..., ge=0, le=1)
    r_at_10: float = Field(..., ge=0, le=1)
    median_rank: float = Field(..., ge=1)
    queries: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_monotone(self) -> "RetrievalReport":
        if not (self.r_at_1 <= self.r_at_5 <= self.r_at_10):
            raise ValueError(f"recall must be monotone in k: {self.r_at_1}, {self.r_at_5}, {self.r_at_10}")
        return self


class ProbeReport(BaseModel):
    top1: float = Field(..., ge=0, le=1)
    train_top1: float = Field(..., ge=0, le=1)
    encoder_hash_before: str
    encoder_hash_after: str
    num_train: int
    num_test: int
    num_classes: int

    @property
    def encoder_unchanged(self) -> bool:
        return self.encoder_hash_before == self.encoder_hash_after


class EvalReport(BaseModel):
    checkpoint: Optional[str] = None
    step: Optional[int] = None
    zeroshot: Optional[RetrievalReport] = None
    t2v: Optional[RetrievalReport] = None
    probe: Optional[ProbeReport] = None
    sort_accuracy: Optional[float] = None
