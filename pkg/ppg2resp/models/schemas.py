from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Tuple
from pathlib import Path
from enum import Enum
import numpy as np

FORMAT_VERSION = 1

class SamplerName(str, Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


# ---------------------------------------------------------------------------
# signal-io
# ---------------------------------------------------------------------------

class ManifestEntry(BaseModel):
    """One raw signal file and the columns that hold PPG and respiration"""
    model_config = ConfigDict(extra="forbid")

    subject_id: str
    path: Path
    ppg_column: str = "PLETH"
    resp_column: str = "RESP"
    fs: float

    @field_validator('subject_id')
    def validate_subject_id(cls, v):
        if not v.strip():
            raise ValueError('subject_id must be non-empty')
        return v

    @field_validator('fs')
    def validate_fs(cls, v):
        if not v > 0:
            raise ValueError('source fs must be > 0')
        return v

class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int
    entries: List[ManifestEntry]

    @field_validator('format_version')
    def validate_version(cls, v):
        if v != FORMAT_VERSION:
            raise ValueError(f'unsupported manifest format_version {v} (expected {FORMAT_VERSION})')
        return v

    @model_validator(mode='after')
    def validate_unique_subjects(self):
        seen = set()
        for entry in self.entries:
            if entry.subject_id in seen:
                raise ValueError(f'duplicate subject_id {entry.subject_id!r}')
            seen.add(entry.subject_id)
        return self

class SyntheticConfig(BaseModel):
    """Parameters of the AM/FM/baseline-modulated PPG generator"""
    model_config = ConfigDict(extra="forbid")

    rr_bpm: float = 15.0
    hr_bpm: float = 72.0
    am_depth: float = 0.0
    fm_depth: float = 0.0
    baseline_depth: float = 0.0
    noise_std: float = 0.0
    duration_s: float = 480.0
    fs: float = 125.0

    @field_validator('rr_bpm')
    def validate_rr(cls, v):
        if not 6 <= v <= 60:
            raise ValueError('rr_bpm must be between 6 and 60')
        return v

    @field_validator('hr_bpm')
    def validate_hr(cls, v):
        if not 30 <= v <= 180:
            raise ValueError('hr_bpm must be between 30 and 180')
        return v

    @field_validator('am_depth', 'fm_depth', 'baseline_depth')
    def validate_depth(cls, v):
        if not 0 <= v <= 1:
            raise ValueError('modulation depths must be in [0, 1]')
        return v

    @field_validator('noise_std')
    def validate_noise(cls, v):
        if v < 0:
            raise ValueError('noise_std must be >= 0')
        return v

    @field_validator('duration_s', 'fs')
    def validate_positive(cls, v):
        if not v > 0:
            raise ValueError('must be > 0')
        return v

class SyntheticSubject(BaseModel):
    model_config = ConfigDict(extra="forbid")

    subject_id: str
    seed: int
    config: SyntheticConfig

class SyntheticCohort(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    subjects: List[SyntheticSubject]

    @model_validator(mode='after')
    def validate_unique_subjects(self):
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise ValueError('duplicate subject_id in synthetic cohort')
        return self

class Recording(BaseModel):
    """A subject's paired PPG and respiration at one sampling rate"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_id: str
    ppg: np.ndarray
    resp: np.ndarray
    fs: float

    @model_validator(mode='after')
    def validate_signals(self):
        if not self.fs > 0:
            raise ValueError('fs must be > 0')
        if self.ppg.ndim != 1 or self.resp.ndim != 1:
            raise ValueError('ppg and resp must be 1-D')
        if self.ppg.shape != self.resp.shape:
            raise ValueError(
                f'ppg and resp lengths differ ({self.ppg.size} vs {self.resp.size})'
            )
        if not (np.all(np.isfinite(self.ppg)) and np.all(np.isfinite(self.resp))):
            raise ValueError('recording contains NaN or Inf samples')
        return self

    @property
    def duration_s(self) -> float:
        return self.ppg.size / self.fs

    def __len__(self) -> int:
        return int(self.ppg.size)


# ---------------------------------------------------------------------------
# dsp
# ---------------------------------------------------------------------------

class NormScale(BaseModel):
    """Affine scale of a min-max normalisation: x = offset + (x_norm - lo) / (hi - lo) * span"""
    model_config = ConfigDict(frozen=True)

    offset: float
    span: float
    target: Tuple[float, float]
    constant: bool = False

class SegmentPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ppg: np.ndarray
    resp: np.ndarray
    subject_id: str
    segment_index: int
    ppg_scale: NormScale
    resp_scale: NormScale

    @model_validator(mode='after')
    def validate_ranges(self):
        if self.ppg.shape != self.resp.shape or self.ppg.ndim != 1:
            raise ValueError('segment ppg and resp must be 1-D with equal length')
        tol = 1e-9
        if self.ppg.min() < -tol or self.ppg.max() > 1 + tol:
            raise ValueError('normalised ppg outside [0, 1]')
        if self.resp.min() < -1 - tol or self.resp.max() > 1 + tol:
            raise ValueError('normalised resp outside [-1, 1]')
        return self

class SpectrumMagnitude(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    bins: np.ndarray
    bin_hz: float

    @property
    def n_bins(self) -> int:
        return int(self.bins.size)

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.bins.size) * self.bin_hz

class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target_fs: float = 30.0
    cutoff_hz: float = 1.0
    segment_s: float = 5.0
    ppg_range: Tuple[float, float] = (0.0, 1.0)
    resp_range: Tuple[float, float] = (-1.0, 1.0)

    @model_validator(mode='after')
    def validate_segment_length(self):
        n = self.target_fs * self.segment_s
        if abs(n - round(n)) > 1e-9:
            raise ValueError('target_fs * segment_s must be an integer')
        return self

    @property
    def segment_length(self) -> int:
        return int(round(self.target_fs * self.segment_s))


# ---------------------------------------------------------------------------
# diffusion-core / nn
# ---------------------------------------------------------------------------

class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05

    @model_validator(mode='after')
    def validate_bounds(self):
        if self.T < 1:
            raise ValueError('T must be >= 1')
        if not 0 < self.beta_start < 1 or not 0 < self.beta_end < 1:
            raise ValueError('beta bounds must lie in (0, 1)')
        if self.T > 1 and not self.beta_start < self.beta_end:
            raise ValueError('beta_start must be < beta_end')
        return self

class ModelConfig(BaseModel):
    """Architecture of the noise predictor"""
    model_config = ConfigDict(extra="forbid")

    fine_kernels: List[int] = Field(default_factory=lambda: [1, 3, 5, 7, 9, 11])
    coarse_kernels: List[int] = Field(default_factory=lambda: [3, 5, 7, 9, 11])
    coarse_dilation: int = 8
    branch_channels: int = 8
    hidden_size: int = 64
    time_embed_dim: int = 64
    lambda_ppg: float = 1.0

    @field_validator('fine_kernels', 'coarse_kernels')
    def validate_kernels(cls, v):
        if not v:
            raise ValueError('at least one branch is required')
        if any(k < 1 or k % 2 == 0 for k in v):
            raise ValueError('kernel sizes must be odd and positive')
        return v

    @field_validator('coarse_dilation')
    def validate_dilation(cls, v):
        if v <= 1:
            raise ValueError('coarse branches need dilation > 1')
        return v

    @field_validator('branch_channels', 'hidden_size')
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('must be >= 1')
        return v

    @field_validator('time_embed_dim')
    def validate_embed(cls, v):
        if v < 2 or v % 2:
            raise ValueError('time_embed_dim must be even and >= 2')
        return v

    @property
    def fine_channels(self) -> int:
        return len(self.fine_kernels) * self.branch_channels

    @property
    def coarse_channels(self) -> int:
        return len(self.coarse_kernels) * self.branch_channels

    @property
    def feature_dim(self) -> int:
        # d = channels(f_ppg) + channels(f_yt)
        return 2 * self.fine_channels


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    lambda_spec: float = 0.01
    spectral_loss_enabled: bool = True
    kernel_size_override: Optional[List[int]] = None
    clip_x0: bool = False
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    # default inference settings stored with the checkpoint
    sampler: SamplerName = SamplerName.DDIM
    nfe: Optional[int] = None

    @field_validator('lambda_spec')
    def validate_lambda_spec(cls, v):
        if v < 0:
            raise ValueError('lambda_spec must be >= 0')
        return v

    @field_validator('batch_size', 'epochs')
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('must be >= 1')
        return v

    @model_validator(mode='after')
    def validate_nfe(self):
        if self.nfe is not None and not 1 <= self.nfe <= self.schedule.T:
            raise ValueError(f'nfe must lie in [1, T={self.schedule.T}]')
        return self

    @property
    def default_nfe(self) -> int:
        return self.nfe if self.nfe is not None else self.schedule.T

    @property
    def effective_lambda_spec(self) -> float:
        return self.lambda_spec if self.spectral_loss_enabled else 0.0

    def resolved_model(self) -> ModelConfig:
        """Model config with the kernel-size ablation applied to the fine encoders"""
        if self.kernel_size_override:
            return ModelConfig.model_validate(
                {**self.model.model_dump(), "fine_kernels": list(self.kernel_size_override)}
            )
        return self.model

class BatchRecord(BaseModel):
    epoch: int
    batch: int
    diffusion_loss: float
    spectral_loss: float
    total_loss: float

class EpochRecord(BaseModel):
    epoch: int
    diffusion_loss: float
    spectral_loss: float
    total_loss: float
    seconds: float

class TrainRecord(BaseModel):
    seed: int
    lambda_spec: float
    epochs: List[EpochRecord] = Field(default_factory=list)
    batches: List[BatchRecord] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class WindowResult(BaseModel):
    """One scoring window; a rate is None when that side had no dominant frequency"""
    window_index: int
    start_s: float
    rr_true: Optional[float]
    rr_pred: Optional[float]
    abs_error: Optional[float]

    @property
    def flagged(self) -> bool:
        return self.abs_error is None

class SubjectEval(BaseModel):
    subject_id: str
    windows: List[WindowResult]
    rr_mae: float
    waveform_mae: float
    n_samples: int
    discarded_samples: int
    flagged_windows: int = 0

class EvalConfigEcho(BaseModel):
    sampler: Optional[SamplerName] = None
    nfe: Optional[int] = None
    spectral_loss: Optional[bool] = None
    window_s: float = 60.0
    window_step_s: Optional[float] = None

class EvalReport(BaseModel):
    """RR and waveform errors per subject and in aggregate"""
    subjects: List[SubjectEval]
    rr_mae: float
    waveform_mae: float
    config: EvalConfigEcho
    flagged_windows: int = 0
    waveform_domain: str = "normalized [-1, 1]"
    sampling_seconds: Optional[float] = None

class BenchmarkRow(BaseModel):
    model: str
    sampler: SamplerName
    nfe: int
    window_s: float
    rr_error: float
    waveform_mae: float

class BenchmarkTable(BaseModel):
    rows: List[BenchmarkRow] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    """Fully resolved settings of one CLI invocation"""
    model_config = ConfigDict(extra="forbid")

    command: str
    manifest: Optional[Path] = None
    synthetic: Optional[Path] = None
    store: Optional[Path] = None
    checkpoint: Optional[Path] = None
    checkpoints: List[Path] = Field(default_factory=list)
    output_dir: Path
    seed: int = 0
    sampler: Optional[SamplerName] = None
    nfe: Optional[int] = None
    nfe_grid: List[int] = Field(default_factory=list)
    subject: Optional[str] = None
    window_s: float = 60.0
    window_step_s: Optional[float] = None
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator('nfe')
    def validate_nfe(cls, v):
        if v is not None and v < 1:
            raise ValueError('nfe must be >= 1')
        return v
