"""Waveform reconstruction, windowed RR scoring and benchmark tables."""
import time
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from ppg2resp.core.config import get_settings
from ppg2resp.core.errors import (
    InputValidationError, NoDominantFrequencyError, ScheduleError, ShapeError, SignalError,
)
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import (
    BenchmarkRow, BenchmarkTable, EvalConfigEcho, EvalReport, NormScale, SamplerName,
    SegmentPair, SubjectEval, TrainConfig, WindowResult,
)
from ppg2resp.services import dsp_service
from ppg2resp.services.checkpoint_service import CheckpointService
from ppg2resp.services.diffusion_service import (
    NoiseSchedule, ddim_step_grid, full_grid, sample, schedule_from_config,
)
from ppg2resp.services.network_service import ModelParams, make_denoiser

logger = get_logger(__name__)

# Published reference numbers, shown in documentation next to computed tables
# and never merged into them. RR error in breaths/min, 60 s windows.
PUBLISHED_REFERENCE_TABLE: List[Dict[str, Union[str, int, float]]] = [
    {"model": "spectral loss", "sampler": "ddim", "nfe": 50, "window_s": 60, "rr_error": 1.18},
    {"model": "w/o spectral loss", "sampler": "ddim", "nfe": 50, "window_s": 60, "rr_error": 1.44},
    {"model": "spectral loss", "sampler": "ddim", "nfe": 6, "window_s": 60, "rr_error": 1.30},
    {"model": "w/o spectral loss", "sampler": "ddim", "nfe": 6, "window_s": 60, "rr_error": 1.46},
    {"model": "kernels 3,3,3,3,3,3", "sampler": "ddim", "nfe": 50, "window_s": 60, "rr_error": 1.53},
]

GridPoint = Tuple[SamplerName, int]


def reconstruct(
    segments: Sequence[np.ndarray],
    indices: Optional[Sequence[int]] = None,
    scales: Optional[Sequence[NormScale]] = None,
) -> np.ndarray:
    """Concatenate consecutive segments; with ``scales`` each is de-normalised first"""
    if len(segments) == 0:
        raise InputValidationError("nothing to reconstruct")
    if indices is None:
        indices = range(len(segments))
    indices = [int(i) for i in indices]
    if len(indices) != len(segments):
        raise ShapeError(f"{len(segments)} segments but {len(indices)} indices")
    for prev, cur in zip(indices, indices[1:]):
        if cur <= prev:
            raise InputValidationError(f"segment indices not in increasing order ({prev} then {cur})")
        if cur != prev + 1:
            missing = f"{prev + 1}" if cur == prev + 2 else f"{prev + 1}..{cur - 1}"
            raise InputValidationError(f"gap in segment indices: missing {missing}")

    parts = [np.asarray(s, dtype=np.float64) for s in segments]
    if scales is not None:
        if len(scales) != len(parts):
            raise ShapeError(f"{len(parts)} segments but {len(scales)} scales")
        parts = [dsp_service.denormalize(p, s) for p, s in zip(parts, scales)]
    return np.concatenate(parts)


def _window_samples(fs: float, seconds: float, what: str) -> int:
    n = fs * seconds
    if abs(n - round(n)) > 1e-9 or round(n) < 2:
        raise SignalError(f"{what} of {seconds} s at {fs} Hz is not a whole number of samples")
    return int(round(n))


def evaluate_subject(
    pred: np.ndarray,
    truth: np.ndarray,
    fs: float,
    window_s: float = 60.0,
    window_step_s: Optional[float] = None,
    subject_id: str = "subject",
    band_hz: Tuple[float, float] = dsp_service.DEFAULT_RR_BAND_HZ,
) -> SubjectEval:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    window = _window_samples(fs, window_s, "window")
    step = _window_samples(fs, window_step_s, "window step") if window_step_s else window
    if pred.size < window:
        raise SignalError(f"sequence of {pred.size} samples is shorter than one {window_s} s window")

    starts = list(dsp_service.window_starts(pred.size, window, step))
    windows = []
    for k, s in enumerate(starts):
        rr_true = _rate_or_none(truth[s:s + window], fs, band_hz)
        rr_pred = _rate_or_none(pred[s:s + window], fs, band_hz)
        error = abs(rr_pred - rr_true) if rr_true is not None and rr_pred is not None else None
        if error is None:
            logger.warning(f"{subject_id} window {k}: no dominant frequency "
                           f"({'truth' if rr_true is None else 'prediction'}), excluded from RR MAE")
        windows.append(WindowResult(
            window_index=k, start_s=s / fs, rr_true=rr_true, rr_pred=rr_pred, abs_error=error,
        ))

    covered = starts[-1] + window
    return SubjectEval(
        subject_id=subject_id,
        windows=windows,
        rr_mae=_mean_error(windows),
        waveform_mae=dsp_service.mae(pred, truth),
        n_samples=int(pred.size),
        discarded_samples=int(pred.size - covered),
        flagged_windows=sum(w.flagged for w in windows),
    )


def _rate_or_none(window: np.ndarray, fs: float, band_hz: Tuple[float, float]) -> Optional[float]:
    try:
        return dsp_service.estimate_rr(window, fs, band_hz)
    except NoDominantFrequencyError:
        return None


def _mean_error(windows: Sequence[WindowResult]) -> float:
    errors = [w.abs_error for w in windows if not w.flagged]
    return float(np.mean(errors)) if errors else float("nan")


def merge_reports(subjects: Sequence[SubjectEval], config: EvalConfigEcho,
                  sampling_seconds: Optional[float] = None) -> EvalReport:
    """Aggregate over every scored window of every subject; waveform MAE is sample-weighted"""
    n_total = sum(s.n_samples for s in subjects)
    return EvalReport(
        subjects=list(subjects),
        rr_mae=_mean_error([w for s in subjects for w in s.windows]),
        waveform_mae=float(sum(s.waveform_mae * s.n_samples for s in subjects) / n_total) if n_total else float("nan"),
        config=config,
        flagged_windows=sum(s.flagged_windows for s in subjects),
        sampling_seconds=sampling_seconds,
    )


def evaluate(
    pred: np.ndarray,
    truth: np.ndarray,
    fs: float,
    window_s: float = 60.0,
    window_step_s: Optional[float] = None,
    subject_id: str = "subject",
    config: Optional[EvalConfigEcho] = None,
) -> EvalReport:
    """Windowed RR error and full-sequence waveform MAE for one pair of sequences"""
    result = evaluate_subject(pred, truth, fs, window_s, window_step_s, subject_id)
    config = config or EvalConfigEcho(window_s=window_s, window_step_s=window_step_s)
    return merge_reports([result], config)


def plot_traces(pred: np.ndarray, truth: np.ndarray, fs: float, window_s: float = 60.0) -> List[np.ndarray]:
    """Per-window (n, 3) arrays of time_s, pred, truth"""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    window = _window_samples(fs, window_s, "window")
    out = []
    for s in dsp_service.window_starts(pred.size, window):
        t = np.arange(s, s + window) / fs
        out.append(np.column_stack([t, pred[s:s + window], truth[s:s + window]]))
    return out


def subject_seed(seed: int, subject_id: str) -> int:
    """Sampling seed that depends only on the run seed and the subject id"""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(subject_id.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def resolve_steps(schedule: NoiseSchedule, sampler: SamplerName, nfe: int) -> List[int]:
    sampler = SamplerName(sampler)
    if nfe > schedule.T:
        raise ScheduleError(f"requested nfe {nfe} exceeds the checkpoint schedule (T={schedule.T})")
    if sampler == SamplerName.DDPM:
        if nfe != schedule.T:
            raise ScheduleError(f"ddpm sampling runs every step; nfe must equal T={schedule.T}")
        return full_grid(schedule.T)
    return ddim_step_grid(schedule.T, nfe)


def model_label(config: TrainConfig) -> str:
    label = "spectral loss" if config.effective_lambda_spec > 0 else "w/o spectral loss"
    if config.kernel_size_override:
        label += f", kernels {','.join(str(k) for k in config.kernel_size_override)}"
    return label


class SubjectSamples:
    """Sampled and reference sequences of one subject, in the normalised domain"""

    def __init__(self, subject_id: str, pred: np.ndarray, truth: np.ndarray, scales: List[NormScale]):
        self.subject_id = subject_id
        self.pred = pred
        self.truth = truth
        self.scales = scales


class EvaluationService:
    """Samples held-out subjects from a checkpoint and scores them"""

    def __init__(self, checkpoint_service: Optional[CheckpointService] = None):
        self.checkpoints = checkpoint_service or CheckpointService()
        self.settings = get_settings()

    def sample_subject(
        self,
        params: ModelParams,
        schedule: NoiseSchedule,
        segments: Sequence[SegmentPair],
        sampler: SamplerName,
        nfe: int,
        seed: int,
    ) -> SubjectSamples:
        """Sample every segment of one subject in a single batch and reconstruct both sequences"""
        if not segments:
            raise InputValidationError("no segments to sample")
        subject = segments[0].subject_id
        if any(s.subject_id != subject for s in segments):
            raise InputValidationError("segments from more than one subject")
        ordered = sorted(segments, key=lambda s: s.segment_index)
        steps = resolve_steps(schedule, sampler, nfe)

        x = np.stack([s.ppg for s in ordered])
        bar = tqdm(total=len(steps), desc=f"sampling {subject}", leave=False,
                   disable=not self.settings.show_progress)
        try:
            y = sample(make_denoiser(params, schedule.T), x, sampler, steps,
                       subject_seed(seed, subject), schedule, progress=lambda _: bar.update(1))
        finally:
            bar.close()

        indices = [s.segment_index for s in ordered]
        return SubjectSamples(
            subject_id=subject,
            pred=reconstruct(list(y), indices),
            truth=reconstruct([s.resp for s in ordered], indices),
            scales=[s.resp_scale for s in ordered],
        )

    def sample_subjects(
        self,
        checkpoint: Path,
        segments: Sequence[SegmentPair],
        subjects: Optional[Sequence[str]],
        sampler: SamplerName,
        nfe: int,
        seed: int,
    ) -> Tuple["OrderedDict[str, SubjectSamples]", TrainConfig, float]:
        """Sample the requested subjects (by default the checkpoint's held-out subject)"""
        params, config = self.checkpoints.load_checkpoint(checkpoint)
        schedule = schedule_from_config(config.schedule)
        subjects = self._resolve_subjects(checkpoint, segments, subjects)

        samples: "OrderedDict[str, SubjectSamples]" = OrderedDict()
        started = time.perf_counter()
        for subject in subjects:
            samples[subject] = self.sample_subject(
                params, schedule, [s for s in segments if s.subject_id == subject], sampler, nfe, seed,
            )
        return samples, config, time.perf_counter() - started

    def run(
        self,
        checkpoint: Path,
        segments: Sequence[SegmentPair],
        subjects: Optional[Sequence[str]],
        sampler: SamplerName,
        nfe: int,
        seed: int,
        fs: float,
        window_s: float = 60.0,
        window_step_s: Optional[float] = None,
    ) -> Tuple[EvalReport, "OrderedDict[str, SubjectSamples]"]:
        """Sample and score; the report carries the wall-clock sampling time"""
        samples, config, elapsed = self.sample_subjects(checkpoint, segments, subjects, sampler, nfe, seed)
        echo = EvalConfigEcho(sampler=sampler, nfe=nfe, spectral_loss=config.effective_lambda_spec > 0,
                              window_s=window_s, window_step_s=window_step_s)
        report = merge_reports(
            [evaluate_subject(s.pred, s.truth, fs, window_s, window_step_s, s.subject_id) for s in samples.values()],
            echo, sampling_seconds=elapsed,
        )
        logger.info(
            f"Evaluated {len(samples)} subject(s) with {sampler.value} NFE={nfe}: "
            f"RR MAE {report.rr_mae:.3f} bpm, waveform MAE {report.waveform_mae:.4f} (sampling {elapsed:.1f}s)"
        )
        return report, samples

    def _resolve_subjects(self, checkpoint: Path, segments: Sequence[SegmentPair],
                          subjects: Optional[Sequence[str]]) -> List[str]:
        known = list(OrderedDict.fromkeys(s.subject_id for s in segments))
        if not subjects:
            held_out = self.checkpoints.read_info(checkpoint).held_out
            if held_out is None:
                raise InputValidationError(f"{checkpoint} records no held-out subject; pass one explicitly")
            subjects = [held_out]
        for subject in subjects:
            if subject not in known:
                raise InputValidationError(f"unknown subject id {subject!r}")
        return list(subjects)

    def benchmark(
        self,
        checkpoints: Sequence[Path],
        segments: Sequence[SegmentPair],
        grid: Sequence[GridPoint],
        seed: int,
        fs: float,
        window_s: float = 60.0,
    ) -> BenchmarkTable:
        """One row per (model label, sampler, NFE); folds sharing a label are pooled"""
        loaded = []
        for path in checkpoints:
            params, config = self.checkpoints.load_checkpoint(path)
            schedule = schedule_from_config(config.schedule)
            for sampler, nfe in grid:
                resolve_steps(schedule, sampler, nfe)
            loaded.append((path, params, config, schedule))

        pooled: "OrderedDict[Tuple[str, SamplerName, int], List[SubjectEval]]" = OrderedDict()
        for path, params, config, schedule in loaded:
            label = model_label(config)
            subjects = self._resolve_subjects(path, segments, None)
            for sampler, nfe in grid:
                for subject in subjects:
                    result = self.sample_subject(
                        params, schedule, [s for s in segments if s.subject_id == subject],
                        SamplerName(sampler), nfe, seed,
                    )
                    pooled.setdefault((label, SamplerName(sampler), nfe), []).append(
                        evaluate_subject(result.pred, result.truth, fs, window_s, subject_id=subject)
                    )

        table = BenchmarkTable()
        for (label, sampler, nfe), results in pooled.items():
            merged = merge_reports(results, EvalConfigEcho(sampler=sampler, nfe=nfe, window_s=window_s))
            table.rows.append(BenchmarkRow(
                model=label, sampler=sampler, nfe=nfe, window_s=window_s,
                rr_error=merged.rr_mae, waveform_mae=merged.waveform_mae,
            ))
        return table


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def benchmark_rich_table(table: BenchmarkTable) -> Table:
    out = Table(title="Benchmark")
    for column in ("Model", "Sampler", "NFE", "Window", "RR-Error", "Waveform MAE"):
        out.add_column(column, justify="left" if column == "Model" else "right")
    for row in table.rows:
        out.add_row(row.model, row.sampler.value, str(row.nfe), f"{row.window_s:g}s",
                    f"{row.rr_error:.2f}", f"{row.waveform_mae:.3f}")
    return out


def report_rich_table(report: EvalReport) -> Table:
    title = f"RR evaluation ({report.config.window_s:g}s windows, waveform MAE in {report.waveform_domain})"
    out = Table(title=title)
    for column in ("Subject", "Windows", "Flagged", "RR MAE (bpm)", "Waveform MAE", "Discarded"):
        out.add_column(column, justify="left" if column == "Subject" else "right")
    for s in report.subjects:
        out.add_row(s.subject_id, str(len(s.windows)), str(s.flagged_windows), f"{s.rr_mae:.3f}",
                    f"{s.waveform_mae:.4f}", str(s.discarded_samples))
    out.add_row("all", str(sum(len(s.windows) for s in report.subjects)), str(report.flagged_windows),
                f"{report.rr_mae:.3f}", f"{report.waveform_mae:.4f}", "", style="bold")
    return out


def print_table(table: Table, console: Optional[Console] = None) -> None:
    (console or Console()).print(table)


def reference_rich_table() -> Table:
    """Published numbers, kept apart from anything computed here"""
    out = Table(title="Published reference (not computed)")
    for column in ("Model", "Sampler", "NFE", "Window", "RR-Error"):
        out.add_column(column, justify="left" if column == "Model" else "right")
    for row in PUBLISHED_REFERENCE_TABLE:
        out.add_row(str(row["model"]), str(row["sampler"]), str(row["nfe"]), f"{row['window_s']}s",
                    f"{row['rr_error']:.2f}")
    return out
