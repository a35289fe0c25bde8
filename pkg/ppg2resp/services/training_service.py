import json
import time
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from ppg2resp.core.config import get_settings
from ppg2resp.core.errors import InputValidationError, NonFiniteLossError, ShapeError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import (
    BatchRecord, EpochRecord, SegmentPair, TrainConfig, TrainRecord,
)
from ppg2resp.services import network_service
from ppg2resp.services.checkpoint_service import CheckpointService
from ppg2resp.services.diffusion_service import NoiseSchedule, schedule_from_config
from ppg2resp.services.network_service import ModelParams, init_params

logger = get_logger(__name__)


class TrainingBatch(BaseModel):
    """Clean targets, conditioning and the (t, eps) draws for one optimisation step"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    y0: np.ndarray      # (B, L)
    x_ppg: np.ndarray   # (B, L)
    t: np.ndarray       # (B,)
    eps: np.ndarray     # (B, L)
    indices: Optional[List[int]] = None


class LossBreakdown(BaseModel):
    total: float
    diffusion: float
    spectral: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def diffusion_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean squared error over every element of the batch"""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"length mismatch: {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def _spectral_terms(y0_hat: np.ndarray, y0: np.ndarray):
    y0_hat = np.asarray(y0_hat, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    if y0_hat.shape != y0.shape:
        raise ShapeError(f"length mismatch: {y0_hat.shape} vs {y0.shape}")
    spec_hat = np.fft.rfft(y0_hat, axis=-1)
    mag_hat = np.abs(spec_hat)
    diff = mag_hat - np.abs(np.fft.rfft(y0, axis=-1))
    return spec_hat, mag_hat, diff


def spectral_loss(y0_hat: np.ndarray, y0: np.ndarray) -> float:
    """Mean over frequency bins (and batch) of squared magnitude differences"""
    _, _, diff = _spectral_terms(y0_hat, y0)
    return float(np.mean(diff ** 2))


def spectral_loss_grad(y0_hat: np.ndarray, y0: np.ndarray) -> Tuple[float, np.ndarray]:
    """Spectral loss and its gradient with respect to ``y0_hat``.

    d|Y_k|/dy_n = Re(conj(u_k) exp(-2 pi i k n / L)) with u_k = Y_k / |Y_k|
    (zero where |Y_k| = 0), summed over the one-sided bins via an inverse FFT.
    """
    spec_hat, mag_hat, diff = _spectral_terms(y0_hat, y0)
    L = np.shape(y0_hat)[-1]
    coeff = 2.0 * diff / diff.size
    unit = np.divide(spec_hat, mag_hat, out=np.zeros_like(spec_hat), where=mag_hat > 0)
    full = np.zeros(np.shape(y0_hat), dtype=np.complex128)
    full[..., :diff.shape[-1]] = coeff * unit
    grad = np.real(np.fft.ifft(full, axis=-1)) * L
    return float(np.mean(diff ** 2)), grad


def composite_loss(
    params: ModelParams, batch: TrainingBatch, schedule: NoiseSchedule, config: TrainConfig,
) -> Tuple[LossBreakdown, ModelParams]:
    """L_diff + lambda_spec * L_spec for fixed (t, eps) draws, with exact gradients"""
    y0 = np.asarray(batch.y0, dtype=np.float64)
    if y0.ndim != 2:
        raise ShapeError("training batch must be (B, L)")
    ab = schedule.alpha_bar_array(batch.t)[:, None]
    sqrt_ab, sqrt_1m_ab = np.sqrt(ab), np.sqrt(1.0 - ab)

    y_t = sqrt_ab * y0 + sqrt_1m_ab * batch.eps
    eps_hat, cache = network_service.forward(params, y_t, batch.t, batch.x_ppg, max_t=schedule.T)

    l_diff = diffusion_loss(batch.eps, eps_hat)
    grad_out = 2.0 * (eps_hat - batch.eps) / eps_hat.size

    y0_hat = (y_t - sqrt_1m_ab * eps_hat) / sqrt_ab
    if config.clip_x0:
        inside = (y0_hat > -1.0) & (y0_hat < 1.0)
        y0_hat = np.clip(y0_hat, -1.0, 1.0)
    l_spec, grad_y0_hat = spectral_loss_grad(y0_hat, y0)

    lam = config.effective_lambda_spec
    if lam > 0:
        if config.clip_x0:
            grad_y0_hat = grad_y0_hat * inside
        grad_out = grad_out + lam * grad_y0_hat * (-sqrt_1m_ab / sqrt_ab)

    grads = network_service.backward(grad_out, cache, params)
    return LossBreakdown(total=l_diff + lam * l_spec, diffusion=l_diff, spectral=l_spec), grads


def draw_batch(segments: Sequence[SegmentPair], indices: Sequence[int], T: int,
               rng: np.random.Generator) -> TrainingBatch:
    """Draw t for every example, then eps for every example, in index order"""
    y0 = np.stack([segments[i].resp for i in indices])
    x = np.stack([segments[i].ppg for i in indices])
    t = rng.integers(1, T + 1, size=len(indices))
    eps = rng.standard_normal(y0.shape)
    return TrainingBatch(y0=y0, x_ppg=x, t=t, eps=eps, indices=[int(i) for i in indices])


def total_loss(
    segments: Sequence[SegmentPair], params: ModelParams, schedule: NoiseSchedule,
    config: TrainConfig, rng: np.random.Generator,
) -> Tuple[float, ModelParams, LossBreakdown]:
    batch = draw_batch(segments, range(len(segments)), schedule.T, rng)
    breakdown, grads = composite_loss(params, batch, schedule, config)
    return breakdown.total, grads, breakdown


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimiser with per-array step counts

    An array whose gradient is identically zero is skipped outright: its moments
    do not decay and its step count does not advance, unlike standard Adam which
    keeps moving on stale momentum. Frozen coarse-branch weights with fusion off
    therefore stay bit-identical.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        for name, p in params.items():
            g = grads[name]
            if not np.any(g):
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            k = self.steps.get(name, 0) + 1
            self.steps[name] = k
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** k)
            v_hat = v / (1.0 - self.beta2 ** k)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainingService:
    """Runs mini-batch training and leave-one-subject-out sweeps"""

    def __init__(self, checkpoint_service: Optional[CheckpointService] = None):
        self.checkpoints = checkpoint_service or CheckpointService()
        self.settings = get_settings()

    def train(
        self,
        segments: Sequence[SegmentPair],
        config: TrainConfig,
        output_dir: Optional[Path] = None,
        held_out: Optional[str] = None,
    ) -> Tuple[ModelParams, TrainRecord]:
        """Train from a seeded initialisation.

        Parameters are initialised from ``seed``; a second generator seeded by
        ``(seed, 1)`` shuffles once per epoch and then draws (t, eps) batch by
        batch. Parameters are rounded to float32 precision at each epoch end
        so the in-memory model always equals the checkpoint just written.
        """
        if not segments:
            raise InputValidationError("training set is empty")

        schedule = schedule_from_config(config.schedule)
        model_config = config.resolved_model()
        params = init_params(model_config, seed=config.seed)
        optimizer = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
        rng = np.random.default_rng([config.seed, 1])
        record = TrainRecord(seed=config.seed, lambda_spec=config.effective_lambda_spec)

        log_fh = None
        ckpt_dir = None
        if output_dir is not None:
            output_dir = Path(output_dir)
            ckpt_dir = output_dir / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(output_dir / self.settings.train_log_name, "w", encoding="utf-8")

        logger.info(
            f"Training on {len(segments)} segments: {params.num_parameters} parameters, "
            f"T={schedule.T}, lambda_spec={config.effective_lambda_spec}, "
            f"fine kernels={model_config.fine_kernels}, epochs={config.epochs}"
        )

        n = len(segments)
        try:
            epochs = tqdm(range(1, config.epochs + 1), desc="epochs", disable=not self.settings.show_progress)
            for epoch in epochs:
                started = time.perf_counter()
                order = rng.permutation(n)
                sums = np.zeros(3)
                n_batches = 0
                for b, start in enumerate(range(0, n, config.batch_size)):
                    batch = draw_batch(segments, order[start:start + config.batch_size], schedule.T, rng)
                    breakdown, grads = composite_loss(params, batch, schedule, config)
                    if not np.isfinite(breakdown.total):
                        raise NonFiniteLossError(epoch, batch.indices or [], batch.t.tolist())
                    optimizer.step(params, grads)

                    batch_record = BatchRecord(
                        epoch=epoch, batch=b, diffusion_loss=breakdown.diffusion,
                        spectral_loss=breakdown.spectral, total_loss=breakdown.total,
                    )
                    record.batches.append(batch_record)
                    if log_fh is not None:
                        log_fh.write(json.dumps({"type": "batch", **batch_record.model_dump()}) + "\n")
                    sums += (breakdown.diffusion, breakdown.spectral, breakdown.total)
                    n_batches += 1
                    logger.debug(
                        f"epoch {epoch} batch {b}: L_diff={breakdown.diffusion:.6f} "
                        f"L_spec={breakdown.spectral:.6f} total={breakdown.total:.6f}"
                    )

                params.round_to_float32()
                means = sums / n_batches
                epoch_record = EpochRecord(
                    epoch=epoch, diffusion_loss=float(means[0]), spectral_loss=float(means[1]),
                    total_loss=float(means[2]), seconds=time.perf_counter() - started,
                )
                record.epochs.append(epoch_record)
                if log_fh is not None:
                    log_fh.write(json.dumps({"type": "epoch", **epoch_record.model_dump()}) + "\n")
                    log_fh.flush()
                if ckpt_dir is not None:
                    self.checkpoints.save_checkpoint(
                        params, config, ckpt_dir / f"epoch_{epoch:03d}.ckpt", epoch=epoch, held_out=held_out,
                    )
                logger.info(
                    f"Epoch {epoch}/{config.epochs}: L_diff={epoch_record.diffusion_loss:.5f} "
                    f"L_spec={epoch_record.spectral_loss:.5f} total={epoch_record.total_loss:.5f} "
                    f"({epoch_record.seconds:.1f}s)"
                )
        finally:
            if log_fh is not None:
                log_fh.close()

        if ckpt_dir is not None:
            self.checkpoints.save_checkpoint(
                params, config, ckpt_dir / "final.ckpt", epoch=config.epochs, held_out=held_out,
            )
        return params, record

    def run_loso(
        self,
        segments: Sequence[SegmentPair],
        config: TrainConfig,
        output_root: Path,
        held_out_subjects: Sequence[str],
    ) -> "OrderedDict[str, TrainRecord]":
        """Train one model per held-out subject on every other subject's segments"""
        known = list(OrderedDict.fromkeys(s.subject_id for s in segments))
        records: "OrderedDict[str, TrainRecord]" = OrderedDict()
        for subject in held_out_subjects:
            if subject not in known:
                raise InputValidationError(f"unknown subject id {subject!r}")
            train_set = [s for s in segments if s.subject_id != subject]
            if not train_set:
                raise InputValidationError(f"holding out {subject!r} leaves no training data")
            logger.info(f"LOSO fold: holding out {subject}, training on {len(known) - 1} subjects")
            _, record = self.train(train_set, config, Path(output_root) / f"fold_{subject}", held_out=subject)
            records[subject] = record
        return records


def composite_objective(batch: TrainingBatch, schedule: NoiseSchedule, config: TrainConfig):
    """``params -> (total loss, grads)`` for fixed draws, usable by the gradient checker"""
    def objective(params: ModelParams) -> Tuple[float, ModelParams]:
        breakdown, grads = composite_loss(params, batch, schedule, config)
        return breakdown.total, grads
    return objective
