"""Central finite-difference verification of analytic gradients."""
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import ModelConfig, ScheduleConfig, TrainConfig
from ppg2resp.services import network_service
from ppg2resp.services.diffusion_service import schedule_from_config
from ppg2resp.services.network_service import ModelParams, init_params
from ppg2resp.services.training_service import TrainingBatch, composite_objective

logger = get_logger(__name__)

# params -> (scalar loss, gradients with the same layout as params)
Objective = Callable[[ModelParams], Tuple[float, ModelParams]]


class NoiseBatch(BaseModel):
    """Inputs plus a regression target for checking the network on its own"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    y_t: np.ndarray
    t: np.ndarray
    x_ppg: np.ndarray
    target: np.ndarray
    max_t: int


class GradCheckResult(BaseModel):
    max_rel_error: float
    worst_param: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None
    entries_checked: int = 0


def regression_objective(batch: NoiseBatch) -> Objective:
    """0.5 * sum((eps_theta - target)^2), differentiated through ``network_service.backward``"""
    def objective(params: ModelParams) -> Tuple[float, ModelParams]:
        out, cache = network_service.forward(params, batch.y_t, batch.t, batch.x_ppg, max_t=batch.max_t)
        diff = out - batch.target
        return 0.5 * float(np.sum(diff * diff)), network_service.backward(diff, cache, params)
    return objective


def grad_check(
    params: ModelParams,
    batch: Optional[NoiseBatch],
    step: float = 1e-5,
    objective: Optional[Objective] = None,
    max_entries_per_array: Optional[int] = 64,
    floor: float = 1e-4,
    seed: int = 0,
) -> GradCheckResult:
    """Worst relative error |a - n| / max(|a|, |n|, floor) between analytic and numeric gradients.

    Arrays larger than ``max_entries_per_array`` are checked on a seeded random
    subsample of entries. ``params`` must hold float64 arrays; they are restored
    after every perturbation.
    """
    if objective is None:
        if batch is None:
            raise ValueError("grad_check needs a batch or an explicit objective")
        objective = regression_objective(batch)

    _, analytic = objective(params)
    rng = np.random.default_rng(seed)
    result = GradCheckResult(max_rel_error=0.0)

    for name, array in params.items():
        flat = array.reshape(-1)
        if max_entries_per_array is not None and flat.size > max_entries_per_array:
            indices = np.sort(rng.choice(flat.size, size=max_entries_per_array, replace=False))
        else:
            indices = np.arange(flat.size)
        grad_flat = analytic[name].reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus, _ = objective(params)
            flat[idx] = original - step
            minus, _ = objective(params)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = grad_flat[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            result.entries_checked += 1
            if err > result.max_rel_error:
                result.max_rel_error = float(err)
                result.worst_param = name
                result.worst_index = tuple(int(i) for i in np.unravel_index(idx, array.shape))

    logger.info(
        f"Gradient check: {result.entries_checked} entries, worst relative error "
        f"{result.max_rel_error:.3e} at {result.worst_param}{result.worst_index}"
    )
    return result


def fixture_problem(seed: int = 0, length: int = 16, batch_size: int = 2, T: int = 4, lambda_spec: float = 1.0):
    """Small model, schedule and batch on which every gradient can be checked quickly"""
    model = ModelConfig(fine_kernels=[1, 3], coarse_kernels=[3, 5], coarse_dilation=2,
                        branch_channels=2, hidden_size=4, time_embed_dim=4)
    config = TrainConfig(schedule=ScheduleConfig(T=T, beta_start=1e-4, beta_end=0.05), model=model,
                         lambda_spec=lambda_spec, seed=seed)
    rng = np.random.default_rng(seed)
    batch = TrainingBatch(
        y0=rng.uniform(-1, 1, (batch_size, length)),
        x_ppg=rng.uniform(0, 1, (batch_size, length)),
        t=rng.integers(1, T + 1, size=batch_size),
        eps=rng.standard_normal((batch_size, length)),
    )
    params = init_params(model, seed=seed)
    for array in params.arrays.values():
        # non-zero biases so their gradients are exercised away from the init point
        if not np.any(array):
            array[...] = rng.uniform(-0.1, 0.1, array.shape)
    return params, batch, schedule_from_config(config.schedule), config


def check_composite_loss(seed: int = 0, step: float = 1e-5, floor: float = 1e-4,
                         max_entries_per_array: Optional[int] = None) -> GradCheckResult:
    """Gradient check of the full training loss on the fixture problem"""
    params, batch, schedule, config = fixture_problem(seed)
    return grad_check(params, None, step=step, objective=composite_objective(batch, schedule, config),
                      max_entries_per_array=max_entries_per_array, floor=floor, seed=seed)
