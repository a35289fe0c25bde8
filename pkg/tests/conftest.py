import numpy as np
import pytest

from ppg2resp.core.config import reset_settings
from ppg2resp.models.schemas import ModelConfig, ScheduleConfig, SegmentPair, TrainConfig
from ppg2resp.services.dsp_service import normalize


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Every test writes under its own output root with progress bars off"""
    monkeypatch.setenv("PPG2RESP_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("PPG2RESP_PROGRESS", "false")
    monkeypatch.delenv("LOG_FILE", raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def small_model_config():
    return ModelConfig(fine_kernels=[1, 3], coarse_kernels=[3, 5], coarse_dilation=2,
                       branch_channels=2, hidden_size=4, time_embed_dim=4)


@pytest.fixture
def small_train_config(small_model_config):
    return TrainConfig(
        schedule=ScheduleConfig(T=4, beta_start=1e-4, beta_end=0.05),
        model=small_model_config,
        epochs=2,
        batch_size=4,
        seed=0,
    )


def make_segments(subjects=("s1", "s2", "s3"), per_subject=4, length=16, seed=0):
    """Normalised sinusoid/pulse pairs, a different breathing frequency per subject"""
    rng = np.random.default_rng(seed)
    n = np.arange(length)
    segments = []
    for k, subject in enumerate(subjects):
        for i in range(per_subject):
            phase = rng.uniform(0, 2 * np.pi)
            resp = np.sin(2 * np.pi * (k + 1) * n / length + phase)
            ppg = 1.0 + 0.3 * resp + 0.1 * np.cos(2 * np.pi * 5 * n / length) + 0.01 * rng.standard_normal(length)
            p, p_scale = normalize(ppg, (0.0, 1.0))
            r, r_scale = normalize(resp, (-1.0, 1.0))
            segments.append(SegmentPair(ppg=p, resp=r, subject_id=subject, segment_index=i,
                                        ppg_scale=p_scale, resp_scale=r_scale))
    return segments


@pytest.fixture
def tiny_segments():
    return make_segments()
