import json

import numpy as np
import pytest

from conftest import make_segments
from ppg2resp.core.errors import InputValidationError, NonFiniteLossError, ShapeError
from ppg2resp.services import training_service
from ppg2resp.services.checkpoint_service import CheckpointService
from ppg2resp.services.diffusion_service import schedule_from_config
from ppg2resp.services.gradcheck_service import fixture_problem
from ppg2resp.services.network_service import init_params
from ppg2resp.services.training_service import (
    Adam, TrainingService, composite_loss, diffusion_loss, draw_batch, spectral_loss, spectral_loss_grad, total_loss,
)


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_diffusion_loss_is_mean_squared_error():
    assert diffusion_loss(np.zeros((2, 2)), np.array([[1.0, -1.0], [2.0, 0.0]])) == pytest.approx(1.5)
    with pytest.raises(ShapeError):
        diffusion_loss(np.zeros(3), np.zeros(4))


def test_spectral_loss_zero_for_identical_inputs():
    y = np.random.default_rng(0).standard_normal((3, 20))
    assert spectral_loss(y, y) == 0.0


def test_spectral_loss_ignores_circular_shift():
    """Magnitude spectra are shift invariant"""
    y = np.random.default_rng(1).standard_normal(32)
    assert spectral_loss(np.roll(y, 5), y) == pytest.approx(0.0, abs=1e-20)


def test_spectral_loss_example():
    y_hat = np.zeros(4)
    y = np.ones(4)
    # |Y| = [4, 0, 0], |Y_hat| = 0
    assert spectral_loss(y_hat, y) == pytest.approx(16 / 3)


@pytest.mark.parametrize("length", [15, 16])
def test_spectral_gradient_matches_finite_differences(length):
    rng = np.random.default_rng(length)
    y_hat = rng.standard_normal((2, length))
    y = rng.standard_normal((2, length))
    _, grad = spectral_loss_grad(y_hat, y)
    h = 1e-6
    numeric = np.zeros_like(y_hat)
    for idx in np.ndindex(y_hat.shape):
        plus, minus = y_hat.copy(), y_hat.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (spectral_loss(plus, y) - spectral_loss(minus, y)) / (2 * h)
    assert np.allclose(grad, numeric, atol=1e-7, rtol=1e-5)


def test_lambda_zero_total_equals_diffusion_loss():
    params, batch, schedule, config = fixture_problem(seed=0, lambda_spec=0.0)
    breakdown, _ = composite_loss(params, batch, schedule, config)
    assert breakdown.total == breakdown.diffusion
    assert breakdown.spectral > 0


def test_disabling_spectral_loss_matches_lambda_zero():
    params, batch, schedule, config = fixture_problem(seed=1, lambda_spec=0.5)
    disabled = config.model_copy(update={"spectral_loss_enabled": False})
    zero = config.model_copy(update={"lambda_spec": 0.0})
    a, grads_a = composite_loss(params, batch, schedule, disabled)
    b, grads_b = composite_loss(params, batch, schedule, zero)
    assert a.total == b.total
    assert all(np.array_equal(grads_a[k], grads_b[k]) for k in params)


def test_spectral_term_changes_the_gradient():
    params, batch, schedule, config = fixture_problem(seed=2, lambda_spec=1.0)
    with_spec, grads = composite_loss(params, batch, schedule, config)
    without, grads0 = composite_loss(params, batch, schedule, config.model_copy(update={"lambda_spec": 0.0}))
    assert with_spec.total == pytest.approx(without.diffusion + with_spec.spectral)
    assert not np.allclose(grads["head.weight"], grads0["head.weight"])


def test_draw_batch_order_and_shapes(tiny_segments):
    rng_a = np.random.default_rng(5)
    batch = draw_batch(tiny_segments, [3, 0, 7], 4, rng_a)
    assert batch.y0.shape == (3, 16) and batch.eps.shape == (3, 16)
    assert np.array_equal(batch.y0[0], tiny_segments[3].resp)
    assert np.array_equal(batch.x_ppg[2], tiny_segments[7].ppg)
    rng_b = np.random.default_rng(5)
    t = rng_b.integers(1, 5, size=3)
    eps = rng_b.standard_normal((3, 16))
    assert np.array_equal(batch.t, t) and np.array_equal(batch.eps, eps)
    assert batch.indices == [3, 0, 7]


def test_total_loss_covers_the_whole_set(tiny_segments, small_train_config):
    params = init_params(small_train_config.model)
    schedule = schedule_from_config(small_train_config.schedule)
    loss, grads, breakdown = total_loss(tiny_segments, params, schedule, small_train_config,
                                        np.random.default_rng(0))
    assert np.isfinite(loss) and loss == breakdown.total
    assert list(grads) == list(params)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters_unchanged(small_model_config):
    params = init_params(small_model_config, seed=1)
    before = params.copy()
    Adam().step(params, params.zeros_like())
    assert all(np.array_equal(before[k], params[k]) for k in params)


def test_adam_zero_gradient_freezes_moments_and_step_count(small_model_config):
    params = init_params(small_model_config, seed=1)
    grads = params.zeros_like()
    grads.arrays["head.weight"][...] = 0.5
    opt = Adam(lr=0.01)
    opt.step(params, grads)
    m, v = opt.m["head.weight"].copy(), opt.v["head.weight"].copy()
    after_first = params["head.weight"].copy()

    opt.step(params, params.zeros_like())
    assert opt.steps == {"head.weight": 1}
    assert np.array_equal(opt.m["head.weight"], m) and np.array_equal(opt.v["head.weight"], v)
    assert np.array_equal(params["head.weight"], after_first)
    assert "head.bias" not in opt.m


def test_adam_first_step_moves_by_learning_rate(small_model_config):
    params = init_params(small_model_config, seed=1)
    before = params.copy()
    grads = params.zeros_like()
    grads.arrays["head.weight"][...] = np.linspace(-2, 2, grads["head.weight"].size) + 0.1
    Adam(lr=0.01).step(params, grads)
    delta = params["head.weight"] - before["head.weight"]
    # bias-corrected first step is lr * sign(g), up to eps
    assert np.allclose(delta, -0.01 * np.sign(grads["head.weight"]), atol=1e-8)
    assert np.array_equal(params["time.weight"], before["time.weight"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_training_is_deterministic(tmp_path, tiny_segments, small_train_config):
    service = TrainingService()
    service.train(tiny_segments, small_train_config, tmp_path / "a")
    service.train(tiny_segments, small_train_config, tmp_path / "b")

    for name in ("epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt"):
        a = (tmp_path / "a" / "checkpoints" / name).read_bytes()
        b = (tmp_path / "b" / "checkpoints" / name).read_bytes()
        assert a == b, name

    log_a = read_log(tmp_path / "a" / "train_log.jsonl")
    log_b = read_log(tmp_path / "b" / "train_log.jsonl")
    for row in log_a + log_b:
        row.pop("seconds", None)
    assert log_a == log_b
    assert [r["type"] for r in log_a].count("epoch") == 2
    # 12 segments in batches of 4
    assert [r["type"] for r in log_a].count("batch") == 6


def test_different_seeds_give_different_models(tmp_path, tiny_segments, small_train_config):
    service = TrainingService()
    a, _ = service.train(tiny_segments, small_train_config)
    b, _ = service.train(tiny_segments, small_train_config.model_copy(update={"seed": 1}))
    assert not np.array_equal(a["head.weight"], b["head.weight"])


def test_in_memory_model_equals_saved_checkpoint(tmp_path, tiny_segments, small_train_config):
    params, record = TrainingService().train(tiny_segments, small_train_config, tmp_path)
    loaded, config = CheckpointService().load_checkpoint(tmp_path / "checkpoints" / "final.ckpt")
    assert all(np.array_equal(params[k], loaded[k]) for k in params)
    assert config == small_train_config
    assert len(record.epochs) == 2
    assert record.lambda_spec == small_train_config.lambda_spec


def test_training_reduces_loss(tiny_segments, small_train_config):
    """Compared on identical (t, eps) draws so only the parameters differ"""
    config = small_train_config.model_copy(update={"epochs": 40, "learning_rate": 1e-2})
    trained, _ = TrainingService().train(tiny_segments, config)
    initial = init_params(config.model, seed=config.seed)
    schedule = schedule_from_config(config.schedule)
    before, _, _ = total_loss(tiny_segments, initial, schedule, config, np.random.default_rng(123))
    after, _, _ = total_loss(tiny_segments, trained, schedule, config, np.random.default_rng(123))
    assert after < before


def test_single_repeated_example_loss_falls_every_epoch(tmp_path, tiny_segments, small_train_config):
    """One example repeated in a single large batch, scored after each epoch on one fixed (t, eps) draw"""
    example = tiny_segments[0]
    config = small_train_config.model_copy(update={"epochs": 10, "batch_size": 256, "learning_rate": 1e-2})
    TrainingService().train([example] * 256, config, tmp_path)

    rows = read_log(tmp_path / "train_log.jsonl")
    assert [r["epoch"] for r in rows if r["type"] == "epoch"] == list(range(1, 11))

    schedule = schedule_from_config(config.schedule)
    scoring_set = [example] * 512
    snapshots = [init_params(config.model, seed=config.seed)]
    for epoch in range(1, 11):
        params, _ = CheckpointService().load_checkpoint(tmp_path / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
        snapshots.append(params)
    losses = [total_loss(scoring_set, p, schedule, config, np.random.default_rng(99))[0] for p in snapshots]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_spectral_weight_changes_the_first_epoch_checkpoint(tmp_path, tiny_segments, small_train_config):
    service = TrainingService()
    for name, weight in (("spec", 0.01), ("nospec", 0.0)):
        config = small_train_config.model_copy(update={"epochs": 1, "lambda_spec": weight})
        service.train(tiny_segments, config, tmp_path / name)
    with_spec, _ = CheckpointService().load_checkpoint(tmp_path / "spec" / "checkpoints" / "epoch_001.ckpt")
    without, _ = CheckpointService().load_checkpoint(tmp_path / "nospec" / "checkpoints" / "epoch_001.ckpt")
    assert any(not np.array_equal(with_spec[k], without[k]) for k in with_spec)


def test_kernel_override_changes_the_architecture(tmp_path, tiny_segments, small_train_config):
    config = small_train_config.model_copy(update={"kernel_size_override": [3, 3], "epochs": 1})
    params, _ = TrainingService().train(tiny_segments, config, tmp_path)
    assert params.config.fine_kernels == [3, 3]
    assert params["fine_ppg.0.weight"].shape == (2, 1, 3)
    info = CheckpointService().read_info(tmp_path / "checkpoints" / "final.ckpt")
    assert info.model.fine_kernels == [3, 3]


def test_non_finite_loss_reports_the_batch(mocker, tiny_segments, small_train_config):
    real = training_service.composite_loss

    def poisoned(params, batch, schedule, config):
        breakdown, grads = real(params, batch, schedule, config)
        return breakdown.model_copy(update={"total": float("nan")}), grads

    mocker.patch("ppg2resp.services.training_service.composite_loss", side_effect=poisoned)
    with pytest.raises(NonFiniteLossError) as exc:
        TrainingService().train(tiny_segments, small_train_config)
    assert exc.value.epoch == 1
    assert len(exc.value.batch_indices) == 4
    assert len(exc.value.timesteps) == 4
    assert exc.value.exit_code == 3


def test_empty_training_set(small_train_config):
    with pytest.raises(InputValidationError):
        TrainingService().train([], small_train_config)


def test_run_loso_writes_one_fold_per_subject(tmp_path, small_train_config):
    segments = make_segments(per_subject=2)
    config = small_train_config.model_copy(update={"epochs": 1})
    records = TrainingService().run_loso(segments, config, tmp_path, ["s1", "s3"])
    assert list(records) == ["s1", "s3"]
    for subject in ("s1", "s3"):
        ckpt = tmp_path / f"fold_{subject}" / "checkpoints" / "final.ckpt"
        assert CheckpointService().read_info(ckpt).held_out == subject
    assert not (tmp_path / "fold_s2").exists()


def test_run_loso_unknown_subject(tmp_path, tiny_segments, small_train_config):
    with pytest.raises(InputValidationError, match="s9"):
        TrainingService().run_loso(tiny_segments, small_train_config, tmp_path, ["s9"])


def test_run_loso_single_subject_leaves_nothing_to_train(tmp_path, small_train_config):
    with pytest.raises(InputValidationError, match="no training data"):
        TrainingService().run_loso(make_segments(subjects=("s1",)), small_train_config, tmp_path, ["s1"])
