"""Command-line surface: one click group wiring every service into reproducible runs."""
import functools
import os
import re
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import click
import numpy as np
import yaml
from pydantic import ValidationError

from ppg2resp.core.config import get_settings
from ppg2resp.core.errors import (
    InputValidationError, NumericalError, OutputLockedError, PipelineError, exit_code_for,
)
from ppg2resp.core.logging import get_logger, setup_logging
from ppg2resp.models.schemas import EvalConfigEcho, RunConfig, SamplerName
from ppg2resp.services.checkpoint_service import CheckpointService
from ppg2resp.services.dsp_service import preprocess_recording
from ppg2resp.services.evaluation_service import (
    EvaluationService, SubjectSamples, benchmark_rich_table, evaluate_subject, merge_reports,
    model_label, plot_traces, print_table, reconstruct, reference_rich_table, report_rich_table,
)
from ppg2resp.services.gradcheck_service import check_composite_loss
from ppg2resp.services.signal_io_service import SignalIOService
from ppg2resp.services.store_service import StoreService
from ppg2resp.services.training_service import TrainingService

logger = get_logger(__name__)

# RunConfig keys that live under ``train``
TRAIN_KEYS = ("lambda_spec", "spectral_loss_enabled", "kernel_size_override", "epochs", "batch_size", "clip_x0")


def _handle_errors(func):
    """Map pipeline failures onto exit codes (2 validation, 3 numerical, 4 I/O)"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except PipelineError as e:
            logger.error(f"{func.__name__} failed: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(exit_code_for(e))
        except ValidationError as e:
            logger.error(f"{func.__name__}: invalid configuration: {e}")
            click.echo(f"Error: invalid configuration\n{e}", err=True)
            sys.exit(2)
        except OSError as e:
            logger.error(f"{func.__name__}: I/O error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(4)
        except Exception as e:
            logger.exception(f"{func.__name__}: unexpected error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _read_config(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise InputValidationError(f"{path}: run config must be a mapping")
    return data


def resolve_run_config(command: str, config_path: Optional[Path], default_out: Path, **flags) -> RunConfig:
    """Defaults < YAML config file < command-line flags

    The top-level seed (or ``--seed``) also seeds training; a ``train.seed`` that
    disagrees with it is rejected rather than overwritten.
    """
    settings = get_settings()
    data = _read_config(config_path)
    data["command"] = command
    train = dict(data.get("train") or {})
    for key, value in flags.items():
        if value is None or (isinstance(value, (list, tuple)) and not value):
            continue
        if key in TRAIN_KEYS:
            train[key] = value
        else:
            data[key] = value

    data.setdefault("output_dir", default_out)
    train_seed = train.get("seed")
    if train_seed is not None:
        data.setdefault("seed", train_seed)
    data.setdefault("seed", settings.default_seed)
    if train_seed is not None and train_seed != data["seed"]:
        raise InputValidationError(
            f"train.seed ({train_seed}) disagrees with the run seed ({data['seed']}); set only one"
        )
    data.setdefault("window_s", settings.eval_window_s)
    train["seed"] = data["seed"]
    data["train"] = train
    preprocess = dict(data.get("preprocess") or {})
    preprocess.setdefault("target_fs", settings.target_fs)
    preprocess.setdefault("cutoff_hz", settings.lowpass_cutoff_hz)
    preprocess.setdefault("segment_s", settings.segment_s)
    data["preprocess"] = preprocess
    return RunConfig.model_validate(data)


@contextmanager
def run_directory(run: RunConfig) -> Iterator[Path]:
    """Exclusive use of the output directory; the resolved config is echoed into it"""
    settings = get_settings()
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / settings.lock_file_name
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(f"{out} is in use by another run (remove {lock} if it is stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        with open(out / settings.config_echo_name, "w", encoding="utf-8") as fh:
            yaml.safe_dump(run.model_dump(mode="json"), fh, sort_keys=True)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _parse_kernels(value: Optional[str]) -> Optional[List[int]]:
    if not value:
        return None
    try:
        return [int(k) for k in value.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of integers, got {value!r}")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def _write_csv(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    np.savetxt(path, np.column_stack(columns), fmt="%.10g", delimiter=",", header=",".join(header), comments="")


def _sampling_defaults(run: RunConfig, checkpoint: Path):
    info = CheckpointService().read_info(checkpoint)
    return SamplerName(run.sampler or info.train.sampler), run.nfe or info.train.default_nfe


def _subjects(run: RunConfig) -> Optional[List[str]]:
    return [run.subject] if run.subject else None


def _timing_line(seconds: float, n_subjects: int) -> str:
    return f"Sampling took {seconds:.2f}s for {n_subjects} subject(s) ({seconds / max(n_subjects, 1):.2f}s per subject)"


sampling_options = [
    click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True),
    click.option("--store", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True),
    click.option("--subject", default=None, help="Subject to sample (default: the checkpoint's held-out subject)"),
    click.option("--sampler", type=click.Choice([s.value for s in SamplerName]), default=None),
    click.option("--nfe", type=int, default=None, help="Denoiser evaluations (default: stored with the checkpoint)"),
    click.option("--seed", type=int, default=None),
    click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None),
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path)),
]


def with_options(options):
    def decorator(func):
        for option in reversed(options):
            func = option(func)
        return func
    return decorator


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL")
def cli(log_level: Optional[str]):
    """Conditional diffusion estimation of respiratory waveforms from PPG."""
    setup_logging(level=log_level)


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--synthetic", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Synthetic cohort YAML instead of a manifest")
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_handle_errors
def ingest(manifest, synthetic, output_dir, config_path):
    """Load recordings, preprocess them and write a segment store."""
    run = resolve_run_config("ingest", config_path, get_settings().output_root / "store",
                             manifest=manifest, synthetic=synthetic, output_dir=output_dir)
    if (run.manifest is None) == (run.synthetic is None):
        raise click.UsageError("pass exactly one of --manifest or --synthetic")

    io = SignalIOService()
    if run.manifest is not None:
        recordings = io.load_all(io.load_manifest(run.manifest))
    else:
        recordings = io.generate_cohort(io.load_cohort(run.synthetic))
    segments = [pair for recording in recordings for pair in preprocess_recording(recording, run.preprocess)]

    with run_directory(run) as out:
        StoreService().save(segments, out, run.preprocess)
    click.echo(f"Ingested {len(recordings)} recording(s) into {len(segments)} segments at {out}")


@cli.command()
@click.option("--store", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--subject", default="all", show_default=True, help="Held-out subject id, or 'all' for a LOSO sweep")
@click.option("--seed", type=int, default=None,
              help="Run seed; also seeds training. A conflicting train.seed in --config is an error")
@click.option("--lambda-spec", type=float, default=None)
@click.option("--no-spectral-loss", is_flag=True, default=False)
@click.option("--kernels", default=None, help="Comma-separated fine-encoder kernel sizes, e.g. 3,3,3,3,3,3")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--clip-x0", is_flag=True, default=False)
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_handle_errors
def train(store, subject, seed, lambda_spec, no_spectral_loss, kernels, epochs, batch_size, clip_x0,
          output_dir, config_path):
    """Leave-one-subject-out training with per-epoch checkpoints."""
    run = resolve_run_config(
        "train", config_path, get_settings().output_root / "train",
        store=store, subject=subject, seed=seed, output_dir=output_dir,
        lambda_spec=lambda_spec, spectral_loss_enabled=False if no_spectral_loss else None,
        kernel_size_override=_parse_kernels(kernels), epochs=epochs, batch_size=batch_size,
        clip_x0=True if clip_x0 else None,
    )
    store_service = StoreService()
    segments = store_service.load(run.store)
    held_out = store_service.subjects(run.store) if run.subject in (None, "all") else [run.subject]

    with run_directory(run) as out:
        records = TrainingService().run_loso(segments, run.train, out, held_out)
    for subject_id, record in records.items():
        last = record.epochs[-1]
        click.echo(f"fold {subject_id}: epoch {last.epoch} total loss {last.total_loss:.5f} -> {out / f'fold_{subject_id}'}")


@cli.command()
@with_options(sampling_options)
@_handle_errors
def sample(checkpoint, store, subject, sampler, nfe, seed, output_dir, config_path):
    """Sample respiration for held-out segments and write the reconstructed waveforms."""
    run = resolve_run_config("sample", config_path, get_settings().output_root / "samples",
                             checkpoint=checkpoint, store=store, subject=subject, sampler=sampler,
                             nfe=nfe, seed=seed, output_dir=output_dir)
    sampler_name, n_steps = _sampling_defaults(run, run.checkpoint)
    fs = StoreService().read_index(run.store).preprocess.target_fs
    segments = StoreService().load(run.store)

    with run_directory(run) as out:
        samples, _, elapsed = EvaluationService().sample_subjects(
            run.checkpoint, segments, _subjects(run), sampler_name, n_steps, run.seed,
        )
        for s in samples.values():
            _write_samples(out / f"samples_{s.subject_id}.csv", s, fs)
    click.echo(f"Wrote {len(samples)} sampled waveform(s) to {out}")
    click.echo(_timing_line(elapsed, len(samples)))


def _write_samples(path: Path, s: SubjectSamples, fs: float) -> None:
    n = len(s.scales)
    pred_raw = reconstruct(np.split(s.pred, n), scales=s.scales)
    truth_raw = reconstruct(np.split(s.truth, n), scales=s.scales)
    t = np.arange(s.pred.size) / fs
    _write_csv(path, ("time_s", "pred", "truth", "pred_denorm", "truth_denorm"),
               (t, s.pred, s.truth, pred_raw, truth_raw))


def _read_samples(path: Path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] < 2 or data.shape[1] < 3:
        raise InputValidationError(f"{path}: expected time_s,pred,truth columns")
    fs = round((data.shape[0] - 1) / (data[-1, 0] - data[0, 0]), 6)
    return data[:, 1], data[:, 2], fs


@cli.command(name="eval")
@click.option("--samples", "sample_files", multiple=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Score previously written samples_<subject>.csv files instead of sampling")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--store", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--subject", default=None)
@click.option("--sampler", type=click.Choice([s.value for s in SamplerName]), default=None)
@click.option("--nfe", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--window-s", type=float, default=None)
@click.option("--window-step-s", type=float, default=None, help="Sliding-window step (default: non-overlapping)")
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_handle_errors
def evaluate(sample_files, checkpoint, store, subject, sampler, nfe, seed, window_s, window_step_s,
             output_dir, config_path):
    """Windowed RR and waveform errors for held-out subjects."""
    run = resolve_run_config("eval", config_path, get_settings().output_root / "eval",
                             checkpoint=checkpoint, store=store, subject=subject, sampler=sampler, nfe=nfe,
                             seed=seed, window_s=window_s, window_step_s=window_step_s, output_dir=output_dir)

    if sample_files:
        results = []
        for path in sample_files:
            pred, truth, fs = _read_samples(path)
            subject_id = path.stem[len("samples_"):] if path.stem.startswith("samples_") else path.stem
            results.append(evaluate_subject(pred, truth, fs, run.window_s, run.window_step_s, subject_id))
        report = merge_reports(results, EvalConfigEcho(window_s=run.window_s, window_step_s=run.window_step_s))
    else:
        if run.checkpoint is None or run.store is None:
            raise click.UsageError("pass --checkpoint and --store, or --samples")
        sampler_name, n_steps = _sampling_defaults(run, run.checkpoint)
        fs = StoreService().read_index(run.store).preprocess.target_fs
        report, _ = EvaluationService().run(
            run.checkpoint, StoreService().load(run.store), _subjects(run), sampler_name, n_steps,
            run.seed, fs, run.window_s, run.window_step_s,
        )

    with run_directory(run) as out:
        (out / "report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print_table(report_rich_table(report))
    click.echo(f"RR MAE {report.rr_mae:.3f} bpm ({report.flagged_windows} flagged window(s) excluded), "
               f"waveform MAE {report.waveform_mae:.4f} ({report.waveform_domain})")
    if report.sampling_seconds is not None:
        click.echo(_timing_line(report.sampling_seconds, len(report.subjects)))


@cli.command()
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--store", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--subject", default=None)
@click.option("--sampler", type=click.Choice([s.value for s in SamplerName]), default=None)
@click.option("--nfe", "nfe_grid", type=int, multiple=True, help="Repeat for several NFE values")
@click.option("--seed", type=int, default=None)
@click.option("--window-s", type=float, default=None)
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_handle_errors
def plot(checkpoints, store, subject, sampler, nfe_grid, seed, window_s, output_dir, config_path):
    """Per-window pred/truth traces (time_s,pred,truth CSV) for each checkpoint and NFE."""
    run = resolve_run_config("plot", config_path, get_settings().output_root / "plots",
                             checkpoints=list(checkpoints), store=store, subject=subject, sampler=sampler,
                             nfe_grid=list(nfe_grid), seed=seed, window_s=window_s, output_dir=output_dir)
    fs = StoreService().read_index(run.store).preprocess.target_fs
    segments = StoreService().load(run.store)
    service = EvaluationService()

    written = 0
    with run_directory(run) as out:
        for checkpoint in run.checkpoints:
            default_sampler, default_nfe = _sampling_defaults(run, checkpoint)
            label = _slug(model_label(CheckpointService().read_info(checkpoint).train))
            for n_steps in run.nfe_grid or [default_nfe]:
                _, samples = service.run(checkpoint, segments, _subjects(run), default_sampler, n_steps,
                                         run.seed, fs, run.window_s)
                for s in samples.values():
                    for k, trace in enumerate(plot_traces(s.pred, s.truth, fs, run.window_s)):
                        name = f"traces_{label}_{default_sampler.value}{n_steps}_{s.subject_id}_w{k:02d}.csv"
                        _write_csv(out / name, ("time_s", "pred", "truth"), trace.T)
                        written += 1
    click.echo(f"Wrote {written} trace file(s) to {out}")


@cli.command()
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--runs", "run_dirs", multiple=True, type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Training output directory; every fold_*/checkpoints/final.ckpt is included")
@click.option("--store", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--sampler", type=click.Choice([s.value for s in SamplerName]), default=SamplerName.DDIM.value,
              show_default=True)
@click.option("--nfe", "nfe_grid", type=int, multiple=True, help="Repeat for several NFE values (default 50 and 6)")
@click.option("--seed", type=int, default=None)
@click.option("--window-s", type=float, default=None)
@click.option("--with-reference", is_flag=True, default=False, help="Also print the published reference numbers")
@click.option("--out", "output_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_handle_errors
def benchmark(checkpoints, run_dirs, store, sampler, nfe_grid, seed, window_s, with_reference, output_dir,
              config_path):
    """RR error table over models and NFE values."""
    found = list(checkpoints)
    for run_dir in run_dirs:
        found.extend(sorted(run_dir.glob("fold_*/checkpoints/final.ckpt")))
    run = resolve_run_config("benchmark", config_path, get_settings().output_root / "benchmark",
                             checkpoints=found, store=store, sampler=sampler, nfe_grid=list(nfe_grid),
                             seed=seed, window_s=window_s, output_dir=output_dir)
    grid = [(SamplerName(run.sampler or SamplerName.DDIM), n) for n in (run.nfe_grid or [50, 6])]
    fs = StoreService().read_index(run.store).preprocess.target_fs

    table = EvaluationService().benchmark(run.checkpoints, StoreService().load(run.store), grid, run.seed, fs,
                                          run.window_s)
    with run_directory(run) as out:
        (out / "benchmark.json").write_text(table.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print_table(benchmark_rich_table(table))
    if with_reference:
        print_table(reference_rich_table())


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@_handle_errors
def gradcheck(seed, tolerance):
    """Finite-difference check of the training-loss gradients on a small fixture model."""
    settings = get_settings()
    result = check_composite_loss(seed=seed, step=settings.grad_check_step, floor=settings.grad_check_floor)
    click.echo(
        f"max relative error {result.max_rel_error:.3e} over {result.entries_checked} entries "
        f"(worst: {result.worst_param}{result.worst_index})"
    )
    if result.max_rel_error >= tolerance:
        raise NumericalError(f"gradient check failed: {result.max_rel_error:.3e} >= {tolerance:g}")


def main(argv: Optional[Sequence[str]] = None) -> None:
    cli.main(args=argv, prog_name="ppg2resp")
