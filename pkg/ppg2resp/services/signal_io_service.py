import csv
import math
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError

from ppg2resp.core.errors import IngestionError, InputValidationError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import (
    DatasetManifest, ManifestEntry, Recording, SyntheticCohort, SyntheticConfig,
)

logger = get_logger(__name__)

# Raised-cosine pulse occupying this fraction of each cardiac cycle
PULSE_WIDTH = 0.6
PULSE_CENTER = 0.3


def _read_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise IngestionError("file not found", path=str(path))
    except yaml.YAMLError as e:
        raise IngestionError(f"malformed YAML: {e}", path=str(path))
    if not isinstance(data, dict):
        raise IngestionError("expected a mapping at the top level", path=str(path))
    return data


class SignalIOService:
    """Loads recordings from disk, synthesises test cohorts and partitions subjects"""

    def load_manifest(self, path: Union[str, Path]) -> DatasetManifest:
        path = Path(path)
        data = _read_yaml(path)
        try:
            manifest = DatasetManifest.model_validate(data)
        except ValidationError as e:
            raise IngestionError(f"invalid manifest: {e}", path=str(path))

        base = path.parent
        for entry in manifest.entries:
            if not entry.path.is_absolute():
                entry.path = (base / entry.path).resolve()
            if not entry.path.exists():
                raise IngestionError("referenced signal file does not exist", path=str(entry.path))

        logger.info(f"Loaded manifest {path} with {len(manifest.entries)} entries")
        return manifest

    def load_recording(self, entry: ManifestEntry) -> Recording:
        """Read the PPG and respiration columns named by ``entry``; other columns are ignored"""
        path = Path(entry.path)
        if not path.exists():
            raise IngestionError("file not found", path=str(path))

        with open(path, "r", encoding="utf-8", newline="") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                raise IngestionError("missing header row", path=str(path))
            delimiter = "\t" if "\t" in header_line else ","
            header = [h.strip() for h in next(csv.reader([header_line], delimiter=delimiter))]

            try:
                ppg_idx = header.index(entry.ppg_column.strip())
            except ValueError:
                raise IngestionError(f"missing column {entry.ppg_column.strip()!r}", path=str(path))
            try:
                resp_idx = header.index(entry.resp_column.strip())
            except ValueError:
                raise IngestionError(f"missing column {entry.resp_column.strip()!r}", path=str(path))

            ppg: List[float] = []
            resp: List[float] = []
            for row_number, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                ppg_cell = row[ppg_idx].strip() if ppg_idx < len(row) else ""
                resp_cell = row[resp_idx].strip() if resp_idx < len(row) else ""
                if bool(ppg_cell) != bool(resp_cell):
                    raise IngestionError(
                        "length mismatch between PPG and respiration columns",
                        path=str(path), row=row_number,
                    )
                if not ppg_cell:
                    continue
                ppg.append(self._parse_cell(ppg_cell, path, row_number, entry.ppg_column.strip()))
                resp.append(self._parse_cell(resp_cell, path, row_number, entry.resp_column.strip()))

        recording = Recording(
            subject_id=entry.subject_id,
            ppg=np.asarray(ppg, dtype=np.float64),
            resp=np.asarray(resp, dtype=np.float64),
            fs=float(entry.fs),
        )
        logger.info(
            f"Loaded recording {entry.subject_id}: {len(recording)} samples at {entry.fs} Hz from {path.name}"
        )
        return recording

    @staticmethod
    def _parse_cell(cell: str, path: Path, row: int, column: str) -> float:
        try:
            value = float(cell)
        except ValueError:
            raise IngestionError(f"non-numeric value {cell!r} in column {column!r}", path=str(path), row=row)
        if not math.isfinite(value):
            raise IngestionError(f"non-finite value {cell!r} in column {column!r}", path=str(path), row=row)
        return value

    def load_all(self, manifest: DatasetManifest) -> List[Recording]:
        return [self.load_recording(entry) for entry in manifest.entries]

    def load_cohort(self, path: Union[str, Path]) -> SyntheticCohort:
        path = Path(path)
        data = _read_yaml(path)
        try:
            return SyntheticCohort.model_validate(data)
        except ValidationError as e:
            raise IngestionError(f"invalid synthetic cohort: {e}", path=str(path))

    def generate_cohort(self, cohort: SyntheticCohort) -> List[Recording]:
        return [
            generate_synthetic(subject.config, subject.seed, subject_id=subject.subject_id)
            for subject in cohort.subjects
        ]


def pulse(phase: np.ndarray) -> np.ndarray:
    """Raised-cosine pulse train, periodic in ``phase`` with period 2*pi"""
    u = np.mod(phase, 2 * np.pi) / (2 * np.pi)
    d = (u - PULSE_CENTER) / PULSE_WIDTH
    inside = np.abs(d) < 0.5
    return np.where(inside, 0.5 * (1.0 + np.cos(2 * np.pi * d)), 0.0)


def generate_synthetic(config: SyntheticConfig, seed: int, subject_id: str = "synthetic") -> Recording:
    """PPG with amplitude, frequency and baseline modulation driven by a sinusoidal respiration"""
    n = int(round(config.fs * config.duration_s))
    t = np.arange(n, dtype=np.float64) / config.fs
    f_resp = config.rr_bpm / 60.0
    f_heart = config.hr_bpm / 60.0

    resp = np.sin(2 * np.pi * f_resp * t)
    # closed-form integral of dphi/dt = 2*pi*f_heart*(1 + fm_depth*resp)
    resp_integral = (1.0 - np.cos(2 * np.pi * f_resp * t)) / (2 * np.pi * f_resp)
    phase = 2 * np.pi * f_heart * (t + config.fm_depth * resp_integral)

    ppg = (1.0 + config.am_depth * resp) * pulse(phase) + config.baseline_depth * resp
    if config.noise_std > 0:
        rng = np.random.default_rng(seed)
        ppg = ppg + rng.normal(0.0, config.noise_std, size=n)

    return Recording(subject_id=subject_id, ppg=ppg, resp=resp, fs=float(config.fs))


def group_by_subject(recordings: Sequence[Recording]) -> "OrderedDict[str, List[Recording]]":
    groups: "OrderedDict[str, List[Recording]]" = OrderedDict()
    for rec in recordings:
        groups.setdefault(rec.subject_id, []).append(rec)
    return groups


def split_loso(recordings: Sequence[Recording], held_out: str) -> Tuple[List[Recording], List[Recording]]:
    """Partition recordings into (train, test) with every recording of ``held_out`` in test"""
    if not any(rec.subject_id == held_out for rec in recordings):
        raise InputValidationError(f"unknown subject id {held_out!r}")
    train = [rec for rec in recordings if rec.subject_id != held_out]
    test = [rec for rec in recordings if rec.subject_id == held_out]
    return train, test


def loso_folds(recordings: Sequence[Recording]) -> Iterator[Tuple[str, List[Recording], List[Recording]]]:
    for subject_id in group_by_subject(recordings):
        train, test = split_loso(recordings, subject_id)
        yield subject_id, train, test


def subject_ids(recordings: Sequence[Recording]) -> List[str]:
    return list(group_by_subject(recordings).keys())

