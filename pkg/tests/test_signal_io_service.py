from pathlib import Path

import numpy as np
import pytest
import yaml
from pydantic import ValidationError

from ppg2resp.core.errors import IngestionError, InputValidationError
from ppg2resp.models.schemas import ManifestEntry, Recording, SyntheticConfig
from ppg2resp.services import dsp_service
from ppg2resp.services.signal_io_service import (
    SignalIOService, generate_synthetic, group_by_subject, loso_folds, split_loso, subject_ids,
)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_csv(path, header, rows, delimiter=","):
    lines = [delimiter.join(header)] + [delimiter.join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_manifest(path, entries, format_version=1, **extra):
    path.write_text(yaml.safe_dump({"format_version": format_version, "entries": entries, **extra}))
    return path


def recording(subject_id, n=4):
    return Recording(subject_id=subject_id, ppg=np.arange(n, dtype=float), resp=np.zeros(n), fs=1.0)


@pytest.fixture
def io():
    return SignalIOService()


# ---------------------------------------------------------------------------
# load_recording
# ---------------------------------------------------------------------------

def test_two_row_toy_csv_passes_through(tmp_path, io):
    path = write_csv(tmp_path / "toy.csv", ["PLETH", "RESP"], [[0.1, 0.0], [0.2, 1.0]])
    rec = io.load_recording(ManifestEntry(subject_id="toy", path=path, fs=2))
    assert rec.ppg.tolist() == [0.1, 0.2]
    assert rec.resp.tolist() == [0.0, 1.0]
    assert rec.fs == 2.0
    assert len(rec) == 2


def test_extra_columns_and_padded_headers_are_handled(tmp_path, io):
    """BIDMC-style headers carry a leading space and extra channels"""
    path = write_csv(tmp_path / "bidmc.csv", ["Time [s]", " RESP", " PLETH", " V", " AVR", " II"],
                     [[0.000, 0.35, 0.43, 0.52, 0.33, 0.66], [0.008, 0.36, 0.44, 0.53, 0.32, 0.67]])
    rec = io.load_recording(ManifestEntry(subject_id="b", path=path, fs=125))
    assert rec.ppg.tolist() == [0.43, 0.44]
    assert rec.resp.tolist() == [0.35, 0.36]


def test_tab_delimited_file(tmp_path, io):
    path = write_csv(tmp_path / "toy.tsv", ["PLETH", "RESP"], [[1, 2], [3, 4], [5, 6]], delimiter="\t")
    rec = io.load_recording(ManifestEntry(subject_id="t", path=path, fs=1))
    assert rec.ppg.tolist() == [1.0, 3.0, 5.0]


def test_nan_in_respiration_names_row(tmp_path, io):
    rows = [[0.1 * i, 0.0] for i in range(10)]
    rows[6][1] = "nan"
    path = write_csv(tmp_path / "bad.csv", ["PLETH", "RESP"], rows)
    with pytest.raises(IngestionError, match="row 7") as exc:
        io.load_recording(ManifestEntry(subject_id="x", path=path, fs=1))
    assert exc.value.row == 7
    assert str(path) in str(exc.value)


def test_non_numeric_cell_names_row(tmp_path, io):
    path = write_csv(tmp_path / "bad.csv", ["PLETH", "RESP"], [[0.1, 0.2], ["abc", 0.3]])
    with pytest.raises(IngestionError, match="row 2"):
        io.load_recording(ManifestEntry(subject_id="x", path=path, fs=1))


def test_length_mismatch_between_columns(tmp_path, io):
    path = tmp_path / "short.csv"
    path.write_text("PLETH,RESP\n0.1,0.2\n0.3,\n")
    with pytest.raises(IngestionError, match="length mismatch"):
        io.load_recording(ManifestEntry(subject_id="x", path=path, fs=1))


def test_missing_column(tmp_path, io):
    path = write_csv(tmp_path / "nocol.csv", ["PLETH", "ECG"], [[0.1, 0.2]])
    with pytest.raises(IngestionError, match="RESP"):
        io.load_recording(ManifestEntry(subject_id="x", path=path, fs=1))


def test_missing_file(tmp_path, io):
    with pytest.raises(IngestionError, match="not found"):
        io.load_recording(ManifestEntry(subject_id="x", path=tmp_path / "nope.csv", fs=1))


def test_manifest_entry_rejects_non_positive_fs(tmp_path):
    with pytest.raises(ValidationError):
        ManifestEntry(subject_id="x", path=tmp_path / "a.csv", fs=0)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_resolves_relative_paths(tmp_path, io):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    write_csv(data_dir / "a.csv", ["PLETH", "RESP"], [[1, 2]])
    write_csv(data_dir / "b.csv", ["PLETH", "RESP"], [[3, 4]])
    manifest_path = write_manifest(tmp_path / "manifest.yaml", [
        {"subject_id": "A", "path": "data/a.csv", "fs": 125},
        {"subject_id": "B", "path": "data/b.csv", "fs": 125},
    ])
    manifest = io.load_manifest(manifest_path)
    assert [e.subject_id for e in manifest.entries] == ["A", "B"]
    assert manifest.entries[0].path == (data_dir / "a.csv").resolve()
    recordings = io.load_all(manifest)
    assert [r.ppg.tolist() for r in recordings] == [[1.0], [3.0]]


def test_manifest_missing_file_rejected(tmp_path, io):
    path = write_manifest(tmp_path / "m.yaml", [{"subject_id": "A", "path": "missing.csv", "fs": 125}])
    with pytest.raises(IngestionError, match="does not exist"):
        io.load_manifest(path)


def test_manifest_duplicate_subject_rejected(tmp_path, io):
    write_csv(tmp_path / "a.csv", ["PLETH", "RESP"], [[1, 2]])
    path = write_manifest(tmp_path / "m.yaml", [
        {"subject_id": "A", "path": "a.csv", "fs": 125},
        {"subject_id": "A", "path": "a.csv", "fs": 125},
    ])
    with pytest.raises(IngestionError, match="duplicate"):
        io.load_manifest(path)


def test_manifest_unknown_key_and_version_rejected(tmp_path, io):
    write_csv(tmp_path / "a.csv", ["PLETH", "RESP"], [[1, 2]])
    entry = {"subject_id": "A", "path": "a.csv", "fs": 125}
    with pytest.raises(IngestionError):
        io.load_manifest(write_manifest(tmp_path / "m1.yaml", [entry], colour="blue"))
    with pytest.raises(IngestionError, match="format_version"):
        io.load_manifest(write_manifest(tmp_path / "m2.yaml", [entry], format_version=2))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_is_deterministic():
    config = SyntheticConfig(rr_bpm=18, am_depth=0.3, fm_depth=0.3, baseline_depth=0.3, noise_std=0.05)
    a = generate_synthetic(config, seed=7)
    b = generate_synthetic(config, seed=7)
    assert np.array_equal(a.ppg, b.ppg) and np.array_equal(a.resp, b.resp)
    c = generate_synthetic(config, seed=8)
    assert not np.array_equal(a.ppg, c.ppg)


def test_synthetic_without_modulation_is_a_plain_pulse_train():
    config = SyntheticConfig(rr_bpm=15, hr_bpm=60, duration_s=20, fs=125)
    rec = generate_synthetic(config, seed=0)
    t = np.arange(rec.resp.size) / 125
    assert np.allclose(rec.resp, np.sin(2 * np.pi * 0.25 * t), atol=1e-12)
    # one cardiac cycle is exactly 125 samples at 60 bpm
    assert np.max(np.abs(rec.ppg[125:] - rec.ppg[:-125])) < 1e-9


def test_synthetic_respiration_is_periodic():
    config = SyntheticConfig(rr_bpm=15, am_depth=0.5, fm_depth=0.2, baseline_depth=0.1, fs=125)
    rec = generate_synthetic(config, seed=0)
    period = 500  # 4 s at 125 Hz
    assert np.max(np.abs(rec.resp[period:] - rec.resp[:-period])) < 1e-9


def test_synthetic_rr_readout():
    config = SyntheticConfig(rr_bpm=12, fs=30, duration_s=60)
    rec = generate_synthetic(config, seed=0)
    assert rec.resp.size == 1800
    assert dsp_service.estimate_rr(rec.resp, 30) == pytest.approx(12.0)


def test_synthetic_config_ranges():
    with pytest.raises(ValidationError):
        SyntheticConfig(rr_bpm=5)
    with pytest.raises(ValidationError):
        SyntheticConfig(hr_bpm=200)
    with pytest.raises(ValidationError):
        SyntheticConfig(am_depth=1.5)


def test_bundled_cohort_loads(io):
    cohort = io.load_cohort(CONFIGS / "synthetic_mini.yaml")
    assert len(cohort.subjects) == 5
    rates = [s.config.rr_bpm for s in cohort.subjects]
    assert len(set(rates)) == 5 and min(rates) >= 10 and max(rates) <= 25


# ---------------------------------------------------------------------------
# LOSO partitioning
# ---------------------------------------------------------------------------

def test_split_loso_partition():
    recs = [recording("A"), recording("B"), recording("C")]
    train, test = split_loso(recs, "B")
    assert [r.subject_id for r in train] == ["A", "C"]
    assert [r.subject_id for r in test] == ["B"]


def test_split_loso_single_subject():
    train, test = split_loso([recording("A")], "A")
    assert train == [] and len(test) == 1


def test_split_loso_unknown_subject():
    with pytest.raises(InputValidationError, match="Z"):
        split_loso([recording("A")], "Z")


def test_loso_folds_are_exhaustive():
    recs = [recording("A"), recording("B"), recording("B", n=6), recording("C")]
    seen = []
    for held_out, train, test in loso_folds(recs):
        assert all(r.subject_id == held_out for r in test)
        assert all(r.subject_id != held_out for r in train)
        assert len(train) + len(test) == len(recs)
        seen.extend(id(r) for r in test)
    assert sorted(seen) == sorted(id(r) for r in recs)
    assert subject_ids(recs) == ["A", "B", "C"]
    assert [len(v) for v in group_by_subject(recs).values()] == [1, 2, 1]
