"""On-disk store of preprocessed segment pairs.

``segments.bin`` holds raw little-endian float64 samples: every PPG segment
in index order, then every respiration segment. ``index.json`` describes the
segments (subject, position, normalisation scales). Both files are written
with sorted keys and no timestamps, so identical inputs produce identical bytes.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from ppg2resp.core.errors import StoreError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import FORMAT_VERSION, NormScale, PreprocessConfig, SegmentPair

logger = get_logger(__name__)

DATA_FILE = "segments.bin"
INDEX_FILE = "index.json"


class StoreEntry(BaseModel):
    subject_id: str
    segment_index: int
    ppg_scale: NormScale
    resp_scale: NormScale


class StoreIndex(BaseModel):
    format_version: int
    segment_length: int
    preprocess: PreprocessConfig
    entries: List[StoreEntry]


class StoreService:
    """Writes and reads the segment store produced by ingestion"""

    def save(self, segments: List[SegmentPair], store_dir: Path, preprocess: PreprocessConfig) -> Path:
        store_dir = Path(store_dir)
        length = preprocess.segment_length
        for s in segments:
            if s.ppg.size != length:
                raise StoreError(
                    f"segment {s.subject_id}/{s.segment_index} has {s.ppg.size} samples, expected {length}"
                )

        index = StoreIndex(
            format_version=FORMAT_VERSION,
            segment_length=length,
            preprocess=preprocess,
            entries=[
                StoreEntry(subject_id=s.subject_id, segment_index=s.segment_index,
                           ppg_scale=s.ppg_scale, resp_scale=s.resp_scale)
                for s in segments
            ],
        )
        empty = np.zeros((0, length))
        ppg = np.stack([s.ppg for s in segments]) if segments else empty
        resp = np.stack([s.resp for s in segments]) if segments else empty

        try:
            store_dir.mkdir(parents=True, exist_ok=True)
            (store_dir / DATA_FILE).write_bytes(
                np.ascontiguousarray(ppg, dtype="<f8").tobytes()
                + np.ascontiguousarray(resp, dtype="<f8").tobytes()
            )
            (store_dir / INDEX_FILE).write_text(
                json.dumps(index.model_dump(mode="json"), sort_keys=True, indent=1) + "\n", encoding="utf-8"
            )
        except OSError as e:
            raise StoreError(f"cannot write segment store {store_dir}: {e}") from e

        logger.info(f"Wrote {len(segments)} segments to {store_dir}")
        return store_dir

    def load(self, store_dir: Path, subjects: Optional[List[str]] = None) -> List[SegmentPair]:
        """All segments (or those of ``subjects``) in stored order"""
        store_dir = Path(store_dir)
        index = self.read_index(store_dir)
        n, length = len(index.entries), index.segment_length
        try:
            raw = (store_dir / DATA_FILE).read_bytes()
        except OSError as e:
            raise StoreError(f"cannot read segment store {store_dir}: {e}") from e
        if len(raw) != 2 * n * length * 8:
            raise StoreError(f"{store_dir / DATA_FILE}: expected {2 * n * length * 8} bytes, found {len(raw)}")

        data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(2, n, length)
        wanted = set(subjects) if subjects is not None else None
        segments = [
            SegmentPair(
                ppg=data[0, i].copy(), resp=data[1, i].copy(),
                subject_id=e.subject_id, segment_index=e.segment_index,
                ppg_scale=e.ppg_scale, resp_scale=e.resp_scale,
            )
            for i, e in enumerate(index.entries)
            if wanted is None or e.subject_id in wanted
        ]
        logger.debug(f"Loaded {len(segments)} segments from {store_dir}")
        return segments

    def read_index(self, store_dir: Path) -> StoreIndex:
        path = Path(store_dir) / INDEX_FILE
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise StoreError(f"no segment store at {store_dir}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise StoreError(f"unreadable store index {path}: {e}") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise StoreError(f"{path}: unsupported format_version {meta.get('format_version')}")
        try:
            return StoreIndex.model_validate(meta)
        except ValidationError as e:
            raise StoreError(f"{path}: invalid store index ({e.error_count()} errors)") from e

    def subjects(self, store_dir: Path) -> List[str]:
        seen: Dict[str, None] = {}
        for e in self.read_index(store_dir).entries:
            seen.setdefault(e.subject_id, None)
        return list(seen)
