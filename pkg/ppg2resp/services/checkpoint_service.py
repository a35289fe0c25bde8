"""Binary checkpoint format.

Layout: magic ``RDF1`` | uint32 LE metadata length | UTF-8 JSON metadata |
raw little-endian float32 arrays in declared parameter order. The metadata
carries the SHA-256 of the raw block so truncation and corruption are
detected before any array is decoded.
"""
import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from ppg2resp.core.errors import CheckpointError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import FORMAT_VERSION, ModelConfig, ScheduleConfig, TrainConfig
from ppg2resp.services.network_service import ModelParams, param_shapes

logger = get_logger(__name__)

MAGIC = b"RDF1"
_HEADER = struct.Struct("<4sI")


class CheckpointInfo(BaseModel):
    format_version: int
    model: ModelConfig
    schedule: ScheduleConfig
    train: TrainConfig
    epoch: Optional[int] = None
    held_out: Optional[str] = None
    arrays: List[Tuple[str, List[int]]]
    sha256: str


class CheckpointService:
    """Saves and restores trained parameters together with their configuration"""

    def save_checkpoint(
        self,
        params: ModelParams,
        config: TrainConfig,
        path: Path,
        epoch: Optional[int] = None,
        held_out: Optional[str] = None,
    ) -> Path:
        path = Path(path)
        raw = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays.values())
        info = CheckpointInfo(
            format_version=FORMAT_VERSION,
            model=params.config,
            schedule=config.schedule,
            train=config,
            epoch=epoch,
            held_out=held_out,
            arrays=[(name, list(a.shape)) for name, a in params.items()],
            sha256=hashlib.sha256(raw).hexdigest(),
        )
        meta = json.dumps(info.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")

        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, len(meta)))
                fh.write(meta)
                fh.write(raw)
            tmp.replace(path)
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e

        logger.debug(f"Saved checkpoint {path} ({len(raw)} parameter bytes)")
        return path

    def read_info(self, path: Path) -> CheckpointInfo:
        info, _ = self._read(Path(path))
        return info

    def load_checkpoint(self, path: Path) -> Tuple[ModelParams, TrainConfig]:
        """Parameters (as float64) and the training configuration they were produced with"""
        path = Path(path)
        info, raw = self._read(path)

        expected = param_shapes(info.model)
        declared = OrderedDict((name, tuple(shape)) for name, shape in info.arrays)
        if declared != expected:
            raise CheckpointError(f"{path}: array layout does not match the stored model configuration")

        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        offset = 0
        for name, shape in expected.items():
            count = int(np.prod(shape))
            block = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            arrays[name] = block.astype(np.float64).reshape(shape)
            offset += 4 * count
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after the parameter block")

        logger.info(f"Loaded checkpoint {path} (epoch {info.epoch}, held out {info.held_out})")
        return ModelParams(info.model, arrays), info.train

    def _read(self, path: Path) -> Tuple[CheckpointInfo, bytes]:
        try:
            data = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

        if len(data) < _HEADER.size or data[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        _, meta_len = _HEADER.unpack_from(data)
        meta_end = _HEADER.size + meta_len
        if meta_end > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint metadata")

        try:
            meta = json.loads(data[_HEADER.size:meta_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable checkpoint metadata ({e})") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format_version {meta.get('format_version')} "
                f"(expected {FORMAT_VERSION})"
            )
        try:
            info = CheckpointInfo.model_validate(meta)
        except ValidationError as e:
            raise CheckpointError(f"{path}: invalid checkpoint metadata ({e.error_count()} errors)") from e

        raw = data[meta_end:]
        n_expected = 4 * sum(int(np.prod(shape)) for _, shape in info.arrays)
        if len(raw) < n_expected:
            raise CheckpointError(f"{path}: truncated parameter block ({len(raw)} of {n_expected} bytes)")
        if hashlib.sha256(raw).hexdigest() != info.sha256:
            raise CheckpointError(f"{path}: parameter block hash mismatch")
        return info, raw
