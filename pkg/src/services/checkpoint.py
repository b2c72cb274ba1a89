"""Binary checkpoints: versioned header followed by named parameter blobs.

Layout::

    8 bytes   magic  b"NDRCKPT\\0"
    4 bytes   format version (little-endian uint32)
    4 bytes   header length in bytes (little-endian uint32)
    n bytes   JSON header (``CheckpointHeader``)
    ...       raw little-endian arrays at the offsets listed in the header
"""

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError

from src.config.experiment import TrainConfig, config_hash
from src.diffmath.nn import AdamState
from src.models.camera import Intrinsics
from src.models.exceptions import CheckpointError
from src.models.frames import SceneNormalization
from src.services.model import ReconstructionModel

MAGIC = b"NDRCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<II")

logger = logging.getLogger(__name__)


class BlobEntry(BaseModel):
    name: str
    kind: str
    shape: List[int]
    offset: int
    nbytes: int


class CheckpointHeader(BaseModel):
    """Everything needed to rebuild the model before reading the blobs."""

    iteration: int = Field(ge=0)
    dtype: str
    config: dict
    config_hash: str
    dataset_hash: Optional[str] = None
    base_poses: List[List[List[float]]]
    rgb_intrinsics: dict
    depth_intrinsics: Optional[dict] = None
    normalization: dict
    encoding_alpha: List[float] = Field(default_factory=list)
    adam_steps: Dict[str, int] = Field(default_factory=dict)
    # numpy bit-generator state as JSON text, integers kept exact
    batch_rng_state: Optional[str] = None
    blobs: List[BlobEntry] = Field(default_factory=list)

    def rng_state(self) -> Optional[Dict[str, Any]]:
        """Batch generator state to continue the sampling sequence, if it was saved."""
        return json.loads(self.batch_rng_state) if self.batch_rng_state else None


def _blob_list(model: ReconstructionModel) -> List[Tuple[str, str, np.ndarray]]:
    entries = []
    for name, param in model.store.items():
        entries.append((name, "param", param.data))
        state = model.store.state.get(name)
        if state is not None:
            entries.append((name, "m", state.m))
            entries.append((name, "v", state.v))
    return entries


def save_checkpoint(
    path: Path,
    model: ReconstructionModel,
    iteration: int,
    dataset_hash: Optional[str] = None,
    rng_state: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write parameters, optimizer state and camera metadata.

    Args:
        path: Output file
        model: Model to serialize
        iteration: Number of completed optimizer steps
        dataset_hash: Hash of the training data, when known
        rng_state: Bit-generator state of the batch sampler

    Returns:
        The written path

    Raises:
        CheckpointError: If the file cannot be written
    """
    path = Path(path)
    dtype = np.dtype(model.store.dtype).newbyteorder("<")
    blobs: List[BlobEntry] = []
    payload: List[bytes] = []
    offset = 0
    for name, kind, array in _blob_list(model):
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        blobs.append(
            BlobEntry(name=name, kind=kind, shape=list(array.shape), offset=offset, nbytes=len(data))
        )
        payload.append(data)
        offset += len(data)

    rig = model.rig
    header = CheckpointHeader(
        iteration=iteration,
        dtype=dtype.str,
        config=model.config.model_dump(mode="json"),
        config_hash=config_hash(model.config),
        dataset_hash=dataset_hash,
        base_poses=rig.base_poses.tolist(),
        rgb_intrinsics=asdict(rig.rgb_intrinsics),
        depth_intrinsics=asdict(rig.depth_intrinsics) if rig.depth_intrinsics else None,
        normalization=model.normalization.to_dict(),
        encoding_alpha=[float(s.alpha or 0.0) for s in model.field.schedules],
        adam_steps={name: state.step for name, state in model.store.state.items()},
        batch_rng_state=json.dumps(rng_state) if rng_state is not None else None,
        blobs=blobs,
    )
    header_bytes = header.model_dump_json().encode("utf-8")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(_PREAMBLE.pack(FORMAT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for data in payload:
                f.write(data)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e

    logger.info(f"Saved checkpoint {path} (iteration {iteration}, {len(blobs)} blobs)")
    return path


def read_header(path: Path) -> Tuple[CheckpointHeader, bytes]:
    """Parse the header and return it with the raw blob section."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    start = len(MAGIC)
    if len(raw) < start + _PREAMBLE.size:
        raise CheckpointError(f"{path} is truncated")
    version, header_len = _PREAMBLE.unpack_from(raw, start)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start += _PREAMBLE.size
    try:
        header = CheckpointHeader.model_validate_json(raw[start : start + header_len])
    except PydanticValidationError as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e
    return header, raw[start + header_len :]


def load_checkpoint(path: Path) -> Tuple[ReconstructionModel, CheckpointHeader]:
    """
    Rebuild a model from a checkpoint.

    Returns:
        (model with parameters and optimizer state restored, header)

    Raises:
        CheckpointError: On bad magic, version, truncated data or shape mismatch
    """
    header, body = read_header(path)
    config = TrainConfig.model_validate(header.config)
    if config_hash(config) != header.config_hash:
        raise CheckpointError(f"Config hash mismatch in {path}")

    depth_intrinsics = Intrinsics(**header.depth_intrinsics) if header.depth_intrinsics else None
    model = ReconstructionModel(
        config,
        np.asarray(header.base_poses, dtype=np.float64),
        Intrinsics(**header.rgb_intrinsics),
        depth_intrinsics,
        SceneNormalization.from_dict(header.normalization),
    )
    dtype = np.dtype(header.dtype)

    params: Dict[str, np.ndarray] = {}
    moments: Dict[str, Dict[str, np.ndarray]] = {}
    for blob in header.blobs:
        if blob.offset + blob.nbytes > len(body):
            raise CheckpointError(f"Checkpoint {path} is truncated at '{blob.name}'")
        array = np.frombuffer(body, dtype=dtype, count=blob.nbytes // dtype.itemsize, offset=blob.offset)
        array = array.reshape(blob.shape).astype(model.store.dtype)
        if blob.kind == "param":
            params[blob.name] = array
        else:
            moments.setdefault(blob.name, {})[blob.kind] = array

    missing = sorted(set(model.store.names()) - set(params))
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks parameters: {', '.join(missing[:5])}")
    try:
        model.store.load_arrays(params)
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} does not match the model: {e}") from e

    for schedule, alpha in zip(model.field.schedules, header.encoding_alpha):
        schedule.alpha = alpha

    for name, pair in moments.items():
        model.store.state[name] = AdamState(m=pair["m"], v=pair["v"], step=header.adam_steps.get(name, 0))

    logger.info(f"Loaded checkpoint {path} (iteration {header.iteration})")
    return model, header
