# polarseg/services/checkpoint_service.py
"""
EAFC checkpoints: b"EAFC", u16 version, u32 config length, UTF-8 JSON EafnetConfig,
then one record per tensor [u16 name length, name, u8 dtype, u8 ndim, ndim x u32 dims,
little-endian payload]. Records follow the model's state_dict order.
"""
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from api.models import EafnetConfig
from config import logger
from core.errors import CheckpointError, FormatError
from nn.eafnet import EAFNet
from utils.pder import DTYPE_CODES, DTYPES, U32_MAX

PathLike = Union[str, Path]
MAGIC = b"EAFC"
VERSION = 1


def encode_checkpoint(model: EAFNet) -> bytes:
    config_blob = model.cfg.model_dump_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(config_blob)), config_blob]
    for name, array in model.state_dict().items():
        code = DTYPE_CODES.get(array.dtype.type)
        if code is None:
            raise FormatError(f"Cannot store tensor '{name}' of dtype {array.dtype}")
        if not np.all(np.isfinite(array)):
            raise FormatError(f"Tensor '{name}' has non-finite values", details={"name": name})
        if any(d > U32_MAX for d in array.shape):
            raise FormatError(f"Tensor '{name}' dimension exceeds u32", details={"shape": list(array.shape)})
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes())
    return b"".join(chunks)


def _take(blob: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if offset + size > len(blob):
        raise FormatError(f"Truncated checkpoint while reading {what}", details={"offset": offset})
    return blob[offset:offset + size], offset + size


def decode_checkpoint(blob: bytes) -> Tuple[EafnetConfig, Dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise FormatError("Not an EAFC checkpoint (bad magic)")
    header, offset = _take(blob, 4, 6, "header")
    version, config_len = struct.unpack("<HI", header)
    if version != VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")
    config_blob, offset = _take(blob, offset, config_len, "config")
    try:
        cfg = EafnetConfig.model_validate_json(config_blob.decode("utf-8"))
    except (UnicodeDecodeError, ValidationError) as e:
        raise FormatError(f"Checkpoint config is invalid: {e}") from e

    state: Dict[str, np.ndarray] = {}
    while offset < len(blob):
        raw, offset = _take(blob, offset, 2, "name length")
        name_bytes, offset = _take(blob, offset, struct.unpack("<H", raw)[0], "name")
        name = name_bytes.decode("utf-8")
        raw, offset = _take(blob, offset, 2, f"'{name}' header")
        code, ndim = struct.unpack("<BB", raw)
        if code not in DTYPES:
            raise FormatError(f"Unknown dtype code {code} for '{name}'")
        raw, offset = _take(blob, offset, 4 * ndim, f"'{name}' dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        dtype = DTYPES[code]
        payload, offset = _take(blob, offset, int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, f"'{name}' payload")
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return cfg, state


def checkpoint_save(model: EAFNet, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.info(f"Saved checkpoint {path}")
    return path


def checkpoint_load(path: PathLike, expected: Optional[EafnetConfig] = None) -> EAFNet:
    """Rebuild the model from the stored config; `expected` must match it when given."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Missing checkpoint {path}", details={"path": str(path)})
    cfg, state = decode_checkpoint(path.read_bytes())
    if expected is not None and expected.model_dump() != cfg.model_dump():
        diff = sorted(k for k, v in expected.model_dump().items() if cfg.model_dump().get(k) != v)
        raise CheckpointError("Checkpoint config does not match the requested model", details={"fields": diff})
    model = EAFNet(cfg)
    dtypes = {a.dtype for a in state.values()}
    if len(dtypes) == 1:
        model.to_dtype(dtypes.pop())
    model.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path} (branches={model.branch_names})")
    return model
