"""
Weight archive reader and writer.

Layout (all integers little-endian u32)::

    b"GMXW" | version | count
    per tensor: name length | UTF-8 name | ndim | dims[ndim] | dtype code | raw data

Dtype codes: 0 = f32 LE, 1 = f64 LE. Optimizer state travels in the same
archive under ``optim.m.<path>``, ``optim.v.<path>`` and ``optim.step``;
model loads skip those entries.
"""
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional, Union
import logging
import os
import tempfile

import numpy as np

from .core.errors import FormatError
from .core.tensor import Tensor
from .models.params import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"GMXW"
FORMAT_VERSION = 1
DTYPES = {"f32": (0, "<f4"), "f64": (1, "<f8")}
CODES = {code: numpy_dtype for code, numpy_dtype in DTYPES.values()}
OPTIM_PREFIX = "optim."
MAX_NDIM = 8

PathLike = Union[str, Path]


def _u32(*values: int) -> bytes:
    return np.array(values, dtype="<u4").tobytes()


def encode_archive(tensors: Mapping[str, np.ndarray], dtype: str = "f32") -> bytes:
    """Serialize named arrays into archive bytes."""
    if dtype not in DTYPES:
        raise FormatError(f"unknown archive dtype {dtype!r}; choose from {', '.join(DTYPES)}")
    code, numpy_dtype = DTYPES[dtype]
    chunks = [MAGIC, _u32(FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(_u32(len(encoded)))
        chunks.append(encoded)
        chunks.append(_u32(array.ndim, *array.shape))
        chunks.append(_u32(code))
        chunks.append(np.ascontiguousarray(array, dtype=numpy_dtype).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError(f"{self.source}: truncated while reading {what} at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str, count: int = 1) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<u4")


def decode_archive(payload: bytes, source: str = "archive") -> "OrderedDict[str, np.ndarray]":
    """
    Parse archive bytes into float64 arrays, validating everything.

    Raises:
        FormatError: On bad magic, unsupported version, truncation, unknown
            dtype code, duplicate names or trailing bytes
    """
    reader = _Reader(payload, source)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic, not a GMXW archive")
    version, count = (int(x) for x in reader.u32("header", 2))
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for index in range(count):
        length = int(reader.u32(f"name length of tensor {index}")[0])
        try:
            name = reader.take(length, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: tensor {index} name is not UTF-8") from exc
        ndim = int(reader.u32(f"rank of {name}")[0])
        if ndim > MAX_NDIM:
            raise FormatError(f"{source}: {name} has implausible rank {ndim}")
        shape = tuple(int(d) for d in reader.u32(f"shape of {name}", ndim)) if ndim else ()
        code = int(reader.u32(f"dtype of {name}")[0])
        if code not in CODES:
            raise FormatError(f"{source}: {name} has unknown dtype code {code}")
        numpy_dtype = np.dtype(CODES[code])
        size = int(np.prod(shape)) if shape else 1
        raw = reader.take(size * numpy_dtype.itemsize, f"data of {name}")
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor name {name}")
        tensors[name] = np.frombuffer(raw, dtype=numpy_dtype).astype(np.float64).reshape(shape)
    if reader.offset != len(payload):
        raise FormatError(f"{source}: {len(payload) - reader.offset} trailing bytes after {count} tensors")
    return tensors


def write_archive(path: PathLike, tensors: Mapping[str, np.ndarray], dtype: str = "f32"):
    """Write an archive atomically: temp file in the target directory, then rename."""
    path = Path(path)
    payload = encode_archive(tensors, dtype)
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    logger.info(f"Wrote {len(tensors)} tensors ({len(payload)} bytes, {dtype}) to {path}")


def read_archive(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    return decode_archive(path.read_bytes(), str(path))


def save_weights(store: ParamStore, path: PathLike, dtype: str = "f32", state=None):
    """
    Save every parameter, plus optimizer moments and step when ``state`` is given.

    Args:
        store: Parameters to save
        path: Target file
        dtype: ``f32`` (default, lossy cast) or ``f64``
        state: Optional TrainState
    """
    tensors: Dict[str, np.ndarray] = OrderedDict((name, t.data) for name, t in store.items())
    if state is not None:
        for name in store.names():
            tensors[f"{OPTIM_PREFIX}m.{name}"] = state.m[name]
            tensors[f"{OPTIM_PREFIX}v.{name}"] = state.v[name]
        tensors[f"{OPTIM_PREFIX}step"] = np.array([state.step], dtype=np.float64)
    write_archive(path, tensors, dtype)


def _validate_against(arrays: Mapping[str, np.ndarray], store: ParamStore, source: str):
    for name, array in arrays.items():
        if name not in store:
            raise FormatError(f"{source}: tensor {name} does not exist in the target model")
        if tuple(array.shape) != store[name].shape:
            raise FormatError(
                f"{source}: tensor {name} has shape {tuple(array.shape)}, model expects {store[name].shape}"
            )
    missing = [name for name in store.names() if name not in arrays]
    if missing:
        raise FormatError(f"{source}: tensor {missing[0]} is missing ({len(missing)} missing in total)")


def load_weights(path: PathLike, store: Optional[ParamStore] = None) -> ParamStore:
    """
    Load model parameters.

    With a target ``store`` every name and shape is validated first and the
    store is only written once the whole archive checks out. Without one a
    new store is built from the archive.

    Raises:
        FormatError: On a malformed archive or the first mismatching tensor
    """
    arrays = read_archive(path)
    model_arrays = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith(OPTIM_PREFIX))
    if store is None:
        return ParamStore({name: Tensor.wrap(array.copy()) for name, array in model_arrays.items()})
    _validate_against(model_arrays, store, str(path))
    store.assign(model_arrays)
    logger.info(f"Loaded {len(model_arrays)} tensors from {path}")
    return store


def load_train_state(path: PathLike, state) -> int:
    """
    Restore parameters, moments and step counter into ``state``.

    Returns:
        The restored step

    Raises:
        FormatError: If the archive carries no optimizer state or mismatches
    """
    arrays = read_archive(path)
    model_arrays = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith(OPTIM_PREFIX))
    _validate_against(model_arrays, state.params, str(path))
    if f"{OPTIM_PREFIX}step" not in arrays:
        raise FormatError(f"{path}: archive holds no optimizer state")
    moments = {}
    for name in state.params.names():
        for kind in ("m", "v"):
            key = f"{OPTIM_PREFIX}{kind}.{name}"
            if key not in arrays or arrays[key].shape != state.params[name].shape:
                raise FormatError(f"{path}: optimizer tensor {key} missing or misshaped")
            moments[key] = arrays[key]
    state.params.assign(model_arrays)
    for name in state.params.names():
        state.m[name] = moments[f"{OPTIM_PREFIX}m.{name}"].copy()
        state.v[name] = moments[f"{OPTIM_PREFIX}v.{name}"].copy()
    state.step = int(arrays[f"{OPTIM_PREFIX}step"].reshape(-1)[0])
    logger.info(f"Resumed training state at step {state.step} from {path}")
    return state.step
