"""Dense float32 tensors and NPY file I/O."""

from __future__ import annotations

import contextlib
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npy_format

from vptq.errors import FormatError, IoError, NonFiniteData, ShapeError, UnsupportedLayout


@dataclass(frozen=True, eq=False)
class TensorF32:
    """Row-major float32 matrix or vector of rank 1 or 2.

    ``data`` is stored as a read-only ndarray carrying ``shape``.
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) not in (1, 2):
            raise ShapeError(f"rank must be 1 or 2, got shape {shape}")
        if any(s < 1 for s in shape):
            raise ShapeError(f"shape entries must be >= 1, got {shape}")
        data = np.asarray(self.data)
        if data.size != int(np.prod(shape)):
            raise ShapeError(f"data length {data.size} does not match shape {shape}")
        data = np.ascontiguousarray(data, dtype=np.float32).reshape(shape)
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "TensorF32":
        arr = np.asarray(arr)
        return cls(arr.shape, arr)

    def __eq__(self, other):
        if not isinstance(other, TensorF32):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


def _check_finite(arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr.ravel())
    if bad.any():
        raise NonFiniteData(int(np.argmax(bad)))


def load_npy(path) -> TensorF32:
    """Read a float32/float64 NPY file (version 1.0 or 2.0).

    float64 payloads are narrowed to float32 with round-to-nearest-even.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        try:
            if version == (1, 0):
                shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
            elif version == (2, 0):
                shape, fortran, dtype = npy_format.read_array_header_2_0(fh)
            else:
                raise FormatError(f"{path}: unsupported NPY version {version}")
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from exc
        if fortran:
            raise UnsupportedLayout(f"{path}: fortran_order arrays are not supported")
        if dtype not in (np.dtype("<f4"), np.dtype("<f8")):
            raise FormatError(f"{path}: dtype {dtype.str} is not float32/float64")
        if len(shape) not in (1, 2) or any(s < 1 for s in shape):
            raise FormatError(f"{path}: unsupported shape {shape}")
        count = int(np.prod(shape))
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype)
    _check_finite(arr)
    return TensorF32(shape, arr.astype(np.float32))


@contextlib.contextmanager
def atomic_open(path, mode="wb"):
    """Open a temp file beside ``path``; rename it into place only on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp, 0o666 & ~umask)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def save_npy(tensor: TensorF32, path) -> None:
    """Write NPY v1.0, dtype ``<f4``, C order."""
    try:
        with atomic_open(path) as fh:
            npy_format.write_array(fh, tensor.data.astype("<f4"), version=(1, 0))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
