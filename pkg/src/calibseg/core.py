"""Grid and field types shared by every other module.

Fields are plain ``float64`` arrays of shape ``(H, W, K)`` (row-major, class
axis innermost).  Label maps carry their class count explicitly because a map
need not contain every class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"CSG1"
LABEL_MAGIC = b"CSL1"
_HEADER = struct.Struct("<4sIII")


class CalibsegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CalibsegError, ValueError):
    pass


class InvalidConfigError(CalibsegError, ValueError):
    pass


class FormatError(CalibsegError, ValueError):
    """A ``.fld`` / ``.lab`` file is malformed."""


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer class id per pixel of a 2D grid; class 0 is background."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise InvalidInputError(f"label map must be 2D, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise InvalidInputError("label map must have at least one pixel")
        if self.num_classes < 2:
            raise InvalidInputError(f"need at least 2 classes, got {self.num_classes}")
        if values.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(values, 1), 0)):
                raise InvalidInputError("label values must be integers")
        values = values.astype(np.int64)
        if values.min() < 0 or values.max() >= self.num_classes:
            raise InvalidInputError(
                f"label values must lie in [0, {self.num_classes - 1}]"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.values, other.values
        )

    __hash__ = None


def as_field(values, name: str = "field") -> np.ndarray:
    """Validate and return ``values`` as a finite ``(H, W, K)`` float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"{name} must have shape (H, W, K), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_same_grid(field: np.ndarray, labels: LabelMap) -> None:
    if field.shape[:2] != labels.shape or field.shape[2] != labels.num_classes:
        raise InvalidInputError(
            f"field shape {field.shape} does not match label map "
            f"{labels.shape} with K={labels.num_classes}"
        )


def as_kernel(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise InvalidInputError(f"kernel must be 2D with odd sides, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
        raise InvalidInputError("kernel weights must be finite, >= 0, and not all zero")
    return w


def one_hot(labels: LabelMap) -> np.ndarray:
    """Return the ``(H, W, K)`` indicator field of ``labels``."""
    return np.eye(labels.num_classes, dtype=np.float64)[labels.values]


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, with max-subtraction for overflow safety."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits contain non-finite values")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / class_sum(e)


def class_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the class axis in ascending order of the terms.

    The result does not depend on the order of the classes, so relabelling
    classes permutes softmax outputs bit for bit.
    """
    return np.sort(x, axis=-1).sum(axis=-1, keepdims=True)


def argmax_labels(field: np.ndarray) -> LabelMap:
    """Per-pixel argmax of a field (first index wins on ties)."""
    field = np.asarray(field)
    return LabelMap(np.argmax(field, axis=-1), field.shape[-1])


def is_simplex(field: np.ndarray, atol: float = 1e-12) -> bool:
    field = np.asarray(field)
    return bool(
        np.all(field >= 0) and np.all(np.abs(field.sum(axis=-1) - 1.0) <= atol)
    )


# -- binary file formats ------------------------------------------------------


def encode_field(field) -> bytes:
    arr = np.ascontiguousarray(as_field(field), dtype="<f8")
    h, w, k = arr.shape
    return _HEADER.pack(FIELD_MAGIC, h, w, k) + arr.tobytes()


def decode_field(data: bytes) -> np.ndarray:
    h, w, k = _read_header(data, FIELD_MAGIC)
    n = h * w * k
    body = data[_HEADER.size:]
    if len(body) != 8 * n:
        raise FormatError(f"field body has {len(body)} bytes, expected {8 * n}")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(h, w, k)
    if not np.all(np.isfinite(arr)):
        raise FormatError("field contains non-finite values")
    return arr


def encode_labels(labels: LabelMap) -> bytes:
    if labels.num_classes > 65536:
        raise InvalidInputError("label format holds at most 65536 classes")
    h, w = labels.shape
    body = np.ascontiguousarray(labels.values, dtype="<u2").tobytes()
    return _HEADER.pack(LABEL_MAGIC, h, w, labels.num_classes) + body


def decode_labels(data: bytes) -> LabelMap:
    h, w, k = _read_header(data, LABEL_MAGIC)
    body = data[_HEADER.size:]
    if len(body) != 2 * h * w:
        raise FormatError(f"label body has {len(body)} bytes, expected {2 * h * w}")
    values = np.frombuffer(body, dtype="<u2").astype(np.int64).reshape(h, w)
    try:
        return LabelMap(values, k)
    except InvalidInputError as exc:
        raise FormatError(str(exc)) from exc


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    if len(data) < _HEADER.size:
        raise FormatError("file too short for header")
    got, h, w, k = _HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if h < 1 or w < 1 or k < 1:
        raise FormatError(f"invalid dimensions H={h} W={w} K={k}")
    return h, w, k


def write_field(path, field) -> None:
    Path(path).write_bytes(encode_field(field))


def read_field(path) -> np.ndarray:
    return decode_field(Path(path).read_bytes())


def write_labels(path, labels: LabelMap) -> None:
    Path(path).write_bytes(encode_labels(labels))


def read_labels(path) -> LabelMap:
    return decode_labels(Path(path).read_bytes())
