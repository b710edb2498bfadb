"""Named-tensor checkpoints: file format, validation, and linear merging.

A checkpoint is an ordered map from tensor name to a typed n-dimensional
array. Two same-schema checkpoints can be linearly interpolated
(``alpha * a + (1 - alpha) * b``), which is how a long-reasoning and a
short-reasoning model are fused into a single hybrid model.

File format (single file, little-endian):

    [8-byte unsigned header length N][N bytes JSON header][raw payload]

The JSON header maps each tensor name to ``{"dtype": ..., "shape": [...],
"data_offsets": [start, end]}`` with offsets relative to the payload
start; the optional ``"__metadata__"`` key holds a string-to-string map.
This is the widely used single-file safetensors layout.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import ml_dtypes
import numpy as np

__all__ = [
    "CheckpointError",
    "TensorRecord",
    "NamedTensorCollection",
    "CompatReport",
    "MergeSpec",
    "load_checkpoint",
    "save_checkpoint",
    "loads_checkpoint",
    "dumps_checkpoint",
    "validate_compat",
    "merge_linear",
]


class CheckpointError(ValueError):
    """Malformed checkpoint file or invalid checkpoint operation."""


# dtype name <-> header tag <-> numpy dtype. Only real-valued float dtypes
# are supported: interpolation is defined on real parameters.
_DTYPES = {
    "float64": ("F64", np.dtype(np.float64)),
    "float32": ("F32", np.dtype(np.float32)),
    "float16": ("F16", np.dtype(np.float16)),
    "bfloat16": ("BF16", np.dtype(ml_dtypes.bfloat16)),
}
_TAG_TO_NAME = {tag: name for name, (tag, _) in _DTYPES.items()}
_NP_TO_NAME = {np_dtype: name for name, (_, np_dtype) in _DTYPES.items()}


def dtype_of(array: np.ndarray) -> str:
    """Canonical dtype name for an array, rejecting unsupported dtypes."""
    name = _NP_TO_NAME.get(array.dtype)
    if name is None:
        raise CheckpointError(
            f"unsupported dtype {array.dtype!r}; expected one of {sorted(_DTYPES)}"
        )
    return name


def numpy_dtype(name: str) -> np.dtype:
    if name not in _DTYPES:
        raise CheckpointError(
            f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}"
        )
    return _DTYPES[name][1]


@dataclass
class TensorRecord:
    """One named tensor: dtype name, shape, and row-major element data."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        if any(s < 0 for s in self.shape):
            raise CheckpointError(f"tensor {self.name!r}: negative extent in {self.shape}")
        want = numpy_dtype(self.dtype)
        if self.data.dtype != want:
            raise CheckpointError(
                f"tensor {self.name!r}: data dtype {self.data.dtype} != declared {self.dtype}"
            )
        if self.data.size != math.prod(self.shape):
            raise CheckpointError(
                f"tensor {self.name!r}: {self.data.size} elements but shape {self.shape}"
            )
        self.data = np.ascontiguousarray(self.data).reshape(self.shape)

    @classmethod
    def from_array(cls, name: str, array: np.ndarray) -> "TensorRecord":
        array = np.asarray(array)
        return cls(name=name, dtype=dtype_of(array), shape=array.shape, data=array)

    def payload_bytes(self) -> bytes:
        return self.data.tobytes(order="C")


class NamedTensorCollection:
    """Ordered map name -> TensorRecord; iteration is lexicographic by name."""

    def __init__(self, records=(), metadata: dict[str, str] | None = None):
        self._records: dict[str, TensorRecord] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for record in records:
            self.add(record)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], metadata=None) -> "NamedTensorCollection":
        return cls(
            (TensorRecord.from_array(name, arr) for name, arr in arrays.items()),
            metadata=metadata,
        )

    def add(self, record: TensorRecord) -> None:
        if record.name in self._records:
            raise CheckpointError(f"duplicate tensor name {record.name!r}")
        self._records[record.name] = record

    def names(self) -> list[str]:
        return sorted(self._records)

    def __getitem__(self, name: str) -> TensorRecord:
        return self._records[name]

    def __contains__(self, name: str) -> bool:
        return name in self._records

    def __iter__(self):
        for name in self.names():
            yield self._records[name]

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NamedTensorCollection):
            return NotImplemented
        if self.names() != other.names() or self.metadata != other.metadata:
            return False
        for name in self.names():
            a, b = self[name], other[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.payload_bytes() != b.payload_bytes():
                return False
        return True


# ---------------------------------------------------------------------------
# serialization


def dumps_checkpoint(collection: NamedTensorCollection) -> bytes:
    """Serialize a collection to bytes. Deterministic: equal collections
    produce identical bytes (names sorted, canonical JSON header)."""
    header: dict[str, object] = {}
    chunks: list[bytes] = []
    offset = 0
    for record in collection:  # lexicographic
        payload = record.payload_bytes()
        header[record.name] = {
            "dtype": _DTYPES[record.dtype][0],
            "shape": list(record.shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        chunks.append(payload)
        offset += len(payload)
    if collection.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in collection.metadata.items()}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(chunks)


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointError(f"duplicate tensor name {key!r} in header")
        out[key] = value
    return out


def loads_checkpoint(blob: bytes) -> NamedTensorCollection:
    """Parse checkpoint bytes; inverse of :func:`dumps_checkpoint`."""
    if len(blob) < 8:
        raise CheckpointError("malformed header: file shorter than 8-byte length prefix")
    header_len = int.from_bytes(blob[:8], "little")
    if header_len == 0 or 8 + header_len > len(blob):
        raise CheckpointError("malformed header: declared header length exceeds file")
    try:
        header = json.loads(
            blob[8 : 8 + header_len].decode("utf-8"),
            object_pairs_hook=_reject_duplicate_keys,
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: expected a JSON object")

    payload = blob[8 + header_len :]
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise CheckpointError("malformed header: __metadata__ must be an object")

    collection = NamedTensorCollection(metadata={str(k): str(v) for k, v in metadata.items()})
    for name, info in header.items():
        try:
            tag = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            start, end = (int(x) for x in info["data_offsets"])
        except (TypeError, KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed header entry for {name!r}: {exc}") from exc
        if tag not in _TAG_TO_NAME:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype tag {tag!r}")
        dtype_name = _TAG_TO_NAME[tag]
        np_dtype = numpy_dtype(dtype_name)
        expected = math.prod(shape) * np_dtype.itemsize
        if start < 0 or end < start or end - start != expected:
            raise CheckpointError(
                f"tensor {name!r}: data_offsets [{start}, {end}] inconsistent with "
                f"shape {shape} and dtype {dtype_name}"
            )
        if end > len(payload):
            raise CheckpointError(
                f"truncated payload: tensor {name!r} needs bytes up to {end}, "
                f"payload has {len(payload)}"
            )
        data = np.frombuffer(payload[start:end], dtype=np_dtype).reshape(shape)
        collection.add(TensorRecord(name=name, dtype=dtype_name, shape=shape, data=data.copy()))
    return collection


def save_checkpoint(collection: NamedTensorCollection, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(collection))


def load_checkpoint(path) -> NamedTensorCollection:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# compatibility and merging


@dataclass
class CompatReport:
    """Schema differences between two collections; empty iff mergeable."""

    only_in_a: list[str] = field(default_factory=list)
    only_in_b: list[str] = field(default_factory=list)
    shape_mismatches: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=dict)
    dtype_mismatches: dict[str, tuple[str, str]] = field(default_factory=dict)

    @property
    def compatible(self) -> bool:
        return not (
            self.only_in_a or self.only_in_b or self.shape_mismatches or self.dtype_mismatches
        )

    def __bool__(self) -> bool:  # truthy iff there ARE differences
        return not self.compatible

    def summary(self) -> str:
        if self.compatible:
            return "compatible"
        parts = []
        if self.only_in_a:
            parts.append(f"only in first: {self.only_in_a}")
        if self.only_in_b:
            parts.append(f"only in second: {self.only_in_b}")
        for name, (sa, sb) in self.shape_mismatches.items():
            parts.append(f"shape mismatch on {name!r}: {sa} vs {sb}")
        for name, (da, db) in self.dtype_mismatches.items():
            parts.append(f"dtype mismatch on {name!r}: {da} vs {db}")
        return "; ".join(parts)


def validate_compat(a: NamedTensorCollection, b: NamedTensorCollection) -> CompatReport:
    """Report name-set, shape, and dtype differences between two collections."""
    report = CompatReport()
    names_a, names_b = set(a.names()), set(b.names())
    report.only_in_a = sorted(names_a - names_b)
    report.only_in_b = sorted(names_b - names_a)
    for name in sorted(names_a & names_b):
        ra, rb = a[name], b[name]
        if ra.shape != rb.shape:
            report.shape_mismatches[name] = (ra.shape, rb.shape)
        if ra.dtype != rb.dtype:
            report.dtype_mismatches[name] = (ra.dtype, rb.dtype)
    return report


@dataclass(frozen=True)
class MergeSpec:
    """Linear interpolation weight plus fixed numeric policy.

    Accumulation is always float64 with a single rounding to the output
    dtype, so results do not depend on input dtype or evaluation order.
    """

    alpha: float
    accumulate_dtype: str = "float64"
    output_dtype_policy: str = "same-as-input"

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise CheckpointError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.accumulate_dtype != "float64":
            raise CheckpointError("accumulate_dtype is fixed to float64")
        if self.output_dtype_policy != "same-as-input":
            raise CheckpointError("output_dtype_policy is fixed to 'same-as-input'")


def _merge_one(alpha: float, a: TensorRecord, b: TensorRecord) -> TensorRecord:
    # Exact passthrough at the boundaries keeps identities bit-exact
    # (0.0 * x can flip the sign of a signed zero otherwise).
    if alpha == 1.0:
        data = a.data.copy()
    elif alpha == 0.0:
        data = b.data.copy()
    else:
        acc = alpha * a.data.astype(np.float64) + (1.0 - alpha) * b.data.astype(np.float64)
        data = acc.astype(a.data.dtype)
    return TensorRecord(name=a.name, dtype=a.dtype, shape=a.shape, data=data)


def merge_linear(
    long: NamedTensorCollection,
    short: NamedTensorCollection,
    spec: MergeSpec,
    *,
    union: bool = False,
    workers: int = 1,
) -> NamedTensorCollection:
    """Elementwise ``alpha * long + (1 - alpha) * short`` over all tensors.

    Name sets must match, unless ``union=True``, in which case tensors
    present on one side only pass through unchanged. Output is keyed by
    name and rounded per element, so it is identical for any ``workers``.
    """
    report = validate_compat(long, short)
    if report.shape_mismatches or report.dtype_mismatches:
        raise CheckpointError(f"incompatible collections: {report.summary()}")
    if not union and (report.only_in_a or report.only_in_b):
        raise CheckpointError(f"incompatible collections: {report.summary()}")

    shared = sorted(set(long.names()) & set(short.names()))

    def task(name: str) -> TensorRecord:
        return _merge_one(spec.alpha, long[name], short[name])

    if workers <= 1 or len(shared) <= 1:
        merged = {name: task(name) for name in shared}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            merged = dict(zip(shared, pool.map(task, shared)))

    out = NamedTensorCollection(metadata={"merge_alpha": repr(spec.alpha)})
    for name in shared:
        out.add(merged[name])
    if union:
        for name in report.only_in_a:
            record = long[name]
            out.add(TensorRecord(record.name, record.dtype, record.shape, record.data.copy()))
        for name in report.only_in_b:
            record = short[name]
            out.add(TensorRecord(record.name, record.dtype, record.shape, record.data.copy()))
    return out
