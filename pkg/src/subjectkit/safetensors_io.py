"""Bit-exact reading and writing of the safetensors container format.

Container layout: ``[u64 little-endian header length][UTF-8 JSON header]
[raw data region]``.  The JSON header maps tensor name -> ``{"dtype",
"shape", "data_offsets": [begin, end]}`` with offsets relative to the
start of the data region, plus an optional ``"__metadata__"`` string map.

Writing is byte-reproducible: header keys are emitted in sorted order,
offsets are assigned in that same order, and the header is padded with
spaces to an 8-byte boundary (matching the reference implementation so
other readers can mmap-align the data region).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DTYPE_SIZES",
    "HeaderError",
    "LengthMismatchError",
    "LoraDelta",
    "LoraDiscovery",
    "MissingAlphaError",
    "NamingConfig",
    "PairMismatchError",
    "StoreError",
    "TensorEntry",
    "TensorLayoutError",
    "TensorMeta",
    "TensorStore",
    "UnknownDtypeError",
    "discover_lora_pairs",
    "read_store",
    "write_store",
]

# dtype name (as it appears in the header JSON) -> bytes per element
DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}


class StoreError(Exception):
    """Base class for container format errors."""


class HeaderError(StoreError):
    """Malformed header length or header JSON."""


class UnknownDtypeError(StoreError):
    def __init__(self, tensor: str, dtype: str):
        super().__init__(f"tensor {tensor!r} has unsupported dtype {dtype!r}")
        self.tensor = tensor
        self.dtype = dtype


class TensorLayoutError(StoreError):
    """Overlapping, gapped, or out-of-bounds data offsets."""

    def __init__(self, tensor: str, message: str):
        super().__init__(f"tensor {tensor!r}: {message}")
        self.tensor = tensor


class LengthMismatchError(StoreError):
    def __init__(self, tensor: str, expected: int, actual: int):
        super().__init__(
            f"tensor {tensor!r}: payload is {actual} bytes, "
            f"shape/dtype require {expected}"
        )
        self.tensor = tensor


class PairMismatchError(StoreError):
    """Matched LoRA factors whose inner dimensions disagree."""

    def __init__(self, down_name: str, up_name: str, message: str):
        super().__init__(f"{up_name!r} / {down_name!r}: {message}")
        self.down_name = down_name
        self.up_name = up_name


class MissingAlphaError(StoreError):
    def __init__(self, base_name: str, alpha_key: str):
        super().__init__(
            f"no alpha tensor {alpha_key!r} for {base_name!r} and the naming "
            "convention does not allow a default"
        )
        self.base_name = base_name


def element_count(shape) -> int:
    n = 1
    for dim in shape:
        n *= int(dim)
    return n


@dataclass(frozen=True)
class TensorMeta:
    """One header record: where a tensor lives in the data region."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset_begin: int
    byte_offset_end: int

    @property
    def nbytes(self) -> int:
        return self.byte_offset_end - self.byte_offset_begin


@dataclass(frozen=True)
class TensorEntry:
    """A materialized tensor: dtype, shape, and raw little-endian payload."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if self.dtype not in DTYPE_SIZES:
            raise UnknownDtypeError("<entry>", self.dtype)
        expected = element_count(self.shape) * DTYPE_SIZES[self.dtype]
        if expected != len(self.data):
            raise LengthMismatchError("<entry>", expected, len(self.data))

    def to_array(self) -> np.ndarray:
        """Decode to a float32 ndarray (f16/bf16 are widened)."""
        if self.dtype == "F32":
            arr = np.frombuffer(self.data, dtype="<f4")
        elif self.dtype == "F16":
            arr = np.frombuffer(self.data, dtype="<f2").astype(np.float32)
        else:  # BF16: pad the mantissa with 16 zero bits
            raw = np.frombuffer(self.data, dtype="<u2").astype(np.uint32)
            arr = (raw << 16).view(np.float32)
        return arr.reshape(self.shape).copy()

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: str = "F32") -> "TensorEntry":
        arr = np.asarray(array)
        if dtype == "F32":
            data = arr.astype("<f4").tobytes()
        elif dtype == "F16":
            data = arr.astype("<f2").tobytes()
        elif dtype == "BF16":
            bits = arr.astype("<f4").view(np.uint32)
            # round to nearest even on the dropped 16 bits
            bias = 0x7FFF + ((bits >> 16) & 1)
            data = ((bits + bias) >> 16).astype("<u2").tobytes()
        else:
            raise UnknownDtypeError("<entry>", dtype)
        return cls(dtype=dtype, shape=tuple(int(d) for d in arr.shape), data=data)


class TensorStore:
    """An immutable named tensor collection plus a string metadata map."""

    def __init__(self, tensors: dict[str, TensorEntry] | None = None,
                 metadata: dict[str, str] | None = None):
        self._tensors = dict(tensors or {})
        self._metadata = dict(metadata or {})
        for key, value in self._metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise HeaderError("metadata keys and values must be strings")

    @property
    def tensors(self) -> dict[str, TensorEntry]:
        return dict(self._tensors)

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self._metadata)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def entry(self, name: str) -> TensorEntry:
        return self._tensors[name]

    def array(self, name: str) -> np.ndarray:
        """Tensor decoded to float32 (the single downstream numeric path)."""
        return self._tensors[name].to_array()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorStore):
            return NotImplemented
        return (self._tensors == other._tensors
                and self._metadata == other._metadata)

    def __repr__(self) -> str:
        return f"TensorStore({len(self._tensors)} tensors, metadata={self._metadata!r})"


def read_store(path) -> TensorStore:
    """Parse a safetensors file, verifying every container invariant.

    Raises HeaderError, UnknownDtypeError, TensorLayoutError, or
    LengthMismatchError; layout errors name the offending tensor.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise HeaderError(f"file is {len(blob)} bytes; need at least an 8-byte header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise HeaderError(
            f"declared header length {header_len} exceeds file size {len(blob)}"
        )
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header JSON must be an object")

    data = blob[8 + header_len:]
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise HeaderError("__metadata__ must be an object")

    metas = []
    for name, desc in header.items():
        if not isinstance(desc, dict):
            raise HeaderError(f"tensor {name!r}: descriptor must be an object")
        try:
            dtype = desc["dtype"]
            shape = tuple(int(d) for d in desc["shape"])
            begin, end = (int(v) for v in desc["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"tensor {name!r}: malformed descriptor: {exc}") from exc
        if dtype not in DTYPE_SIZES:
            raise UnknownDtypeError(name, dtype)
        if any(d < 0 for d in shape):
            raise TensorLayoutError(name, f"negative dimension in shape {shape}")
        if begin < 0 or end < begin or end > len(data):
            raise TensorLayoutError(
                name, f"offsets [{begin}, {end}) outside data region of {len(data)} bytes"
            )
        expected = element_count(shape) * DTYPE_SIZES[dtype]
        if end - begin != expected:
            raise LengthMismatchError(name, expected, end - begin)
        metas.append(TensorMeta(name, dtype, shape, begin, end))

    # the data region must be tiled exactly: no overlaps, no gaps
    cursor = 0
    for meta in sorted(metas, key=lambda m: (m.byte_offset_begin, m.byte_offset_end)):
        if meta.byte_offset_begin != cursor:
            kind = "overlaps previous tensor" if meta.byte_offset_begin < cursor else "leaves a gap"
            raise TensorLayoutError(
                meta.name, f"offset {meta.byte_offset_begin} {kind} (expected {cursor})"
            )
        cursor = meta.byte_offset_end
    if cursor != len(data):
        raise HeaderError(
            f"data region is {len(data)} bytes but tensors cover {cursor}"
        )

    tensors = {
        meta.name: TensorEntry(
            dtype=meta.dtype,
            shape=meta.shape,
            data=bytes(data[meta.byte_offset_begin:meta.byte_offset_end]),
        )
        for meta in metas
    }
    return TensorStore(tensors, metadata)


def write_store(store: TensorStore, path) -> None:
    """Serialize a store byte-reproducibly (sorted names, 8-byte aligned header)."""
    names = store.names()
    header: dict[str, object] = {}
    if store.metadata:
        header["__metadata__"] = store.metadata
    cursor = 0
    payloads = []
    for name in names:
        entry = store.entry(name)
        end = cursor + len(entry.data)
        header[name] = {
            "dtype": entry.dtype,
            "shape": list(entry.shape),
            "data_offsets": [cursor, end],
        }
        payloads.append(entry.data)
        cursor = end
    body = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")
    pad = -(8 + len(body)) % 8
    body += b" " * pad
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        for payload in payloads:
            fh.write(payload)


@dataclass(frozen=True)
class LoraDelta:
    """One low-rank update alpha * U @ V targeting the base weight base_name.

    U has shape (d1, rank) and V (rank, d2).  Construction checks the
    structural invariants only; whether the declared rank actually fits
    min(d1, d2) is verify_rank's job, so over-declared deltas remain
    representable.
    """

    base_name: str
    U: np.ndarray
    V: np.ndarray
    alpha: float
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.U.ndim != 2 or self.V.ndim != 2:
            raise ValueError("U and V must be matrices")
        if self.U.shape[1] != self.rank or self.V.shape[0] != self.rank:
            raise ValueError(
                f"declared rank {self.rank} does not match U columns "
                f"{self.U.shape[1]} / V rows {self.V.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.U.shape[0], self.V.shape[1])


@dataclass(frozen=True)
class NamingConfig:
    """Key convention for locating LoRA factor pairs inside a store.

    The suffix tokens must appear as dotted path components, e.g.
    "attn.lora_A" or "unet.attn1.lora_B.weight".  The alpha tensor, when
    present, is the sibling "<prefix>.<alpha_suffix>".  default_alpha=None
    makes a missing alpha an error instead of a fallback.
    """

    down_suffix: str = "lora_A"   # V factor, shape (r, d2)
    up_suffix: str = "lora_B"     # U factor, shape (d1, r)
    alpha_suffix: str = "alpha"
    default_alpha: float | None = 1.0


@dataclass
class LoraDiscovery:
    """Matched deltas plus every candidate tensor left unmatched."""

    deltas: list[LoraDelta] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)


def _strip_component(name: str, token: str) -> tuple[str, str] | None:
    """If token is a dotted component of name, return (prefix, base_name)."""
    parts = name.split(".")
    for i, part in enumerate(parts):
        if part == token:
            prefix = ".".join(parts[:i])
            base = ".".join(parts[:i] + parts[i + 1:])
            return prefix, base
    return None


def discover_lora_pairs(store: TensorStore,
                        naming: NamingConfig = NamingConfig()) -> LoraDiscovery:
    """Find (up, down) factor pairs in a store under the naming convention.

    Every returned factor aliases a tensor present in the store; candidates
    that mention a factor suffix but have no partner are reported in
    ``unmatched`` rather than silently dropped.
    """
    downs: dict[tuple[str, str], str] = {}
    ups: dict[tuple[str, str], str] = {}
    for name in store.names():
        hit = _strip_component(name, naming.down_suffix)
        if hit is not None:
            downs[hit] = name
            continue
        hit = _strip_component(name, naming.up_suffix)
        if hit is not None:
            ups[hit] = name

    result = LoraDiscovery()
    for key in sorted(set(downs) | set(ups)):
        prefix, base = key
        if key not in downs or key not in ups:
            result.unmatched.append(downs.get(key) or ups[key])
            continue
        down_name, up_name = downs[key], ups[key]
        V = store.array(down_name)
        U = store.array(up_name)
        if U.ndim != 2 or V.ndim != 2:
            raise PairMismatchError(down_name, up_name, "factors must be matrices")
        if U.shape[1] != V.shape[0]:
            raise PairMismatchError(
                down_name, up_name,
                f"inner dimensions disagree: {up_name!r} has {U.shape[1]} columns, "
                f"{down_name!r} has {V.shape[0]} rows",
            )
        alpha_key = f"{prefix}.{naming.alpha_suffix}" if prefix else naming.alpha_suffix
        if alpha_key in store:
            alpha = float(store.array(alpha_key).reshape(-1)[0])
        elif naming.default_alpha is not None:
            alpha = float(naming.default_alpha)
        else:
            raise MissingAlphaError(base, alpha_key)
        result.deltas.append(
            LoraDelta(base_name=base, U=U, V=V, alpha=alpha, rank=int(U.shape[1]))
        )
    return result
