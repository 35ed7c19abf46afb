"""Trace container, AES intermediate labeling and the SCAT on-disk format."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

HW = np.array([bin(x).count("1") for x in range(256)], dtype=np.uint8)

MAGIC = b"SCAT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_TRAILER_LEN = struct.Struct("<I")


class TraceFormatError(ValueError):
    """File is not a SCAT container (bad magic, version or layout)."""


class TraceIntegrityError(ValueError):
    """Container contents violate TraceSet invariants."""


class Scheme(str, enum.Enum):
    UNPROTECTED = "unprotected"
    MS1 = "ms1"
    MS2 = "ms2"
    EXTERNAL = "external"


class LeakageModel(str, enum.Enum):
    IDENTITY = "identity"
    HAMMING_WEIGHT = "hamming_weight"

    def class_count(self) -> int:
        return 256 if self is LeakageModel.IDENTITY else 9

    def label(self, values):
        """Map intermediate byte values to class labels."""
        values = np.asarray(values, dtype=np.uint8)
        if self is LeakageModel.IDENTITY:
            return values.astype(np.intp)
        return HW[values].astype(np.intp)


def compute_intermediate(p, k):
    """AES first-round S-box output ``Sbox[p ^ k]``; works on scalars and arrays."""
    out = SBOX[np.bitwise_xor(np.asarray(p, dtype=np.uint8), np.asarray(k, dtype=np.uint8))]
    return int(out) if out.ndim == 0 else out


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TraceSet:
    """Power traces for one targeted key byte.

    ``samples`` is ``[n_traces, n_samples]`` float32; ``plaintexts``, ``keys``
    and ``masks`` hold the targeted byte of each trace. Instances are
    read-only after construction.
    """

    samples: np.ndarray
    plaintexts: np.ndarray
    keys: np.ndarray
    masks: np.ndarray | None = None
    scheme: Scheme = Scheme.EXTERNAL
    seed: int | None = field(default=None)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise TraceIntegrityError(f"samples must be a non-empty 2-D array, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise TraceIntegrityError("samples contain non-finite values")
        n = samples.shape[0]
        meta = {}
        for name in ("plaintexts", "keys", "masks"):
            value = getattr(self, name)
            if value is None:
                meta[name] = None
                continue
            arr = np.asarray(value)
            if arr.shape != (n,):
                raise TraceIntegrityError(f"{name} has shape {arr.shape}, expected ({n},)")
            if np.any((arr < 0) | (arr > 255)):
                raise TraceIntegrityError(f"{name} contains values outside 0..255")
            meta[name] = arr.astype(np.uint8)
        if meta["plaintexts"] is None or meta["keys"] is None:
            raise TraceIntegrityError("plaintexts and keys are required")
        scheme = Scheme(self.scheme)
        masked = scheme in (Scheme.MS1, Scheme.MS2)
        if masked != (meta["masks"] is not None):
            raise TraceIntegrityError(f"masks must be present iff scheme is ms1/ms2 (scheme={scheme.value})")
        object.__setattr__(self, "samples", _frozen(samples))
        for name, arr in meta.items():
            object.__setattr__(self, name, None if arr is None else _frozen(arr))
        object.__setattr__(self, "scheme", scheme)

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def subset(self, rows) -> TraceSet:
        rows = np.asarray(rows)
        return TraceSet(
            samples=self.samples[rows],
            plaintexts=self.plaintexts[rows],
            keys=self.keys[rows],
            masks=None if self.masks is None else self.masks[rows],
            scheme=self.scheme,
            seed=self.seed,
        )

    def __eq__(self, other):
        if not isinstance(other, TraceSet):
            return NotImplemented
        same_masks = (self.masks is None and other.masks is None) or (
            self.masks is not None and other.masks is not None and np.array_equal(self.masks, other.masks)
        )
        return (
            self.scheme == other.scheme
            and self.seed == other.seed
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.plaintexts, other.plaintexts)
            and np.array_equal(self.keys, other.keys)
            and same_masks
        )

    __hash__ = None


def label_traces(ts: TraceSet, model: LeakageModel) -> np.ndarray:
    """Class label of every trace under ``model`` using its true key."""
    return LeakageModel(model).label(SBOX[ts.plaintexts ^ ts.keys])


def split_traceset(ts: TraceSet, n_profiling: int, seed) -> tuple[TraceSet, TraceSet]:
    """Seeded shuffle, then the first ``n_profiling`` rows vs the rest."""
    if not 1 <= n_profiling < ts.n_traces:
        raise ValueError(f"n_profiling must be in [1, {ts.n_traces - 1}], got {n_profiling}")
    order = np.random.default_rng(seed).permutation(ts.n_traces)
    return ts.subset(np.sort(order[:n_profiling])), ts.subset(np.sort(order[n_profiling:]))


def save_traceset(ts: TraceSet, path) -> None:
    trailer = json.dumps(
        {
            "scheme": ts.scheme.value,
            "plaintexts": ts.plaintexts.tobytes().hex(),
            "keys": ts.keys.tobytes().hex(),
            "masks": None if ts.masks is None else ts.masks.tobytes().hex(),
            "seed": ts.seed,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ts.n_traces, ts.n_samples))
        fh.write(ts.samples.astype("<f4").tobytes(order="C"))
        fh.write(trailer)
        fh.write(_TRAILER_LEN.pack(len(trailer)))


def _hex_bytes(value, name):
    if value is None:
        return None
    try:
        return np.frombuffer(bytes.fromhex(value), dtype=np.uint8)
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(f"trailer field {name!r} is not a hex string") from exc


def load_traceset(path) -> TraceSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _TRAILER_LEN.size:
        raise TraceFormatError("file too short for a SCAT header")
    magic, version, n_traces, n_samples = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported format version {version}")
    (trailer_len,) = _TRAILER_LEN.unpack_from(data, len(data) - _TRAILER_LEN.size)
    payload_end = len(data) - _TRAILER_LEN.size - trailer_len
    if payload_end < _HEADER.size:
        raise TraceFormatError("trailer length exceeds file size")
    payload = data[_HEADER.size:payload_end]
    if len(payload) != 4 * n_traces * n_samples:
        raise TraceIntegrityError(
            f"header declares {n_traces}x{n_samples} samples but payload holds {len(payload)} bytes"
        )
    try:
        trailer = json.loads(data[payload_end:len(data) - _TRAILER_LEN.size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError("trailer is not valid JSON") from exc
    for key in ("scheme", "plaintexts", "keys", "masks", "seed"):
        if key not in trailer:
            raise TraceFormatError(f"trailer missing field {key!r}")
    meta = {name: _hex_bytes(trailer[name], name) for name in ("plaintexts", "keys", "masks")}
    for name, arr in meta.items():
        if arr is not None and arr.shape[0] != n_traces:
            raise TraceIntegrityError(f"{name} holds {arr.shape[0]} entries, header declares {n_traces} traces")
    if meta["plaintexts"] is None or meta["keys"] is None:
        raise TraceIntegrityError("plaintexts and keys are required")
    try:
        scheme = Scheme(trailer["scheme"])
    except ValueError as exc:
        raise TraceFormatError(f"unknown scheme {trailer['scheme']!r}") from exc
    samples = np.frombuffer(payload, dtype="<f4").reshape(n_traces, n_samples)
    return TraceSet(
        samples=samples.astype(np.float32),
        plaintexts=meta["plaintexts"],
        keys=meta["keys"],
        masks=meta["masks"],
        scheme=scheme,
        seed=trailer["seed"],
    )
