"""Synthetic first-round AES S-box leakage for unprotected and masked targets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .traces import HW, SBOX, Scheme, TraceSet

SNR_CAP = 1e12


class InsufficientDataError(ValueError):
    """A class has too few traces for the requested statistic."""


@dataclass(frozen=True)
class SimConfig:
    n_traces: int
    n_samples: int
    leak_positions: tuple[int, ...]
    mask_leak_positions: tuple[int, ...] = ()
    noise_sigma: float = 1.0
    fixed_key: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "leak_positions", tuple(int(i) for i in self.leak_positions))
        object.__setattr__(self, "mask_leak_positions", tuple(int(i) for i in self.mask_leak_positions))
        if self.n_traces < 1 or self.n_samples < 1:
            raise ValueError("n_traces and n_samples must be >= 1")
        if not self.leak_positions:
            raise ValueError("leak_positions must not be empty")
        for name in ("leak_positions", "mask_leak_positions"):
            positions = getattr(self, name)
            if any(not 0 <= i < self.n_samples for i in positions):
                raise ValueError(f"{name} must lie in [0, {self.n_samples})")
            if len(set(positions)) != len(positions):
                raise ValueError(f"{name} contains duplicates")
        if set(self.leak_positions) & set(self.mask_leak_positions):
            raise ValueError("leak_positions and mask_leak_positions must be disjoint")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.fixed_key is not None and not 0 <= self.fixed_key <= 255:
            raise ValueError("fixed_key must be a byte")

    def check_scheme(self, scheme) -> Scheme:
        scheme = Scheme(scheme)
        if scheme is Scheme.EXTERNAL:
            raise ValueError("cannot simulate scheme 'external'")
        if scheme is Scheme.MS1 and not self.mask_leak_positions:
            raise ValueError("ms1 requires non-empty mask_leak_positions")
        if scheme is not Scheme.MS1 and self.mask_leak_positions:
            raise ValueError(f"{scheme.value} requires empty mask_leak_positions")
        return scheme

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leak_positions"] = list(self.leak_positions)
        d["mask_leak_positions"] = list(self.mask_leak_positions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SimConfig:
        return cls.from_dict(json.loads(text))


def simulate(cfg: SimConfig, scheme) -> TraceSet:
    """Draw ``cfg.n_traces`` synthetic traces.

    Every sample starts as N(0, sigma^2) noise. Leak positions add HW(v) for
    the unprotected scheme and HW(v ^ m) for the masked ones; ms1 also adds
    HW(m) at the mask positions. ``v = Sbox[p ^ k]``.
    """
    scheme = cfg.check_scheme(scheme)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_traces
    plaintexts = rng.integers(0, 256, size=n, dtype=np.uint8)
    if cfg.fixed_key is None:
        keys = rng.integers(0, 256, size=n, dtype=np.uint8)
    else:
        keys = np.full(n, cfg.fixed_key, dtype=np.uint8)
    masks = None
    if scheme is not Scheme.UNPROTECTED:
        masks = rng.integers(0, 256, size=n, dtype=np.uint8)
    samples = rng.normal(0.0, 1.0, size=(n, cfg.n_samples)) * cfg.noise_sigma

    v = SBOX[plaintexts ^ keys]
    leaked = v if masks is None else v ^ masks
    samples[:, list(cfg.leak_positions)] += HW[leaked][:, None]
    if scheme is Scheme.MS1:
        samples[:, list(cfg.mask_leak_positions)] += HW[masks][:, None]

    return TraceSet(samples=samples.astype(np.float32), plaintexts=plaintexts, keys=keys,
                    masks=masks, scheme=scheme, seed=cfg.seed)


def estimate_snr(ts: TraceSet, labels) -> np.ndarray:
    """Per-sample variance of class means over mean within-class variance.

    Zero within-class variance is capped at ``SNR_CAP``; a constant sample
    scores 0.
    """
    labels = np.asarray(labels)
    x = ts.samples.astype(np.float64)
    classes, counts = np.unique(labels, return_counts=True)
    for c, cnt in zip(classes, counts):
        if cnt < 2:
            raise InsufficientDataError(f"class {int(c)} has {cnt} trace(s); need at least 2")
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    variances = np.stack([x[labels == c].var(axis=0, ddof=1) for c in classes])
    signal = means.var(axis=0)
    noise = variances.mean(axis=0)
    snr = np.zeros(ts.n_samples)
    ok = noise > 0
    snr[ok] = signal[ok] / noise[ok]
    snr[~ok & (signal > 0)] = SNR_CAP
    return np.minimum(snr, SNR_CAP)
