"""Report records shared by the stochastic and measure modules."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np


@dataclass(frozen=True)
class ObservableReport:
    """One estimated quantity with its standard error and optional pass rule."""

    name: str
    estimate: float
    se: float
    n: int
    target: float | None = None
    tolerance: float | None = None
    passed: bool | None = None
    config_hash: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.se >= 0:
            raise ValueError(f"standard error must be >= 0, got {self.se}")
        if self.passed is not None and self.target is None:
            raise ValueError("a pass flag needs a declared target")

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


def mean_se(x) -> tuple[float, float]:
    """Sample mean and its standard error (0 for a single sample)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


def batch_means(x, n_batches: int = 10) -> tuple[float, float]:
    """Mean and batch-means standard error of a correlated series."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 * n_batches:
        return mean_se(x)
    usable = x.size - x.size % n_batches
    batches = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(np.mean(x)), float(np.std(batches, ddof=1) / math.sqrt(n_batches))


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def to_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2)


def config_hash(obj) -> str:
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def blob_hash(data: bytes) -> str:
    """Git-style object id of a byte string."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
