"""Aggregate statistics over per-point features and a linear overall score."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import yaml

from ..errors import ConfigError, NoDataError, ValidationError
from .features import DEFAULT_K, FEATURES, compute_features, local_eigenvalues
from .io import as_points

DEFAULT_BINS = 256
STATISTICS = ("mean", "std", "entropy")
# order of the 15 weights when a model is given as a flat list
STAT_NAMES = tuple(f"{f}.{s}" for f in FEATURES for s in STATISTICS)


@dataclass(frozen=True)
class FeatureSummary:
    mean: float
    std: float
    entropy: float


@dataclass
class FeatureStats:
    """Mean, population std-dev and histogram entropy (bits) per feature."""

    features: dict
    bin_count: int = DEFAULT_BINS
    n_points: int = 0
    n_degenerate: int = 0
    overall: Optional[float] = None

    def value(self, name: str) -> float:
        feat, stat = name.split(".")
        return getattr(self.features[feat], stat)

    def vector(self) -> np.ndarray:
        return np.array([self.value(n) for n in STAT_NAMES])

    def as_dict(self) -> dict:
        return {
            "features": {f: vars(s).copy() for f, s in self.features.items()},
            "bin_count": self.bin_count,
            "n_points": self.n_points,
            "n_degenerate": self.n_degenerate,
            "overall": self.overall,
        }


def histogram_entropy(values, bin_count: int = DEFAULT_BINS) -> float:
    """Shannon entropy in bits of a ``bin_count``-bin histogram over [0, 1].

    >>> histogram_entropy([0.2] * 10)
    0.0
    >>> histogram_entropy((np.arange(256) + 0.5) / 256)
    8.0
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise NoDataError("entropy of an empty sample")
    if bin_count < 1:
        raise ValidationError("bin_count must be positive")
    counts, _ = np.histogram(np.clip(v, 0.0, 1.0), bins=bin_count, range=(0.0, 1.0))
    p = counts[counts > 0] / v.size
    h = float(-(p * np.log2(p)).sum())
    return h if h > 0 else 0.0


def aggregate(features: Mapping[str, Sequence[float]], bin_count: int = DEFAULT_BINS, n_degenerate: int = 0) -> FeatureStats:
    """Summarize per-point feature arrays (one entry per name in ``FEATURES``)."""
    missing = [f for f in FEATURES if f not in features]
    if missing:
        raise ValidationError(f"missing features: {', '.join(missing)}")
    arrays = {f: np.asarray(features[f], dtype=np.float64) for f in FEATURES}
    n = len(arrays[FEATURES[0]])
    if n == 0:
        raise NoDataError("no feature vectors to aggregate")
    out = {}
    for f, a in arrays.items():
        if len(a) != n:
            raise ValidationError("feature arrays differ in length")
        out[f] = FeatureSummary(float(a.mean()), float(a.std()), histogram_entropy(a, bin_count))
    return FeatureStats(out, bin_count, n, n_degenerate)


def cloud_metrics(points, k: int = DEFAULT_K, bin_count: int = DEFAULT_BINS) -> FeatureStats:
    """Features for every non-degenerate point of a cloud, aggregated."""
    eigs = local_eigenvalues(as_points(points), k)
    feats = compute_features(eigs)
    keep = ~eigs.degenerate
    if not keep.any():
        raise NoDataError("every neighbourhood is degenerate")
    return aggregate({f: a[keep] for f, a in feats.items()}, bin_count, int(eigs.degenerate.sum()))


@dataclass(frozen=True)
class LinearModel:
    """``score = intercept + sum(weight * statistic)`` over named statistics."""

    weights: dict = field(default_factory=dict)
    intercept: float = 0.0

    def __post_init__(self):
        unknown = sorted(set(self.weights) - set(STAT_NAMES))
        if unknown:
            raise ConfigError(f"unknown statistics in model: {', '.join(unknown)}")
        for name, w in self.weights.items():
            if not math.isfinite(w):
                raise ConfigError(f"weight for {name} is not finite")

    @classmethod
    def from_dict(cls, data: Mapping) -> "LinearModel":
        if not isinstance(data, Mapping):
            raise ConfigError("model must be a mapping with 'weights' and optional 'intercept'")
        extra = set(data) - {"weights", "intercept"}
        if extra:
            raise ConfigError(f"unknown model keys: {', '.join(sorted(extra))}")
        raw = data.get("weights", {})
        if isinstance(raw, Mapping):
            weights = {str(k): float(v) for k, v in raw.items()}
        elif isinstance(raw, (list, tuple)):
            if len(raw) != len(STAT_NAMES):
                raise ConfigError(f"weight list has {len(raw)} entries, expected {len(STAT_NAMES)}")
            weights = {n: float(w) for n, w in zip(STAT_NAMES, raw)}
        else:
            raise ConfigError("weights must be a mapping or a list")
        return cls(weights, float(data.get("intercept", 0.0)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LinearModel":
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = yaml.safe_load(text)
        return cls.from_dict(data)


def overall_score(stats: FeatureStats, model: LinearModel) -> float:
    """Apply a linear model to the aggregated statistics.

    >>> flat = FeatureSummary(0.0, 0.0, 0.0)
    >>> stats = FeatureStats({f: flat for f in FEATURES})
    >>> overall_score(stats, LinearModel({}, 0.5))
    0.5
    """
    return float(model.intercept + sum(w * stats.value(n) for n, w in sorted(model.weights.items())))


def identity_residuals(means: Mapping[str, float]) -> tuple[float, float]:
    """How far feature means are from ``L + P + S = 1`` and ``A + S = 1``.

    Both identities hold point by point, so they hold for means too.  Means
    reported at two decimals for three aerial clouds agree to within
    rounding:

    >>> reported = {
    ...     "Pix4D": dict(anisotropy=0.84, linearity=0.48, planarity=0.35, sphericity=0.16),
    ...     "NeRF": dict(anisotropy=0.86, linearity=0.51, planarity=0.35, sphericity=0.14),
    ...     "SensatUrban": dict(anisotropy=0.96, linearity=0.45, planarity=0.51, sphericity=0.04),
    ... }
    >>> for name, m in reported.items():
    ...     print(name, identity_residuals(m))
    Pix4D (0.01, 0.0)
    NeRF (0.0, 0.0)
    SensatUrban (0.0, 0.0)
    >>> all(max(identity_residuals(m)) <= 0.015 for m in reported.values())
    True
    """
    lps = abs(1.0 - (means["linearity"] + means["planarity"] + means["sphericity"]))
    a_s = abs(1.0 - (means["anisotropy"] + means["sphericity"]))
    return round(lps, 6), round(a_s, 6)


def format_table(columns: Mapping[str, FeatureStats], digits: int = 2) -> str:
    """Feature rows, each a mean line plus std-dev and entropy lines; one column per cloud."""
    names = list(columns)
    width = max(16, *(len(n) + 2 for n in names))
    lines = [f"{'':<12}" + "".join(f"{n:>{width}}" for n in names)]
    for feat in FEATURES:
        cells = [columns[n].features[feat] for n in names]
        lines.append(f"{feat.capitalize():<12}" + "".join(f"{c.mean:>{width}.{digits}f}" for c in cells))
        lines.append(f"{'':<12}" + "".join(f"{'(std dev: ' + format(c.std, f'.{digits}f') + ')':>{width}}" for c in cells))
        lines.append(f"{'':<12}" + "".join(f"{'(entropy: ' + format(c.entropy, f'.{digits}f') + ')':>{width}}" for c in cells))
    overall = ["-" if columns[n].overall is None else f"{columns[n].overall:.3f}" for n in names]
    lines.append(f"{'Overall':<12}" + "".join(f"{o:>{width}}" for o in overall))
    return "\n".join(lines) + "\n"
