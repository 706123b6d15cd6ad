"""Kernel MMD between feature sets and per-patient fine-tuning weights."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import FeatureSet, StageMismatchError, features_fingerprint

WEIGHT_EPS = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "RBF"  # "RBF" or "Multiscale"
    bandwidth_mode: str = "median_heuristic"  # or "explicit"
    multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    scales: tuple = (0.2, 0.5, 0.9, 1.3)

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(float(v) for v in self.multipliers))
        object.__setattr__(self, "scales", tuple(float(v) for v in self.scales))
        if self.kind not in ("RBF", "Multiscale"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth_mode not in ("median_heuristic", "explicit"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        values = self.multipliers if self.kind == "RBF" else self.scales
        if not values or min(values) <= 0:
            raise ValueError("kernel multipliers/scales must be positive and non-empty")

    @classmethod
    def rbf(cls, **kw) -> "KernelSpec":
        return cls(kind="RBF", **kw)

    @classmethod
    def multiscale(cls, **kw) -> "KernelSpec":
        return cls(kind="Multiscale", **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


def rbf_kernel_sum(sqdist, bandwidths) -> np.ndarray:
    """sum_b exp(-d^2 / b)."""
    sqdist = np.asarray(sqdist, dtype=np.float64)
    out = np.zeros_like(sqdist)
    for b in bandwidths:
        if b <= 0:
            raise ValueError("bandwidths must be positive")
        out += np.exp(-sqdist / b)
    return out


def multiscale_kernel_sum(sqdist, scales) -> np.ndarray:
    """sum_a a^2 / (a^2 + d^2)."""
    sqdist = np.asarray(sqdist, dtype=np.float64)
    out = np.zeros_like(sqdist)
    for a in scales:
        if a <= 0:
            raise ValueError("scales must be positive")
        a2 = a * a
        out += a2 / (a2 + sqdist)
    return out


def pairwise_sqdist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    xx = np.einsum("ij,ij->i", X, X)
    yy = np.einsum("ij,ij->i", Y, Y)
    d = xx[:, None] + yy[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(d, 0.0)


def median_sqdist(Z: np.ndarray) -> float:
    """Median squared distance over distinct pairs of rows of ``Z``."""
    d = pairwise_sqdist(Z, Z)
    iu = np.triu_indices(len(Z), k=1)
    return float(np.median(d[iu]))


def kernel_parameters(spec: KernelSpec, median: float) -> tuple:
    """Bandwidths (RBF, in squared-distance units) or scales (Multiscale, in distance units)."""
    if spec.bandwidth_mode == "explicit":
        return spec.multipliers if spec.kind == "RBF" else spec.scales
    median = median if median > 0 else 1.0
    if spec.kind == "RBF":
        return tuple(m * median for m in spec.multipliers)
    return tuple(s * np.sqrt(median) for s in spec.scales)


def _kernel(spec: KernelSpec, params: tuple):
    if spec.kind == "RBF":
        return lambda d: rbf_kernel_sum(d, params)
    return lambda d: multiscale_kernel_sum(d, params)


def mmd2_biased(X, Y, kernel: KernelSpec, clamp: bool = True) -> float:
    """V-statistic estimate of squared MMD between the row sets ``X`` and ``Y``.

    With the median heuristic the kernel scale is the median pairwise
    squared distance of the pooled rows.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dimensions differ: {X.shape} vs {Y.shape}")
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("need at least two rows in each sample")
    m = len(X)
    # one pooled distance matrix serves both the median and the three kernel blocks
    Z = np.vstack([X, Y])
    d = pairwise_sqdist(Z, Z)
    median = 0.0
    if kernel.bandwidth_mode == "median_heuristic":
        median = float(np.median(d[np.triu_indices(len(d), k=1)]))
    k = _kernel(kernel, kernel_parameters(kernel, median))
    value = k(d[:m, :m]).mean() + k(d[m:, m:]).mean() - 2.0 * k(d[:m, m:]).mean()
    return max(float(value), 0.0) if clamp else float(value)


@dataclass
class WeightEntry:
    patient_id: str
    mmd2: float
    weight: float


@dataclass
class WeightTable:
    entries: list
    kernel: KernelSpec = field(default_factory=KernelSpec)
    subsample_size: int = 0
    seed: int = 0
    features_fingerprint: str = ""
    model_fingerprint: str = ""
    test_patient_id: str = ""

    @property
    def patient_ids(self) -> list:
        return [e.patient_id for e in self.entries]

    def as_dict(self) -> dict:
        return {e.patient_id: e.weight for e in self.entries}

    def weight_of(self, patient_id: str) -> float:
        for e in self.entries:
            if e.patient_id == patient_id:
                return e.weight
        raise KeyError(patient_id)

    def to_json(self) -> str:
        d = {
            "kernel": self.kernel.to_dict(),
            "seed": self.seed,
            "subsample_size": self.subsample_size,
            "features_fingerprint": self.features_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "test_patient_id": self.test_patient_id,
            "patients": [{"id": e.patient_id, "mmd2": e.mmd2, "weight": e.weight} for e in self.entries],
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "WeightTable":
        d = json.loads(text)
        entries = [WeightEntry(p["id"], float(p["mmd2"]), float(p["weight"])) for p in d["patients"]]
        return cls(entries, KernelSpec.from_dict(d["kernel"]), d["subsample_size"], d["seed"],
                   d.get("features_fingerprint", ""), d.get("model_fingerprint", ""),
                   d.get("test_patient_id", ""))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def patient_weights(discrepancies: Sequence[tuple]) -> WeightTable:
    """Normalized inverse discrepancies: w_i = N * r_i / sum(r), r_i = 1 / (mmd2_i + eps).

    More similar training patients (smaller MMD) get larger weights; the
    weights average to one.
    """
    discrepancies = list(discrepancies)
    if not discrepancies:
        raise ValueError("no training patients to weight")
    mmd2 = np.array([float(d) for _, d in discrepancies])
    if np.any(mmd2 < 0):
        raise ValueError("discrepancies must be non-negative")
    raw = 1.0 / (mmd2 + WEIGHT_EPS)
    weights = len(raw) * raw / raw.sum()
    return WeightTable([WeightEntry(pid, float(m), float(w))
                        for (pid, _), m, w in zip(discrepancies, mmd2, weights)])


def _patient_rng(seed: int, patient_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{patient_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def subsample_rows(matrix: np.ndarray, size: int, seed: int, patient_id: str) -> np.ndarray:
    """Up to ``size`` rows without replacement; the draw depends only on (seed, patient)."""
    if len(matrix) <= size:
        return matrix
    idx = _patient_rng(seed, patient_id).choice(len(matrix), size=size, replace=False)
    return matrix[np.sort(idx)]


def compute_weight_table(train_features: Sequence[FeatureSet], test_features: FeatureSet,
                         kernel: KernelSpec, subsample: int = 1024, seed: int = 0) -> WeightTable:
    """MMD of every training patient's features against the (unlabelled) test patient's features."""
    if subsample < 2:
        raise ValueError("subsample must be at least 2")
    train_features = list(train_features)
    dims = {fs.feature_dim for fs in train_features} | {test_features.feature_dim}
    if len(dims) != 1:
        raise ValueError(f"feature dimensions differ across patients: {sorted(dims)}")
    models = {fs.model_fingerprint for fs in train_features} | {test_features.model_fingerprint}
    if len(models) != 1:
        raise StageMismatchError("feature sets come from different models")
    Y = subsample_rows(test_features.matrix, subsample, seed, test_features.patient_id)
    discrepancies = []
    for fs in train_features:
        X = subsample_rows(fs.matrix, subsample, seed, fs.patient_id)
        discrepancies.append((fs.patient_id, mmd2_biased(X, Y, kernel)))
    table = patient_weights(discrepancies)
    table.kernel = kernel
    table.subsample_size = subsample
    table.seed = seed
    table.features_fingerprint = features_fingerprint(train_features + [test_features])
    table.model_fingerprint = test_features.model_fingerprint
    table.test_patient_id = test_features.patient_id
    return table
