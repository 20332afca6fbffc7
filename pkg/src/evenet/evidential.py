"""Evidence -> Dirichlet parameters, beliefs and uncertainty.

Class vectors live on axis 0 of every array, so a field over a volume has
shape ``(N, nz, ny, nx)`` and a single voxel is just ``(N,)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, argmax_labels


@dataclass(frozen=True, eq=False)
class EvidenceField:
    """Non-negative per-class evidence of one subnetwork."""

    evidence: np.ndarray
    subnet_id: str = "custom"

    def __post_init__(self):
        e = np.ascontiguousarray(self.evidence, dtype=np.float32)
        if e.ndim < 1 or e.shape[0] < 1:
            raise ValueError("evidence needs a leading class axis")
        if not np.isfinite(e).all() or (e < 0).any():
            raise ValueError("evidence must be finite and non-negative")
        e.setflags(write=False)
        object.__setattr__(self, "evidence", e)

    @property
    def n_classes(self) -> int:
        return self.evidence.shape[0]

    @property
    def spatial_shape(self):
        return self.evidence.shape[1:]

    def to_volume(self, voxel_size_mm=(1.0, 1.0, 1.0)) -> Volume:
        return Volume(self.evidence, voxel_size_mm)

    @classmethod
    def from_volume(cls, v: Volume, subnet_id: str = "custom") -> "EvidenceField":
        return cls(v.data, subnet_id)


@dataclass(frozen=True)
class BeliefField:
    beliefs: np.ndarray
    uncertainty: np.ndarray
    strength: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.beliefs.shape[0]

    def labels(self) -> np.ndarray:
        return argmax_labels(self.beliefs)


def _evidence_array(e) -> np.ndarray:
    if isinstance(e, EvidenceField):
        e = e.evidence
    return np.asarray(e, dtype=np.float64)


def evidence_to_alpha(e) -> np.ndarray:
    return _evidence_array(e) + 1.0


def beliefs(e) -> BeliefField:
    """p = e / S and u = N / S with S = sum(e) + N."""
    e = _evidence_array(e)
    n = e.shape[0]
    if n < 2:
        raise ValueError("beliefs need at least two classes")
    s = e.sum(axis=0) + n
    return BeliefField(e / s, n / s, s)


def uncertainty(e) -> np.ndarray:
    e = _evidence_array(e)
    return e.shape[0] / (e.sum(axis=0) + e.shape[0])


def expected_probabilities(alpha) -> np.ndarray:
    """Dirichlet mean alpha / sum(alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha / alpha.sum(axis=0)
