"""Fusion of M subnetwork outputs into one label map and uncertainty map.

Three criteria are available:

* ``evidence``: per voxel, adopt the subnetwork with the lowest evidential
  uncertainty N/S and take its most-believed class.  The heatmap is the
  entropy of the subnet-averaged beliefs.
* ``probability``: average per-subnet probability vectors, take the argmax.
* ``entropy``: adopt the member whose probability vector has the lowest
  entropy.

Ties always go to the lowest member index, then the lowest class index.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .evidential import EvidenceField, beliefs, expected_probabilities
from .volume import DimensionError, LabelMap, Volume, argmax_labels

CRITERIA = ("evidence", "probability", "entropy")


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class SubnetOutputs:
    fields: tuple[EvidenceField, ...]

    def __post_init__(self):
        fields = tuple(self.fields)
        if not fields:
            raise ValueError("need at least one subnetwork output")
        shape = fields[0].evidence.shape
        for f in fields[1:]:
            if f.evidence.shape != shape:
                raise DimensionError(f"subnet outputs differ in shape: {f.evidence.shape} vs {shape}")
        ids = [f.subnet_id for f in fields]
        if len(set(ids)) != len(ids):
            raise ValueError(f"subnet ids must be unique, got {ids}")
        object.__setattr__(self, "fields", fields)

    @classmethod
    def of(cls, evidence: Sequence, ids: Sequence[str] | None = None) -> "SubnetOutputs":
        if ids is None:
            ids = [f"s{i}" for i in range(len(evidence))]
        return cls(tuple(e if isinstance(e, EvidenceField) else EvidenceField(e, i)
                         for e, i in zip(evidence, ids)))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(f.subnet_id for f in self.fields)

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def n_classes(self) -> int:
        return self.fields[0].n_classes


@dataclass(frozen=True)
class FusedResult:
    """``uncertainty`` is kept in float64; it is cast to float32 only on save."""

    labelmap: LabelMap
    uncertainty: np.ndarray
    chosen_subnet: np.ndarray
    criterion: str
    subnet_ids: tuple[str, ...]

    def uncertainty_volume(self, voxel_size_mm=(1.0, 1.0, 1.0)) -> Volume:
        return Volume(self.uncertainty, voxel_size_mm)

    def chosen_labelmap(self) -> LabelMap:
        return LabelMap(self.chosen_subnet, self.subnet_ids)


def average_beliefs(outs: SubnetOutputs) -> np.ndarray:
    """Mean over subnetworks of each one's own beliefs e / S."""
    acc = np.zeros(outs.fields[0].evidence.shape)
    for f in outs.fields:
        acc += beliefs(f).beliefs
    return acc / outs.m


def fused_uncertainty(p_prime) -> np.ndarray:
    """Shannon entropy (natural log) over axis 0, with 0 log 0 = 0."""
    p = np.asarray(p_prime, dtype=np.float64)
    if (p < 0).any():
        raise ValueError("entropy needs non-negative inputs")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=0)


def minimum_uncertainty(outs: SubnetOutputs) -> np.ndarray:
    """Per-voxel lowest subnet uncertainty N/S, the quantity the evidence rule minimises."""
    return np.min(np.stack([beliefs(f).uncertainty for f in outs.fields]), axis=0)


def _result(labels, unc, chosen, criterion, ids, names) -> FusedResult:
    return FusedResult(LabelMap(labels, names), unc, np.asarray(chosen, dtype=np.uint16), criterion, tuple(ids))


def _names(n, names):
    return tuple(names) if names is not None else tuple(f"class_{i}" for i in range(n))


def fuse_evidence_based(outs: SubnetOutputs, names=None) -> FusedResult:
    bfs = [beliefs(f) for f in outs.fields]
    u = np.stack([b.uncertainty for b in bfs])
    chosen = np.argmin(u, axis=0)
    p = np.stack([b.beliefs for b in bfs])  # (M, N, ...)
    picked = np.take_along_axis(p, chosen[None, None], axis=0)[0]
    labels = argmax_labels(picked)
    p_avg = p.mean(axis=0)
    return _result(labels, fused_uncertainty(p_avg), chosen, "evidence", outs.ids,
                   _names(outs.n_classes, names))


def _probabilities(members) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(members, SubnetOutputs):
        return np.stack([np.asarray(f.evidence, dtype=np.float64) for f in members.fields]), members.ids
    arr = np.stack([np.asarray(m, dtype=np.float64) for m in members])
    return arr, tuple(f"s{i}" for i in range(arr.shape[0]))


def _check_normalized(p: np.ndarray):
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
        raise NormalizationError("member probabilities must be non-negative and sum to 1 per voxel")


def dirichlet_means(outs: SubnetOutputs) -> list[np.ndarray]:
    """Per-subnet probability vectors alpha / S, for the probability and entropy rules."""
    return [expected_probabilities(np.asarray(f.evidence, dtype=np.float64) + 1.0) for f in outs.fields]


def fuse_probability_based(members, names=None) -> FusedResult:
    """Argmax of the member-mean probability vector.

    ``members`` is a sequence of probability arrays ``(N, ...)``.  The
    chosen-subnet map records the member that puts the most mass on the fused
    class.
    """
    p, ids = _probabilities(members)
    _check_normalized(p)
    mean = p.mean(axis=0)
    labels = argmax_labels(mean)
    on_label = np.take_along_axis(p, labels[None, None].astype(np.intp), axis=1)[:, 0]
    chosen = np.argmax(on_label, axis=0)
    return _result(labels, fused_uncertainty(mean), chosen, "probability", ids, _names(p.shape[1], names))


def fuse_entropy_based(members, names=None) -> FusedResult:
    """Adopt the argmax of the member with the lowest probability entropy.

    The heatmap is the entropy of the member-mean probability vector, as for
    the probability rule.
    """
    p, ids = _probabilities(members)
    _check_normalized(p)
    # entropies are summed over sorted probabilities so that members whose
    # vectors are permutations of each other tie exactly
    h = np.stack([fused_uncertainty(np.sort(pm, axis=0)) for pm in p])
    chosen = np.argmin(h, axis=0)
    picked = np.take_along_axis(p, chosen[None, None], axis=0)[0]
    return _result(argmax_labels(picked), fused_uncertainty(p.mean(axis=0)), chosen, "entropy", ids,
                   _names(p.shape[1], names))


def fuse(outs: SubnetOutputs, criterion: str = "evidence", names=None) -> FusedResult:
    """Dispatch on criterion; probability rules use each subnet's Dirichlet mean."""
    if criterion == "evidence":
        return fuse_evidence_based(outs, names)
    if criterion == "probability":
        return _relabel(fuse_probability_based(dirichlet_means(outs), names), outs.ids)
    if criterion == "entropy":
        return _relabel(fuse_entropy_based(dirichlet_means(outs), names), outs.ids)
    raise ValueError(f"unknown fusion criterion {criterion!r}; expected one of {CRITERIA}")


def _relabel(res: FusedResult, ids) -> FusedResult:
    return replace(res, subnet_ids=tuple(ids))
