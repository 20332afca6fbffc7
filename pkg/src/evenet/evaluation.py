"""Overlap metrics, lesion-uncertainty analysis and slice rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .volume import DimensionError, LabelMap, Volume, VolumeIOError


@dataclass
class MetricsReport:
    dice: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    iou: dict[int, float] = field(default_factory=dict)
    gt_voxels: dict[int, int] = field(default_factory=dict)
    pred_voxels: dict[int, int] = field(default_factory=dict)
    mean_dice: float = float("nan")
    mean_recall: float = float("nan")
    mean_iou: float = float("nan")
    names: dict[int, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"mean_dice = {self.mean_dice!r}",
            f"mean_recall = {self.mean_recall!r}",
            f"mean_iou = {self.mean_iou!r}",
        ]
        for n in sorted(self.dice):
            tag = f"region.{n}"
            lines += [
                f"{tag}.name = {self.names.get(n, '')}",
                f"{tag}.dice = {self.dice[n]!r}",
                f"{tag}.recall = {self.recall[n]!r}",
                f"{tag}.iou = {self.iou[n]!r}",
                f"{tag}.gt_voxels = {self.gt_voxels[n]}",
                f"{tag}.pred_voxels = {self.pred_voxels[n]}",
            ]
        return "\n".join(lines) + "\n"


def region_metrics(pred: LabelMap, gt: LabelMap, include_background: bool = False,
                   voxel_weighted: bool = False, mask: np.ndarray | None = None) -> MetricsReport:
    """Dice, recall and IoU per region and their means.

    Regions absent from the ground truth are left out of the means, and
    regions absent from both maps are skipped entirely.  ``mask`` restricts
    the comparison to a subset of voxels.
    """
    if pred.spatial_shape != gt.spatial_shape:
        raise DimensionError(f"dims differ: {pred.dims} vs {gt.dims}")
    if pred.n_classes != gt.n_classes:
        raise DimensionError(f"class counts differ: {pred.n_classes} vs {gt.n_classes}")
    p, g = pred.labels.ravel(), gt.labels.ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        p, g = p[m], g[m]
    n = gt.n_classes
    p_cnt = np.bincount(p, minlength=n)
    g_cnt = np.bincount(g, minlength=n)
    inter = np.bincount(g[p == g], minlength=n)
    rep = MetricsReport()
    for c in range(n):
        if g_cnt[c] == 0 and p_cnt[c] == 0:
            continue
        union = p_cnt[c] + g_cnt[c] - inter[c]
        rep.dice[c] = float(2.0 * inter[c] / (p_cnt[c] + g_cnt[c]))
        rep.recall[c] = float(inter[c] / g_cnt[c]) if g_cnt[c] else 0.0
        rep.iou[c] = float(inter[c] / union)
        rep.gt_voxels[c] = int(g_cnt[c])
        rep.pred_voxels[c] = int(p_cnt[c])
        rep.names[c] = gt.names[c]
    used = [c for c in rep.dice if g_cnt[c] > 0 and (include_background or c != 0)]
    if used:
        w = np.array([g_cnt[c] for c in used], dtype=np.float64) if voxel_weighted else None
        rep.mean_dice = float(np.average([rep.dice[c] for c in used], weights=w))
        rep.mean_recall = float(np.average([rep.recall[c] for c in used], weights=w))
        rep.mean_iou = float(np.average([rep.iou[c] for c in used], weights=w))
    return rep


@dataclass
class OodReport:
    lesion_mean: float
    lesion_median: float
    reference_mean: float
    reference_median: float
    contrast_ratio: float
    auroc: float
    lesion_voxels: int
    reference_voxels: int

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.__dict__.items())


def auroc(scores_pos, scores_neg) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count half)."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def reference_mask(gt: LabelMap, lesion: np.ndarray, margin: int = 2) -> np.ndarray:
    """Normal tissue at least ``margin`` voxels inside its region, outside the lesion.

    Background (label 0) is not tissue and is left out.
    """
    ref = np.zeros(gt.spatial_shape, dtype=bool)
    for c in range(1, gt.n_classes):
        region = gt.labels == c
        if region.any():
            ref |= ndimage.binary_erosion(region, iterations=margin, border_value=0)
    return ref & ~np.asarray(lesion, dtype=bool)


def ood_report(uncertainty, lesion: np.ndarray, gt: LabelMap, margin: int = 2) -> OodReport:
    u = uncertainty.data[0] if isinstance(uncertainty, Volume) else np.asarray(uncertainty)
    lesion = np.asarray(lesion, dtype=bool)
    if u.shape != lesion.shape or u.shape != gt.spatial_shape:
        raise DimensionError("uncertainty, lesion mask and ground truth dims differ")
    if not lesion.any():
        raise ValueError("lesion mask is empty")
    ref = reference_mask(gt, lesion, margin)
    if not ref.any():
        raise ValueError("reference mask is empty")
    ul, ur = u[lesion].astype(np.float64), u[ref].astype(np.float64)
    ref_mean = ur.mean()
    ratio = ul.mean() / ref_mean if ref_mean > 0 else float("inf")
    return OodReport(
        lesion_mean=float(ul.mean()),
        lesion_median=float(np.median(ul)),
        reference_mean=float(ref_mean),
        reference_median=float(np.median(ur)),
        contrast_ratio=float(ratio),
        auroc=auroc(ul, ur),
        lesion_voxels=int(lesion.sum()),
        reference_voxels=int(ref.sum()),
    )


def _take_slice(arr: np.ndarray, axis: str, index: int) -> np.ndarray:
    """arr is (nz, ny, nx); returns a 2-D image with rows along the slower axis."""
    ax = {"z": 0, "y": 1, "x": 2}.get(axis)
    if ax is None:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    if not 0 <= index < arr.shape[ax]:
        raise IndexError(f"slice {index} out of range for axis {axis} (size {arr.shape[ax]})")
    return np.take(arr, index, axis=ax)


# distinct, fixed colours; label i uses entry i modulo the table length
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0),
], dtype=np.uint8)


def _write_bytes(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise VolumeIOError(path, exc) from exc


def render_heatmap(field_, axis: str, index: int, path, channel: int = 0) -> None:
    """Write one slice as binary PGM (scalar volume) or PPM (label map).

    Scalar slices are min-max normalised to 0..255; a constant slice renders
    as all zeros.
    """
    if isinstance(field_, LabelMap):
        img = _take_slice(field_.labels, axis, index)
        rgb = PALETTE[img.astype(np.intp) % len(PALETTE)]
        h, w = img.shape
        _write_bytes(path, f"P6 {w} {h} 255\n".encode("ascii") + rgb.tobytes())
        return
    arr = field_.data[channel] if isinstance(field_, Volume) else np.asarray(field_)
    img = _take_slice(arr, axis, index).astype(np.float64)
    lo, hi = img.min(), img.max()
    if hi > lo:
        pix = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros(img.shape, dtype=np.uint8)
    h, w = pix.shape
    _write_bytes(path, f"P5 {w} {h} 255\n".encode("ascii") + pix.tobytes())
