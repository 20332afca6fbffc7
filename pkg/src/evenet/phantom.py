"""Synthetic diffusion phantoms.

A phantom is a stack of geometric regions painted in order (later regions
overwrite earlier ones), each carrying one diffusion tensor and a baseline
b=0 signal.  From it we simulate single-shell DWIs with Rician noise, fit the
tensor back with log-linear least squares and derive the five subnetwork
inputs: FA, MD and the three eigenvalues.

Tensor volumes hold the six unique components in the order
``(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`` in mm^2/s.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .volume import LabelMap, Volume

logger = logging.getLogger(__name__)

PARAM_NAMES = ("fa", "md", "e1", "e2", "e3")
SHAPES = ("fill", "ellipsoid", "box", "shell")


class ProtocolError(ValueError):
    pass


class LesionBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """One painted region.

    ``center`` and ``radii`` are fractions of the volume dims (radii of 0.5
    reach the volume edge).  For boxes ``radii`` are half side lengths; for
    shells ``inner`` is the inner radius as a fraction of ``radii``.
    """

    name: str
    shape: str = "ellipsoid"
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radii: tuple[float, float, float] = (0.25, 0.25, 0.25)
    inner: float = 0.0
    eigenvalues: tuple[float, float, float] = (1e-3, 1e-3, 1e-3)
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    s0: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown region shape {self.shape!r}")
        if min(self.eigenvalues) <= 0:
            raise ValueError(f"region {self.name}: tensor eigenvalues must be positive")
        if self.s0 < 0:
            raise ValueError(f"region {self.name}: s0 must be non-negative")
        if np.linalg.norm(self.direction) == 0:
            raise ValueError(f"region {self.name}: direction must be non-zero")

    def tensor(self) -> np.ndarray:
        """Symmetric 3x3 tensor with the largest eigenvalue along ``direction``."""
        return tensor_from_eigen(self.eigenvalues, self.direction)

    def inside(self, coords: np.ndarray, dims) -> np.ndarray:
        """Boolean mask for voxel centres ``coords`` of shape (3, nz, ny, nx) in (x, y, z)."""
        if self.shape == "fill":
            return np.ones(coords.shape[1:], dtype=bool)
        dims = np.asarray(dims, dtype=np.float64)
        c = np.asarray(self.center)[:, None, None, None] * dims[:, None, None, None]
        r = np.asarray(self.radii)[:, None, None, None] * dims[:, None, None, None]
        d = (coords + 0.5 - c) / r
        if self.shape == "box":
            return (np.abs(d) <= 1.0).all(axis=0)
        rr = (d * d).sum(axis=0)
        if self.shape == "shell":
            return (rr <= 1.0) & (rr > self.inner**2)
        return rr <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 32)
    regions: tuple[Region, ...] = ()
    voxel_size_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        if not self.regions or self.regions[0].shape != "fill":
            raise ValueError("the first region must be a 'fill' background")

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.regions)


@dataclass(frozen=True)
class DWIProtocol:
    bvals: np.ndarray
    bvecs: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if bvals.shape[0] != bvecs.shape[0]:
            raise ProtocolError("bvals and bvecs differ in length")
        if self.sigma < 0:
            raise ProtocolError("noise sigma must be non-negative")
        dw = bvals > 0
        if np.any(np.abs(np.linalg.norm(bvecs[dw], axis=1) - 1.0) > 1e-6):
            raise ProtocolError("gradient directions must be unit vectors")
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def n_measurements(self) -> int:
        return self.bvals.shape[0]


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """n roughly uniform unit vectors on the z >= 0 hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def default_protocol(n_directions: int = 30, bvalue: float = 1000.0, n_b0: int = 5,
                     sigma: float = 0.02) -> DWIProtocol:
    dirs = fibonacci_hemisphere(n_directions)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_directions, bvalue)])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return DWIProtocol(bvals, bvecs, sigma)


def default_spec(dims=(48, 48, 32), seed: int = 0) -> PhantomSpec:
    """Six regions: background, a CSF rim, two gray shells and two white cores."""
    ms = 1e-3
    regions = (
        Region("background", "fill", eigenvalues=(3.0 * ms,) * 3, s0=0.0),
        Region("csf", "ellipsoid", radii=(0.46, 0.46, 0.46), eigenvalues=(3.0 * ms,) * 3, s0=1.2),
        Region("gray_outer", "ellipsoid", radii=(0.385, 0.385, 0.385),
               eigenvalues=(0.75 * ms, 0.65 * ms, 0.55 * ms), direction=(0, 0, 1), s0=1.0),
        Region("gray_inner", "ellipsoid", radii=(0.31, 0.31, 0.31),
               eigenvalues=(1.3 * ms, 1.1 * ms, 0.9 * ms), direction=(1, 1, 0), s0=1.0),
        Region("white_a", "ellipsoid", center=(0.38, 0.5, 0.5), radii=(0.12, 0.2, 0.2),
               eigenvalues=(1.7 * ms, 0.3 * ms, 0.2 * ms), direction=(0, 1, 0), s0=0.8),
        Region("white_b", "box", center=(0.63, 0.5, 0.5), radii=(0.09, 0.15, 0.15),
               eigenvalues=(1.5 * ms, 1.0 * ms, 0.35 * ms), direction=(1, 0, 0), s0=0.8),
    )
    return PhantomSpec(tuple(dims), regions, seed=seed)


def tensor_from_eigen(eigenvalues, direction) -> np.ndarray:
    """R diag(l1, l2, l3) R^T with the first axis of R along ``direction``."""
    e1 = np.asarray(direction, dtype=np.float64)
    e1 = e1 / np.linalg.norm(e1)
    helper = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(e1, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    rot = np.stack([e1, e2, e3], axis=1)
    return rot @ np.diag(eigenvalues) @ rot.T


def tensor_to_components(d: np.ndarray) -> np.ndarray:
    """(..., 3, 3) -> (6, ...) in (xx, yy, zz, xy, xz, yz) order."""
    return np.stack([d[..., 0, 0], d[..., 1, 1], d[..., 2, 2],
                     d[..., 0, 1], d[..., 0, 2], d[..., 1, 2]])


def components_to_tensor(c: np.ndarray) -> np.ndarray:
    """(6, ...) -> (..., 3, 3)."""
    xx, yy, zz, xy, xz, yz = c
    return np.stack([np.stack([xx, xy, xz], -1),
                     np.stack([xy, yy, yz], -1),
                     np.stack([xz, yz, zz], -1)], -2)


def _voxel_coords(dims) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([x, y, z]).astype(np.float64)


def generate_phantom(spec: PhantomSpec) -> tuple[LabelMap, Volume]:
    """Label map and six-component tensor field of a phantom."""
    nx, ny, nz = spec.dims
    coords = _voxel_coords(spec.dims)
    labels = np.zeros((nz, ny, nx), dtype=np.uint16)
    for i, region in enumerate(spec.regions):
        labels[region.inside(coords, spec.dims)] = i
    comps = np.stack([tensor_to_components(r.tensor()) for r in spec.regions], axis=1)
    tensors = comps[:, labels]
    return LabelMap(labels, spec.names), Volume(tensors, spec.voxel_size_mm)


def s0_map(spec: PhantomSpec, labels: LabelMap) -> np.ndarray:
    s0 = np.array([r.s0 for r in spec.regions])
    return s0[labels.labels]


def _design_matrix(protocol: DWIProtocol) -> np.ndarray:
    g = protocol.bvecs
    b = protocol.bvals[:, None]
    return b * np.stack([g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
                         2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2]], axis=1)


def simulate_dwi(tensors: Volume, protocol: DWIProtocol, s0=1.0, seed: int = 0) -> Volume:
    """S_k = S0 exp(-b_k g_k^T D g_k), plus Rician noise when protocol.sigma > 0.

    Noise comes from a counter-based Philox stream keyed by ``seed``.
    """
    if tensors.channels != 6:
        raise ValueError("tensor volume must have 6 channels")
    comps = tensors.data.astype(np.float64)
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), tensors.spatial_shape)
    atten = np.einsum("kc,czyx->kzyx", _design_matrix(protocol), comps)
    signal = s0[None] * np.exp(-atten)
    if protocol.sigma > 0:
        rng = np.random.Generator(np.random.Philox(key=seed))
        n1 = rng.normal(0.0, protocol.sigma, signal.shape)
        n2 = rng.normal(0.0, protocol.sigma, signal.shape)
        signal = np.sqrt((signal + n1) ** 2 + n2**2)
    return Volume(signal, tensors.voxel_size_mm)


def fit_dti(dwi: Volume, protocol: DWIProtocol) -> Volume:
    """Log-linear least-squares tensor fit of ln(S / S0)."""
    if dwi.channels != protocol.n_measurements:
        raise ProtocolError("DWI channel count does not match the protocol")
    b0 = protocol.bvals == 0
    dw = ~b0
    if not b0.any():
        raise ProtocolError("protocol has no b=0 measurement")
    a = _design_matrix(protocol)[dw]
    if a.shape[0] < 6 or np.linalg.matrix_rank(a) < 6:
        raise ProtocolError("need at least 6 non-collinear diffusion directions")
    data = dwi.data.astype(np.float64)
    s0 = data[b0].mean(axis=0)
    s0 = np.maximum(s0, 1e-12)
    sig = np.maximum(data[dw], 1e-6 * s0[None])
    y = -np.log(sig / s0[None])
    comps = np.einsum("ck,kzyx->czyx", np.linalg.pinv(a), y)
    return Volume(comps, dwi.voxel_size_mm)


def _jacobi_eigvals(m: np.ndarray, sweeps: int = 12) -> np.ndarray:
    """Cyclic Jacobi eigenvalues of a stack of symmetric 3x3 matrices (K, 3, 3)."""
    a = m.astype(np.float64).copy()
    idx = np.arange(a.shape[0])
    for _ in range(sweeps):
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            rot = np.abs(apq) > 1e-300
            safe = np.where(rot, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(rot, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            j = np.broadcast_to(np.eye(3), a.shape).copy()
            j[idx, p, p] = c
            j[idx, q, q] = c
            j[idx, p, q] = s
            j[idx, q, p] = -s
            a = np.transpose(j, (0, 2, 1)) @ a @ j
    return np.sort(np.diagonal(a, axis1=1, axis2=2), axis=1)[:, ::-1]


def eigvals_sym3(comps: np.ndarray) -> np.ndarray:
    """Eigenvalues (3, ...) in descending order of symmetric tensors (6, ...).

    Closed-form trigonometric solution of the characteristic cubic, with a
    Jacobi fallback where eigenvalues (nearly) coincide.
    """
    c = np.asarray(comps, dtype=np.float64)
    shape = c.shape[1:]
    c = c.reshape(6, -1)
    xx, yy, zz, xy, xz, yz = c
    q = (xx + yy + zz) / 3.0
    p1 = xy * xy + xz * xz + yz * yz
    p2 = (xx - q) ** 2 + (yy - q) ** 2 + (zz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    ps = np.where(p > 0, p, 1.0)
    bxx, byy, bzz = (xx - q) / ps, (yy - q) / ps, (zz - q) / ps
    bxy, bxz, byz = xy / ps, xz / ps, yz / ps
    det = bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz) + bxz * (bxy * byz - byy * bxz)
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * math.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    ev = np.stack([e1, e2, e3])
    close = (p == 0) | (np.minimum(e1 - e2, e2 - e3) < 1e-12)
    if close.any():
        ev[:, close] = _jacobi_eigvals(components_to_tensor(c[:, close])).T
    return ev.reshape((3,) + shape)


def derive_params(tensors: Volume) -> Volume:
    """(FA, MD, E1, E2, E3) per voxel; all-zero tensors get FA = 0."""
    ev = eigvals_sym3(tensors.data)
    md = ev.mean(axis=0)
    num = np.sqrt(((ev - md) ** 2).sum(axis=0))
    den = np.sqrt((ev**2).sum(axis=0))
    fa = np.sqrt(1.5) * num / np.where(den > 0, den, 1.0)
    fa = np.clip(np.where(den > 0, fa, 0.0), 0.0, 1.0)
    return Volume(np.stack([fa, md, ev[0], ev[1], ev[2]]), tensors.voxel_size_mm)


def brain_mask(dwi: Volume, protocol: DWIProtocol, fraction: float = 0.25) -> np.ndarray:
    """Voxels whose mean b=0 signal exceeds ``fraction`` of its 99th percentile."""
    b0 = dwi.data[protocol.bvals == 0].astype(np.float64).mean(axis=0)
    return b0 > fraction * np.percentile(b0, 99)


def normalize_channels(params: Volume, mask: np.ndarray) -> Volume:
    """Z-score every channel over ``mask``; voxels outside the mask become 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("normalisation mask is empty")
    data = params.data.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        vals = data[c][mask]
        sd = vals.std()
        out[c][mask] = (vals - vals.mean()) / (sd if sd > 0 else 1.0)
    return Volume(out, params.voxel_size_mm)


@dataclass(frozen=True)
class LesionSpec:
    """A sphere or box (voxel units) whose voxels get replaced or scaled.

    ``values`` (one per channel) replaces the voxels when given; otherwise the
    voxels are multiplied by ``scale``.
    """

    center: tuple[float, float, float]
    radius: float = 4.0
    shape: str = "sphere"
    values: tuple[float, ...] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown lesion shape {self.shape!r}")
        if self.radius < 0:
            raise ValueError("lesion radius must be non-negative")

    @classmethod
    def tensor(cls, center, radius, eigenvalues, direction=(1.0, 0.0, 0.0)) -> "LesionSpec":
        comps = tensor_to_components(tensor_from_eigen(eigenvalues, direction))
        return cls(tuple(center), radius, values=tuple(float(v) for v in comps))

    def mask(self, dims) -> np.ndarray:
        nx, ny, nz = dims
        c = np.asarray(self.center, dtype=np.float64)
        if np.any(c - self.radius < -0.5) or np.any(c + self.radius > np.array(dims) - 0.5):
            raise LesionBoundsError(f"lesion at {self.center} r={self.radius} leaves the volume {dims}")
        coords = _voxel_coords(dims)
        d = coords - c[:, None, None, None]
        if self.shape == "box":
            return (np.abs(d) <= self.radius).all(axis=0)
        return (d * d).sum(axis=0) <= self.radius**2


def inject_lesion(volume: Volume, lesion: LesionSpec) -> tuple[Volume, np.ndarray]:
    """Apply ``lesion`` inside its mask; voxels outside are left bit-identical."""
    mask = lesion.mask(volume.dims)
    data = volume.data.copy()
    if lesion.values is not None:
        vals = np.asarray(lesion.values, dtype=np.float32)
        if vals.shape != (volume.channels,):
            raise ValueError(f"lesion needs {volume.channels} values, got {vals.shape}")
        data[:, mask] = vals[:, None]
    else:
        data[:, mask] = data[:, mask] * np.float32(lesion.scale)
    return Volume(data, volume.voxel_size_mm), mask


@dataclass(frozen=True)
class Jitter:
    center: float = 1.5
    radius: float = 0.05
    eigen: float = 0.03


def jitter_spec(spec: PhantomSpec, rng: np.random.Generator, jitter: Jitter, seed: int) -> PhantomSpec:
    """Perturb every non-background region's geometry and tensor."""
    dims = np.asarray(spec.dims, dtype=np.float64)
    regions = [spec.regions[0]]
    for r in spec.regions[1:]:
        shift = rng.uniform(-jitter.center, jitter.center, 3) / dims
        rscale = rng.uniform(1 - jitter.radius, 1 + jitter.radius, 3)
        escale = rng.uniform(1 - jitter.eigen, 1 + jitter.eigen, 3)
        eig = tuple(sorted((float(v) for v in np.asarray(r.eigenvalues) * escale), reverse=True))
        regions.append(replace(
            r,
            center=tuple(float(v) for v in np.asarray(r.center) + shift),
            radii=tuple(float(v) for v in np.asarray(r.radii) * rscale),
            eigenvalues=eig,
        ))
    return replace(spec, regions=tuple(regions), seed=seed)


@dataclass(frozen=True)
class PhantomSample:
    spec: PhantomSpec
    inputs: Volume
    labelmap: LabelMap
    lesion_mask: np.ndarray | None = None

    def pair(self) -> tuple[Volume, LabelMap]:
        return self.inputs, self.labelmap


def build_sample(spec: PhantomSpec, protocol: DWIProtocol, lesion: LesionSpec | None = None) -> PhantomSample:
    """phantom -> (lesion) -> DWI -> tensor fit -> normalised (FA, MD, E1, E2, E3)."""
    labels, tensors = generate_phantom(spec)
    mask = None
    if lesion is not None:
        tensors, mask = inject_lesion(tensors, lesion)
    dwi = simulate_dwi(tensors, protocol, s0_map(spec, labels), seed=spec.seed)
    params = derive_params(fit_dti(dwi, protocol))
    inputs = normalize_channels(params, brain_mask(dwi, protocol))
    return PhantomSample(spec, inputs, labels, mask)


@dataclass
class Dataset:
    train: list[PhantomSample] = field(default_factory=list)
    val: list[PhantomSample] = field(default_factory=list)
    test: list[PhantomSample] = field(default_factory=list)

    @staticmethod
    def pairs(samples: Sequence[PhantomSample]) -> list[tuple[Volume, LabelMap]]:
        return [s.pair() for s in samples]


def split_counts(n: int, split: Sequence[float]) -> tuple[int, int, int]:
    if len(split) != 3 or min(split) < 0 or sum(split) <= 0:
        raise ValueError("split must be three non-negative fractions")
    fr = np.asarray(split, dtype=np.float64) / sum(split)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    return n - n_val - n_test, n_val, n_test


def jittered_specs(base: PhantomSpec, n: int, seed: int, jitter: Jitter = Jitter()) -> list[PhantomSpec]:
    rng = np.random.default_rng(seed)
    child_seeds = rng.integers(0, 2**31 - 1, size=n)
    return [jitter_spec(base, rng, jitter, int(s)) for s in child_seeds]


def make_dataset(specs: Sequence[PhantomSpec], protocol: DWIProtocol,
                 split=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Simulate every spec and split them into train / val / test by ``seed``."""
    if len(specs) < 3:
        raise ValueError("make_dataset needs at least 3 phantom specs")
    n_train, n_val, _ = split_counts(len(specs), split)
    order = np.random.default_rng(seed).permutation(len(specs))
    samples = [build_sample(specs[i], protocol) for i in order]
    logger.info("simulated %d phantoms", len(samples))
    return Dataset(samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:])
