"""Flat ``key = value`` text configs used by the phantom, protocol and
training files.  ``#`` starts a comment; keys may contain dots to group
related entries (``region.2.radii = 0.7 0.7 0.7``).
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import LossConfig
from .phantom import (DWIProtocol, Jitter, LesionSpec, PhantomSpec, Region, default_protocol,
                      default_spec)
from .subnet import SubnetConfig, TrainConfig


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def floats(value: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in value.split())
    except ValueError:
        raise ConfigError(f"expected numbers, got {value!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {value!r}")
    return vals


def ints(value: str, n: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in value.split())
    except ValueError:
        raise ConfigError(f"expected integers, got {value!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} integers, got {value!r}")
    return vals


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss"}


def train_config_from_kv(kv: dict[str, str]) -> tuple[TrainConfig, SubnetConfig]:
    """Keys: the TrainConfig fields, ``lambda``, ``lambda_kl``, ``epsilon_dice``,
    ``hidden`` and ``kernel``.  Unknown keys are rejected."""
    allowed = _TRAIN_KEYS | {"lambda", "lambda_kl", "epsilon_dice", "hidden", "kernel"}
    unknown = set(kv) - allowed
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    try:
        loss = LossConfig(
            lam=float(kv.get("lambda", 0.7)),
            lam_kl=float(kv.get("lambda_kl", 0.4)),
            epsilon_dice=float(kv.get("epsilon_dice", 1e-6)),
        )
        defaults = TrainConfig()
        kwargs = {k: type(getattr(defaults, k))(kv[k]) for k in _TRAIN_KEYS if k in kv}
        tcfg = TrainConfig(loss=loss, **kwargs)
        scfg = SubnetConfig(
            hidden=ints(kv["hidden"]) if "hidden" in kv else (16, 16),
            kernel=int(kv.get("kernel", 3)),
            seed=tcfg.seed,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return tcfg, scfg


def train_config_to_kv(tcfg: TrainConfig, scfg: SubnetConfig) -> dict[str, str]:
    out = {f.name: repr(getattr(tcfg, f.name)) for f in fields(TrainConfig) if f.name != "loss"}
    out["lambda"] = repr(tcfg.loss.lam)
    out["lambda_kl"] = repr(tcfg.loss.lam_kl)
    out["epsilon_dice"] = repr(tcfg.loss.epsilon_dice)
    out["hidden"] = " ".join(map(str, scfg.hidden))
    out["kernel"] = str(scfg.kernel)
    return out


_REGION_FIELDS = ("name", "shape", "center", "radii", "inner", "eigenvalues", "direction", "s0")


@dataclass(frozen=True)
class RunSpec:
    """Everything the phantom stage needs: base geometry, protocol, dataset
    size, split, jitter and the optional lesion for the OOD phantom.

    ``lesion_center`` is in voxel indices; ``None`` puts the lesion at the
    centre of ``lesion_region`` in the held-out phantom.
    """

    base: PhantomSpec
    protocol: DWIProtocol
    n_phantoms: int = 10
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    jitter: Jitter = Jitter()
    lesion_radius: float = 4.0
    lesion_shape: str = "sphere"
    lesion_eigenvalues: tuple[float, float, float] | None = (2.2e-3, 2.0e-3, 1.8e-3)
    lesion_direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    lesion_scale: float = 1.0
    lesion_center: tuple[float, float, float] | None = None
    lesion_region: str = "white_a"

    @property
    def seed(self) -> int:
        return self.base.seed

    def lesion_for(self, spec: PhantomSpec) -> LesionSpec:
        if self.lesion_center is not None:
            center = self.lesion_center
        else:
            match = [r for r in spec.regions if r.name == self.lesion_region]
            if not match:
                raise ConfigError(f"lesion.region {self.lesion_region!r} is not a region name")
            center = tuple(float(c * d - 0.5) for c, d in zip(match[0].center, spec.dims))
        if self.lesion_eigenvalues is not None:
            les = LesionSpec.tensor(center, self.lesion_radius, self.lesion_eigenvalues, self.lesion_direction)
            return replace(les, shape=self.lesion_shape)
        return LesionSpec(center, self.lesion_radius, self.lesion_shape, scale=self.lesion_scale)


def _region_from_kv(kv: dict[str, str], i: int) -> Region:
    pre = f"region.{i}."
    args = {}
    for key in _REGION_FIELDS:
        if pre + key not in kv:
            continue
        v = kv[pre + key]
        if key in ("name", "shape"):
            args[key] = v
        elif key in ("inner", "s0"):
            args[key] = float(v)
        else:
            args[key] = floats(v, 3)
    if "name" not in args:
        raise ConfigError(f"{pre}name is required")
    return Region(**args)


def run_spec_from_kv(kv: dict[str, str]) -> RunSpec:
    """Keys: ``dims``, ``voxel_size``, ``seed``, ``n_phantoms``, ``split``,
    ``jitter.{center,radius,eigen}``, ``protocol.{n_directions,bvalue,n_b0,sigma}``,
    ``region.<i>.{name,shape,center,radii,inner,eigenvalues,direction,s0}`` and
    ``lesion.{center,radius,shape,eigenvalues,direction,scale,region}``.

    Without any ``region.*`` keys the built-in six-region layout is used.
    Setting ``lesion.scale`` without ``lesion.eigenvalues`` gives a scaling lesion.
    """
    known = {"dims", "voxel_size", "seed", "n_phantoms", "split"}
    for key in kv:
        head = key.split(".", 1)[0]
        if key not in known and head not in ("jitter", "protocol", "region", "lesion"):
            raise ConfigError(f"unknown spec key {key!r}")
    try:
        dims = ints(kv["dims"], 3) if "dims" in kv else (48, 48, 32)
        seed = int(kv.get("seed", 0))
        region_ids = sorted({int(k.split(".")[1]) for k in kv if k.startswith("region.")})
        if region_ids:
            if region_ids != list(range(len(region_ids))):
                raise ConfigError("region indices must run 0, 1, 2, ... without gaps")
            regions = tuple(_region_from_kv(kv, i) for i in region_ids)
        else:
            regions = default_spec(dims).regions
        base = PhantomSpec(
            dims, regions,
            floats(kv["voxel_size"], 3) if "voxel_size" in kv else (2.0, 2.0, 2.0),
            seed,
        )
        protocol = default_protocol(
            int(kv.get("protocol.n_directions", 30)),
            float(kv.get("protocol.bvalue", 1000.0)),
            int(kv.get("protocol.n_b0", 5)),
            float(kv.get("protocol.sigma", 0.02)),
        )
        jd = Jitter()
        jitter = Jitter(*(float(kv.get(f"jitter.{k}", getattr(jd, k))) for k in ("center", "radius", "eigen")))
        lesion = {}
        if "lesion.center" in kv:
            lesion["lesion_center"] = floats(kv["lesion.center"], 3)
        if "lesion.radius" in kv:
            lesion["lesion_radius"] = float(kv["lesion.radius"])
        if "lesion.shape" in kv:
            lesion["lesion_shape"] = kv["lesion.shape"]
        if "lesion.direction" in kv:
            lesion["lesion_direction"] = floats(kv["lesion.direction"], 3)
        if "lesion.region" in kv:
            lesion["lesion_region"] = kv["lesion.region"]
        if "lesion.eigenvalues" in kv:
            lesion["lesion_eigenvalues"] = floats(kv["lesion.eigenvalues"], 3)
        elif "lesion.scale" in kv:
            lesion["lesion_eigenvalues"] = None
            lesion["lesion_scale"] = float(kv["lesion.scale"])
        spec = RunSpec(
            base, protocol,
            n_phantoms=int(kv.get("n_phantoms", 10)),
            split=floats(kv["split"], 3) if "split" in kv else (0.6, 0.2, 0.2),
            jitter=jitter,
            **lesion,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if int((spec.protocol.bvals > 0).sum()) < 6:
        raise ConfigError("the tensor fit needs at least 6 diffusion directions")
    if spec.n_phantoms < 3:
        raise ConfigError("n_phantoms must be at least 3")
    if spec.lesion_shape not in ("sphere", "box"):
        raise ConfigError(f"unknown lesion shape {spec.lesion_shape!r}")
    return spec


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def run_spec_to_kv(spec: RunSpec) -> dict[str, str]:
    """Inverse of :func:`run_spec_from_kv` (regions always written out)."""
    b = spec.base
    nb0 = int((spec.protocol.bvals == 0).sum())
    dw = spec.protocol.bvals[spec.protocol.bvals > 0]
    out = {
        "dims": _fmt(b.dims),
        "voxel_size": _fmt(tuple(float(v) for v in b.voxel_size_mm)),
        "seed": str(b.seed),
        "n_phantoms": str(spec.n_phantoms),
        "split": _fmt(tuple(float(v) for v in spec.split)),
        "jitter.center": _fmt(spec.jitter.center),
        "jitter.radius": _fmt(spec.jitter.radius),
        "jitter.eigen": _fmt(spec.jitter.eigen),
        "protocol.n_directions": str(dw.size),
        "protocol.bvalue": _fmt(float(dw[0]) if dw.size else 0.0),
        "protocol.n_b0": str(nb0),
        "protocol.sigma": _fmt(float(spec.protocol.sigma)),
    }
    for i, r in enumerate(b.regions):
        for key in _REGION_FIELDS:
            v = getattr(r, key)
            out[f"region.{i}.{key}"] = _fmt(tuple(float(x) for x in v) if isinstance(v, tuple) else v)
    out["lesion.radius"] = _fmt(float(spec.lesion_radius))
    out["lesion.shape"] = spec.lesion_shape
    out["lesion.region"] = spec.lesion_region
    out["lesion.direction"] = _fmt(tuple(float(x) for x in spec.lesion_direction))
    if spec.lesion_center is not None:
        out["lesion.center"] = _fmt(tuple(float(x) for x in spec.lesion_center))
    if spec.lesion_eigenvalues is not None:
        out["lesion.eigenvalues"] = _fmt(tuple(float(x) for x in spec.lesion_eigenvalues))
    else:
        out["lesion.scale"] = _fmt(float(spec.lesion_scale))
    return out
