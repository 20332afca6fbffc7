"""Command-line pipeline: phantom -> train -> predict -> fuse -> eval / ood / render.

Every stage reads and writes plain files (EVOL volumes, ELBL label maps,
EPRM checkpoints, key-value text), so stages can be run and cached one at a
time.  ``e2e`` runs all of them and writes ``manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, RunSpec, format_kv, parse_kv, read_kv, run_spec_from_kv, run_spec_to_kv,
                     train_config_from_kv, train_config_to_kv)
from .ensemble import CRITERIA, SubnetOutputs, fuse, minimum_uncertainty
from .evaluation import ood_report, region_metrics, render_heatmap
from .evidential import EvidenceField
from .phantom import build_sample, jittered_specs, make_dataset
from .subnet import CHANNEL_NAMES, load_checkpoint, predict_subnet, save_checkpoint, train
from .volume import (DimensionError, FormatError, LabelMap, Volume, VolumeIOError, load_labelmap, load_volume,
                     mask_to_labelmap, save_labelmap, save_volume)

logger = logging.getLogger("evenet")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DIMS = 5
EXIT_FORMAT = 6

EXIT_HELP = """exit codes:
  0  success
  1  other runtime error
  2  usage error (bad flags, unknown subcommand or criterion)
  3  missing input file
  4  malformed or invalid configuration
  5  dimension or class-count mismatch between inputs
  6  malformed EVOL / ELBL / EPRM file
"""

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------- helpers

def _mkdir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    return path


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _load_pair(d: Path) -> tuple[Volume, LabelMap]:
    return load_volume(_require(d / "inputs.evol")), load_labelmap(_require(d / "labels.elbl"))


def _load_split(dataset: Path, split: str) -> list[tuple[Volume, LabelMap]]:
    root = dataset / split
    if not root.is_dir():
        return []
    return [_load_pair(d) for d in sorted(root.iterdir()) if d.is_dir()]


def _load_run_spec(path, seed: int | None) -> RunSpec:
    kv = read_kv(_require(path)) if path is not None else {}
    if seed is not None:
        kv["seed"] = str(seed)
    return run_spec_from_kv(kv)


def _load_train_config(path, seed: int | None):
    kv = read_kv(_require(path)) if path is not None else {}
    if seed is not None:
        kv["seed"] = str(seed)
    return train_config_from_kv(kv)


def _limit_threads(n: int):
    """Context manager pinning BLAS / OpenMP pools to ``n`` threads."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


# ---------------------------------------------------------------- stages

def stage_phantom(spec: RunSpec, out: Path) -> None:
    """Simulate the dataset into ``out/{train,val,test}/NNN`` plus ``out/ood``.

    The OOD phantom is the first held-out test phantom with the lesion added;
    its noise seed is unchanged so it pairs voxel-for-voxel with ``test/000``.
    """
    out = _mkdir(out)
    specs = jittered_specs(spec.base, spec.n_phantoms, spec.seed, spec.jitter)
    ds = make_dataset(specs, spec.protocol, spec.split, spec.seed)
    for split in SPLITS:
        for i, sample in enumerate(getattr(ds, split)):
            d = _mkdir(out / split / f"{i:03d}")
            save_volume(sample.inputs, d / "inputs.evol")
            save_labelmap(sample.labelmap, d / "labels.elbl")
    held_out = ds.test[0] if ds.test else ds.val[0]
    ood = build_sample(held_out.spec, spec.protocol, spec.lesion_for(held_out.spec))
    d = _mkdir(out / "ood")
    save_volume(ood.inputs, d / "inputs.evol")
    save_labelmap(ood.labelmap, d / "labels.elbl")
    save_labelmap(mask_to_labelmap(ood.lesion_mask, "lesion"), d / "lesion.elbl")
    _write_text(out / "spec.txt", format_kv(run_spec_to_kv(spec)))


def _train_one(args) -> str:
    dataset, channel, tcfg, scfg, out = args
    with _limit_threads(1):
        train_set = _load_split(Path(dataset), "train")
        val_set = _load_split(Path(dataset), "val")
        if not train_set:
            raise FileNotFoundError(f"{dataset}/train: no training phantoms")
        names = train_set[0][1].names
        scfg = replace(scfg, num_classes=len(names))
        params, record = train(train_set, channel, tcfg, scfg, val_set or None)
    out = _mkdir(out)
    save_checkpoint(out / f"{channel}.eprm", params, scfg, channel, names)
    _write_text(out / f"{channel}.record.txt", record.to_text())
    return channel


def stage_train(dataset: Path, channels, tcfg, scfg, out: Path, threads: int = 1) -> None:
    jobs = [(str(dataset), ch, tcfg, scfg, str(out)) for ch in channels]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            for ch in pool.map(_train_one, jobs):
                logger.info("trained %s", ch)
    else:
        for job in jobs:
            logger.info("trained %s", _train_one(job))


def stage_predict(checkpoint: Path, volume_path: Path, out: Path) -> None:
    params, _, channel, names = load_checkpoint(_require(checkpoint))
    vol = load_volume(_require(volume_path))
    with _limit_threads(1):
        pred = predict_subnet(params, vol, channel, names)
    out = _mkdir(out)
    save_volume(pred.evidence.to_volume(vol.voxel_size_mm), out / "evidence.evol")
    save_labelmap(pred.labelmap, out / "labels.elbl")
    save_volume(Volume(pred.uncertainty, vol.voxel_size_mm), out / "uncertainty.evol")
    meta = {"subnet_id": pred.evidence.subnet_id, "channel": channel}
    meta.update({f"class.{i}": n for i, n in enumerate(names)})
    _write_text(out / "meta.txt", format_kv(meta))


def _load_prediction(d: Path) -> tuple[EvidenceField, tuple[str, ...], tuple[float, ...]]:
    meta = parse_kv(_require(d / "meta.txt").read_text(encoding="utf-8"))
    vol = load_volume(_require(d / "evidence.evol"))
    names = tuple(meta[f"class.{i}"] for i in range(vol.channels) if f"class.{i}" in meta)
    if len(names) != vol.channels:
        raise ConfigError(f"{d}/meta.txt: expected {vol.channels} class names")
    return EvidenceField.from_volume(vol, meta.get("subnet_id", d.name)), names, vol.voxel_size_mm


def stage_fuse(dirs, criterion: str, out: Path):
    loaded = [_load_prediction(Path(d)) for d in dirs]
    names = loaded[0][1]
    for _, other, _ in loaded[1:]:
        if other != names:
            raise DimensionError("subnet outputs disagree on class names")
    outs = SubnetOutputs(tuple(f for f, _, _ in loaded))
    res = fuse(outs, criterion, names)
    vs = loaded[0][2]
    out = _mkdir(out)
    save_labelmap(res.labelmap, out / "labels.elbl")
    save_volume(res.uncertainty_volume(vs), out / "uncertainty.evol")
    save_labelmap(res.chosen_labelmap(), out / "chosen.elbl")
    if criterion == "evidence":
        save_volume(Volume(minimum_uncertainty(outs), vs), out / "min_uncertainty.evol")
    meta = {"criterion": criterion}
    meta.update({f"subnet.{i}": s for i, s in enumerate(res.subnet_ids)})
    meta.update({f"class.{i}": n for i, n in enumerate(names)})
    _write_text(out / "meta.txt", format_kv(meta))
    return res


def _mask_from(path) -> np.ndarray:
    return load_labelmap(_require(path)).labels > 0


def stage_eval(pred: Path, gt: Path, out: Path, include_background=False, voxel_weighted=False,
               outside=None):
    p, g = load_labelmap(_require(pred)), load_labelmap(_require(gt))
    mask = None if outside is None else ~_mask_from(outside)
    rep = region_metrics(p, g, include_background, voxel_weighted, mask)
    _write_text(out, rep.to_text())
    return rep


def stage_ood(uncertainty: Path, lesion: Path, gt: Path, out: Path):
    rep = ood_report(load_volume(_require(uncertainty)), _mask_from(lesion), load_labelmap(_require(gt)))
    _write_text(out, rep.to_text())
    return rep


def _load_any(path):
    path = _require(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"EVOL":
        return load_volume(path)
    if magic == b"ELBL":
        return load_labelmap(path)
    raise FormatError(f"{path}: neither an EVOL volume nor an ELBL label map")


# ---------------------------------------------------------------- e2e

def _hash_tree(root: Path, skip=("manifest.json",)) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def stage_e2e(spec: RunSpec, tcfg, scfg, out: Path, threads: int = 1, criterion: str = "evidence") -> dict:
    """Full pipeline; returns the summary dict also written to ``eval_report.txt``."""
    out = _mkdir(out)
    started = _now()
    t0 = time.perf_counter()
    data = out / "dataset"
    stage_phantom(spec, data)
    logger.info("phantoms done (%.1fs)", time.perf_counter() - t0)
    models = out / "models"
    stage_train(data, CHANNEL_NAMES, tcfg, scfg, models, threads)
    logger.info("training done (%.1fs)", time.perf_counter() - t0)

    def predict_all(src: Path, dst: Path) -> list[Path]:
        dirs = []
        for ch in CHANNEL_NAMES:
            stage_predict(models / f"{ch}.eprm", src / "inputs.evol", dst / "subnets" / ch)
            dirs.append(dst / "subnets" / ch)
        return dirs

    summary: dict[str, float] = {}
    per_crit = {c: [] for c in CRITERIA}
    test_dirs = sorted(d for d in (data / "test").iterdir() if d.is_dir())
    for d in test_dirs:
        dst = out / "test" / d.name
        dirs = predict_all(d, dst)
        for crit in CRITERIA:
            stage_fuse(dirs, crit, dst / f"fused_{crit}")
            rep = stage_eval(dst / f"fused_{crit}" / "labels.elbl", d / "labels.elbl", dst / f"eval_{crit}.txt")
            per_crit[crit].append(rep.mean_dice)
        for ch, sd in zip(CHANNEL_NAMES, dirs):
            rep = stage_eval(sd / "labels.elbl", d / "labels.elbl", sd / "eval.txt")
            summary.setdefault(f"subnet.{ch}.mean_dice", 0.0)
            summary[f"subnet.{ch}.mean_dice"] += rep.mean_dice / len(test_dirs)
    summary["mean_dice"] = float(np.mean(per_crit[criterion]))
    for crit in CRITERIA:
        summary[f"{crit}.mean_dice"] = float(np.mean(per_crit[crit]))

    # OOD: lesion phantom against the same held-out phantom without the lesion
    ood_src = data / "ood"
    ood_dst = out / "ood"
    fused = ood_dst / "fused"
    stage_fuse(predict_all(ood_src, ood_dst), criterion, fused)
    orep = stage_ood(fused / "uncertainty.evol", ood_src / "lesion.elbl", ood_src / "labels.elbl",
                     ood_dst / "ood_report.txt")
    lesion = ood_src / "lesion.elbl"
    clean = out / "test" / test_dirs[0].name / f"fused_{criterion}" / "labels.elbl"
    d_clean = stage_eval(clean, ood_src / "labels.elbl", ood_dst / "eval_outside_clean.txt", outside=lesion)
    d_les = stage_eval(fused / "labels.elbl", ood_src / "labels.elbl", ood_dst / "eval_outside_lesion.txt",
                       outside=lesion)
    summary["ood.contrast_ratio"] = orep.contrast_ratio
    summary["ood.auroc"] = orep.auroc
    summary["ood.dice_outside_clean"] = d_clean.mean_dice
    summary["ood.dice_outside_lesion"] = d_les.mean_dice
    summary["ood.dice_degradation"] = d_clean.mean_dice - d_les.mean_dice

    z = int(np.argmax(_mask_from(lesion).sum(axis=(1, 2))))
    render_heatmap(load_volume(fused / "uncertainty.evol"), "z", z, ood_dst / "uncertainty.pgm")
    render_heatmap(load_labelmap(fused / "labels.elbl"), "z", z, ood_dst / "labels.ppm")

    _write_text(out / "eval_report.txt", "".join(f"{k} = {v!r}\n" for k, v in summary.items()))
    manifest = {
        "tool": "evenet",
        "version": __version__,
        "started": started,
        "finished": _now(),
        "seconds": round(time.perf_counter() - t0, 3),
        "seed": spec.seed,
        "threads": threads,
        "criterion": criterion,
        "spec": run_spec_to_kv(spec),
        "train_config": train_config_to_kv(tcfg, scfg),
        "out": str(out),
        "artifacts": _hash_tree(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("e2e done (%.1fs)", time.perf_counter() - t0)
    return summary


# ---------------------------------------------------------------- argparse

def _common(out_help: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the seed in the config files")
    p.add_argument("--threads", type=int, default=1, help="worker processes for training (default 1)")
    p.add_argument("--out", required=True, type=Path, help=out_help)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evenet",
        description="Evidential subnetworks over diffusion-tensor channels, fused by evidence.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_, out_help):
        return sub.add_parser(name, help=help_, parents=[_common(out_help)], epilog=EXIT_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("phantom", "simulate the phantom dataset", "dataset directory")
    p.add_argument("spec", nargs="?", type=Path, help="key-value spec file (default: built-in toy spec)")

    p = add("train", "train one subnetwork", "directory for <channel>.eprm and <channel>.record.txt")
    p.add_argument("dataset", type=Path, help="dataset directory written by 'phantom'")
    p.add_argument("--channel", required=True, choices=CHANNEL_NAMES)
    p.add_argument("--config", type=Path, help="key-value training config")

    p = add("predict", "run one subnetwork over a volume", "prediction directory")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("volume", type=Path, help="5-channel input volume (EVOL)")

    p = add("fuse", "fuse subnetwork predictions", "fused output directory")
    p.add_argument("predictions", nargs="+", type=Path, help="directories written by 'predict'")
    p.add_argument("--criterion", choices=CRITERIA, default="evidence")

    p = add("eval", "region overlap metrics", "report file")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--voxel-weighted", action="store_true", help="weight the means by region size")
    p.add_argument("--outside", type=Path, help="mask (ELBL) of voxels to leave out")

    p = add("ood", "uncertainty inside a lesion vs normal tissue", "report file")
    p.add_argument("uncertainty", type=Path)
    p.add_argument("lesion", type=Path, help="lesion mask (ELBL, non-zero = lesion)")
    p.add_argument("gt", type=Path)

    p = add("render", "write one slice as PGM (volume) or PPM (label map)", "image file")
    p.add_argument("input", type=Path)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--channel", type=int, default=0)

    p = add("e2e", "run the whole pipeline", "run directory")
    p.add_argument("spec", nargs="?", type=Path, help="key-value spec file (default: built-in toy spec)")
    p.add_argument("--config", type=Path, help="key-value training config")
    p.add_argument("--manifest", type=Path, help="replay the configuration recorded in a manifest.json")
    p.add_argument("--criterion", choices=CRITERIA, default="evidence")
    return parser


def _run(args) -> None:
    cmd = args.command
    if cmd == "phantom":
        stage_phantom(_load_run_spec(args.spec, args.seed), args.out)
    elif cmd == "train":
        tcfg, scfg = _load_train_config(args.config, args.seed)
        stage_train(_require(args.dataset), [args.channel], tcfg, scfg, args.out)
    elif cmd == "predict":
        stage_predict(args.checkpoint, args.volume, args.out)
    elif cmd == "fuse":
        stage_fuse(args.predictions, args.criterion, args.out)
    elif cmd == "eval":
        rep = stage_eval(args.pred, args.gt, args.out, args.include_background, args.voxel_weighted, args.outside)
        print(f"mean_dice = {rep.mean_dice!r}")
    elif cmd == "ood":
        rep = stage_ood(args.uncertainty, args.lesion, args.gt, args.out)
        print(f"contrast_ratio = {rep.contrast_ratio!r}\nauroc = {rep.auroc!r}")
    elif cmd == "render":
        render_heatmap(_load_any(args.input), args.axis, args.index, args.out, args.channel)
    elif cmd == "e2e":
        if args.manifest is not None:
            if args.spec is not None or args.config is not None:
                raise ConfigError("--manifest replaces the spec and --config arguments")
            try:
                man = json.loads(_require(args.manifest).read_text(encoding="utf-8"))
                spec_kv, train_kv = dict(man["spec"]), dict(man["train_config"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{args.manifest}: not a run manifest ({exc})") from exc
            if args.seed is not None:
                spec_kv["seed"] = train_kv["seed"] = str(args.seed)
            spec = run_spec_from_kv(spec_kv)
            tcfg, scfg = train_config_from_kv(train_kv)
        else:
            spec = _load_run_spec(args.spec, args.seed)
            tcfg, scfg = _load_train_config(args.config, args.seed)
        summary = stage_e2e(spec, tcfg, scfg, args.out, args.threads, args.criterion)
        print(f"mean_dice = {summary['mean_dice']!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _run(args)
    except FormatError as exc:
        return _fail(EXIT_FORMAT, "format error", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except DimensionError as exc:
        return _fail(EXIT_DIMS, "dimension mismatch", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing file", exc)
    except VolumeIOError as exc:
        if isinstance(exc.cause, FileNotFoundError):
            return _fail(EXIT_MISSING, "missing file", exc)
        return _fail(EXIT_ERROR, "I/O error", exc)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        return _fail(EXIT_ERROR, "error", exc)
    return EXIT_OK


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(f"evenet: {kind}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
