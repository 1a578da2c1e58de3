"""Command-line interface.

Settings are resolved in this order, later wins:

1. built-in defaults,
2. the JSON config file (``--config``, else ``$GUIDEDSR_CONFIG``), one section per command,
3. command-line flags.

The resolved settings are written next to every output as ``<output>.config.json``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .cascade import IbpConfig, cascade_super_resolve, plan_stages
from .data import Volume
from .degradation import DegradationSpec, degrade, format_kernel
from .errors import ConfigurationError, DataError, GuidedSRError
from .experiment import ExperimentConfig, format_report, metrics_csv, run_experiment
from .fileio import read_volume, write_volume
from .metrics import evaluate
from .model import GrdConfig, build_network, load_network, save_network
from .phantom import PhantomSpec, generate_phantom_pair
from .training import (
    GUIDED_REGIMES, REGIMES, AugmentationSpec, TrainConfig, make_external_unsupervised_pairs,
    make_internal_pairs, make_supervised_pairs, train, write_loss_csv,
)

log = logging.getLogger("guidedsr")

CONFIG_ENV = "GUIDEDSR_CONFIG"

DEFAULTS = {
    "phantom": {"seed": 0, "num_structures": None, "texture_amplitude": 0.05, "extents": [128, 128, 32],
                "spacing": [1.0, 1.0, 1.0]},
    "degrade": {"scale": 2.0},
    "train": {"regime": "external_guided", "scale": 2.0, "stages": 3, "lam": 2.0, "seed": 0,
              "slices": None, "checkpoint_every": 50,
              "grd": asdict(GrdConfig()), "train": asdict(TrainConfig()),
              "augmentation": asdict(AugmentationSpec.right_angles_only())},
    "sr": {"scale": 2.0, "stages": 3, "lam": 2.0, "ibp": asdict(IbpConfig())},
    "eval": {"method": "sr", "scale": 2.0, "dynamic_range": None, "border": 0},
    "experiment": ExperimentConfig().to_dict(),
}


# --- plumbing ---------------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str], section: str) -> dict:
    """Defaults for ``section`` merged with that section of the config file."""
    path = path or os.environ.get(CONFIG_ENV)
    settings = copy.deepcopy(DEFAULTS[section])
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        # a saved effective config holds one section at the top level
        file_section = data.get(section, data if data.get("command") == section else {})
        file_section = {k: v for k, v in file_section.items() if k != "command"}
        unknown = set(file_section) - set(settings)
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}] section: {sorted(unknown)}")
        settings = _merge(settings, file_section)
    return settings


def _apply_flags(settings: dict, args: argparse.Namespace, keys) -> dict:
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = list(value) if isinstance(value, tuple) else value
    return settings


def _claim(paths, force: bool) -> None:
    """Refuse to overwrite existing outputs unless ``--force``."""
    for p in paths:
        if Path(p).exists() and not force:
            raise ConfigurationError(f"{p} exists; pass --force to overwrite")


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_effective_config(output: Path, command: str, settings: dict) -> Path:
    output = Path(output)
    target = output / "config.json" if output.is_dir() else output.with_name(output.name + ".config.json")
    _atomic_write_text(target, json.dumps({"command": command, **settings}, indent=2, sort_keys=True,
                                          default=_json_default))
    return target


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _read(path) -> Volume:
    try:
        return read_volume(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing input {exc.filename}") from exc


def _volume_paths(base: Path) -> list[Path]:
    base = Path(base)
    return [base.with_suffix(".json"), base.with_suffix(".raw")]


def _slices(volume: Volume, indices) -> list[int]:
    if indices is None:
        return list(range(volume.depth))
    bad = [k for k in indices if not 0 <= k < volume.depth]
    if bad:
        raise ConfigurationError(f"slice indices {bad} outside volume depth {volume.depth}")
    return list(indices)


# --- commands ---------------------------------------------------------------

def cmd_phantom(args) -> int:
    settings = _apply_flags(load_config(args.config, "phantom"), args,
                            ["seed", "num_structures", "texture_amplitude", "extents"])
    spec = PhantomSpec(seed=settings["seed"], num_structures=settings["num_structures"],
                       texture_amplitude=settings["texture_amplitude"], extents=tuple(settings["extents"]),
                       spacing=tuple(settings["spacing"]))
    spec.validate()
    out = Path(args.out)
    outputs = [*_volume_paths(out / "modality_a"), *_volume_paths(out / "modality_b"), out / "manifest.json"]
    _claim(outputs, args.force)
    a, b = generate_phantom_pair(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "modality_a", a)
    write_volume(out / "modality_b", b)
    manifest = {"seeds": [spec.seed], "spec": asdict(spec), "volumes": {"a": "modality_a.json",
                                                                        "b": "modality_b.json"},
                "num_structures": a.metadata["num_structures"]}
    _atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, default=_json_default))
    _write_effective_config(out, "phantom", settings)
    print(f"wrote {out / 'modality_a.json'} and {out / 'modality_b.json'}")
    return 0


def cmd_degrade(args) -> int:
    settings = _apply_flags(load_config(args.config, "degrade"), args, ["scale"])
    spec = DegradationSpec.for_test(float(settings["scale"]))
    out = Path(args.out).with_suffix(".json")
    _claim(_volume_paths(out) + ([Path(args.dump_kernel)] if args.dump_kernel else []), args.force)
    vol = _read(args.input)
    low = np.stack([degrade(vol.voxels[k].astype(np.float64), spec) for k in range(vol.depth)])
    meta = dict(vol.metadata, scale_factor=spec.scale_factor, sigma=spec.sigma, kernel_radius=spec.kernel_radius,
                source=str(args.input))
    s = spec.scale_factor
    spacing = (vol.spacing[0] * s, vol.spacing[1] * s, vol.spacing[2])
    write_volume(out, Volume(low, spacing, meta))
    if args.dump_kernel:
        _atomic_write_text(Path(args.dump_kernel), format_kernel(spec.kernel))
    _write_effective_config(out, "degrade", settings)
    w, h, d = vol.extents
    print(f"degraded {w}x{h}x{d} -> {low.shape[2]}x{low.shape[1]}x{low.shape[0]} "
          f"(s={s:g}, sigma={spec.sigma:.5f})")
    return 0


def _training_pairs(settings: dict, args) -> list:
    regime = settings["regime"]
    scale, stages, lam = float(settings["scale"]), int(settings["stages"]), float(settings["lam"])
    stage_spec = DegradationSpec.for_cascade_stage(scale ** (1.0 / stages), lam)
    aug = AugmentationSpec(**settings["augmentation"])
    guided = regime in GUIDED_REGIMES
    if guided and not args.guides:
        raise ConfigurationError(f"regime {regime} needs --guides")
    if not args.inputs:
        raise ConfigurationError("need at least one --inputs volume")
    inputs = [_read(p) for p in args.inputs]
    guides = [_read(p) for p in args.guides] if guided else None
    if guided and len(guides) != len(inputs):
        raise ConfigurationError("--guides must list one volume per --inputs volume")
    images, guide_images = [], []
    for i, vol in enumerate(inputs):
        for k in _slices(vol, settings["slices"]):
            images.append(vol.voxels[k].astype(np.float64))
            if guided:
                guide_images.append(guides[i].voxels[k].astype(np.float64))
    gl = guide_images if guided else None
    if regime.startswith("external"):
        return make_external_unsupervised_pairs(images, gl, stage_spec, scale, aug)
    if regime.startswith("supervised"):
        return make_supervised_pairs(images, gl, stage_spec, aug)
    pairs = []
    for i, img in enumerate(images):
        pairs += make_internal_pairs(img, stage_spec, aug, gl[i] if guided else None, scale)
    return pairs


def cmd_train(args) -> int:
    settings = load_config(args.config, "train")
    settings = _apply_flags(settings, args, ["regime", "scale", "stages", "seed", "slices", "checkpoint_every"])
    if args.max_steps is not None:
        settings["train"]["max_steps"] = args.max_steps
    if settings["regime"] not in REGIMES:
        raise ConfigurationError(f"unknown regime {settings['regime']!r}; choose from {sorted(REGIMES)}")
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    _claim([out, loss_csv], args.force)
    tc = TrainConfig(**settings["train"])
    tc.validate()
    grd = GrdConfig(**settings["grd"])
    if settings["regime"] not in GUIDED_REGIMES:
        grd = grd.unguided()
    elif not grd.guided:
        raise ConfigurationError(f"regime {settings['regime']} needs grd.guide_channels >= 1")
    pairs = _training_pairs(settings, args)
    net = build_network(grd, seed=int(settings["seed"]))
    stage_factor = float(settings["scale"]) ** (1.0 / int(settings["stages"]))
    net.stage_factor = stage_factor
    every = int(settings["checkpoint_every"] or 0)
    meta = {"regime": settings["regime"], "stage_factor": stage_factor}

    def checkpoint(step, n, history):
        # the model file and the loss CSV always describe the same completed step
        if every and step % every == 0:
            save_network(out, n, dict(meta, step=step))
            write_loss_csv(loss_csv, history)

    result = train(net, pairs, tc, callback=checkpoint)
    net.stage_factor = stage_factor
    save_network(out, net, dict(meta, step=len(result.history), stop_reason=result.stop_reason))
    write_loss_csv(loss_csv, result.history)
    _write_effective_config(out, "train", settings)
    print(f"trained {settings['regime']} on {len(pairs)} pairs for {len(result.history)} steps "
          f"({result.stop_reason}); final loss {result.history[-1][2]:.6g}")
    return 0


def cmd_sr(args) -> int:
    settings = _apply_flags(load_config(args.config, "sr"), args, ["scale", "stages"])
    if args.no_ibp:
        settings["ibp"]["max_iterations"] = 0
    ibp = IbpConfig(**settings["ibp"])
    out = Path(args.out).with_suffix(".json")
    ibp_csv = Path(args.ibp_csv) if args.ibp_csv else out.with_name(out.stem + ".ibp.csv")
    stage_dir = Path(args.dump_stages) if args.dump_stages else None
    stage_paths = []
    if stage_dir is not None:
        stage_paths = [p for k in range(int(settings["stages"]))
                       for p in _volume_paths(stage_dir / f"stage{k + 1}")]
    _claim(_volume_paths(out) + [ibp_csv] + stage_paths, args.force)
    net = None
    if args.model:
        try:
            net = load_network(args.model)
        except FileNotFoundError as exc:
            raise DataError(f"missing model {args.model}") from exc
    lr = _read(args.input)
    guide = _read(args.guide) if args.guide else None
    if net is not None and net.config.guided and guide is None:
        raise ConfigurationError("the model is guided; pass --guide")
    w, h, d = lr.extents
    plan = plan_stages(float(settings["scale"]), int(settings["stages"]), (h, w), float(settings["lam"]))
    if guide is not None and guide.depth != d:
        raise DataError(f"guide depth {guide.depth} != input depth {d}")
    finals, stages = [], [[] for _ in range(plan.num_stages)]
    rows = []
    for k in range(d):
        g = guide.voxels[k].astype(np.float64) if guide is not None else None
        res = cascade_super_resolve(net, lr.voxels[k].astype(np.float64), g, plan, ibp)
        finals.append(res.image)
        for i, img in enumerate(res.stages):
            stages[i].append(img)
        stage_ids = range(1, plan.num_stages + 1) if ibp.mode == "every_stage" else [plan.num_stages]
        for stage, ibp_res in zip(stage_ids, res.ibp):
            for t, r in enumerate(ibp_res.residuals):
                rows.append([k, stage, t, repr(r), int(t == ibp_res.best_iteration)])
    s = plan.total_scale
    meta = dict(lr.metadata, sr_scale=s, stages=plan.num_stages, ibp=asdict(ibp),
                model=str(args.model) if args.model else "bicubic")
    spacing = (lr.spacing[0] / s, lr.spacing[1] / s, lr.spacing[2])
    write_volume(out, Volume(np.stack(finals), spacing, meta))
    if stage_dir is not None:
        stage_dir.mkdir(parents=True, exist_ok=True)
        for i, imgs in enumerate(stages):
            f = plan.cumulative_scale(i + 1)
            write_volume(stage_dir / f"stage{i + 1}", Volume(np.stack(imgs), (lr.spacing[0] / f, lr.spacing[1] / f,
                                                                               lr.spacing[2]),
                                                             dict(meta, stage=i + 1, cumulative_scale=f)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["slice", "stage", "iteration", "residual", "chosen"])
    writer.writerows(rows)
    _atomic_write_text(ibp_csv, buf.getvalue())
    _write_effective_config(out, "sr", settings)
    fh, fw = plan.stage_shapes[-1]
    print(f"super-resolved {w}x{h}x{d} -> {fw}x{fh}x{d} in {plan.num_stages} stage(s)")
    return 0


def _fmt(value: float, digits: int) -> str:
    return "inf" if math.isinf(value) else f"{value:.{digits}f}"


def cmd_eval(args) -> int:
    settings = _apply_flags(load_config(args.config, "eval"), args, ["method", "scale", "dynamic_range", "border"])
    out = Path(args.out)
    table = Path(args.table) if args.table else out.with_suffix(".table.txt")
    _claim([out, table], args.force)
    sr, truth = _read(args.sr), _read(args.truth)
    if sr.voxels.shape != truth.voxels.shape:
        raise DataError(f"extent mismatch: sr {sr.extents} vs truth {truth.extents}")
    # one dynamic range for the whole volume so slices are comparable
    dr = settings["dynamic_range"] or float(truth.voxels.max())
    if not dr > 0:
        raise DataError("ground truth has no positive values; pass --dynamic-range")
    rows = []
    for k in range(sr.depth):
        rep = evaluate(sr.voxels[k], truth.voxels[k], dr, int(settings["border"]))
        rows.append((k, rep.psnr_db, rep.ssim))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["slice", "psnr_db", "ssim"])
    for k, p, s in rows:
        writer.writerow([k, repr(p), repr(s)])
    writer.writerow(["mean", repr(mean_psnr), repr(mean_ssim)])
    _atomic_write_text(out, buf.getvalue())
    scale = f"x{settings['scale']:g}"
    text = (f"{'Method':<20}{'Scale':>7}{'PSNR':>10}{'SSIM':>9}\n"
            f"{settings['method']:<20}{scale:>7}{_fmt(mean_psnr, 2):>10}{_fmt(mean_ssim, 4):>9}\n")
    _atomic_write_text(table, text)
    _write_effective_config(out, "eval", settings)
    print(text, end="")
    return 0


def cmd_experiment(args) -> int:
    settings = _apply_flags(load_config(args.config, "experiment"), args, ["seeds", "regimes"])
    if args.max_steps is not None:
        settings["train"]["max_steps"] = args.max_steps
    cfg = ExperimentConfig.from_dict(settings)
    cfg.validate()
    out = Path(args.out)
    outputs = [out / n for n in ("metrics.csv", "report.txt", "summary.json")]
    _claim(outputs, args.force)
    out.mkdir(parents=True, exist_ok=True)
    model_dir = None
    if args.save_models:
        model_dir = out / "models"
        model_dir.mkdir(exist_ok=True)
    report = run_experiment(cfg, jobs=args.jobs, model_dir=model_dir)
    _atomic_write_text(out / "metrics.csv", metrics_csv(report.rows))
    text = format_report(report, cfg.scale)
    _atomic_write_text(out / "report.txt", text)
    summary = {
        "means": {r: {"psnr_db": p, "ssim": s} for r, (p, s) in report.means.items()},
        "checks": [asdict(c) for c in report.checks],
        "steps": {f"{r}/seed{s}": v for (r, s), v in report.steps.items()},
        "seconds": report.seconds,
    }
    _atomic_write_text(out / "summary.json", json.dumps(summary, indent=2))
    _write_effective_config(out, "experiment", cfg.to_dict())
    print(text, end="")
    return 0


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedsr", description="Guided single-image super-resolution.")
    parser.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("phantom", help="generate a registered two-modality phantom pair")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-structures", dest="num_structures", type=int)
    p.add_argument("--texture-amplitude", dest="texture_amplitude", type=float)
    p.add_argument("--extents", type=int, nargs=3, metavar=("W", "H", "D"))
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("degrade", help="blur and down-sample a volume slice-wise")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--dump-kernel", dest="dump_kernel", help="write the blur kernel as text")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a network for one regime")
    common(p)
    p.add_argument("--regime", choices=sorted(REGIMES))
    p.add_argument("--inputs", nargs="+", default=[],
                   help="target-modality volumes (LR for external/internal, HR for supervised)")
    p.add_argument("--guides", nargs="+", default=[], help="HR guide volumes, one per input")
    p.add_argument("--slices", type=int, nargs="+", help="slice indices to use (default: all)")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--scale", type=float)
    p.add_argument("--stages", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="cascade super-resolution of an LR volume")
    common(p)
    p.add_argument("--model", help="model file (omit for plain bicubic)")
    p.add_argument("--input", required=True)
    p.add_argument("--guide", help="HR guide volume")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--stages", type=int)
    p.add_argument("--no-ibp", dest="no_ibp", action="store_true", help="skip back-projection")
    p.add_argument("--dump-stages", dest="dump_stages", metavar="DIR", help="write every stage's estimate")
    p.add_argument("--ibp-csv", dest="ibp_csv", help="back-projection residual trace")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM of an SR volume against ground truth")
    common(p)
    p.add_argument("--sr", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--table", help="text table (default: <out>.table.txt)")
    p.add_argument("--method")
    p.add_argument("--scale", type=float)
    p.add_argument("--dynamic-range", dest="dynamic_range", type=float)
    p.add_argument("--border", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run the regime comparison matrix")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--regimes", nargs="+")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--save-models", dest="save_models", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "config"):
        args.config = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GuidedSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
