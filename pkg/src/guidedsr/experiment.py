"""Desk-scale comparison of training regimes on synthetic phantoms.

For every seed a fresh set of subjects is generated: one test subject and
``num_external`` external subjects. Modality ``b`` plays the target (T2-like)
and modality ``a`` the registered HR guide (T1-like). The observed LR target
is ``degrade(hr, for_test(s))``. Every learned regime trains one network at
the per-stage factor ``s**(1/r)`` and is evaluated through the cascade with
back-projection; ``bicubic`` is plain interpolation with no training.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .cascade import IbpConfig, cascade_super_resolve, plan_stages
from .degradation import DegradationSpec, degrade, upsample
from .errors import ConfigurationError
from .metrics import evaluate
from .model import GrdConfig, build_network, save_network
from .phantom import PhantomSpec, generate_phantom_pair
from .training import (
    GUIDED_REGIMES, REGIMES, AugmentationSpec, TrainConfig, make_external_unsupervised_pairs,
    make_internal_pairs, make_supervised_pairs, train,
)

log = logging.getLogger(__name__)

BASELINE = "bicubic"
METHODS = (BASELINE,) + tuple(REGIMES)

# (better, worse, required margin in dB)
ORDERING_CHECKS = (
    ("external_guided", BASELINE, 1.0),
    ("external_guided", "external_unguided", 0.0),
    ("external_unguided", "internal", 0.0),
)


@dataclass
class ExperimentConfig:
    regimes: tuple[str, ...] = (BASELINE, "external_unguided", "external_guided", "internal")
    seeds: tuple[int, ...] = (0, 1, 2)
    scale: float = 2.0
    stages: int = 3
    lam: float = 2.0
    extents: tuple[int, int, int] = (128, 128, 32)
    num_external: int = 4
    train_slices: tuple[int, ...] = (10, 13, 16, 19, 22)
    eval_slices: tuple[int, ...] = (16,)
    grd: GrdConfig = field(default_factory=GrdConfig)
    # a 10-step patience stops training after ~100 steps, long before either
    # network converges; the comparison uses a longer, uniform patience
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=4, patch_size=32, max_steps=2000,
                                                                   plateau_patience=100))
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.right_angles_only)
    ibp: IbpConfig = field(default_factory=IbpConfig)

    def validate(self) -> None:
        unknown = [r for r in self.regimes if r not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown regimes {unknown}; choose from {list(METHODS)}")
        if len(set(self.regimes)) != len(self.regimes):
            raise ConfigurationError("regimes must not repeat")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        depth = self.extents[2]
        for k in tuple(self.train_slices) + tuple(self.eval_slices):
            if not 0 <= k < depth:
                raise ConfigurationError(f"slice index {k} outside phantom depth {depth}")
        if self.num_external < 1:
            raise ConfigurationError("num_external must be >= 1")
        self.train.validate()
        plan_stages(self.scale, self.stages, self.extents[1::-1])

    @property
    def stage_factor(self) -> float:
        return self.scale ** (1.0 / self.stages)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("grd", "train", "augmentation", "ibp"):
            out[key] = asdict(out[key])
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        out["augmentation"] = {k: list(v) if isinstance(v, tuple) else v for k, v in out["augmentation"].items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown experiment keys: {sorted(extra)}")
        nested = {"grd": GrdConfig, "train": TrainConfig, "augmentation": AugmentationSpec, "ibp": IbpConfig}
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                try:
                    value = nested[key](**value)
                except TypeError as exc:
                    raise ConfigurationError(f"bad {key} section: {exc}") from exc
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class SeedData:
    """Everything one seed's regimes share (controlled comparison)."""

    seed: int
    test_hr: list[np.ndarray]         # target modality, eval slices
    test_lr: list[np.ndarray]
    test_guide: list[np.ndarray]      # guide modality at HR
    ext_hr: list[np.ndarray]
    ext_lr: list[np.ndarray]
    ext_guide: list[np.ndarray]


def subject_seeds(seed: int, num_external: int) -> tuple[int, list[int]]:
    base = 1000 * seed
    return base, [base + 1 + i for i in range(num_external)]


def build_seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    test_seed, ext_seeds = subject_seeds(seed, cfg.num_external)
    spec = DegradationSpec.for_test(cfg.scale)

    def subject(s):
        guide, target = generate_phantom_pair(PhantomSpec(seed=s, extents=tuple(cfg.extents)))
        return guide.voxels.astype(np.float64), target.voxels.astype(np.float64)

    guide, target = subject(test_seed)
    data = SeedData(seed, [], [], [], [], [], [])
    for k in cfg.eval_slices:
        data.test_hr.append(target[k])
        data.test_lr.append(degrade(target[k], spec))
        data.test_guide.append(guide[k])
    for s in ext_seeds:
        guide, target = subject(s)
        for k in cfg.train_slices:
            data.ext_hr.append(target[k])
            data.ext_lr.append(degrade(target[k], spec))
            data.ext_guide.append(guide[k])
    return data


def _augmentation(cfg: ExperimentConfig) -> AugmentationSpec:
    aug = cfg.augmentation
    # variants smaller than a training patch would shrink every batch
    return AugmentationSpec(aug.right_angle_rotations, aug.horizontal_flip, aug.extra_rotation_degrees,
                            aug.rescale_factors, max(aug.min_extent, cfg.train.patch_size))


def training_pairs(cfg: ExperimentConfig, regime: str, data: SeedData, slice_index: int = 0):
    stage_spec = DegradationSpec.for_cascade_stage(cfg.stage_factor, cfg.lam)
    aug = _augmentation(cfg)
    guided = regime in GUIDED_REGIMES
    if regime in ("external_guided", "external_unguided"):
        return make_external_unsupervised_pairs(data.ext_lr, data.ext_guide if guided else None, stage_spec,
                                                cfg.scale, aug)
    if regime in ("internal", "internal_guided"):
        return make_internal_pairs(data.test_lr[slice_index], stage_spec, aug,
                                   data.test_guide[slice_index] if guided else None, cfg.scale)
    if regime in ("supervised", "supervised_guided"):
        return make_supervised_pairs(data.ext_hr, data.ext_guide if guided else None, stage_spec, aug)
    raise ConfigurationError(f"regime {regime!r} does not train")


def _train_network(cfg: ExperimentConfig, regime: str, pairs, seed: int):
    grd = cfg.grd if regime in GUIDED_REGIMES else cfg.grd.unguided()
    net = build_network(grd, seed=seed)
    tc = TrainConfig(**{**asdict(cfg.train), "seed": cfg.train.seed + seed})
    result = train(net, pairs, tc)
    net.stage_factor = cfg.stage_factor
    return net, result


@dataclass
class RunResult:
    seed: int
    regime: str
    rows: list[dict]
    steps: list[int]
    seconds: float
    models: dict = field(default_factory=dict)


def run_one(cfg: ExperimentConfig, regime: str, seed: int, data: Optional[SeedData] = None,
            keep_models: bool = False) -> RunResult:
    """Train (unless baseline) and evaluate one regime for one seed."""
    t0 = time.perf_counter()
    data = data or build_seed_data(cfg, seed)
    plan = plan_stages(cfg.scale, cfg.stages, data.test_lr[0].shape, cfg.lam)
    rows, steps, models = [], [], {}
    shared = None
    if regime not in (BASELINE, "internal", "internal_guided"):
        shared, res = _train_network(cfg, regime, training_pairs(cfg, regime, data), seed)
        steps.append(len(res.history))
    for i, k in enumerate(cfg.eval_slices):
        if regime == BASELINE:
            estimate = upsample(data.test_lr[i], cfg.scale, out_shape=data.test_hr[i].shape)
        else:
            net = shared
            if net is None:
                net, res = _train_network(cfg, regime, training_pairs(cfg, regime, data, i), seed)
                steps.append(len(res.history))
            guide = data.test_guide[i] if regime in GUIDED_REGIMES else None
            estimate = cascade_super_resolve(net, data.test_lr[i], guide, plan, cfg.ibp).image
            if keep_models:
                models[k] = net
        rep = evaluate(estimate, data.test_hr[i])
        rows.append({"seed": seed, "regime": regime, "slice": k, "psnr_db": rep.psnr_db, "ssim": rep.ssim})
    return RunResult(seed, regime, rows, steps, time.perf_counter() - t0, models)


def _run_task(args):
    cfg, regime, seed = args
    return run_one(cfg, regime, seed)


@dataclass
class OrderingCheck:
    better: str
    worse: str
    margin_db: float
    mean_gap_db: float
    passed: bool
    seed_violations: list[int]


@dataclass
class ExperimentReport:
    rows: list[dict]
    means: dict            # regime -> (psnr, ssim)
    checks: list[OrderingCheck]
    steps: dict            # (regime, seed) -> steps trained
    seconds: float

    def ranked(self) -> list[tuple[str, float, float]]:
        return sorted(((r, p, s) for r, (p, s) in self.means.items()), key=lambda t: -t[1])


def ordering_checks(rows: list[dict]) -> list[OrderingCheck]:
    per_seed: dict = {}
    for row in rows:
        per_seed.setdefault((row["regime"], row["seed"]), []).append(row["psnr_db"])
    seeds = sorted({row["seed"] for row in rows})
    present = {row["regime"] for row in rows}
    checks = []
    for better, worse, margin in ORDERING_CHECKS:
        if better not in present or worse not in present:
            continue
        gaps = [np.mean(per_seed[(better, s)]) - np.mean(per_seed[(worse, s)]) for s in seeds]
        mean_gap = float(np.mean(gaps))
        violations = [s for s, g in zip(seeds, gaps) if not g > margin]
        checks.append(OrderingCheck(better, worse, margin, mean_gap, bool(mean_gap > margin), violations))
    return checks


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, model_dir: Optional[Path] = None) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    tasks = [(cfg, regime, seed) for seed in cfg.seeds for regime in cfg.regimes]
    results: list[RunResult] = []
    if jobs > 1 and model_dir is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        for seed in cfg.seeds:
            data = build_seed_data(cfg, seed)
            for regime in cfg.regimes:
                log.info("seed %d: %s", seed, regime)
                res = run_one(cfg, regime, seed, data, keep_models=model_dir is not None)
                log.info("seed %d: %s done in %.1fs, steps %s, PSNR %s", seed, regime, res.seconds, res.steps,
                         [round(r["psnr_db"], 3) for r in res.rows])
                if model_dir is not None:
                    for k, net in res.models.items():
                        save_network(Path(model_dir) / f"seed{seed}_{regime}_slice{k}.gsrp", net)
                    res.models = {}
                results.append(res)
    rows = [row for res in results for row in res.rows]
    means = {}
    for regime in cfg.regimes:
        sel = [r for r in rows if r["regime"] == regime]
        means[regime] = (float(np.mean([r["psnr_db"] for r in sel])), float(np.mean([r["ssim"] for r in sel])))
    steps = {(res.regime, res.seed): res.steps for res in results}
    return ExperimentReport(rows, means, ordering_checks(rows), steps, time.perf_counter() - t0)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "regime", "slice", "psnr_db", "ssim"])
    for r in rows:
        writer.writerow([r["seed"], r["regime"], r["slice"], repr(float(r["psnr_db"])), repr(float(r["ssim"]))])
    return buf.getvalue()


def format_report(report: ExperimentReport, scale: float) -> str:
    lines = [f"{'rank':<5}{'method':<20}{'scale':>6}{'PSNR':>10}{'SSIM':>9}"]
    for i, (regime, p, s) in enumerate(report.ranked(), 1):
        lines.append(f"{i:<5}{regime:<20}{scale:>6g}{p:>10.3f}{s:>9.4f}")
    lines.append("")
    lines.append("ordering checks (mean PSNR over seeds):")
    for c in report.checks:
        status = "PASS" if c.passed else "FAIL"
        rel = f"> {c.worse} + {c.margin_db:g} dB" if c.margin_db else f"> {c.worse}"
        lines.append(f"  [{status}] {c.better} {rel}: mean gap {c.mean_gap_db:+.3f} dB")
        if c.seed_violations:
            lines.append(f"         violated on seeds {c.seed_violations}")
    lines.append(f"elapsed {report.seconds:.1f} s")
    return "\n".join(lines) + "\n"
