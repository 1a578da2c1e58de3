"""Training-pair construction for every learning regime, augmentation, the
L_p objective, the plateau learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import crop, random_patch_coords
from .degradation import DegradationSpec, degrade, gaussian_kernel, blur, resample, sigma_for_test_degradation, upsample
from .errors import ConfigurationError, DataError, DomainError, NumericalError
from .model import GrdNetwork
from .numerics import Adam, Tensor

log = logging.getLogger(__name__)

# regime name -> objective it implements
REGIMES = {
    "supervised": "eq1",
    "supervised_guided": "eq2",
    "internal": "eq3",
    "internal_guided": "eq3+guide",
    "external_unguided": "eq4-guide",
    "external_guided": "eq4",
}
GUIDED_REGIMES = {"supervised_guided", "internal_guided", "external_guided"}
HR_TARGET_REGIMES = {"supervised", "supervised_guided"}


@dataclass
class TrainingPair:
    input_lr_interp: np.ndarray
    input_guide: Optional[np.ndarray]
    target: np.ndarray
    regime: str
    # "hr": target is a true high-resolution image; "lr": target is an observed LR image
    target_level: str

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        shapes = {self.input_lr_interp.shape, self.target.shape}
        if self.input_guide is not None:
            shapes.add(self.input_guide.shape)
        if len(shapes) != 1:
            raise DataError(f"training pair planes disagree in extents: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.target.shape


@dataclass
class TrainConfig:
    loss_norm: int = 1
    initial_lr: float = 1e-3
    lr_divisor: float = 10.0
    plateau_patience: int = 10
    stop_lr: float = 1e-6
    smoothing_window: int = 5
    batch_size: int = 8
    max_steps: int = 20000
    patch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if not self.initial_lr > self.stop_lr > 0:
            raise ConfigurationError("need initial_lr > stop_lr > 0")
        if not self.lr_divisor > 1:
            raise ConfigurationError("lr_divisor must exceed 1")
        if self.plateau_patience < 1 or self.smoothing_window < 1:
            raise ConfigurationError("plateau_patience and smoothing_window must be >= 1")
        if self.loss_norm not in (1, 2):
            raise ConfigurationError("loss_norm must be 1 or 2")
        if self.batch_size < 1 or self.max_steps < 1 or self.patch_size < 4:
            raise ConfigurationError("batch_size, max_steps must be >= 1 and patch_size >= 4")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentationSpec:
    right_angle_rotations: tuple[int, ...] = (0, 90, 180, 270)
    horizontal_flip: bool = True
    extra_rotation_degrees: tuple[float, ...] = (15, 30)
    rescale_factors: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
    min_extent: int = 16

    def __post_init__(self):
        self.right_angle_rotations = tuple(int(a) for a in self.right_angle_rotations)
        self.extra_rotation_degrees = tuple(float(a) for a in self.extra_rotation_degrees)
        self.rescale_factors = tuple(float(f) for f in self.rescale_factors)
        if any(a % 90 for a in self.right_angle_rotations):
            raise ConfigurationError("right_angle_rotations must be multiples of 90")
        if any(not 0 <= a < 360 for a in self.right_angle_rotations + self.extra_rotation_degrees):
            raise ConfigurationError("rotations must lie in [0, 360)")
        if any(not 0 < f <= 1 for f in self.rescale_factors):
            raise ConfigurationError("rescale factors must lie in (0, 1]")

    @classmethod
    def none(cls) -> "AugmentationSpec":
        return cls((0,), False, (), (1.0,))

    @classmethod
    def right_angles_only(cls) -> "AugmentationSpec":
        return cls((0, 90, 180, 270), True, (), (1.0,))

    def angles(self) -> list[float]:
        seen: list[float] = []
        for a in list(self.right_angle_rotations) + list(self.extra_rotation_degrees):
            if float(a) not in seen:
                seen.append(float(a))
        return seen

    def transforms(self) -> list[tuple[float, bool, float]]:
        """Ordered (angle, flip, rescale) triples; the identity comes first when present."""
        flips = (False, True) if self.horizontal_flip else (False,)
        return [(a, f, s) for a in self.angles() for f in flips for s in self.rescale_factors]

    def multiplicity(self) -> int:
        return len(self.transforms())

    def to_dict(self) -> dict:
        return asdict(self)


def _max_inscribed_rect(w: int, h: int, angle_deg: float) -> tuple[int, int]:
    """Largest axis-aligned rectangle inside a w x h rectangle rotated by angle."""
    a = math.radians(angle_deg % 180)
    if a > math.pi / 2:
        a = math.pi - a
    sin_a, cos_a = abs(math.sin(a)), abs(math.cos(a))
    long_side, short_side = (w, h) if w >= h else (h, w)
    if short_side <= 2 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr, hr = (w * cos_a - h * sin_a) / cos_2a, (h * cos_a - w * sin_a) / cos_2a
    return int(math.floor(wr)), int(math.floor(hr))


def _rescale(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image
    # anti-alias with the FWHM rule before bicubic decimation
    smoothed = blur(image, gaussian_kernel(sigma_for_test_degradation(1.0 / factor)))
    return resample(smoothed, factor)


def apply_transform(image: np.ndarray, angle: float, flip: bool, scale: float) -> np.ndarray:
    """Rescale, then flip horizontally, then rotate counter-clockwise by ``angle`` degrees."""
    out = _rescale(np.asarray(image, dtype=np.float64), scale)
    if flip:
        out = out[:, ::-1]
    quarter, rest = divmod(angle, 90.0)
    out = np.rot90(out, int(quarter) % 4)
    if rest:
        h, w = out.shape
        rotated = ndimage.rotate(out, rest, reshape=False, order=1, mode="nearest")
        cw, ch = _max_inscribed_rect(w, h, rest)
        y0, x0 = (h - ch) // 2, (w - cw) // 2
        out = rotated[y0:y0 + ch, x0:x0 + cw]
    return np.ascontiguousarray(out)


def augment_stack(images: Sequence[np.ndarray], spec: AugmentationSpec) -> list[list[np.ndarray]]:
    """Apply every transform of ``spec`` identically to each registered image.

    Returns one list of transformed images per surviving variant. Variants
    whose extent falls below ``spec.min_extent`` are skipped with a warning.
    """
    variants = []
    for angle, flip, scale in spec.transforms():
        group = [apply_transform(img, angle, flip, scale) for img in images]
        if min(group[0].shape) < spec.min_extent:
            log.warning("skipping augmentation angle=%s flip=%s scale=%s: extent %s < %d",
                        angle, flip, scale, group[0].shape, spec.min_extent)
            continue
        variants.append(group)
    return variants


def _variants(stack: list[np.ndarray], spec: AugmentationSpec) -> list[list[np.ndarray]]:
    variants = augment_stack(stack, spec)
    if not variants:
        raise DataError(f"image of extent {stack[0].shape} is smaller than the minimum extent {spec.min_extent}")
    return variants


def augment(image: np.ndarray, spec: AugmentationSpec) -> list[np.ndarray]:
    return [g[0] for g in augment_stack([image], spec)]


def _degrade_and_interpolate(target: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    try:
        low = degrade(target, spec)
    except DomainError as exc:
        raise DataError(f"image of extent {target.shape} too small to degrade by {spec.scale_factor}") from exc
    return upsample(low, spec.scale_factor, out_shape=target.shape)


def _check_registered(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DataError(f"{what}: extents {a.shape} and {b.shape} are not registered")


def make_supervised_pairs(hr_targets: Sequence[np.ndarray], guides: Optional[Sequence[np.ndarray]],
                          spec: DegradationSpec,
                          augmentation: Optional[AugmentationSpec] = None) -> list[TrainingPair]:
    """Pairs from true HR images: input D^T D B X, guide X_G at HR, target X."""
    augmentation = augmentation or AugmentationSpec.none()
    regime = "supervised" if guides is None else "supervised_guided"
    pairs = []
    for i, target in enumerate(hr_targets):
        stack = [np.asarray(target, dtype=np.float64)]
        if guides is not None:
            _check_registered(stack[0], np.asarray(guides[i]), "supervised pair")
            stack.append(np.asarray(guides[i], dtype=np.float64))
        for variant in _variants(stack, augmentation):
            t = variant[0]
            pairs.append(TrainingPair(_degrade_and_interpolate(t, spec),
                                      variant[1] if guides is not None else None, t, regime, "hr"))
    return pairs


def degrade_guide(guide_hr: np.ndarray, total_scale: float, out_shape: tuple[int, int]) -> np.ndarray:
    """Bring an HR guide to a coarser grid with the FWHM-rule blur (``D B X_G``)."""
    if total_scale <= 1.0 + 1e-12:
        if tuple(guide_hr.shape) != tuple(out_shape):
            raise DataError(f"guide extent {guide_hr.shape} != target extent {out_shape}")
        return np.asarray(guide_hr, dtype=np.float64)
    return degrade(guide_hr, DegradationSpec.for_test(total_scale), out_shape=out_shape)


def make_external_unsupervised_pairs(external_lr: Sequence[np.ndarray], guides: Optional[Sequence[np.ndarray]],
                                     spec: DegradationSpec, lr_scale: float,
                                     augmentation: Optional[AugmentationSpec] = None) -> list[TrainingPair]:
    """External learning without HR targets.

    ``external_lr`` are observed LR images of other subjects; they serve as
    targets. ``guides`` are the same subjects' HR guidance images; they are
    brought down to the LR grid with ``degrade_guide(guide, lr_scale)``.
    ``spec`` is the (per-stage) degradation used to simulate the training input.
    """
    augmentation = augmentation or AugmentationSpec.none()
    regime = "external_unguided" if guides is None else "external_guided"
    pairs = []
    for i, y in enumerate(external_lr):
        stack = [np.asarray(y, dtype=np.float64)]
        if guides is not None:
            stack.append(degrade_guide(np.asarray(guides[i], dtype=np.float64), lr_scale, stack[0].shape))
        for variant in _variants(stack, augmentation):
            t = variant[0]
            pairs.append(TrainingPair(_degrade_and_interpolate(t, spec),
                                      variant[1] if guides is not None else None, t, regime, "lr"))
    return pairs


def make_internal_pairs(test_lr: np.ndarray, spec: DegradationSpec,
                        augmentation: Optional[AugmentationSpec] = None,
                        guide_hr: Optional[np.ndarray] = None, lr_scale: float = 2.0) -> list[TrainingPair]:
    """Self-supervised pairs drawn from the single test LR image (and, for the
    guided variant, its own HR guide brought to the LR grid)."""
    test_lr = np.asarray(test_lr, dtype=np.float64)
    guides = None if guide_hr is None else [guide_hr]
    pairs = make_external_unsupervised_pairs([test_lr], guides, spec, lr_scale, augmentation)
    regime = "internal" if guide_hr is None else "internal_guided"
    for p in pairs:
        p.regime = regime
    return pairs


def lp_loss(pred: Tensor, target, p: int = 1) -> Tensor:
    """mean(|pred - target|^p); the L1 subgradient at zero is 0."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    if p not in (1, 2):
        raise ConfigurationError(f"p must be 1 or 2, got {p}")
    diff = pred.data - target.astype(pred.dtype)
    n = diff.size
    if p == 1:
        value = np.abs(diff).mean()
        grad = np.sign(diff) / n
    else:
        value = (diff * diff).mean()
        grad = 2.0 * diff / n
    return Tensor.from_op(np.asarray(value, dtype=pred.dtype), (pred,),
                          lambda g: (g * grad.astype(pred.dtype),))


class PlateauSchedule:
    """Divide the learning rate when the smoothed loss stops setting new bests.

    The first observed loss is the baseline and counts as step one of the
    first window; every later step that does not beat the best smoothed loss
    adds one to the counter. When the counter reaches ``patience`` the rate is
    divided and the counter resets. Training stops once the rate falls
    below ``stop_lr``.
    """

    def __init__(self, initial_lr=1e-3, divisor=10.0, patience=10, stop_lr=1e-6, window=5):
        self.initial_lr = initial_lr
        self.divisor = divisor
        self.patience = patience
        self.stop_lr = stop_lr
        self.divisions = 0
        self.best = math.inf
        self.bad_steps = 0
        self._recent: deque = deque(maxlen=window)
        self._started = False

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PlateauSchedule":
        return cls(config.initial_lr, config.lr_divisor, config.plateau_patience,
                   config.stop_lr, config.smoothing_window)

    @property
    def lr(self) -> float:
        return self.initial_lr / self.divisor ** self.divisions

    @property
    def should_stop(self) -> bool:
        # relative slack: 1e-3 / 10**3 evaluates to 1.0000000000000002e-06
        return self.lr < self.stop_lr * (1.0 - 1e-9)

    def observe(self, loss: float) -> bool:
        """Record one step's loss; returns True when the rate was divided."""
        self._recent.append(float(loss))
        smoothed = sum(self._recent) / len(self._recent)
        if not self._started:
            self._started = True
            self.best = smoothed
            self.bad_steps = 1
        elif smoothed < self.best:
            self.best = smoothed
            self.bad_steps = 0
        else:
            self.bad_steps += 1
        if self.bad_steps >= self.patience:
            self.divisions += 1
            self.bad_steps = 0
            return True
        return False


@dataclass
class TrainResult:
    net: GrdNetwork
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stop_reason: str = ""


def _make_batch(pairs: Sequence[TrainingPair], indices, size: int, rng: np.random.Generator, guided: bool):
    xs, gs, ts = [], [], []
    for idx in indices:
        pair = pairs[idx]
        (coord,) = random_patch_coords(pair.shape, size, 1, rng)
        xs.append(crop(pair.input_lr_interp, coord, size))
        ts.append(crop(pair.target, coord, size))
        if guided:
            gs.append(crop(pair.input_guide, coord, size))
    stack = lambda a: np.stack(a)[:, None].astype(np.float32)
    return stack(xs), (stack(gs) if guided else None), stack(ts)


def intensity_scales(pairs: Sequence[TrainingPair]) -> tuple[float, float]:
    t_max = max(float(np.abs(p.target).max()) for p in pairs) or 1.0
    guided = [p for p in pairs if p.input_guide is not None]
    g_max = max((float(np.abs(p.input_guide).max()) for p in guided), default=1.0) or 1.0
    return 1.0 / t_max, 1.0 / g_max


def train(net: GrdNetwork, pairs: Sequence[TrainingPair], config: TrainConfig,
          callback: Optional[Callable[[int, GrdNetwork, list], None]] = None,
          normalize: bool = True) -> TrainResult:
    """Minimise the mean L_p loss over random patch batches with Adam and the
    plateau schedule. Stops when the rate drops below ``stop_lr`` or after
    ``max_steps``. On a non-finite loss the parameters are restored to the
    last finite step and NumericalError is raised.

    When ``normalize`` is set, intensities are scaled by the reciprocal of
    the largest target (and guide) value; the scales are stored on ``net``.
    """
    config.validate()
    if not pairs:
        raise DataError("no training pairs")
    guided = net.config.guided
    if guided and any(p.input_guide is None for p in pairs):
        raise ConfigurationError("guided network needs pairs with guide images")
    if normalize:
        net.target_scale, net.guide_scale = intensity_scales(pairs)
    size = min(config.patch_size, *(min(p.shape) for p in pairs))
    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    opt = Adam(params)
    schedule = PlateauSchedule.from_config(config)
    result = TrainResult(net)
    last_good = net.state_dict()

    for step in range(1, config.max_steps + 1):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        x, g, t = _make_batch(pairs, idx, size, rng, guided)
        x *= net.target_scale
        t *= net.target_scale
        if g is not None:
            g *= net.guide_scale
        opt.zero_grad()
        loss = lp_loss(net.forward(Tensor(x), None if g is None else Tensor(g), training=True), t,
                       config.loss_norm)
        value = float(loss.data)
        if not math.isfinite(value):
            net.load_state_dict(last_good)
            err = NumericalError(f"non-finite loss at step {step}; parameters restored to step {step - 1}")
            err.history = result.history
            raise err
        lr = schedule.lr
        loss.backward()
        opt.step(lr)
        last_good = net.state_dict()
        result.history.append((step, lr, value))
        schedule.observe(value)
        if callback is not None:
            callback(step, net, result.history)
        if schedule.should_stop:
            result.stop_reason = "lr_below_stop"
            break
    else:
        result.stop_reason = "max_steps"
    return result


def write_loss_csv(path, history: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            writer.writerow([step, repr(lr), repr(loss)])
