"""Guided residual dense network.

Topology, for ``B`` blocks of ``L`` dense layers::

    f0 = shallow(lr)                     base channels
    g  = guide_features(guide)           guide channels (shared by every block)
    h  = f0
    for each block:
        feats = [h, g]
        for each layer: feats.append(conv_bn_relu(concat(feats)))   growth channels
        h = h + conv_bn(concat(feats))                              local fusion + residual
    f  = conv_bn_relu(concat(all block outputs)) + f0              global fusion
    out = lr + conv(f)                                             global residual

With ``guide_channels == 0`` the guide branch is dropped (unguided ablation).
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError
from .numerics import LayerParams, Tensor, add_residual, concat_channels, load_arrays, save_arrays


@dataclass(frozen=True)
class GrdConfig:
    num_blocks: int = 4
    layers_per_block: int = 4
    base_channels: int = 32
    growth_channels: int = 16
    guide_channels: int = 16

    def __post_init__(self):
        for name in ("num_blocks", "layers_per_block", "base_channels", "growth_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"GrdConfig.{name} must be >= 1")
        if self.guide_channels < 0:
            raise ConfigurationError("GrdConfig.guide_channels must be >= 0 (0 = unguided)")

    @property
    def guided(self) -> bool:
        return self.guide_channels > 0

    def layer_in_channels(self, k: int) -> int:
        return self.base_channels + k * self.growth_channels + self.guide_channels

    def unguided(self) -> "GrdConfig":
        return GrdConfig(self.num_blocks, self.layers_per_block, self.base_channels, self.growth_channels, 0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GrdBlock:
    layers: list[LayerParams]
    fusion: LayerParams


class GrdNetwork:
    def __init__(self, config: GrdConfig, shallow: LayerParams, guide_features: Optional[LayerParams],
                 blocks: list[GrdBlock], fusion: LayerParams, reconstruction: LayerParams):
        self.config = config
        self.shallow = shallow
        self.guide_features = guide_features
        self.blocks = blocks
        self.fusion = fusion
        self.reconstruction = reconstruction
        # intensity normalisation applied by ``predict`` and the training loop
        self.target_scale = 1.0
        self.guide_scale = 1.0
        self.stage_factor: Optional[float] = None

    def named_layers(self) -> list[tuple[str, LayerParams]]:
        out = [("shallow", self.shallow)]
        if self.guide_features is not None:
            out.append(("guide_features", self.guide_features))
        for b, block in enumerate(self.blocks):
            out += [(f"block{b}.layer{k}", layer) for k, layer in enumerate(block.layers)]
            out.append((f"block{b}.fusion", block.fusion))
        out += [("fusion", self.fusion), ("reconstruction", self.reconstruction)]
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {f"{lname}.{pname}": p for lname, layer in self.named_layers()
                for pname, p in layer.parameters().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{lname}.{bname}": b for lname, layer in self.named_layers()
                for bname, b in layer.buffers().items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        state.update({k: b.copy() for k, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: p.data for k, p in self.parameters().items()}
        targets.update(self.buffers())
        missing = set(targets) - set(state)
        if missing:
            raise ConfigurationError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, dst in targets.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ConfigurationError(f"{k}: stored shape {src.shape} != network shape {dst.shape}")
            dst[...] = src

    def astype(self, dtype) -> "GrdNetwork":
        """Deep copy with every parameter and buffer cast (float64 for gradient checks)."""
        clone = copy.deepcopy(self)
        for _, layer in clone.named_layers():
            for p in layer.parameters().values():
                p.data = p.data.astype(dtype)
            if layer.has_bn:
                layer.bn_running_mean = layer.bn_running_mean.astype(dtype)
                layer.bn_running_var = layer.bn_running_var.astype(dtype)
        return clone

    def forward(self, lr_interp: Tensor, guide: Optional[Tensor] = None, training: bool = False) -> Tensor:
        lr_interp = lr_interp if isinstance(lr_interp, Tensor) else Tensor(lr_interp)
        if lr_interp.ndim != 4 or lr_interp.shape[1] != 1:
            raise ConfigurationError(f"network input must be N x 1 x H x W, got {lr_interp.shape}")
        if self.config.guided:
            if guide is None:
                raise ConfigurationError("guided network invoked without a guide image")
            guide = guide if isinstance(guide, Tensor) else Tensor(guide)
            if guide.shape != lr_interp.shape:
                raise ConfigurationError(f"guide shape {guide.shape} != input shape {lr_interp.shape}")
        elif guide is not None:
            raise ConfigurationError("unguided network was given a guide image")

        f0 = self.shallow(lr_interp, training)
        g = self.guide_features(guide, training) if self.config.guided else None
        h = f0
        block_outputs = []
        for block in self.blocks:
            feats = [h] if g is None else [h, g]
            for layer in block.layers:
                feats.append(layer(concat_channels(*feats), training))
            h = add_residual(h, block.fusion(concat_channels(*feats), training))
            block_outputs.append(h)
        fused = self.fusion(concat_channels(*block_outputs), training)
        residual = self.reconstruction(add_residual(fused, f0), training)
        return add_residual(lr_interp, residual)

    __call__ = forward

    def predict(self, lr_interp: np.ndarray, guide: Optional[np.ndarray] = None) -> np.ndarray:
        """Eval-mode forward on one 2-D image, in original intensity units."""
        x = Tensor((np.asarray(lr_interp) * self.target_scale)[None, None].astype(np.float32))
        g = None
        if guide is not None and self.config.guided:
            g = Tensor((np.asarray(guide) * self.guide_scale)[None, None].astype(np.float32))
        out = self.forward(x, g, training=False)
        return out.data[0, 0].astype(np.float64) / self.target_scale


# The reconstruction layer starts near zero so the untrained network is close
# to the identity on its input; with full He gain the initial residual swamps
# the signal and Adam spends most of the first plateau undoing it.
RECONSTRUCTION_GAIN = 0.05


def build_network(config: GrdConfig, seed: int = 0, dtype=np.float32) -> GrdNetwork:
    """Fan-in scaled Gaussian weights (He), zero bias, BN scale 1 / shift 0.

    The reconstruction layer's weights are scaled by ``RECONSTRUCTION_GAIN``.
    """
    rng = np.random.default_rng(seed)
    c = config

    def layer(cin, cout, bn=True, act=True, gain=1.0):
        return LayerParams.create(cin, cout, rng, batch_norm=bn, activation=act, weight_scale=gain, dtype=dtype)

    shallow = layer(1, c.base_channels)
    guide_features = layer(1, c.guide_channels) if c.guided else None
    blocks = []
    for _ in range(c.num_blocks):
        layers = [layer(c.layer_in_channels(k), c.growth_channels) for k in range(c.layers_per_block)]
        fusion = layer(c.layer_in_channels(c.layers_per_block), c.base_channels, act=False)
        blocks.append(GrdBlock(layers, fusion))
    fusion = layer(c.num_blocks * c.base_channels, c.base_channels)
    reconstruction = layer(c.base_channels, 1, bn=False, act=False, gain=RECONSTRUCTION_GAIN)
    return GrdNetwork(config, shallow, guide_features, blocks, fusion, reconstruction)


def forward(net: GrdNetwork, lr_interp: Tensor, guide: Tensor, training: bool = False) -> Tensor:
    return net.forward(lr_interp, guide, training)


def forward_unguided(net: GrdNetwork, lr_interp: Tensor, training: bool = False) -> Tensor:
    if net.config.guided:
        raise ConfigurationError("forward_unguided needs a network built with guide_channels=0")
    return net.forward(lr_interp, None, training)


def save_network(path: Union[str, Path], net: GrdNetwork, extra_meta: Optional[dict] = None) -> None:
    meta = {"config": net.config.to_dict(), "target_scale": net.target_scale,
            "guide_scale": net.guide_scale, "stage_factor": net.stage_factor}
    meta.update(extra_meta or {})
    save_arrays(path, net.state_dict(), meta)


def load_network(path: Union[str, Path]) -> GrdNetwork:
    arrays, meta = load_arrays(path)
    net = build_network(GrdConfig(**meta["config"]))
    net.load_state_dict(arrays)
    net.target_scale = float(meta.get("target_scale", 1.0))
    net.guide_scale = float(meta.get("guide_scale", 1.0))
    net.stage_factor = meta.get("stage_factor")
    return net
