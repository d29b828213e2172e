"""Desk-scale fully convolutional detector with an output stride of 4.

Backbone: three stages of 3x3 convs separated by 2x2 pooling, giving a stride-4 feature
map (``low``) and a stride-8 map (``high``).  ``high`` is bilinearly upsampled
and concatenated with ``low``; 1x1 heads predict the score map, the four box
offsets and (optionally) landmark heatmaps.  With landmarks enabled a small
refine head re-scores detections from the score and landmark maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .groundtruth import GroundTruthMap
from .sampling import (
    LossWeights,
    MiningConfig,
    classification_loss_map,
    detection_loss,
    full_loss,
    landmark_loss,
    landmark_masks,
    mine_and_select,
    refine_loss,
)
from .tensor import Param, ShapeError, Tensor

STRIDE = 4


@dataclass
class ModelConfig:
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    stage_depths: tuple[int, int, int] = (2, 2, 2)
    head_hidden: int = 48
    n_landmarks: int = 4
    refine_hidden: int = 8
    input_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)  # type: ignore[assignment]
        self.stage_depths = tuple(int(d) for d in self.stage_depths)  # type: ignore[assignment]
        if len(self.stage_channels) != 3 or len(self.stage_depths) != 3:
            raise ValueError("stage_channels and stage_depths need three entries")
        vals = (*self.stage_channels, *self.stage_depths, self.head_hidden, self.refine_hidden, self.input_channels)
        if min(vals) <= 0 or self.n_landmarks < 0:
            raise ValueError("model widths must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_depths"] = list(self.stage_depths)
        return d


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    iterations: int = 1000
    lr_step: int | None = None   # multiply lr by lr_gamma every lr_step iterations
    lr_gamma: float = 0.1
    precision: str = "float64"   # training arithmetic; checkpoints are always float64

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.lr < 0:
            raise ValueError("batch_size must be positive and iterations, lr non-negative")

    def lr_at(self, iteration: int) -> float:
        if not self.lr_step:
            return self.lr
        return self.lr * self.lr_gamma ** (iteration // self.lr_step)


@dataclass
class OutputMaps:
    score: Tensor
    reg: Tensor
    landmarks: Tensor | None = None
    refine_score: Tensor | None = None


def _layer_specs(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every conv in build order."""
    c1, c2, c3 = cfg.stage_channels
    hh = cfg.head_hidden
    specs = []
    c_in = cfg.input_channels
    for s, (c, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths), start=1):
        for i in range(1, depth + 1):
            specs.append((f"conv{s}_{i}", c_in, c, 3))
            c_in = c
    specs += [
        ("score_1", c2 + c3, hh, 1), ("score_2", hh, 1, 1),
        ("reg_1", c2 + c3, hh, 1), ("reg_2", hh, 4, 1),
    ]
    if cfg.n_landmarks:
        rh = cfg.refine_hidden
        specs += [
            ("lm_1", c2 + c3, hh, 1), ("lm_2", hh, cfg.n_landmarks, 1),
            ("refine_1", 1 + cfg.n_landmarks, rh, 3), ("refine_2", rh, rh, 3), ("refine_3", rh, 1, 1),
        ]
    return specs


def xavier_uniform(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in, fan_out = c_in * k * k, c_out * k * k
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(c_out, c_in, k, k))


class Model:
    """Parameters plus the forward graph.  Parameter names are ``<layer>.w`` / ``<layer>.b``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Param]):
        self.cfg = cfg
        self.params = params

    def named_arrays(self):
        return [(name, p.value.data) for name, p in self.params.items()]

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def _conv(self, layer: str, x: Tensor) -> Tensor:
        return T.conv2d(x, self.params[layer + ".w"].value, self.params[layer + ".b"].value)

    def _stage(self, s: int, x: Tensor) -> Tensor:
        for i in range(1, self.cfg.stage_depths[s - 1] + 1):
            x = T.relu(self._conv(f"conv{s}_{i}", x))
        return x

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.data.dtype

    def astype(self, dtype) -> "Model":
        """Frozen copy with parameters cast to ``dtype`` (for reduced-precision inference)."""
        params = {
            n: Param(n, Tensor(p.value.data.astype(dtype)), np.zeros_like(p.value.data, dtype=dtype))
            for n, p in self.params.items()
        }
        return Model(self.cfg, params)

    def cast_(self, dtype) -> "Model":
        """Convert parameters and momentum buffers to ``dtype`` in place."""
        for p in self.params.values():
            p.value.data = p.value.data.astype(dtype)
            p.momentum_buffer = p.momentum_buffer.astype(dtype)
            p.value.grad = None
        return self

    def forward(self, image: Tensor) -> OutputMaps:
        c, h, w = image.shape
        if c != self.cfg.input_channels:
            raise ShapeError(f"expected {self.cfg.input_channels} input channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(f"input {h}x{w} must be divisible by 8; pad the image before calling forward")
        x = self._stage(1, image)
        low = T.maxpool2(self._stage(2, T.maxpool2(x)))
        high = self._stage(3, T.maxpool2(low))
        fused = T.concat_channels(low, T.bilinear_upsample2(high))

        score = self._conv("score_2", T.relu(self._conv("score_1", fused)))
        reg = self._conv("reg_2", T.relu(self._conv("reg_1", fused)))
        if not self.cfg.n_landmarks:
            return OutputMaps(score, reg)
        lm = self._conv("lm_2", T.relu(self._conv("lm_1", fused)))
        r = T.relu(self._conv("refine_1", T.concat_channels(score, lm)))
        r = T.relu(self._conv("refine_2", r))
        refine = self._conv("refine_3", r)
        return OutputMaps(score, reg, lm, refine)

    # checkpoint lifecycle ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write the binary checkpoint and ``<path>.json`` with the model config."""
        path = Path(path)
        with open(path, "wb") as fh:
            T.write_checkpoint(fh, self.named_arrays())
        Path(str(path) + ".json").write_text(json.dumps({"model": self.cfg.to_json()}, indent=1, sort_keys=True))

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.value.shape}")
            p.value.data[...] = arrays[name]


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Xavier-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}
    for name, c_in, c_out, k in _layer_specs(cfg):
        params[name + ".w"] = Param(name + ".w", Tensor(xavier_uniform(rng, c_out, c_in, k)))
        params[name + ".b"] = Param(name + ".b", Tensor(np.zeros(c_out)))
    return Model(cfg, params)


def load_model(path: str | Path, expected: ModelConfig | None = None) -> Model:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    cfg = ModelConfig(**header["model"])
    if expected is not None:
        for key, val in expected.to_json().items():
            if cfg.to_json()[key] != val:
                raise ValueError(f"checkpoint config field {key!r} is {cfg.to_json()[key]!r}, expected {val!r}")
    model = build_model(cfg)
    with open(path, "rb") as fh:
        model.load_state(T.read_checkpoint(fh))
    return model


def image_to_input(image: np.ndarray, dtype=np.float64) -> Tensor:
    """HxWx3 uint8 (or float in [0, 255]) image to a centred 3xHxW tensor."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Tensor((np.transpose(arr, (2, 0, 1)) / 255.0 - 0.5).astype(dtype))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def patch_losses(
    model: Model,
    image: Tensor,
    gt: GroundTruthMap,
    weights: LossWeights,
    mining: MiningConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Forward one patch and assemble its full loss with mining applied."""
    out = model.forward(image)
    score = out.score.data[0]
    mask = mine_and_select(classification_loss_map(score, gt.score), gt.score, gt.ignore, mining, rng)
    det, parts = detection_loss(out.score, out.reg, gt, mask, weights)
    stats = {"n_pos": mask.n_pos, "n_hard": mask.n_hard, "n_rand": mask.n_rand, **parts}
    if out.landmarks is None:
        stats.update(det_loss=det.item(), lm_loss=0.0, rf_loss=0.0)
        total = full_loss(det, 0.0, 0.0, weights)
    else:
        lm_masks = landmark_masks(out.landmarks.data, gt, mining, rng)
        lm = landmark_loss(out.landmarks, gt, lm_masks)
        rf_mask = mask
        if mining.refine_own_mask:
            rf_map = classification_loss_map(out.refine_score.data[0], gt.score)
            rf_mask = mine_and_select(rf_map, gt.score, gt.ignore, mining, rng)
        rf = refine_loss(out.refine_score, gt, rf_mask)
        stats.update(det_loss=det.item(), lm_loss=lm.item(), rf_loss=rf.item())
        total = full_loss(det, lm, rf, weights)
    stats["full_loss"] = total.item()
    return total, stats


def train_step(
    model: Model,
    batch: list[tuple[Tensor, GroundTruthMap]],
    weights: LossWeights,
    mining: MiningConfig,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    iteration: int = 0,
) -> dict:
    """Forward/backward every patch, average the loss over the batch and take one SGD step."""
    if not batch:
        raise ValueError("empty batch")
    scale = 1.0 / len(batch)
    totals = {k: 0.0 for k in ("det_loss", "lm_loss", "rf_loss", "full_loss", "cls_loss", "reg_loss")}
    counts = {"n_pos": 0, "n_hard": 0, "n_rand": 0}
    for image, gt in batch:
        loss, stats = patch_losses(model, image, gt, weights, mining, rng)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at iteration {iteration}")
        loss.backward(scale)
        for k in totals:
            totals[k] += scale * stats[k]
        for k in counts:
            counts[k] += stats[k]
    T.sgd_step(model.parameters(), opt.lr_at(iteration), opt.momentum, opt.weight_decay)
    return {"iter": iteration, **totals, **counts}
