"""Run configuration: one JSON document aggregating every component's settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .groundtruth import GeometryConfig
from .inference import PyramidConfig
from .model import ModelConfig, OptimizerConfig
from .sampling import LossWeights, MiningConfig
from .synth import PatchConfig, SceneConfig

SECTIONS = {
    "geometry": GeometryConfig,
    "model": ModelConfig,
    "mining": MiningConfig,
    "loss": LossWeights,
    "pyramid": PyramidConfig,
    "optimizer": OptimizerConfig,
    "scene": SceneConfig,
    "patch": PatchConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    seed: int = 0
    n_scenes: int = 500
    eval_iou: float = 0.5
    use_refine: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        g = self.geometry
        if g.patch_size % 8:
            raise ConfigError(f"geometry.patch_size={g.patch_size} must be divisible by 8")
        if abs(g.reg_norm - g.target_height / g.down_factor) > 1e-12:
            raise ConfigError(f"geometry.reg_norm={g.reg_norm} must equal target_height / 4")
        if self.pyramid.reg_norm != g.reg_norm:
            raise ConfigError(f"pyramid.reg_norm={self.pyramid.reg_norm} differs from geometry.reg_norm={g.reg_norm}")
        if self.patch.patch_size != g.patch_size:
            raise ConfigError(f"patch.patch_size={self.patch.patch_size} differs from geometry.patch_size={g.patch_size}")
        if self.patch.target_height != g.target_height:
            raise ConfigError("patch.target_height differs from geometry.target_height")
        if g.n_landmarks != self.model.n_landmarks:
            raise ConfigError(
                f"geometry.n_landmarks={g.n_landmarks} differs from model.n_landmarks={self.model.n_landmarks}"
            )
        if self.scene.n_landmarks < self.model.n_landmarks:
            raise ConfigError("scene provides fewer landmarks than the model predicts")
        if self.n_scenes < 0:
            raise ConfigError("n_scenes must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        kwargs: dict[str, Any] = {}
        for key, val in doc.items():
            if key in SECTIONS:
                known = {f.name for f in fields(SECTIONS[key])}
                unknown = set(val) - known
                if unknown:
                    raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
                kwargs[key] = SECTIONS[key](**val)
            elif key in {f.name for f in fields(cls)}:
                kwargs[key] = val
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` / ``section.key=value`` overrides (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.lstrip("-")
        value = _parse_value(raw)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            doc.setdefault(section, {})[name] = value
        else:
            doc[key] = value
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a JSON config, apply overrides and fill settings derived from ``geometry``."""
    doc: dict = json.loads(Path(path).read_text()) if path else {}
    doc = apply_overrides(doc, overrides or [])
    geo = doc.setdefault("geometry", {})
    if "target_height" in geo:
        geo.setdefault("reg_norm", float(geo["target_height"]) / 4)
    if "n_landmarks" in doc.get("model", {}):
        geo.setdefault("n_landmarks", doc["model"]["n_landmarks"])
    resolved = GeometryConfig(**geo)
    doc.setdefault("patch", {}).setdefault("patch_size", resolved.patch_size)
    doc["patch"].setdefault("target_height", resolved.target_height)
    doc.setdefault("pyramid", {}).setdefault("reg_norm", resolved.reg_norm)
    doc.setdefault("model", {}).setdefault("n_landmarks", resolved.n_landmarks)
    return RunConfig.from_dict(doc)
