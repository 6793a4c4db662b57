"""Run configuration: a nested key-value tree with documented defaults.

Precedence, lowest to highest: built-in defaults, the YAML config file,
``--set key.path=value`` overrides, dedicated CLI flags (``--seed``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    threshold: float = 10.0
    gamma: float = 1.5
    clahe_clip: float = 2.0
    clahe_tiles: list[int] = field(default_factory=lambda: [8, 8])
    clahe_mode: str = "lightness"
    structure_size: int = 384
    texture_size: int = 768


@dataclass
class VesselnessSection:
    scales: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    beta: float = 0.5
    c: float | None = None
    dark_vessels: bool = True
    mode: str = "image"  # "image" or "patch"


@dataclass
class BagConfig:
    n_patches: int = 24
    patch_size: int = 224
    stride: int | None = None  # default patch_size // 2


@dataclass
class SplitConfig:
    n_folds: int = 5
    test_fraction: float = 1.0 / 11.0


@dataclass
class StructureStage:
    backbone: str = "tiny"
    pretrained: bool = False
    epochs: int = 30
    batch_size: int = 16
    lr_head: float = 1e-3
    lr_backbone: float = 1e-6
    warmup_freeze_epochs: int = 5
    weight_decay: float = 1e-4
    grad_clip: float | None = 5.0
    aux_lambda: float = 0.2
    gamma_focus: float = 2.0
    alpha_weights: list[float] = field(default_factory=lambda: [0.5, 1.0, 5.0, 1.0])
    use_metadata: bool = True
    augment: bool = True
    metadata_noise: float = 0.0
    metadata_dropout: float = 0.0
    freeze_affine: bool = False


@dataclass
class TextureStage:
    backbone: str = "tiny"
    pretrained: bool = False
    epochs: int = 30
    batch_size: int = 4
    lr_head: float = 1e-3
    lr_backbone: float = 1e-6
    warmup_freeze_epochs: int = 0
    weight_decay: float = 1e-4
    grad_clip: float | None = 5.0
    positive_probability: float = 0.5
    use_vmap: bool = True
    dropout: float = 0.2
    augment: bool = True
    freeze_affine: bool = False
    phi_activation: str = "gelu"


@dataclass
class FusionStage:
    epochs: int = 80
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-4
    hidden: int = 32


@dataclass
class SynthConfig:
    n_patients: int = 40
    mix: list[float] = field(default_factory=lambda: [0.5, 0.15, 0.2, 0.15])
    size: list[int] = field(default_factory=lambda: [480, 640])
    images_per_patient: list[int] = field(default_factory=lambda: [4, 12])


@dataclass
class ExplainConfig:
    n_images: int = 4
    ga_shift: float = -3.0
    blend_alpha: float = 0.45
    colormap: str = "jet"


@dataclass
class RunConfig:
    data_root: str = "data"
    run_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    vesselness: VesselnessSection = field(default_factory=VesselnessSection)
    bags: BagConfig = field(default_factory=BagConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    structure: StructureStage = field(default_factory=StructureStage)
    texture: TextureStage = field(default_factory=TextureStage)
    fusion: FusionStage = field(default_factory=FusionStage)
    synth: SynthConfig = field(default_factory=SynthConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        """Hash of the whole config, or of the named top-level sections only."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        p = self.preprocess
        if not p.gamma > 0:
            raise ConfigError("preprocess.gamma must be positive")
        if p.clahe_mode not in ("lightness", "rgb"):
            raise ConfigError("preprocess.clahe_mode must be 'lightness' or 'rgb'")
        if self.vesselness.mode not in ("image", "patch"):
            raise ConfigError("vesselness.mode must be 'image' or 'patch'")
        if self.bags.patch_size > p.texture_size:
            raise ConfigError("bags.patch_size exceeds preprocess.texture_size")
        for name in ("structure", "texture"):
            st = getattr(self, name)
            if st.epochs <= 0 or st.batch_size <= 0:
                raise ConfigError(f"{name}.epochs and batch_size must be positive")
            if not (st.lr_head > 0 and st.lr_backbone > 0):
                raise ConfigError(f"{name} learning rates must be positive")
        if self.texture.phi_activation not in ("gelu", "relu", "tanh"):
            raise ConfigError("texture.phi_activation must be 'gelu', 'relu' or 'tanh'")
        if not 0 < self.texture.positive_probability < 1:
            raise ConfigError("texture.positive_probability must lie in (0, 1)")
        if self.fusion.epochs <= 0 or not self.fusion.lr > 0:
            raise ConfigError("fusion.epochs and fusion.lr must be positive")
        if self.splits.n_folds < 2:
            raise ConfigError("splits.n_folds must be at least 2")
        return self


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{path}{name}")
    return cls(**kwargs)


def _coerce(value, default, key):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, str):  # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key: {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def load_config(path: str | Path | None = None, overrides: list[str] | None = None, base: dict | None = None,
                **flags) -> RunConfig:
    """Resolve defaults <- ``base`` preset <- file <- ``key=value`` overrides <- flags (non-None only)."""
    tree = RunConfig().to_dict()
    if base:
        _merge(tree, base)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(tree, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    for key, value in flags.items():
        if value is not None:
            _set_path(tree, key, value)
    return _build(RunConfig, tree, "").validate()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def desk_preset() -> dict:
    """Overrides for CPU-scale synthetic runs with the tiny encoder.

    The tiny encoder has no pretrained weights, so its backbone learning rate
    is raised to the head rate; resolutions shrink so a run fits in minutes.
    """
    return {
        "preprocess": {"structure_size": 128, "texture_size": 256, "clahe_tiles": [4, 4]},
        "vesselness": {"scales": [1.0, 2.0]},
        "bags": {"n_patches": 24, "patch_size": 64},
        "synth": {"n_patients": 40, "size": [240, 320], "images_per_patient": [4, 12]},
        "structure": {"epochs": 30, "lr_backbone": 1e-3},
        "texture": {"epochs": 20, "lr_backbone": 1e-3},
        "fusion": {"epochs": 80},
    }
