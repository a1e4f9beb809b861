"""Model and training configuration, JSON presets, dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

BLOCK_COUNTS = (6, 10, 14, 18, 22)
DOWNSAMPLE_MODES = ("conv_stride2", "patch_merge_3d")
UPSAMPLE_MODES = ("transposed_conv", "trilinear", "patch_expand")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch: tuple[int, int, int] = (128, 128, 96)
    embed_dim: int = 128
    heads: tuple[int, int, int, int] = (4, 8, 16, 32)
    blocks: int = 10
    window: tuple[int, int, int] = (4, 4, 4)
    downsample: str = "conv_stride2"
    upsample: str = "transposed_conv"
    position: str = "inductive_biased"
    abs_every_block: bool = True
    local_path: bool = True
    local_channels: int = 16
    local_kernel: int = 5
    embed_kernel: int = 3
    mlp_ratio: int = 4
    num_classes: int = 2
    encoder_pairs: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        self.patch = tuple(self.patch)
        self.heads = tuple(self.heads)
        self.window = tuple(self.window)
        if self.encoder_pairs is not None:
            self.encoder_pairs = tuple(self.encoder_pairs)
        self.validate()

    def validate(self) -> None:
        if self.encoder_pairs is None and self.blocks not in BLOCK_COUNTS:
            raise ConfigError(f"blocks must be one of {BLOCK_COUNTS}, got {self.blocks}")
        if self.encoder_pairs is not None and len(self.encoder_pairs) != 3:
            raise ConfigError("encoder_pairs must list pairs for 3 encoder levels")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ConfigError(f"downsample must be one of {DOWNSAMPLE_MODES}, got {self.downsample!r}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}")
        if any(p % 32 for p in self.patch):
            raise ConfigError(
                f"patch {self.patch} must be divisible by 32 (embedding /4, three halvings)"
            )
        if len(self.heads) != 4:
            raise ConfigError("heads must give one count per encoder level plus the bottleneck")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 (two final channel halvings)")
        if self.num_classes != 2:
            raise ConfigError("only two-class (vessel / background) segmentation is supported")

    def stage_pairs(self) -> tuple[int, int, int]:
        """Transformer pairs per encoder level; the decoder mirrors this."""
        if self.encoder_pairs is not None:
            return self.encoder_pairs
        per_side = (self.blocks // 2 - 1) // 2
        pairs = [0, 0, 0]
        for i in range(per_side):
            pairs[i % 3] += 1
        return tuple(pairs)

    def to_dict(self) -> dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))


@dataclass
class TrainConfig:
    lr: float = 3e-5
    momentum: float = 0.9
    weight_decay: float = 2e-3
    batch: int = 2
    epochs: int = 750
    steps_per_epoch: int = 8
    beta: float = 6.0
    crop: tuple[int, int, int] = (128, 128, 96)
    smooth: float = 1e-6
    clip_grad_norm: float | None = None
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.crop = tuple(self.crop)
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch and steps_per_epoch must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stride: int = 24
    threshold: float = 0.5
    min_component_mm3: float = 180.0
    connectivity: int = 26
    postprocess: bool = True
    threads: int = 1

    def to_dict(self) -> dict[str, Any]:
        d = _to_jsonable(dataclasses.asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        _reject_unknown(cls, d, "")
        model = d.pop("model", {})
        train = d.pop("train", {})
        _reject_unknown(ModelConfig, model, "model.")
        _reject_unknown(TrainConfig, train, "train.")
        return cls(model=ModelConfig(**model), train=TrainConfig(**train), **d)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _reject_unknown(cls, d: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def apply_overrides(d: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return d


def load_preset(name: str) -> RunConfig:
    text = resources.files("ibimhav.presets").joinpath(f"{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Read a JSON config (or a preset name like ``desk``) and apply overrides."""
    if path is None:
        base = RunConfig().to_dict()
    elif str(path) in ("desk", "paper"):
        base = load_preset(str(path)).to_dict()
    else:
        base = json.loads(Path(path).read_text())
        base = RunConfig.from_dict(base).to_dict()
    return RunConfig.from_dict(apply_overrides(base, list(overrides)))
