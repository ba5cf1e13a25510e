"""Run configuration: ``[model]`` and ``[train]`` sections of ``key = value`` lines."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .cmm import MambaConfig
from .tensor import ConfigurationError

ABLATIONS = ("cross_attention", "cmm", "sam")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    image_side: int = 32
    patch_size: int = 4
    channels: int = 3
    encoder_layers: int = 4
    decoder_layers: int = 2
    text_layers: int = 2
    max_len: int = 32
    vocab_size: int = 0  # 0: taken from the dataset vocabulary
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    fusion_depth: int = 2
    answers: int = 0  # 0: taken from the dataset answer vocabulary
    stable_mode: bool = True
    paper_literal: bool = False
    no_cross_attention: bool = False
    no_cmm: bool = False
    no_sam: bool = False
    # fixed channel standardisation applied after scaling pixels to [0, 1]
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ConfigurationError(f"image side {self.image_side} not divisible by patch {self.patch_size}")

    def mamba(self) -> MambaConfig:
        return MambaConfig(self.d_model, self.expand, self.state_dim, self.conv_width, self.stable_mode)

    def ablated(self, *names: str) -> "ModelConfig":
        for n in names:
            if n not in ABLATIONS:
                raise ConfigurationError(f"unknown ablation {n!r}; choose from {ABLATIONS}")
        return dataclasses.replace(self, **{f"no_{n}": True for n in names})


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 300
    batch_size: int = 1
    lr: float = 5e-4
    weight_decay: float = 0.01
    schedule: str = "onecycle"  # onecycle | cosine | constant
    pct_start: float = 0.1
    image_mask_prob: float = 0.75
    text_mask_prob: float = 0.15
    normalize_target: bool = False
    masked_only: bool = True
    video_frames: int = 50
    checkpoint_every: int = 0  # epochs; 0: final checkpoint only
    abort_after_nonfinite: int = 3

    def __post_init__(self) -> None:
        if self.schedule not in ("onecycle", "cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch size >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()


def _convert(raw: str, kind, key: str):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None


def _section(cls, items: dict[str, str], section: str):
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return cls(**{k: _convert(v, known[k], f"{section}.{k}") for k, v in items.items()})


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from None
    extra = sorted(set(cp.sections()) - {"model", "train"})
    if extra:
        raise ConfigurationError(f"unknown sections: {', '.join(extra)}")
    model = _section(ModelConfig, dict(cp["model"]) if cp.has_section("model") else {}, "model")
    train = _section(TrainConfig, dict(cp["train"]) if cp.has_section("train") else {}, "train")
    return RunConfig(model, train)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name, section in (("model", cfg.model), ("train", cfg.train)):
        lines.append(f"[{name}]")
        for f in fields(section):
            v = getattr(section, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
