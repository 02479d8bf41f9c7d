"""Run configuration: dataclasses with strict JSON loading.

Unknown keys and type errors are collected over the whole document and
reported together in a single :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .attention import ATTENTION_KINDS, GcaConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 9
    stem_channels: int = 64
    stage_depths: list = field(default_factory=lambda: [3, 4, 6, 3])
    stage_mids: list = field(default_factory=lambda: [64, 128, 256, 512])
    stage_strides: list = field(default_factory=lambda: [1, 2, 2, 2])
    attention: str = "GCA"
    attention_stages: list = field(default_factory=lambda: [True, True, True, True])
    gca: GcaConfig = field(default_factory=GcaConfig)
    baseline_reduction: int = 16
    decoder_channels: list = field(default_factory=lambda: [512, 256, 128, 64])
    final_channels: int = 32
    width_scale: typing.Union[str, float, int] = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def scale(self) -> Fraction:
        return Fraction(str(self.width_scale)) if isinstance(self.width_scale, str) \
            else Fraction(self.width_scale).limit_denominator(1 << 16)

    def width(self, w: int) -> int:
        """Scale a channel width, rounding to the nearest multiple of 2*G.

        The quantum depends only on the GCA group count so that switching the
        attention kind never changes any backbone width.
        """
        s = self.scale()
        if s == 1:
            return w
        q = 2 * self.gca.groups
        return max(q, int(round(w * s / q)) * q)

    def problems(self) -> list[str]:
        out = []
        if self.attention not in ATTENTION_KINDS:
            out.append(f"model.attention: {self.attention!r} not in {ATTENTION_KINDS}")
        n = len(self.stage_depths)
        for name in ("stage_mids", "stage_strides", "attention_stages"):
            if len(getattr(self, name)) != n:
                out.append(f"model.{name}: needs {n} entries to match stage_depths")
        if n != 4 or len(self.decoder_channels) != 4:
            out.append("model: the encoder has 4 stages and the decoder 4 skip stages")
        try:
            if self.scale() <= 0:
                out.append("model.width_scale: must be positive")
        except (ValueError, ZeroDivisionError):
            out.append(f"model.width_scale: cannot parse {self.width_scale!r}")
        if self.num_classes < 2:
            out.append("model.num_classes: must be >= 2")
        try:
            self.gca.validate()
        except ValueError as e:
            out.append(f"model.gca: {e}")
        return out


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 200
    batch_size: int = 8
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    eval_every: int = 5
    patience: int = 6
    min_delta: float = 1e-4
    seed: int = 10
    augment: bool = True

    def problems(self) -> list[str]:
        out = []
        for name in ("lr_max", "lr_min", "epochs", "batch_size", "weight_decay",
                     "eval_every", "patience", "min_delta"):
            if not getattr(self, name) > 0:
                out.append(f"train.{name}: must be strictly positive")
        if self.lr_min > self.lr_max:
            out.append("train.lr_min: must not exceed lr_max")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            out.append("train.betas: two values in (0, 1)")
        return out


@dataclass
class SynthConfig:
    image_size: int = 64
    num_classes: int = 4
    count: int = 100
    seed: int = 0
    noise_sigma: float = 8.0
    presence: float = 0.9
    modality: str = "gray"

    def problems(self) -> list[str]:
        out = []
        if self.num_classes < 2:
            out.append("data.synth.num_classes: must be >= 2")
        if self.image_size < 16:
            out.append("data.synth.image_size: must be >= 16")
        if self.modality not in ("gray", "rgb"):
            out.append("data.synth.modality: gray or rgb")
        return out


@dataclass
class DataConfig:
    dir: typing.Optional[str] = None
    split: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    image_size: int = 64
    synth: SynthConfig = field(default_factory=SynthConfig)

    def problems(self) -> list[str]:
        out = self.synth.problems()
        if self.image_size < 32 or self.image_size % 32:
            out.append("data.image_size: a positive multiple of 32")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or sum(self.split) > 1 + 1e-9:
            out.append("data.split: three non-negative fractions summing to at most 1")
        return out


@dataclass
class AugmentConfig:
    jitter: float = 0.3
    scale: list = field(default_factory=lambda: [0.8, 1.2])
    hflip_p: float = 0.5
    image_pad: int = 128
    mask_pad: int = 0
    hue: float = 0.1
    sat: float = 0.7
    val: float = 0.3
    modality: str = "gray"

    def problems(self) -> list[str]:
        out = []
        if self.modality not in ("gray", "rgb"):
            out.append("augment.modality: gray or rgb")
        if len(self.scale) != 2 or not 0 < self.scale[0] <= self.scale[1]:
            out.append("augment.scale: [low, high] with 0 < low <= high")
        if not 0 <= self.jitter < 1:
            out.append("augment.jitter: must lie in [0, 1)")
        return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def problems(self) -> list[str]:
        return (self.model.problems() + self.train.problems() + self.data.problems()
                + self.augment.problems())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def desk_run_config(seed: int = 10, attention: str = "GCA") -> RunConfig:
    """The CPU-sized protocol: width 1/4, 4 classes, 64x64 synthetic data.

    200 training and 50 validation samples; a shorter, hotter cosine
    schedule than the full protocol so a run fits in a few minutes.
    """
    return RunConfig(
        model=ModelConfig(width_scale="1/4", num_classes=4, attention=attention),
        train=TrainConfig(lr_max=1e-3, lr_min=1e-5, epochs=15, seed=seed),
        data=DataConfig(split=[0.8, 0.2, 0.0], image_size=64,
                        synth=SynthConfig(image_size=64, num_classes=4, count=250, seed=10)),
    )


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint in (list, str, bool):
        return isinstance(value, hint)
    return True


def from_dict(cls, data: dict, path: str = "", problems: list | None = None):
    """Build dataclass ``cls`` from ``data``, recording problems by dotted path."""
    top = problems is None
    problems = [] if top else problems
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            problems.append(f"{where}: unknown key")
            continue
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, where, problems)
        elif not _type_ok(value, hint):
            problems.append(f"{where}: {value!r} has the wrong type")
        else:
            kwargs[key] = value
    obj = cls(**kwargs)
    if top:
        if hasattr(obj, "problems"):
            problems.extend(obj.problems())
        if problems:
            raise ConfigError(problems)
    return obj


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return from_dict(RunConfig, json.load(fh))
