"""Experiment presets and their JSON form.

Two model profiles exist. ``desk`` is the laptop-scale default (192-wide
encoder, batch 128). ``tiny`` shrinks widths and batch so that the trend
experiments fit on a single CPU core; the test suite and acceptance runs use
it. ImageNet-scale settings are kept as annotations only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..objectives import SETTINGS
from ..vit import ModelConfig
from .optim import ScheduleParams


class ConfigError(ValueError):
    pass


FULL_SCALE = {
    "dataset": "ImageNet-1K",
    "model": "ViT-B/16",
    "epochs": 100,
    "warmup_epochs": 20,
    "base_lr": 1.5e-4,
    "lcmae_base_lr": 6e-4,
    "lcmae_decoder_depth": 2,
    "batch_size": 4096,
    "mask_ratio": 0.75,
}

PROFILES = {
    "desk": dict(model={}, batch_size=128, base_lr=1.5e-3, epochs=100),
    "tiny": dict(
        model=dict(enc_depth=4, enc_dim=64, enc_heads=4, dec_depth=2, dec_dim=64, dec_heads=4, proj_dim=64),
        batch_size=32, base_lr=8e-3, epochs=75,
    ),
}

LCMAE_LR_FACTOR = 4.0  # 6e-4 / 1.5e-4
LCMAE_DEC_DEPTH = 2
WARMUP_FRACTION = 0.2
MASK_RATIOS = (0.3, 0.45, 0.6, 0.75, 0.9)
DECODER_VARIANTS = ("transformer", "conv", "weighted_avg")


@dataclass
class DataRef:
    path: str = ""  # empty: the built-in tiny corpus
    format: str = "cifar-binary"
    n_images: int | None = 512
    indices: list[int] | None = None  # explicit subset, e.g. one image

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentPreset:
    name: str
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: str = "b"  # ablation letter a-g
    mask_ratio: float = 0.75
    data: DataRef = field(default_factory=DataRef)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalize_target: bool = True
    normalize_pred: bool = False
    in_standardize: bool = False
    reduction: str = "mean"
    optimizer: dict = field(default_factory=lambda: {"betas": [0.9, 0.95], "weight_decay": 0.05, "eps": 1e-8})
    log_every: int = 1
    collapse_every: int = 50
    collapse_images: int = 16
    stop_on_collapse: bool = False
    checkpoint_every: int = 0  # 0: only at the end
    analysis: dict = field(default_factory=lambda: {"mask_seed": 1234, "images": 32, "reference": "classifier"})
    full_scale: dict = field(default_factory=lambda: dict(FULL_SCALE))
    notes: str = ""

    @property
    def steps(self) -> int:
        return self.schedule.total_steps

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return SETTINGS[self.losses]

    @property
    def ae_mode(self) -> bool:
        return self.model.decoder == "ae_block"

    def validate(self) -> "ExperimentPreset":
        if not self.name:
            raise ConfigError("preset needs a name")
        if self.losses not in SETTINGS:
            raise ConfigError(f"unknown loss setting {self.losses!r}; expected one of a-g")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask ratio {self.mask_ratio} outside [0, 1]")
        if self.ae_mode and self.mask_ratio != 0.0:
            raise ConfigError("block autoencoders train without masking (mask_ratio 0)")
        if not self.ae_mode and self.mask_ratio == 0.0 and self.flags[0]:
            raise ConfigError("reconstruction loss with mask ratio 0 has no masked targets")
        if self.schedule.total_steps < 1:
            raise ConfigError("schedule has no steps")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.model.img_size % self.model.patch:
            raise ConfigError("image size not divisible by patch size")
        return self

    # ----------------------------------------------------------- JSON
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["data"] = self.data.to_dict()
        d["schedule"] = self.schedule.to_dict()
        d["loss_weights"] = list(self.loss_weights)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPreset":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown preset keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "data" in d:
                d["data"] = DataRef(**d["data"])
            if "schedule" in d:
                d["schedule"] = ScheduleParams(**d["schedule"])
            if "loss_weights" in d:
                d["loss_weights"] = tuple(float(w) for w in d["loss_weights"])
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPreset":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("preset JSON must be an object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentPreset":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)


# ------------------------------------------------------------ registry
def _schedule(profile: str, base_lr: float, n_images: int, epochs: float | None = None) -> ScheduleParams:
    prof = PROFILES[profile]
    bs = prof["batch_size"]
    epochs = prof["epochs"] if epochs is None else epochs
    spe = max(1, math.ceil(n_images / bs))
    return ScheduleParams(base_lr=base_lr, batch_size=bs, warmup_epochs=WARMUP_FRACTION * epochs,
                          total_epochs=epochs, steps_per_epoch=spe)


def _base(name: str, profile: str, losses: str = "b", lcmae: bool = False, n_images: int = 512,
          epochs: float | None = None, **model_kw) -> ExperimentPreset:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    prof = PROFILES[profile]
    mk = dict(prof["model"])
    lr = prof["base_lr"]
    if lcmae:
        mk["dec_depth"] = LCMAE_DEC_DEPTH
        # a bias-free projector on pixel outputs cannot hide collapse in its own bias
        mk["projector_input"] = "pixels"
        mk["projector_bias"] = False
        lr *= LCMAE_LR_FACTOR
    mk.update(model_kw)
    return ExperimentPreset(
        name=name, model=ModelConfig(**mk), losses=losses,
        data=DataRef(n_images=n_images), schedule=_schedule(profile, lr, n_images, epochs),
        notes=f"profile={profile}; warmup is {WARMUP_FRACTION:.0%} of total steps",
    )


def preset_names() -> list[str]:
    names = [f"ablation-{k}" for k in "abcdefg"]
    names += ["mae", "lcmae", "decoder-depth-4", "single-image"]
    names += [f"mask-ratio-{r}" for r in MASK_RATIOS]
    names += [f"decoder-{v}" for v in DECODER_VARIANTS]
    names += [f"ae-block-{b}" for b in (4, 8, 12, 28)]
    return names


def get_preset(name: str, profile: str = "tiny") -> ExperimentPreset:
    """Build a registered preset; see :func:`preset_names`."""
    if name.startswith("ablation-") and name[-1] in SETTINGS and len(name) == 10:
        p = _base(name, profile, losses=name[-1], lcmae=True)
        p.collapse_every = 25
        return p.validate()
    if name == "lcmae":
        return _base(name, profile, losses="a", lcmae=True).validate()
    if name == "mae":
        return _base(name, profile).validate()
    if name == "decoder-depth-4":
        return _base(name, profile, dec_depth=4).validate()
    if name == "single-image":
        p = _base(name, profile, n_images=1)
        p.data = DataRef(n_images=None, indices=[0])
        p.schedule = replace(p.schedule, steps_per_epoch=_schedule(profile, 1.0, 512).steps_per_epoch)
        return p.validate()
    if name.startswith("mask-ratio-"):
        try:
            r = float(name[len("mask-ratio-"):])
        except ValueError:
            raise ConfigError(f"bad mask ratio in {name!r}") from None
        p = _base(name, profile)
        p.mask_ratio = r
        return p.validate()
    if name.startswith("decoder-") and name[len("decoder-"):] in DECODER_VARIANTS:
        return _base(name, profile, decoder=name[len("decoder-"):]).validate()
    if name.startswith("ae-block-"):
        b = int(name[len("ae-block-"):])
        p = _base(name, profile, decoder="ae_block", ae_block=b)
        p.mask_ratio = 0.0
        p.collapse_images = 16
        return p.validate()
    raise ConfigError(f"unknown preset {name!r}")
