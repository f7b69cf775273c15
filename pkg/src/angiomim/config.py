"""One JSON document holding every tunable of the pipeline."""

import json
from dataclasses import asdict, dataclass, fields, replace

from .masking import MaskSchedule
from .mim import MAEConfig, TrainConfig
from .vesselness import VesselnessParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # vessel extraction
    scales: tuple = (1.0, 2.0, 3.0, 4.0)
    alpha: float = 92.0
    frangi_beta: float = 0.5
    frangi_c: object = "auto"
    dark_vessels: bool = True
    # guidance and masking
    eta: float = 0.5
    patch_size: int = 16
    beta0: float = 0.0
    betaE: float = 0.5
    epochs: int = 10
    gamma: float = 0.5
    # masked autoencoder
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    decoder_dim: int = 64
    decoder_depth: int = 1
    norm_pix_loss: bool = False
    consistency: bool = True
    lr: float = 3e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    # segmentor
    seg_epochs: int = 40
    seg_lr: float = 3e-3
    seg_batch: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        try:
            self.vesselness_params()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        for name in ("patch_size", "embed_dim", "depth", "num_heads", "decoder_dim",
                     "decoder_depth", "seg_epochs", "seg_batch"):
            value = getattr(self, name)
            if int(value) != value or value < (0 if name.endswith("depth") else 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ConfigError("embed_dim and decoder_dim must be multiples of 4")
        if self.embed_dim % self.num_heads or self.decoder_dim % self.num_heads:
            raise ConfigError("embedding dims must be divisible by num_heads")
        if self.lr < 0 or self.seg_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.norm_pix_loss and self.consistency:
            raise ConfigError("norm_pix_loss cannot be combined with the consistency loss")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    def vesselness_params(self):
        return VesselnessParams(self.scales, self.alpha, self.frangi_beta, self.frangi_c,
                                self.dark_vessels)

    def schedule(self):
        return MaskSchedule(self.beta0, self.betaE, self.epochs, self.gamma)

    def mae_config(self, img_size):
        return MAEConfig(img_size, self.patch_size, self.embed_dim, self.depth, self.num_heads,
                         self.mlp_ratio, self.decoder_dim, self.decoder_depth, self.norm_pix_loss)

    def train_config(self):
        return TrainConfig(self.epochs, self.beta0, self.betaE, self.gamma, self.lr,
                           self.optimizer, self.momentum, self.consistency, self.seed)

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(d["scales"])
        return d

    def updated(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        try:
            return replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
