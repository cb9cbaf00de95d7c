"""Run configuration: JSON documents with strict (unknown keys rejected) parsing."""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .volume import EncoderConfig


@dataclass
class SplitConfig:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(p <= 0 for p in parts):
            raise ConfigError(f"split fractions must be positive: {parts}")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1: {parts}")


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    clinical_tokens: int = 4
    bins: int = 5
    lambda_rank: float = 0.5
    sigma_rank: float = 0.1
    learning_rate: float = 3e-3
    epochs: int = 80
    batch_size: int = 64
    patience: int = 20
    final_query: str = "clinical"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"width {self.d} must be positive and divisible by heads {self.heads}")
        if min(self.clinical_tokens, self.bins, self.epochs, self.batch_size, self.patience) <= 0:
            raise ConfigError("model sizes and schedule values must be positive")
        if self.lambda_rank < 0:
            raise ConfigError(f"lambda_rank must be >= 0, got {self.lambda_rank}")
        if self.sigma_rank <= 0:
            raise ConfigError(f"sigma_rank must be > 0, got {self.sigma_rank}")
        if self.final_query not in ("clinical", "symmetric"):
            raise ConfigError(f"final_query must be clinical|symmetric, got {self.final_query!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class SslConfig:
    steps: int = 300
    batch_subjects: int = 8
    contrastive_weight: float = 1.0
    variant: str = "additive"
    temperature: float = 0.1
    cutout_fraction: float = 0.25
    patch_swaps: int = 8
    learning_rate: float = 3e-3

    def __post_init__(self):
        if self.variant not in (
            "additive",
            "multiplicative",
            "reconstruction_only",
            "contrastive_only",
        ):
            raise ConfigError(f"unknown ssl variant {self.variant!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.cutout_fraction <= 0.5:
            raise ConfigError(f"cutout_fraction must be in (0, 0.5], got {self.cutout_fraction}")
        if self.steps < 0 or self.batch_subjects < 2 or self.patch_swaps < 1:
            raise ConfigError("ssl schedule values out of range")


@dataclass
class SimulateConfig:
    n: int = 200
    beta_clinical: float = 0.8
    beta_image: float = 0.8
    beta_interaction: float = 0.0
    censor_rate: float = 0.25

    def __post_init__(self):
        if self.n < 20:
            raise ConfigError(f"cohort size must be >= 20, got {self.n}")
        if not 0.0 <= self.censor_rate <= 0.9:
            raise ConfigError(f"censor_rate must be in [0, 0.9], got {self.censor_rate}")


@dataclass
class RunConfig:
    seed: int = 0
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    bootstrap: int = 1000
    horizon_months: int = None

    def __post_init__(self):
        if self.encoder.d != self.model.d:
            raise ConfigError(
                f"encoder width {self.encoder.d} must equal model width "
                f"{self.model.d} (imaging tokens feed the fusion layers)"
            )
        if self.bootstrap < 1:
            raise ConfigError(f"bootstrap count must be >= 1, got {self.bootstrap}")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["encoder"]["dims"] = list(out["encoder"]["dims"])
        return out


_SECTIONS = {
    "split": SplitConfig,
    "model": ModelConfig,
    "encoder": EncoderConfig,
    "ssl": SslConfig,
    "simulate": SimulateConfig,
}


def _build_section(cls, payload, where):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    if cls is EncoderConfig and "dims" in payload:
        payload = dict(payload, dims=tuple(payload["dims"]))
    return cls(**payload)


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
