"""Run configuration: flat dotted keys over typed sections.

Config files are plain text, one `section.field=value` per line, `#`
comments allowed. Unknown keys are errors. The resolved configuration has
a canonical text form whose sha256 prefix identifies runs and checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .errors import ConfigError

STRATEGIES = ("none", "neighbor", "triplet", "km", "pm", "ce")


@dataclass
class DataConfig:
    n_samples: int = 2000
    num_classes: int = 4
    image_size: int = 64


@dataclass
class LossConfig:
    strategy: str = "pm"
    w_ins: float = 1.0
    w_pix: float = 1.0
    w_sem: float = 1.0
    tau_ins: float = 0.2
    tau_pix: float = 0.2
    tau_km: float = 0.2
    margin: float = 0.3
    n_neighbors: int = 1
    triplet_orientation: str = "as_written"


@dataclass
class KMeansConfig:
    k: int = 100
    iters: int = 10
    restarts: int = 3


@dataclass
class ProtoConfig:
    k: int = 150
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    softmax_temp: float = 0.1
    freeze_steps: int = 0


@dataclass
class QueueConfig:
    global_capacity: int = 4096
    dense_capacity: int = 4096
    cells_per_image: int = 4


@dataclass
class OptimConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    ema_m: float = 0.99
    seed: int = 0
    checkpoint_interval: int = 0  # steps; 0 = final checkpoint only
    threads: int = 1


@dataclass
class ProbeConfig:
    lr: float = 0.1
    epochs: int = 20
    val_fraction: float = 0.2


# aug.seed and model.seed are derived from train.seed, never set directly
_HIDDEN_FIELDS = {"aug": {"seed"}, "model": {"seed"}}


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.loss.strategy not in STRATEGIES:
            raise ConfigError(
                f"loss.strategy must be one of {STRATEGIES}, got {self.loss.strategy!r}"
            )
        if self.loss.triplet_orientation not in ("as_written", "corrected"):
            raise ConfigError(
                f"loss.triplet_orientation must be as_written or corrected, "
                f"got {self.loss.triplet_orientation!r}"
            )
        for name in ("w_ins", "w_pix", "w_sem"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        for name in ("tau_ins", "tau_pix", "tau_km"):
            if getattr(self.loss, name) <= 0:
                raise ConfigError(f"loss.{name} must be > 0")
        if self.loss.margin < 0:
            raise ConfigError("loss.margin must be >= 0")
        if self.loss.n_neighbors < 0:
            raise ConfigError("loss.n_neighbors must be >= 0")
        if self.train.lr0 <= 0:
            raise ConfigError("train.lr0 must be > 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if not 0.0 <= self.train.ema_m < 1.0:
            raise ConfigError("train.ema_m must be in [0, 1)")
        if self.kmeans.k < 2 or self.proto.k < 2:
            raise ConfigError("cluster counts must be >= 2")
        if not 0.0 < self.probe.val_fraction < 1.0:
            raise ConfigError("probe.val_fraction must be in (0, 1)")

    # -- flat key access -------------------------------------------------

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def resolved_items(self) -> list[tuple[str, str]]:
        items = []
        for sec_name, sec in self.sections().items():
            hidden = _HIDDEN_FIELDS.get(sec_name, set())
            for f in fields(sec):
                if f.name in hidden:
                    continue
                items.append((f"{sec_name}.{f.name}", _fmt(getattr(sec, f.name))))
        return sorted(items)

    def resolved_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.resolved_items()) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:12]

    def to_dict(self) -> dict[str, str]:
        return dict(self.resolved_items())

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        merged = self.to_dict()
        for key, value in overrides.items():
            if key not in merged:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = value
        return config_from_dict(merged)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, default) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def config_from_dict(values: dict[str, str]) -> TrainConfig:
    base = TrainConfig()
    section_values: dict[str, dict] = {name: {} for name in base.sections()}
    for key, raw in values.items():
        if "." not in key:
            raise ConfigError(f"unknown config key: {key}")
        sec_name, field_name = key.split(".", 1)
        sec = base.sections().get(sec_name)
        if sec is None:
            raise ConfigError(f"unknown config key: {key}")
        sec_fields = {f.name: f for f in fields(sec)}
        if field_name not in sec_fields or field_name in _HIDDEN_FIELDS.get(sec_name, set()):
            raise ConfigError(f"unknown config key: {key}")
        default = getattr(sec, field_name)
        section_values[sec_name][field_name] = _coerce(key, str(raw), default)
    rebuilt = {
        name: replace(sec, **section_values[name]) for name, sec in base.sections().items()
    }
    return TrainConfig(**rebuilt)


def parse_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> TrainConfig:
    values = parse_config_file(path) if path is not None else {}
    if overrides:
        values.update(overrides)
    return config_from_dict(values) if values else TrainConfig()


def desk_config() -> TrainConfig:
    """Desk-scale defaults: small synthetic dataset, cluster counts sized
    for how few distinct semantics a toy batch carries."""
    return TrainConfig().with_overrides({"kmeans.k": "16", "proto.k": "24"})


def paper_scale_config() -> TrainConfig:
    """The large-scale training recipe, retained for documentation; these
    values assume hundreds of epochs on a real accelerator."""
    return TrainConfig().with_overrides(
        {
            "train.lr0": "0.3",
            "train.batch_size": "256",
            "train.epochs": "800",
            "train.ema_m": "0.999",
            "kmeans.k": "100",
            "proto.k": "150",
        }
    )
