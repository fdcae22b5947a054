"""One JSON document configures every command.

Sections mirror the subsystems (``data``, ``model``, ``train``, ``probe``,
``scanpath``, ``metrics``, ``ablate``); every field has a default, unknown
keys are rejected, and the resolved document is embedded in each report.
"""

from dataclasses import asdict, dataclass, field, fields
import errno
import json
import logging
import os
import pathlib
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from gaze_world.gazedata import ORDERINGS, RULES, GridSpec
from gaze_world.model import ModelConfig
from gaze_world.probes import ProbeConfig
from gaze_world.scanpath import ScanpathDecoderConfig
from gaze_world.train import TrainConfig

_logger = logging.getLogger(__name__)

SEED_ENV = "GAZEWORLD_SEED"


class ConfigError(ValueError):
    """Carries every offending dotted key in ``keys``."""

    def __init__(self, message: str, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class DataConfig:
    seed: int = 0
    n_images: int = 200
    grid_rows: int = 4
    grid_cols: int = 4
    patch_size: int = 4
    rule: str = "intensity-order"
    fixations_per_image: int = 0
    n_blobs: int = 3
    revisit_probability: float = 0.2
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    directory: str = "data"

    def __post_init__(self):
        self.split = tuple(self.split)
        GridSpec(self.grid_rows, self.grid_cols)
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}, expected one of {RULES}")
        if self.patch_size < 1 or self.fixations_per_image < 0:
            raise ValueError("patch_size must be >= 1 and fixations_per_image >= 0")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_rows, self.grid_cols)


@dataclass
class MetricsConfig:
    stde_k_max: int = 3

    def __post_init__(self):
        if self.stde_k_max < 1:
            raise ValueError(f"stde_k_max must be >= 1, got {self.stde_k_max}")


@dataclass
class AblateConfig:
    orderings: Tuple[str, ...] = ORDERINGS
    seeds: Tuple[int, ...] = (0, 1, 2)
    label_fraction: float = 1.0

    def __post_init__(self):
        self.orderings = tuple(self.orderings)
        self.seeds = tuple(self.seeds)
        unknown = [o for o in self.orderings if o not in ORDERINGS]
        if unknown or not self.orderings:
            raise ValueError(f"orderings must be a nonempty subset of {ORDERINGS}, got {unknown}")
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    scanpath: ScanpathDecoderConfig = field(default_factory=ScanpathDecoderConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        """Plain JSON-ready dict (tuples become lists).

        Examples:
            >>> sorted(ExperimentConfig().to_dict())
            ['ablate', 'data', 'metrics', 'model', 'probe', 'scanpath', 'train']
        """
        return json.loads(json.dumps(asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


_SECTIONS = {f.name: f.default_factory for f in fields(ExperimentConfig)}


def _section_fields(name: str) -> List[str]:
    return [f.name for f in fields(_SECTIONS[name])]


def _offending_keys(name: str, values: Mapping) -> List[str]:
    """Keys of one section that fail on their own, else every key given for it."""
    factory = _SECTIONS[name]
    alone = []
    for key, value in values.items():
        try:
            factory(**{key: value})
        except (TypeError, ValueError):
            alone.append(f"{name}.{key}")
    return alone or [f"{name}.{key}" for key in values] or [name]


def config_from_dict(raw: Mapping) -> ExperimentConfig:
    """Build and validate a config; missing keys take their defaults.

    Examples:
        >>> config_from_dict({"train": {"epochs": 2}}).train.epochs
        2
        >>> config_from_dict({"train": {"epoch": 2}, "extra": {}})
        Traceback (most recent call last):
        ...
        gaze_world.config.ConfigError: invalid configuration: extra, train.epoch
    """
    if not isinstance(raw, Mapping):
        raise ConfigError("a configuration must be a JSON object")
    bad: List[str] = []
    messages: List[str] = []
    for name, value in raw.items():
        if name not in _SECTIONS:
            bad.append(name)
        elif not isinstance(value, Mapping):
            bad.append(name)
        else:
            known = _section_fields(name)
            bad.extend(f"{name}.{key}" for key in value if key not in known)
    if bad:
        raise ConfigError(f"invalid configuration: {', '.join(sorted(bad))}", sorted(bad))

    sections = {}
    for name, factory in _SECTIONS.items():
        try:
            sections[name] = factory(**raw.get(name, {}))
        except (TypeError, ValueError) as e:
            keys = _offending_keys(name, raw.get(name, {}))
            bad.extend(keys)
            messages.append(f"{', '.join(keys)}: {e}")
    if bad:
        raise ConfigError("invalid configuration: " + "; ".join(messages), sorted(bad))

    config = ExperimentConfig(**sections)
    mismatched = [
        f"model.{key}"
        for key in ("grid_rows", "grid_cols", "patch_size")
        if getattr(config.model, key) != getattr(config.data, key)
    ]
    if mismatched:
        raise ConfigError(
            f"model grid disagrees with the data section: {', '.join(mismatched)}", mismatched
        )
    return config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` assignments (values parsed as JSON, else strings).

    Examples:
        >>> apply_overrides({}, ["train.epochs=3", "data.rule=raster"])
        {'train': {'epochs': 3}, 'data': {'rule': 'raster'}}
        >>> apply_overrides({}, ["epochs=3"])
        Traceback (most recent call last):
        ...
        gaze_world.config.ConfigError: overrides must look like section.key=value: epochs=3
    """
    malformed = []
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot or not section or not key:
            malformed.append(item)
            continue
        raw.setdefault(section, {})
        if isinstance(raw[section], dict):
            raw[section][key] = _parse_value(value)
    if malformed:
        raise ConfigError(
            f"overrides must look like section.key=value: {', '.join(malformed)}", malformed
        )
    return raw


def load_config(
    path: Optional[pathlib.Path] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    raw: Dict = {}
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise FileNotFoundError(errno.ENOENT, "config file does not exist", str(path))
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    apply_overrides(raw, overrides)
    if environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", [SEED_ENV])
        _logger.info("seed %d from %s", seed, SEED_ENV)
        for section in ("data", "train"):
            if isinstance(raw.setdefault(section, {}), dict):
                raw[section]["seed"] = seed
    return config_from_dict(raw)
