"""morphmark/settings.py.

Defines how the default settings for morphmark should be loaded
"""
import json
import math
import os
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Any, Dict, Iterator, List, Optional, Tuple, Type
from warnings import warn

import toml

from .exceptions import InvalidSettingsPath, PresetDoesNotExist, UnsupportedSettings
from .presets import presets

MAX_CONFIG_SEARCH_DEPTH: int = 25  # The number of parent directories to for a config file within
STOP_CONFIG_SEARCH_ON_DIRS: Tuple[str, ...] = (".git", ".hg")
CONFIG_SOURCES: Tuple[str, ...] = ("morphmark.json", "pyproject.toml")
TOML_SECTION = ("tool", "morphmark")
THREADS_ENV_VAR = "MORPHMARK_THREADS"
RUNTIME_SOURCE = "runtime"

_STR_BOOLEAN_MAPPING = {
    "y": True,
    "yes": True,
    "t": True,
    "on": True,
    "1": True,
    "true": True,
    "n": False,
    "no": False,
    "f": False,
    "off": False,
    "0": False,
    "false": False,
}


@dataclass(frozen=True)
class DataSettings:
    """Synthetic dataset generation and dataset selection."""

    size: int = 64
    count: int = 200
    landmarks: int = 5
    warp: float = 0.5
    noise: float = 0.02
    exemplar_id: str = ""

    def __post_init__(self) -> None:
        if self.size < 8:
            raise ValueError(f"data.size must be at least 8 pixels, got {self.size}.")
        if self.count < 2:
            raise ValueError(f"data.count must be at least 2, got {self.count}.")
        if not 1 <= self.landmarks <= 8:
            raise ValueError(f"data.landmarks must lie in [1, 8], got {self.landmarks}.")
        if not 0.0 <= self.warp <= 1.0:
            raise ValueError(f"data.warp must lie in [0, 1], got {self.warp}.")
        if self.noise < 0:
            raise ValueError(f"data.noise must be nonnegative, got {self.noise}.")


@dataclass(frozen=True)
class RegnetSettings:
    """Shape of the stage I registration network."""

    d_model: int = 64
    heads: int = 2
    layers: int = 2
    steps: int = 2
    window_grid: int = 4
    mlp_hidden: int = 128
    feedforward: int = 128
    dropout: float = 0.1
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 64)
    scale_x: float = 1.0
    scale_y: float = 1.0
    rotation: float = math.pi / 2
    shear: float = math.pi / 2
    global_transform: str = "affine"

    def __post_init__(self) -> None:
        if self.d_model % 2 or self.d_model % self.heads:
            raise ValueError(
                f"regnet.d_model ({self.d_model}) must be even and divisible by regnet.heads "
                f"({self.heads})."
            )
        if self.steps < 1:
            raise ValueError(f"regnet.steps must be at least 1, got {self.steps}.")
        if self.window_grid < 1:
            raise ValueError(f"regnet.window_grid must be positive, got {self.window_grid}.")
        if len(self.encoder_channels) != 4:
            raise ValueError("regnet.encoder_channels must list exactly four stage widths.")
        if min(self.scale_x, self.scale_y, self.rotation, self.shear) <= 0:
            raise ValueError("regnet transform intensities must be positive.")
        if self.global_transform not in ("affine", "perspective"):
            raise ValueError(
                f"regnet.global_transform must be affine or perspective, got "
                f"{self.global_transform}."
            )


@dataclass(frozen=True)
class AdamSettings:
    """Optimizer constants shared by both stages."""

    beta1: float = 0.99
    beta2: float = 0.0
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class StageOneSettings:
    """Schedules and loss switches of the registration stage."""

    epochs: int = 90
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_final: float = 5e-5
    ramp_fraction: float = 1 / 3
    lambda1_max: float = 1.0
    lambda2: float = 0.25
    lambda3_initial: float = 5.0
    ema_start: int = -1
    tau: float = 0.9
    mask_sigma: float = 3.0
    smooth_temperature: float = 0.1
    ssim_window: int = 7
    synthetic_strength: float = 0.5
    field_point_sign: int = 1
    use_global_alignment: bool = True
    use_edge_similarity: bool = True
    use_edge_smoothness: bool = True
    use_smooth: bool = True
    use_inv: bool = True
    use_syn: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"stage1.epochs must be at least 1, got {self.epochs}.")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"stage1.batch_size must be even, got {self.batch_size}.")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"stage1.tau must lie in [0, 1), got {self.tau}.")
        if self.field_point_sign not in (-1, 0, 1):
            raise ValueError("stage1.field_point_sign must be 1, -1 or 0 (auto).")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"stage1.ssim_window must be odd, got {self.ssim_window}.")
        if min(self.mask_sigma, self.smooth_temperature) <= 0:
            raise ValueError("stage1.mask_sigma and stage1.smooth_temperature must be positive.")
        if min(self.lambda1_max, self.lambda2, self.lambda3_initial) < 0:
            raise ValueError("stage1 loss weights must be nonnegative.")

    @property
    def switch_epoch(self) -> int:
        """Last epoch of the constant-lr phase, where the local-deformation ramp completes."""
        return max(1, int(round(self.epochs * self.ramp_fraction)))

    @property
    def ema_start_epoch(self) -> int:
        if self.ema_start >= 0:
            return self.ema_start
        return int(math.floor(self.epochs * 200 / 750))


@dataclass(frozen=True)
class C2TSettings:
    """Schedules and switches of consistency co-teaching."""

    epochs: int = 60
    batch_size: int = 4
    unlabeled_per_step: int = 16
    lr: float = 1e-3
    lr_milestones: Tuple[float, ...] = (0.6, 0.8)
    lr_gamma: float = 0.1
    epsilon_max: float = 0.8
    epsilon_ramp: float = 0.3
    use_filter: bool = True
    self_consistency_weight: float = 1.0
    cross_weight: float = 1.0
    consistency_on_labeled: bool = True
    sigma: float = 3.0
    base_channels: int = 16
    easy_rotation: float = 5.0
    easy_scale: float = 0.05
    hard_rotation: float = 20.0
    hard_scale: float = 0.2
    flip: bool = True
    corrupt_fraction: float = 0.0
    corrupt_offset: float = 10.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"stage2.epochs must be at least 1, got {self.epochs}.")
        if self.batch_size < 1:
            raise ValueError(f"stage2.batch_size must be positive, got {self.batch_size}.")
        if self.unlabeled_per_step < 1:
            raise ValueError(
                f"stage2.unlabeled_per_step must be positive, got {self.unlabeled_per_step}."
            )
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ValueError(f"stage2.epsilon_max must lie in [0, 1], got {self.epsilon_max}.")
        if min(self.self_consistency_weight, self.cross_weight) < 0:
            raise ValueError("stage2 loss weights must be nonnegative.")
        if self.sigma <= 0:
            raise ValueError(f"stage2.sigma must be positive, got {self.sigma}.")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("stage2.corrupt_fraction must lie in [0, 1].")

    @property
    def ramp_epochs(self) -> int:
        return max(1, int(round(self.epochs * self.epsilon_ramp)))


_SECTION_TYPES: Dict[str, Type[Any]] = {
    "data": DataSettings,
    "regnet": RegnetSettings,
    "adam": AdamSettings,
    "stage1": StageOneSettings,
    "stage2": C2TSettings,
}


@dataclass(frozen=True)
class _Config:
    """Defines the data schema and defaults used for morphmark configuration.

    Section values are addressed with a flat dotted namespace (`stage1.epochs`), top level values
    by their plain name (`seed`).
    """

    data: DataSettings = field(default_factory=DataSettings)
    regnet: RegnetSettings = field(default_factory=RegnetSettings)
    adam: AdamSettings = field(default_factory=AdamSettings)
    stage1: StageOneSettings = field(default_factory=StageOneSettings)
    stage2: C2TSettings = field(default_factory=C2TSettings)
    seed: int = 0
    threads: int = 1
    preset: str = ""
    verbose: bool = False
    quiet: bool = False
    color_output: bool = False
    format_error: str = "{error}: {message}"
    format_success: str = "{success}: {message}"
    sources: Tuple[Dict[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}.")

    def __hash__(self) -> int:
        return id(self)

    def to_dict(self) -> Dict[str, Any]:
        """The resolved configuration as a flat, JSON serializable dotted mapping."""
        return {key: _jsonable(value) for key, value in _flatten_config(self)}


def _flatten_config(config: _Config) -> Iterator[Tuple[str, Any]]:
    for config_field in fields(_Config):
        if config_field.name == "sources":
            continue
        value = getattr(config, config_field.name)
        if config_field.name in _SECTION_TYPES:
            for section_field in fields(value):
                yield f"{config_field.name}.{section_field.name}", getattr(
                    value, section_field.name
                )
        else:
            yield config_field.name, value


def _jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


_DEFAULT_SETTINGS: Dict[str, Any] = dict(_flatten_config(_Config()))


class Config(_Config):
    def __init__(
        self,
        settings_file: str = "",
        settings_path: str = "",
        config: Optional[_Config] = None,
        **config_overrides: Any,
    ):
        if config:
            combined = dict(_flatten_config(config))
            unknown = {
                key: {"value": value, "source": RUNTIME_SOURCE}
                for key, value in config_overrides.items()
                if key not in _DEFAULT_SETTINGS
            }
            if unknown:
                raise UnsupportedSettings(unknown)
            combined.update(config_overrides)
            super().__init__(**_build(combined), sources=config.sources)  # type: ignore
            return

        quiet = config_overrides.get("quiet", False)
        sources: List[Dict[str, Any]] = [{**_DEFAULT_SETTINGS, "source": "defaults"}]

        config_settings: Dict[str, Any]
        if settings_file:
            if not os.path.isfile(settings_file):
                raise InvalidSettingsPath(settings_file)
            config_settings = _get_config_data(os.path.abspath(settings_file))
            if not config_settings and not quiet:
                warn(
                    f"A custom settings file was specified: {settings_file} but no morphmark "
                    "configuration was found inside."
                )
        elif settings_path:
            if not os.path.exists(settings_path):
                raise InvalidSettingsPath(settings_path)
            _, config_settings = _find_config(os.path.abspath(settings_path))
        else:
            config_settings = {}

        preset_name = config_overrides.get("preset", config_settings.get("preset", ""))
        preset: Dict[str, Any] = {}
        if preset_name:
            if preset_name not in presets:
                raise PresetDoesNotExist(preset_name)
            preset = presets[preset_name].copy()
            sources.append({**preset, "source": f"{preset_name} preset"})

        if config_settings:
            sources.append(config_settings)

        environment: Dict[str, Any] = {}
        if os.environ.get(THREADS_ENV_VAR):
            environment["threads"] = os.environ[THREADS_ENV_VAR]
            sources.append({**environment, "source": THREADS_ENV_VAR})

        if config_overrides:
            sources.append({**config_overrides, "source": RUNTIME_SOURCE})

        combined_config = {**preset, **config_settings, **environment, **config_overrides}
        combined_config.pop("source", None)

        unsupported = {
            key: {"value": value, "source": _source_of(key, sources)}
            for key, value in combined_config.items()
            if key not in _DEFAULT_SETTINGS
        }
        if unsupported:
            raise UnsupportedSettings(unsupported)

        super().__init__(**_build(combined_config), sources=tuple(sources))  # type: ignore


def _source_of(key: str, sources: List[Dict[str, Any]]) -> str:
    for source in reversed(sources):
        if key in source:
            return str(source.get("source", ""))
    return ""  # pragma: no cover - every key comes from some source


def _build(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Turns a flat dotted mapping into constructor arguments, coercing every value."""
    section_values: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTION_TYPES}
    top_level: Dict[str, Any] = {}
    for key, value in flat.items():
        if key == "sources":
            continue
        coerced = _coerce(key, value)
        section, _, name = key.partition(".")
        if name:
            section_values[section][name] = coerced
        else:
            top_level[key] = coerced

    for section, section_type in _SECTION_TYPES.items():
        top_level[section] = section_type(**section_values[section])
    return top_level


def _coerce(key: str, value: Any) -> Any:
    default_value = _DEFAULT_SETTINGS[key]
    if isinstance(default_value, bool):
        return value if isinstance(value, bool) else _as_bool(str(value))
    if isinstance(default_value, tuple):
        items = _as_list(value)
        element_type = type(default_value[0]) if default_value else str
        return tuple(element_type(item) for item in items)
    if isinstance(default_value, int) and isinstance(value, str):
        return int(float(value))
    return type(default_value)(value)


def _as_list(value: Any) -> List[Any]:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return list(value)


def _as_bool(value: str) -> bool:
    """Given a string value that represents True or False, returns the Boolean equivalent.
    Heavily inspired from distutils strtobool.
    """
    try:
        return _STR_BOOLEAN_MAPPING[value.lower()]
    except KeyError:
        raise ValueError(f"invalid truth value {value}")


def flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flattens nested config objects into the dotted namespace; dotted keys pass through."""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


@lru_cache()
def _find_config(path: str) -> Tuple[str, Dict[str, Any]]:
    current_directory = path
    tries = 0
    while current_directory and tries < MAX_CONFIG_SEARCH_DEPTH:
        for config_file_name in CONFIG_SOURCES:
            potential_config_file = os.path.join(current_directory, config_file_name)
            if os.path.isfile(potential_config_file):
                config_data: Dict[str, Any]
                try:
                    config_data = _get_config_data(potential_config_file)
                except Exception:
                    warn(f"Failed to pull configuration information from {potential_config_file}")
                    config_data = {}
                if config_data:
                    return (current_directory, config_data)

        for stop_dir in STOP_CONFIG_SEARCH_ON_DIRS:
            if os.path.isdir(os.path.join(current_directory, stop_dir)):
                return (current_directory, {})

        new_directory = os.path.split(current_directory)[0]
        if new_directory == current_directory:
            break

        current_directory = new_directory
        tries += 1

    return (path, {})


@lru_cache()
def _get_config_data(file_path: str) -> Dict[str, Any]:
    with open(file_path, encoding="utf-8") as config_file:
        if file_path.endswith(".toml"):
            config = toml.load(config_file)
            raw: Dict[str, Any] = config
            for key in TOML_SECTION:
                raw = raw.get(key, {})
            if not raw and not file_path.endswith("pyproject.toml"):
                raw = config
        else:
            raw = json.load(config_file)

    settings = flatten(raw)
    if settings:
        settings["source"] = file_path
    return settings


DEFAULT_CONFIG = Config()
