"""
Run configuration: key=value file (dotenv syntax) plus command-line overrides

Keys are flat and globally unique; each routes to one field of one nested
model. The file is parsed with dotenv_values so the process environment is
never consulted.
"""
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Type, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from services.crop_classifier import TrainConfig
from services.crop_sampler import SamplerConfig
from services.regionlet_detector import DetectorConfig
from services.saliency_dataset import SceneSpec
from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

TestCrops = Literal["auto", "image", "image+detection"]


class EvalOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    iou_threshold: float = Field(0.80, gt=0.0, le=1.0)
    ap_mode: Literal["11-point", "every-point"] = "11-point"
    size_bins: int = Field(5, ge=1)
    size_bin_mode: Literal["quantile", "equal-width"] = "quantile"
    test_crops: TestCrops = "auto"


class ExperimentOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train_count: int = Field(2000, ge=0)
    test_count: int = Field(500, ge=0)
    repeats: int = Field(5, ge=1)
    boxes: Literal["ground-truth", "detector"] = "ground-truth"
    max_detector_images: int = Field(300, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    scene: SceneSpec = SceneSpec()
    sampling: SamplerConfig = SamplerConfig()
    detector: DetectorConfig = DetectorConfig()
    train: TrainConfig = TrainConfig()
    evaluation: EvalOptions = EvalOptions()
    experiment: ExperimentOptions = ExperimentOptions()


_SECTIONS: Dict[str, Type[BaseModel]] = {
    "scene": SceneSpec,
    "sampling": SamplerConfig,
    "detector": DetectorConfig,
    "train": TrainConfig,
    "evaluation": EvalOptions,
    "experiment": ExperimentOptions,
}
# seeds are derived from the single run seed, never set per section
_SEED_FIELDS = {"scene": "seed", "sampling": "rng_seed", "detector": "rng_seed", "train": "rng_seed"}
_TOP_LEVEL = ("seed", "workers")


def _key_routes() -> Dict[str, Tuple[Optional[str], str]]:
    routes: Dict[str, Tuple[Optional[str], str]] = {key: (None, key) for key in _TOP_LEVEL}
    for section, model in _SECTIONS.items():
        for name in model.model_fields:
            if _SEED_FIELDS.get(section) == name:
                continue
            if name in routes:
                raise ConfigurationError(f"config key {name!r} is ambiguous")
            routes[name] = (section, name)
    return routes


KEY_ROUTES = _key_routes()


def _is_tuple_field(section: Optional[str], name: str) -> bool:
    if section is None:
        return False
    annotation = _SECTIONS[section].model_fields[name].annotation
    return typing.get_origin(annotation) is tuple


def _coerce(section: Optional[str], name: str, value: Any) -> Any:
    if isinstance(value, str) and _is_tuple_field(section, name):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigurationError(f"{path}: keys without a value: {', '.join(missing)}")
    logger.info(f"⚙️ loaded {len(values)} config keys from {path}")
    return dict(values)


def build_run_config(file_values: Optional[Mapping[str, Any]] = None,
                     overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values first, then non-None overrides; unknown keys are rejected"""
    merged: Dict[str, Any] = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    unknown = sorted(k for k in merged if k not in KEY_ROUTES)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")

    top: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in merged.items():
        section, name = KEY_ROUTES[key]
        value = _coerce(section, name, value)
        if section is None:
            top[name] = value
        else:
            sections[section][name] = value

    try:
        seed = int(top.get("seed", 0))
        for section, field_name in _SEED_FIELDS.items():
            sections[section][field_name] = seed
        built = {name: model(**sections[name]) for name, model in _SECTIONS.items()}
        return RunConfig(**top, **built)
    except (ValidationError, ValueError) as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e


def describe(config: RunConfig) -> Dict[str, str]:
    """Flat key -> value view of a RunConfig, in routing order"""
    flat = {}
    for key, (section, name) in KEY_ROUTES.items():
        value = getattr(config if section is None else getattr(config, section), name)
        flat[key] = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
    return flat
