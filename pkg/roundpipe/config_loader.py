import logging
import os
from typing import Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError, TypeAdapter

from roundpipe.models import (
    ConfigReference,
    ConfigReferenceType,
    GpuSpec,
    ModelConfig,
    RunConfig,
)
from roundpipe.serialization import ConfigError, load_structured_file

logger = logging.getLogger(__name__)

CONFIG_DIRECTORY = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")
MODELS_DIRECTORY = os.path.join(CONFIG_DIRECTORY, "models")
GPUS_DIRECTORY = os.path.join(CONFIG_DIRECTORY, "gpus")

ConfigType = TypeVar("ConfigType", bound=BaseModel)


def _bundled_names(directory: str) -> List[str]:
    return sorted(
        name[: -len(".json")]
        for name in os.listdir(directory)
        if name.endswith(".json")
    )


AVAILABLE_MODELS = _bundled_names(MODELS_DIRECTORY)
AVAILABLE_GPUS = _bundled_names(GPUS_DIRECTORY)


def resolve_reference(reference: str, available: List[str]) -> ConfigReference:
    """
    Treat a bundled name as a name reference, everything else as a file path.
    :param reference: name or path
    :param available: bundled names
    :return: ConfigReference
    """
    if reference in available:
        return ConfigReference(reference=reference, type=ConfigReferenceType.NAME)
    return ConfigReference(reference=reference, type=ConfigReferenceType.FILE)


def _load(reference: ConfigReference, directory: str, klass: Type[ConfigType]):
    if reference.type == ConfigReferenceType.NAME:
        path = os.path.join(directory, f"{reference.reference}.json")
        if not os.path.exists(path):
            raise ConfigError(f"Unknown {klass.__name__} {reference.reference}")
    else:
        path = reference.reference
        if not os.path.exists(path):
            raise ConfigError(
                f"{reference.reference} is neither a bundled name nor an existing file"
            )
    data = load_structured_file(path)
    try:
        return TypeAdapter(klass).validate_python(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid {klass.__name__} in {path}: {e}") from e


def load_model_config(reference: str) -> ModelConfig:
    return _load(resolve_reference(reference, AVAILABLE_MODELS), MODELS_DIRECTORY, ModelConfig)


def load_gpu_spec(reference: str, bandwidth: Optional[str] = None) -> GpuSpec:
    """
    Load a GPU spec, optionally overriding its link bandwidth.
    :param reference: bundled name or file path
    :param bandwidth: bytes/s as a string, "inf" for an unbounded link
    :return: GpuSpec
    """
    gpu = _load(resolve_reference(reference, AVAILABLE_GPUS), GPUS_DIRECTORY, GpuSpec)
    if bandwidth is not None:
        try:
            value = float(bandwidth)
        except ValueError:
            raise ConfigError(f"Invalid bandwidth {bandwidth}")
        if not value > 0:
            raise ConfigError("Bandwidth must be positive")
        gpu = gpu.model_copy(update={"link_bandwidth": value})
        logger.debug(f"Link bandwidth of {gpu.name} set to {value}")
    return gpu


def load_all_models() -> Dict[str, ModelConfig]:
    return {name: load_model_config(name) for name in AVAILABLE_MODELS}


def load_all_gpus() -> Dict[str, GpuSpec]:
    return {name: load_gpu_spec(name) for name in AVAILABLE_GPUS}


def load_run_config(path: str) -> RunConfig:
    data = load_structured_file(path)
    try:
        return TypeAdapter(RunConfig).validate_python(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config in {path}: {e}") from e
