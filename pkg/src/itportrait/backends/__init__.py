from ..errors import ConfigurationError
from .adapter import AdapterManifest, load_adapter_backends, register_loader
from .base import (
    SUBMODULES,
    Backends,
    Generator2D,
    Generator3D,
    Inverter2D,
    JointEmbedder,
    ParameterView,
    PerceptualOracle,
    PoseEstimator,
    parameter_hash,
    select_submodule_params,
)
from .toy import make_toy_backends, toy_embed, toy_generate3d


def resolve_backends(spec: str = "toy") -> Backends:
    """Backends from a selector: ``toy``, ``toy:<seed>`` or a path to an adapter manifest."""
    if spec == "toy":
        return make_toy_backends()
    if spec.startswith("toy:"):
        try:
            seed = int(spec[4:])
        except ValueError:
            raise ConfigurationError(f"backend: bad toy seed in {spec!r}") from None
        return make_toy_backends(seed=seed)
    return load_adapter_backends(spec)


__all__ = [
    "SUBMODULES", "AdapterManifest", "Backends", "Generator2D", "Generator3D", "Inverter2D", "JointEmbedder",
    "ParameterView", "PerceptualOracle", "PoseEstimator", "load_adapter_backends", "make_toy_backends",
    "parameter_hash", "register_loader", "resolve_backends", "select_submodule_params", "toy_embed",
    "toy_generate3d",
]
