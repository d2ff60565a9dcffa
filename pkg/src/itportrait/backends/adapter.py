"""Adapters between external checkpoints and the generator submodule layout.

An adapter manifest is a JSON file::

    {
      "format": "itportrait-adapter",
      "version": 1,
      "capability": "eg3d",
      "checkpoint": "weights/ffhq512.pt",
      "submodules": {
        "synthesis":       {"<external tensor name>": "<internal parameter name>", ...},
        "mapping":         {...},
        "superresolution": {...},
        "decoder":         {...}
      }
    }

Internal names are relative to the submodule (``fc1.weight`` under
``decoder`` becomes ``decoder.fc1.weight``). Building real backends requires a
loader registered for the manifest's capability; none ships with this
package, so only the name mapping works out of the box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..errors import BackendUnavailableError, ConfigurationError, IncompatibleCheckpointError
from .base import SUBMODULES, Backends, Generator3D

MANIFEST_FORMAT = "itportrait-adapter"
MANIFEST_VERSION = 1

_LOADERS: dict[str, Callable[["AdapterManifest"], Backends]] = {}


@dataclass
class AdapterManifest:
    capability: str
    checkpoint: str | None = None
    submodules: dict = field(default_factory=dict)
    path: Path | None = None

    def __post_init__(self):
        unknown = set(self.submodules) - set(SUBMODULES)
        if unknown:
            raise ConfigurationError(f"adapter.submodules: unknown submodules {sorted(unknown)}")
        seen = {}
        for sub, table in self.submodules.items():
            for ext, internal in table.items():
                full = f"{sub}.{internal}"
                if full in seen:
                    raise ConfigurationError(f"adapter.submodules.{sub}: {full} is mapped from both {seen[full]!r} and {ext!r}")
                seen[full] = ext

    @classmethod
    def load(cls, path) -> "AdapterManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"adapter manifest {path}: {exc}") from None
        if data.get("format") != MANIFEST_FORMAT:
            raise IncompatibleCheckpointError(f"adapter manifest {path}: not an {MANIFEST_FORMAT} file")
        if data.get("version") != MANIFEST_VERSION:
            raise IncompatibleCheckpointError(f"adapter manifest {path}: unsupported version {data.get('version')!r}")
        if "capability" not in data:
            raise ConfigurationError(f"adapter manifest {path}: missing 'capability'")
        return cls(data["capability"], data.get("checkpoint"), data.get("submodules", {}), path)

    def to_json(self) -> str:
        return json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "capability": self.capability,
                           "checkpoint": self.checkpoint, "submodules": self.submodules}, indent=2)

    def external_to_internal(self) -> dict:
        return {ext: f"{sub}.{internal}" for sub, table in self.submodules.items() for ext, internal in table.items()}


def rename_to_internal(state: dict, manifest: AdapterManifest, strict: bool = True) -> dict:
    """Rename an external state dict to generator names; unmapped tensors are an error when ``strict``."""
    table = manifest.external_to_internal()
    out = {}
    for name, tensor in state.items():
        if name in table:
            out[table[name]] = tensor
        elif strict:
            raise IncompatibleCheckpointError(f"external tensor {name!r} has no mapping in the adapter manifest")
    return out


def rename_to_external(state: dict, manifest: AdapterManifest) -> dict:
    inverse = {v: k for k, v in manifest.external_to_internal().items()}
    return {inverse[name]: t for name, t in state.items() if name in inverse}


def identity_manifest(generator: Generator3D, capability: str = "toy", prefix: str = "ext.") -> AdapterManifest:
    """A manifest mapping every submodule parameter to ``prefix + name``; handy for round-trip checks."""
    tables = {}
    for sub in SUBMODULES:
        names = [n for n, _ in generator.submodule(sub).named_parameters()]
        tables[sub] = {f"{prefix}{sub}.{n}": n for n in names}
    return AdapterManifest(capability, None, tables)


def register_loader(capability: str, loader: Callable[[AdapterManifest], Backends]) -> None:
    """Make ``capability`` loadable; ``loader(manifest)`` must return a full ``Backends``."""
    _LOADERS[capability] = loader


def available_capabilities() -> list[str]:
    return sorted(_LOADERS)


def load_adapter_backends(manifest: AdapterManifest | str | Path) -> Backends:
    if not isinstance(manifest, AdapterManifest):
        manifest = AdapterManifest.load(manifest)
    loader = _LOADERS.get(manifest.capability)
    if loader is None:
        raise BackendUnavailableError(
            f"no loader registered for capability {manifest.capability!r}; "
            f"available: {available_capabilities() or 'none'}")
    return loader(manifest)
