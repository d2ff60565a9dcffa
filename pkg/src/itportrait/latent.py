"""Latent codes, camera poses, layer ranges and seeded randomness.

Everything here is an immutable value or a pure function of its inputs.
Layer ranges are 1-based and inclusive, so ``LayerRange(13, 18)`` selects the
last six layers of an 18-layer code.

Camera poses use a 25-component layout: a row-major 4x4 camera-to-world
matrix followed by a row-major 3x3 normalised intrinsic matrix. The camera
orbits the origin at a fixed radius, looks at it, and never rolls.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, IncompatibleCheckpointError, LayerRangeError

CAMERA_RADIUS = 2.7
FOCAL_LENGTH = 4.2647
DEFAULT_INTRINSIC = (FOCAL_LENGTH, 0.0, 0.5, 0.0, FOCAL_LENGTH, 0.5, 0.0, 0.0, 1.0)
WORLD_UP = (0.0, 1.0, 0.0)

CONTAINER_MAGIC = b"ITPC"
CONTAINER_VERSION = 1
KIND_LATENT = 1
KIND_POSE = 2


@dataclass(frozen=True)
class LayerRange:
    lo: int
    hi: int

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise LayerRangeError(f"layer range bounds must be integers, got [{self.lo}, {self.hi}]")
        if not 1 <= self.lo <= self.hi:
            raise LayerRangeError(f"invalid layer range [{self.lo}, {self.hi}]")

    def check(self, layers: int) -> None:
        if self.hi > layers:
            raise LayerRangeError(f"layer range [{self.lo}, {self.hi}] exceeds {layers} layers")

    def mask(self, layers: int) -> np.ndarray:
        self.check(layers)
        m = np.zeros(layers, dtype=bool)
        m[self.lo - 1:self.hi] = True
        return m

    def __iter__(self):
        return iter(range(self.lo, self.hi + 1))

    @classmethod
    def parse(cls, value) -> "LayerRange":
        if isinstance(value, LayerRange):
            return value
        if isinstance(value, str):
            lo, _, hi = value.partition("-")
            return cls(int(lo), int(hi or lo))
        lo, hi = value
        return cls(int(lo), int(hi))

    def to_list(self) -> list[int]:
        return [self.lo, self.hi]


@dataclass(frozen=True, eq=False)
class LatentCode:
    """A layered style code of shape ``(layers, width)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"latent code must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent code contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, LatentCode):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def broadcast(cls, vector, layers: int) -> "LatentCode":
        """Repeat a single ``width`` vector across ``layers`` layers."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        return cls(np.tile(vector, (layers, 1)))

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "LatentCode":
        t = t.detach().to("cpu", torch.float64)
        if t.ndim == 3:
            if t.shape[0] != 1:
                raise DimensionError("from_tensor expects a single latent, got a batch")
            t = t[0]
        return cls(t.numpy())

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64)


def _pose_frame(yaw, pitch, radius, lib):
    # Shared by numpy and torch so both routes build identical matrices.
    cy, sy = lib.cos(yaw), lib.sin(yaw)
    cp, sp = lib.cos(pitch), lib.sin(pitch)
    pos = (radius * sy * cp, radius * sp, radius * cy * cp)
    fwd = (-sy * cp, -sp, -cy * cp)
    # right = fwd x up, with up = +y
    rx, ry, rz = -fwd[2], 0.0 * cp, fwd[0]
    rn = lib.sqrt(rx * rx + rz * rz)
    rx, rz = rx / rn, rz / rn
    # down = fwd x right
    dx = fwd[1] * rz - fwd[2] * ry
    dy = fwd[2] * rx - fwd[0] * rz
    dz = fwd[0] * ry - fwd[1] * rx
    return (rx, ry, rz), (dx, dy, dz), fwd, pos


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world extrinsic (16 values) plus normalised intrinsic (9 values)."""

    extrinsic: np.ndarray
    intrinsic: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_INTRINSIC))

    def __post_init__(self):
        ext = np.array(self.extrinsic, dtype=np.float64, copy=True).reshape(-1)
        intr = np.array(self.intrinsic, dtype=np.float64, copy=True).reshape(-1)
        if ext.size != 16 or intr.size != 9:
            raise DimensionError(f"camera pose needs 16 + 9 components, got {ext.size} + {intr.size}")
        if not (np.all(np.isfinite(ext)) and np.all(np.isfinite(intr))):
            raise ValueError("camera pose contains non-finite values")
        if intr[8] != 1.0:
            raise ValueError(f"intrinsic[8] must be 1, got {intr[8]}")
        defect = _orthonormality_defect(ext.reshape(4, 4)[:3, :3])
        if defect > 1e-5:
            raise ValueError(f"rotation block is not orthonormal (defect {defect:.3g})")
        ext.setflags(write=False)
        intr.setflags(write=False)
        object.__setattr__(self, "extrinsic", ext)
        object.__setattr__(self, "intrinsic", intr)

    @classmethod
    def from_angles(cls, yaw_deg: float, pitch_deg: float, radius: float = CAMERA_RADIUS,
                    intrinsic: Sequence[float] = DEFAULT_INTRINSIC) -> "CameraPose":
        if not -90.0 < pitch_deg < 90.0:
            raise ValueError(f"pitch must lie strictly inside (-90, 90) degrees, got {pitch_deg}")
        right, down, fwd, pos = _pose_frame(math.radians(yaw_deg), math.radians(pitch_deg), radius, np)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, pos
        return cls(m.reshape(-1), np.asarray(intrinsic, dtype=np.float64))

    @classmethod
    def from_vector(cls, vec) -> "CameraPose":
        vec = np.asarray(vec.detach().cpu() if isinstance(vec, torch.Tensor) else vec, dtype=np.float64).reshape(-1)
        if vec.size != 25:
            raise DimensionError(f"camera pose vector must have 25 components, got {vec.size}")
        return cls(vec[:16], vec[16:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.extrinsic, self.intrinsic])

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.vector(), dtype=torch.float64)

    @property
    def matrix(self) -> np.ndarray:
        return self.extrinsic.reshape(4, 4)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.position))

    @property
    def yaw(self) -> float:
        x, _, z = self.position
        return math.degrees(math.atan2(x, z))

    @property
    def pitch(self) -> float:
        return math.degrees(math.asin(np.clip(self.position[1] / self.radius, -1.0, 1.0)))

    def orthonormality_defect(self) -> float:
        return _orthonormality_defect(self.rotation)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.extrinsic, other.extrinsic) and np.array_equal(self.intrinsic, other.intrinsic)

    __hash__ = None

    def __repr__(self):
        return f"CameraPose(yaw={self.yaw:.3f}, pitch={self.pitch:.3f}, radius={self.radius:.3f})"


def _orthonormality_defect(r: np.ndarray) -> float:
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


def pose_vector(yaw: torch.Tensor, pitch: torch.Tensor, radius: float = CAMERA_RADIUS,
                intrinsic: Sequence[float] = DEFAULT_INTRINSIC) -> torch.Tensor:
    """Differentiable 25-component pose from yaw/pitch tensors given in radians.

    Accepts scalars or 1-D batches; returns ``(..., 25)``.
    """
    yaw = torch.as_tensor(yaw, dtype=torch.float64)
    pitch = torch.as_tensor(pitch, dtype=torch.float64)
    yaw, pitch = torch.broadcast_tensors(yaw, pitch)
    right, down, fwd, pos = _pose_frame(yaw, pitch, radius, torch)
    zero, one = torch.zeros_like(yaw), torch.ones_like(yaw)
    rows = [right[0], down[0], fwd[0], pos[0],
            right[1] + zero, down[1], fwd[1], pos[1],
            right[2], down[2], fwd[2], pos[2],
            zero, zero, zero, one]
    intr = torch.as_tensor(intrinsic, dtype=torch.float64).expand(*yaw.shape, 9)
    return torch.cat([torch.stack(rows, dim=-1), intr], dim=-1)


def pose_angles(pose: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (yaw, pitch) in radians from ``(..., 25)`` pose vectors."""
    x, y, z = pose[..., 3], pose[..., 7], pose[..., 11]
    r = torch.sqrt(x * x + y * y + z * z)
    return torch.atan2(x, z), torch.asin(torch.clamp(y / r, -1.0, 1.0))


def canonical_pose() -> CameraPose:
    """The frontal camera: yaw 0, pitch 0."""
    return CameraPose.from_angles(0.0, 0.0)


class SeededRng:
    """A named, seedable random stream.

    ``spawn`` derives independent child streams from a name so workers and
    training stages never share a generator.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        key = zlib.crc32(name.encode("utf-8"))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(key,))))

    def spawn(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.name}/{name}")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high, size=None):
        """Uniform integers in ``[low, high]`` (both inclusive)."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        return {"seed": self.seed, "name": self.name, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["name"])
        rng.set_state(state)
        return rng


def mix_latent(base: LatentCode, injected: LatentCode, weight: float, layer_range: LayerRange) -> LatentCode:
    """Interpolate ``weight * base + (1 - weight) * injected`` on the given layers.

    Layers outside ``layer_range`` are copied unchanged from ``base``.
    """
    if base.shape != injected.shape:
        raise DimensionError(f"latent shapes differ: {base.shape} vs {injected.shape}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {weight}")
    sel = layer_range.mask(base.layers)
    out = base.values.copy()
    out[sel] = weight * base.values[sel] + (1.0 - weight) * injected.values[sel]
    return LatentCode(out)


def sample_multiview_poses(rng: SeededRng, n: int, yaw_range=(-50.0, 50.0), pitch_range=(-30.0, 30.0),
                           radius: float = CAMERA_RADIUS) -> list[CameraPose]:
    """Draw ``n`` cameras with yaw and pitch uniform over the given degree ranges."""
    if n < 1:
        raise ConfigurationError(f"need at least one view, got n={n}")
    for label, rng_pair in (("yaw_range", yaw_range), ("pitch_range", pitch_range)):
        if rng_pair is None or len(rng_pair) != 2:
            raise ConfigurationError(f"{label} must be a (low, high) pair, got {rng_pair!r}")
        if rng_pair[0] > rng_pair[1]:
            raise ConfigurationError(f"{label} is not ordered: {rng_pair!r}")
    if not (-90 < pitch_range[0] and pitch_range[1] < 90):
        raise ConfigurationError(f"pitch_range must stay inside (-90, 90), got {pitch_range!r}")
    yaws = rng.uniform(yaw_range[0], yaw_range[1], n)
    pitches = rng.uniform(pitch_range[0], pitch_range[1], n)
    return [CameraPose.from_angles(float(y), float(p), radius) for y, p in zip(yaws, pitches)]


# -- serialisation ---------------------------------------------------------
#
# Binary container layout (all little-endian):
#   4 bytes  magic "ITPC"
#   u16      format version (1)
#   u8       kind (1 = latent code, 2 = camera pose)
#   u8       number of dimensions d
#   d x u32  dimensions
#   float32  payload, C order

def to_bytes(obj: LatentCode | CameraPose) -> bytes:
    if isinstance(obj, LatentCode):
        kind, arr = KIND_LATENT, obj.values
    elif isinstance(obj, CameraPose):
        kind, arr = KIND_POSE, obj.vector()
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    header = CONTAINER_MAGIC + struct.pack("<HBB", CONTAINER_VERSION, kind, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(data: bytes) -> LatentCode | CameraPose:
    if len(data) < 8 or data[:4] != CONTAINER_MAGIC:
        raise IncompatibleCheckpointError("not a latent/pose container (bad magic)")
    version, kind, ndim = struct.unpack_from("<HBB", data, 4)
    if version != CONTAINER_VERSION:
        raise IncompatibleCheckpointError(f"unsupported container version {version}")
    offset = 8 + 4 * ndim
    if len(data) < offset:
        raise IncompatibleCheckpointError("truncated container header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(dims)) if dims else 1
    if len(data) != offset + 4 * count:
        raise IncompatibleCheckpointError("container payload size does not match its header")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(dims)
    if kind == KIND_LATENT:
        return LatentCode(arr)
    if kind == KIND_POSE:
        vec = arr.reshape(-1)
        return CameraPose(vec[:16], vec[16:])
    raise IncompatibleCheckpointError(f"unknown container kind {kind}")


def save(obj: LatentCode | CameraPose, path) -> None:
    Path(path).write_bytes(to_bytes(obj))


def load(path) -> LatentCode | CameraPose:
    return from_bytes(Path(path).read_bytes())


def to_text(obj: LatentCode | CameraPose) -> str:
    """Human-readable JSON form, for debugging and diffs."""
    if isinstance(obj, LatentCode):
        doc = {"kind": "latent", "layers": obj.layers, "width": obj.width, "values": obj.values.tolist()}
    elif isinstance(obj, CameraPose):
        doc = {"kind": "pose", "yaw_deg": obj.yaw, "pitch_deg": obj.pitch,
               "extrinsic": obj.extrinsic.tolist(), "intrinsic": obj.intrinsic.tolist()}
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    return json.dumps(doc, indent=1)


def from_text(text: str) -> LatentCode | CameraPose:
    doc = json.loads(text)
    if doc.get("kind") == "latent":
        return LatentCode(np.asarray(doc["values"], dtype=np.float64).reshape(doc["layers"], doc["width"]))
    if doc.get("kind") == "pose":
        return CameraPose(doc["extrinsic"], doc["intrinsic"])
    raise IncompatibleCheckpointError(f"unknown text container kind {doc.get('kind')!r}")
