"""On-disk formats and run configuration.

Feature files (``.dakf``), little-endian, no padding::

    magic   4s   b"DAKF"
    version u16  1
    width   u32  image width (0 = unknown)
    height  u32  image height (0 = unknown)
    n       u32  keypoint count
    dim     u32  descriptor dimension
    f32[2n]      positions, keypoint-major (u0, v0, u1, v1, ...)
    f32[n]       scores
    f32[n]       depths, 0 = unknown
    f32[dim*n]   descriptors, keypoint-major (one contiguous vector per keypoint)

Depth maps use PFM ("Pf", single channel, little-endian scale -1.0, rows
stored bottom to top).  Pose files hold one camera-to-world pose per line as
the 12 row-major entries of [R | t].
"""
from __future__ import annotations

import dataclasses
import logging
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .evaluation import KeypointMetricConfig
from .geometry import ORTHO_TOL, CameraIntrinsics, Pose, nearest_rotation, rotation_defect
from .losses import LossWeights
from .matching import KeypointFrame
from .pose import RansacConfig

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"DAKF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")
# Rotations further than this from SO(3) are rejected rather than repaired.
POSE_FILE_ORTHO_TOL = 1e-4


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- feature files ------------------------------------------------------------------

def encode_features(frame: KeypointFrame) -> bytes:
    n, dim = len(frame), frame.descriptor_dim
    W, H = frame.image_size if frame.image_size is not None else (0, 0)
    depths = np.zeros(n) if frame.depths is None else np.nan_to_num(frame.depths, nan=0.0)
    parts = [
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, W, H, n, dim),
        frame.positions.T.astype("<f4").tobytes(),
        frame.scores.astype("<f4").tobytes(),
        depths.astype("<f4").tobytes(),
        frame.descriptors.T.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_features(data: bytes) -> KeypointFrame:
    if len(data) < _HEADER.size:
        raise FormatError(f"feature file truncated in header ({len(data)} of {_HEADER.size} bytes)", len(data))
    magic, version, W, H, n, dim = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    expected = _HEADER.size + 4 * (2 * n + n + n + dim * n)
    if len(data) < expected:
        raise FormatError(f"feature file truncated: {len(data)} of {expected} bytes", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after feature data", expected)
    offset = _HEADER.size

    def block(count):
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FormatError("non-finite value", offset + 4 * bad)
        offset += 4 * count
        return arr

    positions = block(2 * n).reshape(n, 2).T
    scores = block(n)
    depths = block(n)
    descriptors = block(dim * n).reshape(n, dim).T
    if np.any(depths < 0):
        raise FormatError("negative depth", _HEADER.size + 12 * n)
    depths = np.where(depths == 0, np.nan, depths)
    size = (W, H) if W and H else None
    try:
        return KeypointFrame(positions, descriptors, scores, depths, size)
    except Exception as exc:
        raise FormatError(f"invalid feature data: {exc}") from exc


def write_features(path, frame: KeypointFrame) -> None:
    atomic_write(path, encode_features(frame))


def read_features(path) -> KeypointFrame:
    return decode_features(Path(path).read_bytes())


# -- PFM ----------------------------------------------------------------------------

def encode_pfm(grid) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"PFM writer expects a 2D grid, got shape {grid.shape}")
    H, W = grid.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(grid[::-1]).astype("<f4").tobytes()


_PFM_HEADER = re.compile(rb"(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def decode_pfm(data: bytes) -> np.ndarray:
    m = _PFM_HEADER.match(data)
    if m is None:
        raise FormatError("malformed PFM header", 0)
    kind, W, H, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if kind != b"Pf":
        raise FormatError("only single-channel (Pf) PFM is supported", 0)
    dtype = "<f4" if scale < 0 else ">f4"
    offset = m.end()
    need = 4 * W * H
    if len(data) - offset < need:
        raise FormatError(f"PFM data truncated: {len(data) - offset} of {need} bytes", len(data))
    if len(data) - offset > need:
        raise FormatError("trailing bytes after PFM data", offset + need)
    grid = np.frombuffer(data, dtype=dtype, count=W * H, offset=offset).reshape(H, W)[::-1]
    return grid.astype(np.float64)


def write_pfm(path, grid) -> None:
    atomic_write(path, encode_pfm(grid))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


# -- pose files -----------------------------------------------------------------------

def format_poses(poses) -> str:
    lines = []
    for T in poses:
        M = np.hstack([T.rotation, T.translation[:, None]])
        lines.append(" ".join(repr(float(x)) for x in M.ravel()))
    return "\n".join(lines) + "\n"


def parse_poses(text: str, source: str = "<poses>") -> list[Pose]:
    poses = []
    repaired = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = np.array([float(x) for x in line.split()])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from exc
        if vals.size != 12 or not np.all(np.isfinite(vals)):
            raise FormatError(f"{source}:{lineno}: expected 12 finite numbers, got {vals.size}")
        M = vals.reshape(3, 4)
        R = M[:, :3]
        ortho, det = rotation_defect(R)
        if ortho > POSE_FILE_ORTHO_TOL or det > POSE_FILE_ORTHO_TOL:
            raise FormatError(f"{source}:{lineno}: rotation is not orthonormal (defect {ortho:.2g})")
        if ortho > ORTHO_TOL or det > ORTHO_TOL:
            R = nearest_rotation(R)
            repaired += 1
        poses.append(Pose(R, M[:, 3]))
    if repaired:
        log.warning("%s: re-orthonormalized %d rotation(s)", source, repaired)
    return poses


def write_poses(path, poses) -> None:
    atomic_write(path, format_poses(poses).encode("ascii"))


def read_poses(path) -> list[Pose]:
    return parse_poses(Path(path).read_text(), str(path))


def read_matrix(path, shape=(3, 3)) -> np.ndarray:
    """Whitespace-separated numeric matrix (e.g. a 3x3 homography)."""
    try:
        vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if vals.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {np.prod(shape)} numbers, got {vals.size}")
    return vals.reshape(shape)


# -- configuration ------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSettings:
    n_frames: int = 100
    motion: str = "forward-drive"
    planar: bool = False
    step: float = 1.5
    n_points: int = 150
    depth_min: float = 4.0
    depth_max: float = 40.0
    width: int = 640
    height: int = 480
    pixel_noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    descriptor_dim: int = 256
    descriptor_noise_sigma: float = 0.0
    depth_noise_sigma: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    intrinsics: Optional[CameraIntrinsics] = None
    ransac: RansacConfig = field(default_factory=RansacConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    metric: KeypointMetricConfig = field(default_factory=KeypointMetricConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)
    seed: int = 0
    max_match_distance: Optional[float] = None

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            ransac=dataclasses.replace(self.ransac, seed=seed),
            metric=dataclasses.replace(self.metric, seed=seed),
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in config_items(self))


_SECTIONS = {"ransac": RansacConfig, "loss": LossWeights, "metric": KeypointMetricConfig, "synth": SynthSettings}
_TOP = {"seed": int, "max_match_distance": float}
_INTRINSICS = ("fx", "fy", "cx", "cy")


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] for f in dataclasses.fields(cls) if f.type in hints}


def valid_keys() -> list[str]:
    keys = list(_INTRINSICS) + list(_TOP)
    for section, cls in _SECTIONS.items():
        keys += [f"{section}.{name}" for name in _field_types(cls)]
    return keys


def _convert(key: str, typ, raw: str):
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def build_config(values: dict[str, str], base: RunConfig = RunConfig()) -> RunConfig:
    """Apply string key/value overrides to ``base``. Unknown keys are rejected."""
    unknown = sorted(set(values) - set(valid_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = base
    intr = {k: values[k] for k in _INTRINSICS if k in values}
    if intr:
        current = cfg.intrinsics
        if current is None and len(intr) != 4:
            raise ConfigError("intrinsics need all of fx, fy, cx, cy")
        merged = {k: getattr(current, k) for k in _INTRINSICS} if current else {}
        merged.update({k: _convert(k, float, v) for k, v in intr.items()})
        cfg = dataclasses.replace(cfg, intrinsics=CameraIntrinsics(**merged))
    for key, typ in _TOP.items():
        if key in values:
            raw = values[key]
            val = None if key == "max_match_distance" and raw.lower() == "none" else _convert(key, typ, raw)
            cfg = dataclasses.replace(cfg, **{key: val})
    for section, cls in _SECTIONS.items():
        types = _field_types(cls)
        upd = {name: _convert(f"{section}.{name}", types[name], values[f"{section}.{name}"])
               for name in types if f"{section}.{name}" in values}
        if upd:
            try:
                cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **upd)})
            except ValueError as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from exc
    if "seed" in values:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def load_config(path, base: RunConfig = RunConfig()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_config(parse_config_text(text, str(path)), base)


def config_items(cfg: RunConfig) -> list[tuple[str, object]]:
    items: list[tuple[str, object]] = []
    if cfg.intrinsics is not None:
        items += [(k, getattr(cfg.intrinsics, k)) for k in _INTRINSICS]
    items += [("seed", cfg.seed), ("max_match_distance", cfg.max_match_distance)]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        items += [(f"{section}.{name}", getattr(obj, name)) for name in _field_types(type(obj))]
    return items
