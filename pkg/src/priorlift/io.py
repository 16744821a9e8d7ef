"""Field checkpoints, occupancy grids and PNG output.

Checkpoint layout::

    PRIORLIFT-FIELD\\n
    {"version": 1, "grid_resolution": R, "bounds": [[x0,y0,z0],[x1,y1,z1]],
     "background": [r,g,b], "dtype": "<f4"}\\n
    density  R*R*R little-endian float32, x fastest (array order [z][y][x])
    colour   3*R*R*R little-endian float32, channel-major then [z][y][x]

Both lattices hold pre-activation values.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from .errors import FormatError
from .field import DEFAULT_BOUNDS, RadianceField

MAGIC = b"PRIORLIFT-FIELD\n"
VERSION = 1

PathLike = Union[str, Path]


def save_checkpoint(field: RadianceField, path: PathLike) -> None:
    r = field.grid_resolution
    header = {
        "version": VERSION,
        "grid_resolution": r,
        "bounds": [list(field.bounds[0]), list(field.bounds[1])],
        "background": list(field.background_color),
        "dtype": "<f4",
    }
    density = field.density_params.detach().cpu().numpy().astype("<f4")
    color = field.color_params.detach().cpu().numpy().astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(density).tobytes())
        fh.write(np.ascontiguousarray(color).tobytes())


def load_checkpoint(path: PathLike, dtype=torch.float32) -> RadianceField:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a field checkpoint (bad magic)")
    rest = data[len(MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:newline].decode())
        r = int(header["grid_resolution"])
        bounds = tuple(tuple(float(v) for v in b) for b in header["bounds"])
        background = tuple(float(v) for v in header["background"])
        version = int(header["version"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if header.get("dtype") != "<f4" or r < 2 or len(bounds) != 2 or len(background) != 3:
        raise FormatError(f"{path}: header fields out of range")
    payload = rest[newline + 1:]
    expected = 4 * 4 * r**3
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4")
    density = values[: r**3].reshape(r, r, r)
    color = values[r**3:].reshape(3, r, r, r)
    return RadianceField(
        torch.tensor(density, dtype=dtype), torch.tensor(color, dtype=dtype), bounds, background
    )


def occupancy_to_field(
    occupancy: np.ndarray,
    occupied_level: float = 8.0,
    empty_level: float = -8.0,
    bounds=DEFAULT_BOUNDS,
    background=(1.0, 1.0, 1.0),
    dtype=torch.float32,
) -> RadianceField:
    """Turn a cubic boolean grid indexed ``[z][y][x]`` into a field.

    Occupied cells get pre-activation density ``occupied_level``, empty cells
    ``empty_level``; colour starts at mid-grey.
    """
    occ = np.asarray(occupancy)
    if occ.ndim != 3 or len(set(occ.shape)) != 1 or occ.shape[0] < 2:
        raise FormatError(f"occupancy grid must be a cube of side >= 2, got shape {occ.shape}")
    dens = np.where(occ.astype(bool), occupied_level, empty_level)
    r = occ.shape[0]
    return RadianceField(
        torch.tensor(dens, dtype=dtype), torch.zeros((3, r, r, r), dtype=dtype), bounds, background
    )


def load_external_prior(path: PathLike, dtype=torch.float32, **occupancy_kwargs) -> RadianceField:
    """Load a user-supplied prior: a field checkpoint or a ``.npy`` occupancy grid."""
    path = Path(path)
    try:
        head = path.open("rb").read(len(MAGIC))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if head == MAGIC:
        return load_checkpoint(path, dtype)
    if head.startswith(b"\x93NUMPY"):
        try:
            occ = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"{path}: unreadable occupancy grid ({exc})") from exc
        return occupancy_to_field(occ, dtype=dtype, **occupancy_kwargs)
    raise FormatError(f"{path}: neither a field checkpoint nor a .npy occupancy grid")


def to_uint8(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: PathLike) -> np.ndarray:
    return np.asarray(Image.open(path))
