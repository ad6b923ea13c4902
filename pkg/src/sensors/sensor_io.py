"""On-disk formats for sweeps (PLY + JSON), images (PNG) and depth (16-bit PGM)."""
import json
import logging
import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from ..autodiff.tensor import Value
from .lidar import LidarSpec, LidarSweep, SensorError, assign_ray_ids

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 16-bit PGM depth is stored in units of 2 mm (max ~131 m)
DEPTH_SCALE_MM = 2
DEPTH_MAX_M = 65535 * DEPTH_SCALE_MM / 1000.0


def sweep_sidecar(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_sweep(sweep: LidarSweep, path: PathLike) -> Path:
    """Binary little-endian PLY (float64 xyz) plus a JSON sidecar with ray ids and spec."""
    path = Path(path).with_suffix(".ply")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(sweep)}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    ).encode("ascii")
    payload = np.ascontiguousarray(sweep.xyz, dtype="<f8").tobytes()
    path.write_bytes(header + payload)
    sidecar = {"ray_ids": sweep.ray_ids.tolist(), "spec": sweep.spec.to_dict()}
    sweep_sidecar(path).write_text(json.dumps(sidecar))
    return path


def read_ply_points(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
        end = raw.index(b"end_header\n") + len(b"end_header\n")
        header = raw[:end].decode("ascii")
        if "binary_little_endian" not in header:
            raise SensorError("only binary_little_endian PLY is supported")
        count = int(re.search(r"element vertex (\d+)", header).group(1))
        points = np.frombuffer(raw[end:end + count * 24], dtype="<f8").reshape(count, 3)
    except (OSError, ValueError, AttributeError) as e:
        raise SensorError(f"Failed to read PLY {path}: {e}") from e
    return points.astype(np.float64)


def load_sweep(path: PathLike, spec: LidarSpec = None) -> LidarSweep:
    """Load a sweep; without a JSON sidecar, ray ids are assigned from ``spec``."""
    path = Path(path).with_suffix(".ply")
    points = read_ply_points(path)
    sidecar = sweep_sidecar(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
            return LidarSweep(Value(points), np.array(meta["ray_ids"], dtype=np.int64),
                              LidarSpec.from_dict(meta["spec"]))
        except (json.JSONDecodeError, KeyError) as e:
            raise SensorError(f"Failed to read sweep sidecar {sidecar}: {e}") from e
    if spec is None:
        raise SensorError(f"{path} has no sidecar and no LidarSpec was given to assign ray ids")
    logger.info(f"No sidecar for {path}; assigning ray ids from the sensor spec")
    return assign_ray_ids(points, spec)


def quantize_image(pixels: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats to the 8-bit grid so PNG round-trips are exact."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def save_png(pixels: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(np.asarray(pixels), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    return path


def load_png(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise SensorError(f"Failed to read PNG {path}: {e}") from e
    return data / 255.0


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Snap metric depth to the PGM grid (2 mm steps, clipped to the representable range)."""
    units = np.clip(np.round(np.asarray(depth) * 1000.0 / DEPTH_SCALE_MM), 1, 65535)
    return units * DEPTH_SCALE_MM / 1000.0


def save_pgm(depth: np.ndarray, path: PathLike) -> Path:
    """Big-endian 16-bit binary PGM; each unit is 2 mm."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    depth = np.asarray(depth)
    height, width = depth.shape
    units = np.clip(np.round(depth * 1000.0 / DEPTH_SCALE_MM), 0, 65535).astype(">u2")
    header = f"P5\n# depth_scale_mm {DEPTH_SCALE_MM}\n{width} {height}\n65535\n".encode("ascii")
    path.write_bytes(header + units.tobytes())
    return path


def load_pgm(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
        tokens, pos, scale = [], 0, DEPTH_SCALE_MM
        while len(tokens) < 4:
            line_end = raw.index(b"\n", pos)
            line = raw[pos:line_end].decode("ascii").strip()
            pos = line_end + 1
            if line.startswith("#"):
                match = re.match(r"#\s*depth_scale_mm\s+(\d+)", line)
                if match:
                    scale = int(match.group(1))
                continue
            tokens.extend(line.split())
        if tokens[0] != "P5":
            raise SensorError(f"unsupported PGM magic {tokens[0]!r}")
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        dtype = ">u2" if maxval > 255 else "u1"
        units = np.frombuffer(raw[pos:], dtype=dtype, count=width * height).reshape(height, width)
    except (OSError, ValueError, IndexError) as e:
        raise SensorError(f"Failed to read PGM {path}: {e}") from e
    return units.astype(np.float64) * scale / 1000.0


def save_image_bundle(pixels: np.ndarray, depth: np.ndarray, directory: PathLike) -> Tuple[Path, Path]:
    directory = Path(directory)
    return save_png(pixels, directory / "image.png"), save_pgm(depth, directory / "depth.pgm")
