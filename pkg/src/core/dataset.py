"""Dataset persistence: one directory per scene plus a top-level ``index.json``."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from ..autodiff.tensor import Value
from ..sensors.camera import CameraImage, CameraModel, DirectionalLight
from ..sensors.lidar import LidarSpec
from ..sensors.sensor_io import load_pgm, load_png, load_sweep, save_pgm, save_png, save_sweep
from .scene import Scene, SceneGenerationError, Vehicle

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
INDEX_FILE = "index.json"


def scene_dirname(index: int) -> str:
    return f"scene_{index:05d}"


def save_scene(scene: Scene, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [save_sweep(scene.sweep, directory / "sweep.ply"), directory / "sweep.json"]
    written.append(save_png(scene.image.pixels.data, directory / "image.png"))
    written.append(save_pgm(scene.image.dense_depth, directory / "depth.pgm"))
    annotations = directory / "annotations.json"
    annotations.write_text(json.dumps(scene.annotations(), indent=2, sort_keys=True))
    written.append(annotations)
    return written


def load_scene(directory: PathLike) -> Scene:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "annotations.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneGenerationError(f"Failed to read annotations in {directory}: {e}") from e
    spec = LidarSpec.from_dict(meta["lidar_spec"])
    sweep = load_sweep(directory / "sweep.ply", spec)
    pixels = load_png(directory / "image.png")
    depth = load_pgm(directory / "depth.pgm")
    return Scene(
        index=int(meta["index"]),
        seed=tuple(meta["seed"]),
        vehicles=[Vehicle.from_dict(v) for v in meta["vehicles"]],
        host_candidates=[int(h) for h in meta["host_candidates"]],
        lidar_spec=spec,
        camera=CameraModel.from_dict(meta["camera"]),
        light=DirectionalLight.from_dict(meta["light"]),
        sweep=sweep,
        image=CameraImage(Value(pixels), depth),
    )


def save_dataset(scenes: List[Scene], directory: PathLike, metadata: Optional[Dict] = None) -> List[Path]:
    """Write every scene and the index; returns all written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for scene in scenes:
        written += save_scene(scene, directory / scene_dirname(scene.index))
    index = {
        "scenes": [scene_dirname(s.index) for s in scenes],
        "count": len(scenes),
        "samples": sum(len(s.host_candidates) for s in scenes),
        "metadata": metadata or {},
    }
    index_path = directory / INDEX_FILE
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))
    written.append(index_path)
    logger.info(f"Saved {len(scenes)} scenes to {directory}")
    return written


def load_index(directory: PathLike) -> Dict:
    path = Path(directory) / INDEX_FILE
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneGenerationError(f"Failed to read dataset index {path}: {e}") from e


def load_dataset(directory: PathLike, limit: Optional[int] = None) -> List[Scene]:
    directory = Path(directory)
    names = load_index(directory)["scenes"]
    if limit is not None:
        names = names[:limit]
    return [load_scene(directory / name) for name in names]


def split_scenes(scenes: List[Scene], eval_count: int) -> Dict[str, List[Scene]]:
    """Last ``eval_count`` scenes are held out."""
    if eval_count >= len(scenes):
        raise SceneGenerationError(f"Cannot hold out {eval_count} of {len(scenes)} scenes")
    return {"train": scenes[:len(scenes) - eval_count], "eval": scenes[len(scenes) - eval_count:]}


def all_samples(scenes: List[Scene]) -> List[tuple]:
    """(scene position, host index) pairs over a scene list."""
    return [(i, h) for i, s in enumerate(scenes) for h in s.host_candidates]


def sample_batch(scenes: List[Scene], rng: np.random.Generator, size: int) -> List[tuple]:
    """Uniform sampling with replacement over all host samples."""
    pool = all_samples(scenes)
    if not pool:
        raise SceneGenerationError("No host samples available in these scenes")
    picks = rng.integers(0, len(pool), size=size)
    return [pool[i] for i in picks]
