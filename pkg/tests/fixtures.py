"""Small configs and cached scenes shared by the test modules."""
import copy
import json
from functools import lru_cache
from pathlib import Path
from typing import Tuple

from src.attack.objectives import AttackConfig
from src.core.scene import SceneConfig, generate_scenes
from src.defense.adversarial_training import DefenseConfig
from src.detector.model import DetectorConfig

TINY_SENSORS = {
    "profiles": {
        "tiny": {
            "num_beams": 8,
            "elevation_range_deg": [-12.0, 2.0],
            "azimuth_step_deg": 1.5,
            "azimuth_range_deg": [-45.0, 45.0],
            "lidar_height": 1.73,
            "image_height": 32,
            "image_width": 64,
            "focal": 32.0,
            "camera_height": 1.65,
            "max_range": 40.0,
        },
        "tiny_alt": {
            "num_beams": 6,
            "elevation_range_deg": [-12.0, 2.0],
            "azimuth_step_deg": 1.5,
            "azimuth_range_deg": [-45.0, 45.0],
            "lidar_height": 1.73,
            "image_height": 32,
            "image_width": 64,
            "focal": 28.0,
            "camera_height": 1.65,
            "max_range": 40.0,
        },
    },
    "light": {"direction": [0.3, -0.2, -0.93], "diffuse": 0.6, "ambient": 0.5},
    "soft_raster": {"sigma": 1e-4, "gamma": 1e-4, "max_faces_per_pixel": 8},
}

TINY_DATASET = {
    "seed": 0,
    "train_scenes": 4,
    "eval_scenes": 2,
    "vehicles_min": 1,
    "vehicles_max": 2,
    "x_range": [5.0, 30.0],
    "y_range": [-14.0, 14.0],
    "host_range": [7.0, 15.0],
    "max_placement_retries": 50,
    "sensor_profile": "tiny",
    "workers": 1,
}

TINY_DETECTOR = {
    "seed": 0,
    "x_range": [0.0, 32.0],
    "y_range": [-16.0, 16.0],
    "z_range": [-0.25, 2.75],
    "cell_size": 1.0,
    "height_slices": 3,
    "image_size": [32, 64],
    "image_channels": [4, 8],
    "bev_channels": [4, 8],
    "head_channels": 8,
    "train_steps": 3,
    "batch_size": 2,
    "log_every": 0,
}

TINY_ATTACK = {
    "seed": 0,
    "steps": 2,
    "batch_size": 2,
    "subdivisions": 0,
    "texture_res": 2,
    "val_every": 1,
    "val_scenes": 2,
}

TINY_DEFENSE = {
    "kind": "adv_train",
    "model_steps": 2,
    "adversary_updates_per_model_update": 1,
}


def scene_config(profile: str = "tiny") -> SceneConfig:
    return SceneConfig.from_dict(dict(copy.deepcopy(TINY_DATASET), sensor_profile=profile,
                                      sensors=copy.deepcopy(TINY_SENSORS)))


def detector_config(**overrides) -> DetectorConfig:
    return DetectorConfig.from_dict(dict(copy.deepcopy(TINY_DETECTOR), **overrides))


def attack_config(**overrides) -> AttackConfig:
    return AttackConfig.from_dict(dict(copy.deepcopy(TINY_ATTACK), **overrides))


def defense_config(**overrides) -> DefenseConfig:
    return DefenseConfig.from_dict(dict(copy.deepcopy(TINY_DEFENSE), **overrides))


@lru_cache(maxsize=4)
def tiny_scenes(count: int = 6, profile: str = "tiny") -> Tuple:
    """Deterministic scenes; callers must not mutate them."""
    return tuple(generate_scenes(scene_config(profile), count, seed=0))


def write_config_dir(directory: Path, **section_overrides) -> Path:
    """Per-section JSON files for the tiny setup, as the CLI reads them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sections = {
        "dataset": copy.deepcopy(TINY_DATASET),
        "sensors": copy.deepcopy(TINY_SENSORS),
        "detector": copy.deepcopy(TINY_DETECTOR),
        "attack": copy.deepcopy(TINY_ATTACK),
        "defense": copy.deepcopy(TINY_DEFENSE),
        "evaluation": {"workers": 1},
    }
    for name, values in section_overrides.items():
        sections[name].update(values)
    for name, values in sections.items():
        (directory / f"{name}.json").write_text(json.dumps({name: values}, indent=4))
    return directory


@lru_cache(maxsize=1)
def empty_scene():
    """Ground-only scene: nothing occludes an object placed in front of the sensors."""
    from src.core.scene import generate_scene
    cfg = SceneConfig.from_dict(dict(copy.deepcopy(TINY_DATASET), vehicles_min=0, vehicles_max=0,
                                     sensors=copy.deepcopy(TINY_SENSORS)))
    return generate_scene(cfg, 0, 0)
