import copy
import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Type, TypeVar

logger = logging.getLogger(__name__)

SEED_ENV = "ADVFUSION_SEED"

C = TypeVar("C")


class ConfigError(ValueError):
    """Raised when a configuration value is missing or invalid"""
    pass


def dataclass_from_dict(cls: Type[C], data: Dict[str, Any]) -> C:
    """Build a config dataclass, ignoring unknown keys and wrapping bad values."""
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        logger.debug(f"Ignoring unknown {cls.__name__} keys: {unknown}")
    kwargs = {k: v for k, v in data.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


class Config:
    DEFAULT_CONFIG = {
        "dataset": {
            "seed": 0,
            "train_scenes": 256,
            "eval_scenes": 64,
            "vehicles_min": 1,
            "vehicles_max": 4,
            "x_range": [5.0, 70.0],
            "y_range": [-40.0, 40.0],
            "host_range": [6.0, 35.0],
            "max_placement_retries": 50,
            "sensor_profile": "default",
            "workers": 1
        },
        "sensors": {
            "profiles": {
                "default": {
                    "num_beams": 32,
                    "elevation_range_deg": [-15.0, 3.0],
                    "azimuth_step_deg": 0.4,
                    "azimuth_range_deg": [-90.0, 90.0],
                    "lidar_height": 1.73,
                    "image_height": 192,
                    "image_width": 640,
                    "focal": 320.0,
                    "camera_height": 1.65,
                    "max_range": 100.0
                },
                "alt": {
                    "num_beams": 16,
                    "elevation_range_deg": [-15.0, 3.0],
                    "azimuth_step_deg": 0.4,
                    "azimuth_range_deg": [-90.0, 90.0],
                    "lidar_height": 1.73,
                    "image_height": 192,
                    "image_width": 640,
                    "focal": 280.0,
                    "camera_height": 1.65,
                    "max_range": 100.0
                }
            },
            "light": {
                "direction": [0.3, -0.2, -0.93],
                "diffuse": 0.6,
                "ambient": 0.5
            },
            "soft_raster": {
                "sigma": 1e-4,
                "gamma": 1e-4,
                "max_faces_per_pixel": 16
            }
        },
        "detector": {
            "seed": 0,
            "x_range": [0.0, 72.0],
            "y_range": [-40.0, 40.0],
            "z_range": [-0.25, 2.75],
            "cell_size": 0.25,
            "height_slices": 6,
            "image_size": [192, 640],
            "image_channels": [8, 16],
            "bev_channels": [16, 32],
            "head_channels": 32,
            "anchor_size": [4.3, 1.8],
            "anchor_headings": [0.0, 1.5707963267948966],
            "score_threshold": 0.5,
            "nms_iou": 0.1,
            "pos_iou": 0.6,
            "neg_iou": 0.45,
            "focal_alpha": 0.25,
            "focal_gamma": 2.0,
            "use_image": True,
            "denoise": False,
            "denoise_subsample": 2,
            "learning_rate": 0.002,
            "train_steps": 2000,
            "batch_size": 2,
            "log_every": 50
        },
        "attack": {
            "seed": 0,
            "lambda_fp": 1.0,
            "lambda_lap": 0.001,
            "lr_texture": 0.004,
            "lr_vertex": 0.001,
            "box": [0.8, 0.8, 0.5],
            "target_modalities": ["lidar", "image"],
            "steps": 500,
            "batch_size": 4,
            "relevance_score_min": 0.1,
            "relevance_requires_overlap": True,
            "subdivisions": 2,
            "texture_res": 5,
            "init_radius": 0.3,
            "val_every": 50,
            "val_scenes": 8,
            "use_band_centroid": True
        },
        "defense": {
            "kind": "adv_train",
            "compression_quality": 50,
            "adversary_updates_per_model_update": 5,
            "denoise_block_positions": [1],
            "model_steps": 200,
            "learning_rate": 0.0005,
            "resample_hosts": True,
            "clean_fraction": 0.5
        },
        "evaluation": {
            "detect_iou": 0.7,
            "fp_max_iou": 0.3,
            "recall_thresholds": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            "ap_thresholds": [0.5, 0.7],
            "inclusive_threshold": True,
            "workers": 1
        }
    }

    FILES = {
        "dataset": "dataset.json",
        "sensors": "sensors.json",
        "detector": "detector.json",
        "attack": "attack.json",
        "defense": "defense.json",
        "evaluation": "evaluation.json",
    }

    def __init__(self, config_dir: str = "config"):
        self.config_dir = Path(config_dir)
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        self.load_all_configs()

    def load_all_configs(self) -> None:
        """Load and merge all config files"""
        if not self.config_dir.exists():
            self.config_dir.mkdir(parents=True)
            self.save_default_configs()
            return

        for filename in self.FILES.values():
            self.load_config_file(filename)

    def load_config_file(self, filename: str) -> None:
        """Load a specific config file and merge with existing config"""
        file_path = self.config_dir / filename
        if file_path.exists():
            try:
                with open(file_path) as f:
                    config_data = json.load(f)
                    self.merge_config(config_data)
            except json.JSONDecodeError as e:
                logger.error(f"Error reading config file {filename}: {e}")

    def merge_config(self, new_config: Dict) -> None:
        """Merge new config data with existing config"""
        for section, values in new_config.items():
            if section not in self.config:
                self.config[section] = {}
            if isinstance(values, dict):
                self.config[section].update(values)

    def save_default_configs(self) -> None:
        """Save default configurations to separate files"""
        for section, filename in self.FILES.items():
            self.save_config_file(filename, {section: self.DEFAULT_CONFIG[section]})

    def save_config_file(self, filename: str, config_data: Dict) -> None:
        """Save config data to a specific file"""
        file_path = self.config_dir / filename
        try:
            with open(file_path, 'w') as f:
                json.dump(config_data, f, indent=4)
        except OSError as e:
            logger.error(f"Error saving config file {filename}: {e}")

    def get(self, section: str, key: str) -> Any:
        """Get a config value"""
        return self.config.get(section, {}).get(key)

    def set(self, section: str, key: str, value: Any) -> None:
        """Set a config value"""
        if section not in self.config:
            self.config[section] = {}
        self.config[section][key] = value

    def section(self, name: str) -> Dict[str, Any]:
        """Deep copy of one section"""
        if name not in self.config:
            raise ConfigError(f"Unknown config section {name!r}")
        return copy.deepcopy(self.config[name])

    def to_dict(self) -> Dict[str, Any]:
        """Canonical JSON-serialisable form (sorted keys when dumped)"""
        return json.loads(json.dumps(self.config, sort_keys=True))

    def seeds(self) -> Dict[str, int]:
        """Dataset, detector and attack seeds, after the environment override"""
        seeds = {name: int(self.config[name]["seed"]) for name in ("dataset", "detector", "attack")}
        override = os.environ.get(SEED_ENV)
        if override is not None and override.strip() != "":
            try:
                value = int(override)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {override!r}") from None
            seeds = {name: value for name in seeds}
        return seeds

    def experiment(self) -> "ExperimentConfig":
        """Typed view of every section"""
        from ..attack.objectives import AttackConfig
        from ..core.scene import SceneConfig
        from ..defense.adversarial_training import DefenseConfig
        from ..detector.model import DetectorConfig
        from ..evaluation.metrics import EvalConfig

        seeds = self.seeds()
        dataset = dict(self.section("dataset"), seed=seeds["dataset"])
        dataset["sensors"] = self.section("sensors")
        detector = dict(self.section("detector"), seed=seeds["detector"])
        attack = dict(self.section("attack"), seed=seeds["attack"])
        return ExperimentConfig(
            scene=SceneConfig.from_dict(dataset),
            detector=DetectorConfig.from_dict(detector),
            attack=AttackConfig.from_dict(attack),
            defense=DefenseConfig.from_dict(self.section("defense")),
            evaluation=EvalConfig.from_dict(self.section("evaluation")),
            seeds=seeds,
        )


@dataclass
class ExperimentConfig:
    scene: Any
    detector: Any
    attack: Any
    defense: Any
    evaluation: Any
    seeds: Dict[str, int]
