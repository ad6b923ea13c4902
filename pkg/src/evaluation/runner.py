"""Run a frozen detector on clean and attacked scenes and collect EvalRecords."""
import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..core.insertion import host_pose, insert_adversary
from ..core.scene import Scene
from ..detector.boxes import DetectionBox
from ..detector.model import DetectorConfig, DetectorParams, detect, postprocess
from ..geometry.mesh import TexturedMesh
from ..sensors.camera import CameraImage, CameraModel, SoftRasterConfig
from ..sensors.lidar import LidarSweep
from ..utils.concurrency import map_in_threads
from .metrics import EvalConfig, EvalRecord, average_precision

logger = logging.getLogger(__name__)

ImagePreprocess = Callable[[CameraImage], CameraImage]


def run_detector(image: CameraImage, sweep: LidarSweep, camera: CameraModel, params: DetectorParams,
                 cfg: DetectorConfig, preprocess: Optional[ImagePreprocess] = None) -> List[DetectionBox]:
    """Post-NMS detections without building a gradient graph."""
    image = image.detached()
    if preprocess is not None:
        image = preprocess(image)
    proposals = detect(image, sweep.detached(), params.frozen(), cfg, camera)
    return postprocess(proposals, cfg)


def clean_detections(scene: Scene, params: DetectorParams, cfg: DetectorConfig,
                     preprocess: Optional[ImagePreprocess] = None) -> List[DetectionBox]:
    return run_detector(scene.image, scene.sweep, scene.camera, params, cfg, preprocess)


def evaluate_scene(scene: Scene, mesh: TexturedMesh, params: DetectorParams, det_cfg: DetectorConfig,
                   eval_cfg: EvalConfig, raster: Optional[SoftRasterConfig] = None, max_range: float = np.inf,
                   preprocess: Optional[ImagePreprocess] = None, use_band_centroid: bool = True) -> List[EvalRecord]:
    """One record per host candidate; the clean pass is shared by all hosts of the scene."""
    mesh = mesh.detached()
    pre = clean_detections(scene, params, det_cfg, preprocess)
    records = []
    for host in scene.host_candidates:
        pose = host_pose(scene, host, use_band_centroid)
        inputs = insert_adversary(scene, mesh, pose, raster, max_range)
        post = run_detector(inputs.image, inputs.sweep, scene.camera, params, det_cfg, preprocess)
        records.append(EvalRecord.from_detections(scene.index, host, scene.host_box(host), scene.ground_truth,
                                                  pre, post, eval_cfg))
    return records


def evaluate_attack(scenes: Sequence[Scene], mesh: TexturedMesh, params: DetectorParams, det_cfg: DetectorConfig,
                    eval_cfg: EvalConfig, raster: Optional[SoftRasterConfig] = None, max_range: float = np.inf,
                    preprocess: Optional[ImagePreprocess] = None, use_band_centroid: bool = True,
                    workers: Optional[int] = None) -> List[EvalRecord]:
    workers = eval_cfg.workers if workers is None else workers
    per_scene = map_in_threads(
        lambda s: evaluate_scene(s, mesh, params, det_cfg, eval_cfg, raster, max_range, preprocess,
                                 use_band_centroid),
        scenes, workers)
    records = [r for rs in per_scene for r in rs]
    logger.info(f"Evaluated {len(records)} attack samples over {len(scenes)} scenes")
    return records


def evaluate_clean_ap(scenes: Sequence[Scene], params: DetectorParams, det_cfg: DetectorConfig,
                      eval_cfg: EvalConfig, preprocess: Optional[ImagePreprocess] = None,
                      workers: Optional[int] = None) -> Dict[float, Optional[float]]:
    """AP of the clean detector at every configured IoU threshold."""
    workers = eval_cfg.workers if workers is None else workers
    detections = map_in_threads(lambda s: clean_detections(s, params, det_cfg, preprocess), scenes, workers)
    truths = [s.ground_truth for s in scenes]
    return {t: average_precision(detections, truths, t, eval_cfg.inclusive_threshold) for t in eval_cfg.ap_thresholds}
