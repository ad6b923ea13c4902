"""Detector training loop."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..autodiff import tensor as T
from ..autodiff.optim import Adam
from ..core.scene import Scene
from ..sensors.camera import CameraImage, CameraModel
from ..sensors.lidar import LidarSweep
from .boxes import DetectionBox
from .losses import task_loss
from .model import DetectorConfig, DetectorParams, detect, init_params

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    image: CameraImage
    sweep: LidarSweep
    camera: CameraModel
    ground_truth: List[DetectionBox]

    @classmethod
    def from_scene(cls, scene: Scene) -> "TrainingSample":
        return cls(scene.image, scene.sweep, scene.camera, scene.ground_truth)


@dataclass
class StepRecord:
    step: int
    loss: float
    accepted: bool


def batch_loss(batch: Sequence[TrainingSample], params: DetectorParams, cfg: DetectorConfig):
    total = None
    for sample in batch:
        proposals = detect(sample.image.detached(), sample.sweep.detached(), params, cfg, sample.camera)
        loss = task_loss(proposals, sample.ground_truth, cfg)
        total = loss if total is None else total + loss
    return total / float(len(batch))


def train_step(batch: Sequence[TrainingSample], params: DetectorParams, optimizer: Adam,
               cfg: DetectorConfig, step: int = 0) -> StepRecord:
    """One Adam step on the mean task loss; non-finite losses or gradients leave params untouched."""
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    optimizer.zero_grad()
    loss = batch_loss(batch, params, cfg)
    value = loss.item()
    if not np.isfinite(value):
        logger.warning(f"Step {step}: non-finite task loss {value}, step rejected")
        return StepRecord(step, value, False)
    T.backward(loss)
    if not all(np.all(np.isfinite(p.grad)) for p in optimizer.params):
        logger.warning(f"Step {step}: non-finite gradient, step rejected")
        optimizer.zero_grad()
        return StepRecord(step, value, False)
    optimizer.step()
    return StepRecord(step, value, True)


def train_detector(samples: Sequence[TrainingSample], cfg: DetectorConfig,
                   params: Optional[DetectorParams] = None, steps: Optional[int] = None,
                   quiet: bool = False) -> Tuple[DetectorParams, List[StepRecord]]:
    """Train from scratch (or fine-tune ``params``) on minibatches drawn with replacement."""
    if not samples:
        raise ValueError("No training samples")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng) if params is None else params.leaves()
    optimizer = Adam(params.values(), lr=cfg.learning_rate)
    steps = cfg.train_steps if steps is None else steps
    history: List[StepRecord] = []
    pbar = tqdm(range(steps), disable=quiet, desc="train")
    for step in pbar:
        picks = rng.integers(0, len(samples), size=cfg.batch_size)
        record = train_step([samples[i] for i in picks], params, optimizer, cfg, step)
        history.append(record)
        pbar.set_postfix(loss=f"{record.loss:.4f}")
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info(f"Detector step {step}/{steps}: loss {record.loss:.5f}")
    rejected = sum(not r.accepted for r in history)
    if rejected:
        logger.warning(f"{rejected} of {steps} detector steps were rejected")
    return params, history
