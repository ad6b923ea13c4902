"""Free adversarial training: one persistent adversary updated alongside the detector."""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..attack.objectives import AttackConfig
from ..attack.universal import UniversalAttack
from ..autodiff.optim import Adam
from ..autodiff.tensor import Value
from ..core.dataset import all_samples, sample_batch
from ..core.insertion import insert_adversary
from ..core.scene import Scene
from ..detector.model import DetectorConfig, DetectorParams
from ..detector.training import TrainingSample, train_step
from ..geometry.mesh import TexturedMesh
from ..sensors.camera import SoftRasterConfig
from ..utils.config import ConfigError, dataclass_from_dict
from .denoise import NONLOCAL_PREFIX, init_nonlocal_params

logger = logging.getLogger(__name__)

DEFENSE_KINDS = ("compression", "adv_train", "adv_train_fd")
RESIDUAL_BLOCKS = 1


@dataclass
class DefenseConfig:
    kind: str = "adv_train"
    compression_quality: int = 50
    adversary_updates_per_model_update: int = 5
    denoise_block_positions: Tuple[int, ...] = (1,)
    model_steps: int = 200
    learning_rate: float = 0.0005
    resample_hosts: bool = True
    clean_fraction: float = 0.5

    def __post_init__(self):
        self.kind = self.kind.replace("-", "_")
        self.denoise_block_positions = tuple(int(p) for p in self.denoise_block_positions)
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"Unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if not 1 <= self.compression_quality <= 100:
            raise ConfigError(f"compression_quality must be in [1, 100], got {self.compression_quality}")
        if self.adversary_updates_per_model_update < 0 or self.model_steps <= 0:
            raise ConfigError("adversary_updates_per_model_update must be >= 0 and model_steps > 0")
        if any(not 1 <= p <= RESIDUAL_BLOCKS for p in self.denoise_block_positions):
            raise ConfigError(f"denoise_block_positions must lie in [1, {RESIDUAL_BLOCKS}], "
                              f"got {self.denoise_block_positions}")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ConfigError(f"clean_fraction must be in [0, 1], got {self.clean_fraction}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DefenseConfig":
        return dataclass_from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["denoise_block_positions"] = list(self.denoise_block_positions)
        return data


@dataclass
class DefenseStepRecord:
    step: int
    model_loss: float
    attack_loss: Optional[float]
    mesh_updates: int
    accepted: bool


@dataclass
class DefenseResult:
    params: DetectorParams
    det_cfg: DetectorConfig
    mesh: TexturedMesh
    history: List[DefenseStepRecord] = field(default_factory=list)


def add_denoising(params: DetectorParams, det_cfg: DetectorConfig,
                  rng: Optional[np.random.Generator] = None) -> Tuple[DetectorParams, DetectorConfig]:
    """Insert identity-initialised non-local blocks into a trained image backbone."""
    if not det_cfg.use_image:
        raise ConfigError("Feature denoising needs the image branch")
    cfg = replace(det_cfg, denoise=True)
    tensors = dict(params.copy().tensors)
    if not any(name.startswith(NONLOCAL_PREFIX) for name in tensors):
        channels = det_cfg.image_channels[1]
        for name, arr in init_nonlocal_params(channels, rng or np.random.default_rng(det_cfg.seed),
                                              NONLOCAL_PREFIX).items():
            tensors[name] = Value(arr, requires_grad=True)
    return DetectorParams(tensors), cfg


def _model_batch(scenes: Sequence[Scene], attack: UniversalAttack, rng: np.random.Generator,
                 det_cfg: DetectorConfig, def_cfg: DefenseConfig) -> List[TrainingSample]:
    if def_cfg.resample_hosts:
        picks = sample_batch(list(scenes), rng, det_cfg.batch_size)
    else:
        fixed = [(i, s.host_index) for i, s in enumerate(scenes) if s.host_index is not None]
        picks = [fixed[j] for j in rng.integers(0, len(fixed), size=det_cfg.batch_size)]
    n_clean = int(round(def_cfg.clean_fraction * len(picks)))
    if def_cfg.adversary_updates_per_model_update == 0:
        # no adversary updates: plain fine-tuning on clean scenes
        n_clean = len(picks)
    mesh = attack.result_mesh()
    batch = []
    for k, (i, host) in enumerate(picks):
        scene = scenes[i]
        if k < n_clean:
            batch.append(TrainingSample.from_scene(scene))
            continue
        inputs = insert_adversary(scene, mesh, attack.pose_for(scene, host), attack.raster, attack.max_range)
        batch.append(TrainingSample(inputs.image.detached(), inputs.sweep.detached(), scene.camera,
                                    scene.ground_truth))
    return batch


def free_adv_train(scenes: Sequence[Scene], params: DetectorParams, det_cfg: DetectorConfig,
                   attack_cfg: AttackConfig, def_cfg: DefenseConfig, raster: Optional[SoftRasterConfig] = None,
                   max_range: float = np.inf, mesh: Optional[TexturedMesh] = None,
                   quiet: bool = False) -> DefenseResult:
    """Alternate k attack steps (detector frozen) with one detector step (mesh frozen)."""
    if not all_samples(list(scenes)):
        raise ConfigError("Adversarial training needs scenes with host vehicles")
    if def_cfg.kind == "adv_train_fd":
        params, det_cfg = add_denoising(params, det_cfg)
    params = params.leaves()
    optimizer = Adam(params.values(), lr=def_cfg.learning_rate)
    attack = UniversalAttack(params, det_cfg, attack_cfg, mesh, raster, max_range)
    rng = np.random.default_rng([attack_cfg.seed, det_cfg.seed])
    k = def_cfg.adversary_updates_per_model_update
    history: List[DefenseStepRecord] = []
    pbar = tqdm(range(def_cfg.model_steps), disable=quiet, desc=def_cfg.kind)
    for step in pbar:
        attack.set_detector(params)
        attack_loss = None
        before = attack.steps_taken
        for _ in range(k):
            picks = sample_batch(list(scenes), rng, attack_cfg.batch_size)
            attack_loss = attack.attack_step([(scenes[i], host) for i, host in picks]).loss
        batch = _model_batch(scenes, attack, rng, det_cfg, def_cfg)
        record = train_step(batch, params, optimizer, det_cfg, step)
        history.append(DefenseStepRecord(step, record.loss, attack_loss, attack.steps_taken - before,
                                         record.accepted))
        pbar.set_postfix(model=f"{record.loss:.4f}")
        if det_cfg.log_every and step % det_cfg.log_every == 0:
            logger.info(f"Defense step {step}: model loss {record.loss:.5f}, attack loss {attack_loss}")
    return DefenseResult(params, det_cfg, attack.result_mesh(), history)
