"""Universal adversarial mesh optimisation.

One mesh is optimised over minibatches of (scene, host) samples drawn from the
whole training split. Each step renders the mesh into both sensor inputs of
every sample, runs the frozen detector and takes one Adam step on vertices and
textures (separate learning rates), followed by projection onto the vertex box
and the texel range.
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from ..autodiff import tensor as T
from ..autodiff.optim import Adam
from ..core.dataset import sample_batch
from ..core.insertion import host_pose, insert_adversary
from ..core.scene import Scene
from ..detector.model import DetectorConfig, DetectorParams, detect
from ..evaluation.metrics import EvalConfig, attack_success_rates
from ..evaluation.runner import evaluate_attack
from ..geometry.mesh import BoxConstraint, Pose, TexturedMesh, clamp_vertices, laplacian_loss, make_icosphere
from ..sensors.camera import SoftRasterConfig
from .gating import ModalityGate
from .objectives import (AttackConfig, AttackError, false_positive_candidates, loss_fn, loss_fp,
                         relevant_proposals)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOG_COLUMNS = ["step", "L_fn", "L_fp", "L_lap", "val_fn_asr", "val_fp_asr"]


@dataclass
class AttackStepRecord:
    step: int
    l_fn: float
    l_fp: float
    l_lap: float
    loss: float
    accepted: bool
    val_fn_asr: Optional[float] = None
    val_fp_asr: Optional[float] = None

    def to_row(self) -> List:
        return [self.step, self.l_fn, self.l_fp, self.l_lap,
                "" if self.val_fn_asr is None else self.val_fn_asr,
                "" if self.val_fp_asr is None else self.val_fp_asr]


@dataclass
class AttackResult:
    mesh: TexturedMesh
    log: List[AttackStepRecord] = field(default_factory=list)


def initial_mesh(cfg: AttackConfig) -> TexturedMesh:
    """Icosphere scaled to ``init_radius`` and projected into the box."""
    sphere = make_icosphere(cfg.subdivisions, cfg.texture_res, cfg.init_radius)
    return clamp_vertices(sphere, cfg.box)


def random_mesh(cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> TexturedMesh:
    """Random-geometry, random-texture baseline inside the box; never optimised."""
    rng = rng or np.random.default_rng(cfg.seed)
    sphere = make_icosphere(cfg.subdivisions, cfg.texture_res)
    radial = rng.uniform(0.3, 1.0, size=(sphere.num_vertices, 1))
    verts = sphere.vertices.data * radial * cfg.box.as_array()
    textures = rng.uniform(0.0, 1.0, size=sphere.textures.shape)
    return clamp_vertices(TexturedMesh(verts, sphere.faces, textures), cfg.box)


def with_box_size(cfg: AttackConfig, size: float) -> AttackConfig:
    """Copy of ``cfg`` constrained to a cube-like box of half-width ``size``."""
    return replace(cfg, box=BoxConstraint.cube(size))


class UniversalAttack:
    """Holds the persistent adversary and its optimisers against a frozen detector."""

    def __init__(self, params: DetectorParams, det_cfg: DetectorConfig, cfg: AttackConfig,
                 mesh: Optional[TexturedMesh] = None, raster: Optional[SoftRasterConfig] = None,
                 max_range: float = np.inf):
        self.cfg = cfg
        self.det_cfg = det_cfg
        self.params = params.frozen()
        self.raster = raster or SoftRasterConfig()
        self.max_range = max_range
        self.gate = ModalityGate(cfg.target_modalities)
        self.mesh = (mesh if mesh is not None else initial_mesh(cfg)).with_leaves()
        self.vertex_opt = Adam([self.mesh.vertices], lr=cfg.lr_vertex)
        self.texture_opt = Adam([self.mesh.textures], lr=cfg.lr_texture)
        self._poses: Dict[Tuple[int, int], Pose] = {}
        self.steps_taken = 0

    def set_detector(self, params: DetectorParams) -> None:
        """Attack updated weights from now on (adversarial training)."""
        self.params = params.frozen()

    def pose_for(self, scene: Scene, host: int) -> Pose:
        key = (scene.index, host)
        if key not in self._poses:
            self._poses[key] = host_pose(scene, host, self.cfg.use_band_centroid)
        return self._poses[key]

    def sample_losses(self, scene: Scene, host: int, mesh: Optional[TexturedMesh] = None):
        """(L_fn, L_fp) for one host with the mesh rendered into both modalities."""
        mesh = self.mesh if mesh is None else mesh
        inputs = insert_adversary(scene, mesh, self.pose_for(scene, host), self.raster, self.max_range)
        image, sweep = self.gate.apply(inputs)
        proposals = detect(image, sweep, self.params, self.det_cfg, scene.camera)
        idx, ious = relevant_proposals(proposals, scene.host_box(host), self.cfg.relevance_score_min,
                                       self.cfg.relevance_requires_overlap)
        l_fn = loss_fn(T.index(proposals.scores, idx), ious)
        fp_idx = false_positive_candidates(proposals, scene.ground_truth)
        l_fp = loss_fp(T.index(proposals.scores, fp_idx))
        return l_fn, l_fp

    def objective(self, batch: Sequence[Tuple[Scene, int]], mesh: Optional[TexturedMesh] = None):
        """Total loss and its three terms, averaged over the batch."""
        mesh = self.mesh if mesh is None else mesh
        if not batch:
            raise AttackError("Attack batch is empty")
        fn_terms, fp_terms = [], []
        for scene, host in batch:
            l_fn, l_fp = self.sample_losses(scene, host, mesh)
            fn_terms.append(l_fn)
            fp_terms.append(l_fp)
        l_fn = T.reduce_mean(T.stack(fn_terms))
        l_fp = T.reduce_mean(T.stack(fp_terms))
        l_lap = laplacian_loss(mesh)
        total = l_fn + self.cfg.lambda_fp * l_fp + self.cfg.lambda_lap * l_lap
        return total, l_fn, l_fp, l_lap

    def attack_step(self, batch: Sequence[Tuple[Scene, int]]) -> AttackStepRecord:
        """One projected Adam step; a non-finite loss or gradient skips the update."""
        step = self.steps_taken
        self.steps_taken += 1
        self.vertex_opt.zero_grad()
        self.texture_opt.zero_grad()
        total, l_fn, l_fp, l_lap = self.objective(batch)
        record = AttackStepRecord(step, l_fn.item(), l_fp.item(), l_lap.item(), total.item(), False)
        if not np.isfinite(record.loss):
            logger.warning(f"Attack step {step}: non-finite loss {record.loss}, step skipped")
            return record
        T.backward(total)
        grads_ok = np.all(np.isfinite(self.mesh.vertices.grad)) and np.all(np.isfinite(self.mesh.textures.grad))
        if not grads_ok:
            logger.warning(f"Attack step {step}: non-finite mesh gradient, step skipped")
            return record
        self.vertex_opt.step()
        self.texture_opt.step()
        self.project()
        record.accepted = True
        return record

    def project(self) -> None:
        """Clamp the leaves in place so optimiser state stays attached to them."""
        projected = clamp_vertices(self.mesh, self.cfg.box)
        self.mesh.vertices.data = projected.vertices.data
        self.mesh.textures.data = projected.textures.data

    def constraint_violation(self) -> float:
        """Largest excursion outside the vertex box or texel range (0 when feasible)."""
        limits = self.cfg.box.as_array()
        over = np.abs(self.mesh.vertices.data) - limits
        tex = self.mesh.textures.data
        return float(max(over.max(initial=0.0), (-tex).max(initial=0.0), (tex - 1.0).max(initial=0.0), 0.0))

    def result_mesh(self) -> TexturedMesh:
        return self.mesh.detached()


def write_attack_log(log: Sequence[AttackStepRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for record in log:
            writer.writerow(record.to_row())
    return path


def run_universal_attack(scenes: Sequence[Scene], params: DetectorParams, det_cfg: DetectorConfig,
                         cfg: AttackConfig, val_scenes: Sequence[Scene] = (), eval_cfg: Optional[EvalConfig] = None,
                         raster: Optional[SoftRasterConfig] = None, max_range: float = np.inf,
                         mesh: Optional[TexturedMesh] = None, log_path: Optional[PathLike] = None,
                         quiet: bool = False) -> AttackResult:
    """Optimise one mesh over minibatches sampled across every scene and host."""
    if not any(s.host_candidates for s in scenes):
        raise AttackError("No host vehicles in the attack scenes")
    eval_cfg = eval_cfg or EvalConfig()
    rng = np.random.default_rng(cfg.seed)
    attack = UniversalAttack(params, det_cfg, cfg, mesh, raster, max_range)
    val = list(val_scenes)[:cfg.val_scenes]
    log: List[AttackStepRecord] = []
    pbar = tqdm(range(cfg.steps), disable=quiet, desc="attack")
    for step in pbar:
        picks = sample_batch(list(scenes), rng, cfg.batch_size)
        record = attack.attack_step([(scenes[i], host) for i, host in picks])
        last = step == cfg.steps - 1
        if val and cfg.val_every and (step % cfg.val_every == 0 or last):
            records = evaluate_attack(val, attack.result_mesh(), params, det_cfg, eval_cfg, attack.raster,
                                      max_range, use_band_centroid=cfg.use_band_centroid)
            rates = attack_success_rates(records)
            record.val_fn_asr, record.val_fp_asr = rates.fn_asr, rates.fp_asr
            logger.info(f"Attack step {step}: loss {record.loss:.5f}, val FN ASR {rates.fn_asr}, "
                        f"val FP ASR {rates.fp_asr}")
        log.append(record)
        pbar.set_postfix(loss=f"{record.loss:.4f}")
    skipped = sum(not r.accepted for r in log)
    if skipped:
        logger.warning(f"{skipped} of {cfg.steps} attack steps were skipped")
    if log_path is not None:
        write_attack_log(log, log_path)
    return AttackResult(attack.result_mesh(), log)
