import csv
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.autodiff import tensor as T
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import Value, backward
from src.attack.gating import Modality, ModalityGate
from src.attack.objectives import (AttackError, clip_scores, false_positive_candidates, loss_fn, loss_fp,
                                   relevant_proposals)
from src.attack.universal import (LOG_COLUMNS, UniversalAttack, initial_mesh, random_mesh, run_universal_attack,
                                  with_box_size)
from src.core.insertion import insert_adversary
from src.detector.boxes import DetectionBox
from src.detector.model import Proposals, detect, init_params
from src.geometry.mesh import BoxConstraint, Pose, TexturedMesh, make_icosphere
from src.utils.config import ConfigError
from tests.fixtures import attack_config, detector_config, empty_scene, tiny_scenes


def proposals_from(anchors, scores) -> Proposals:
    anchors = np.asarray(anchors, dtype=float)
    scores = np.asarray(scores, dtype=float)
    logits = Value(np.log(scores / (1.0 - scores)), requires_grad=True)
    return Proposals(logits, T.sigmoid(logits), Value(np.zeros((len(anchors), 5))), anchors)


class TestAttackConfig(unittest.TestCase):
    def test_modalities(self):
        self.assertEqual(attack_config(target_modalities="lidar").target_modalities, frozenset({"lidar"}))
        with self.assertRaises(ConfigError):
            attack_config(target_modalities=["radar"])

    def test_validation(self):
        with self.assertRaises(ConfigError):
            attack_config(lambda_fp=-1.0)
        with self.assertRaises(ConfigError):
            attack_config(steps=0)

    def test_box_from_list(self):
        cfg = attack_config(box=[0.5, 0.4, 0.3])
        self.assertEqual(cfg.box, BoxConstraint(0.5, 0.4, 0.3))
        self.assertEqual(cfg.to_dict()["box"], [0.5, 0.4, 0.3])
        self.assertEqual(with_box_size(cfg, 0.6).box, BoxConstraint.cube(0.6))


class TestObjectives(unittest.TestCase):
    def setUp(self):
        self.host = DetectionBox(10.0, 0.0, 4.3, 1.8, 0.0)
        anchors = [[10.0, 0.0, 4.3, 1.8, 0.0], [10.5, 0.2, 4.3, 1.8, 0.0], [25.0, 8.0, 4.3, 1.8, 0.0]]
        self.proposals = proposals_from(anchors, [0.9, 0.05, 0.8])

    def test_relevant_proposals(self):
        idx, ious = relevant_proposals(self.proposals, self.host, 0.1)
        np.testing.assert_array_equal(idx, [0])
        self.assertAlmostEqual(ious[0], 1.0)
        idx, _ = relevant_proposals(self.proposals, self.host, 0.1, requires_overlap=False)
        np.testing.assert_array_equal(idx, [0, 2])

    def test_false_positive_candidates(self):
        np.testing.assert_array_equal(false_positive_candidates(self.proposals, [self.host]), [2])
        np.testing.assert_array_equal(false_positive_candidates(self.proposals, []), [0, 1, 2])
        np.testing.assert_array_equal(false_positive_candidates(self.proposals, [self.host], 0.9), [])

    def test_low_scoring_far_proposals_drive_fp_loss(self):
        anchors = [[10.0, 0.0, 4.3, 1.8, 0.0], [25.0, 8.0, 4.3, 1.8, 0.0], [25.0, -8.0, 4.3, 1.8, 0.0]]
        proposals = proposals_from(anchors, [0.9, 0.05, 0.08])
        fp = false_positive_candidates(proposals, [self.host])
        np.testing.assert_array_equal(fp, [1, 2])
        loss = loss_fp(T.index(proposals.scores, fp))
        self.assertAlmostEqual(loss.item(), np.log(0.95) + np.log(0.92))
        backward(loss)
        self.assertTrue(np.all(proposals.logits.grad[1:] < 0.0))
        self.assertEqual(proposals.logits.grad[0], 0.0)

    def test_loss_fn_lowers_scores(self):
        scores = Value(np.array([0.5, 0.8]), requires_grad=True)
        loss = loss_fn(scores, np.array([0.8, 0.0]))
        self.assertAlmostEqual(loss.item(), 0.8 * np.log(2.0))
        backward(loss)
        self.assertGreater(scores.grad[0], 0.0)
        self.assertEqual(scores.grad[1], 0.0)

    def test_loss_fp_raises_scores(self):
        scores = Value(np.array([0.5]), requires_grad=True)
        loss = loss_fp(scores)
        self.assertAlmostEqual(loss.item(), np.log(0.5))
        backward(loss)
        self.assertLess(scores.grad[0], 0.0)

    def test_empty_terms_are_zero(self):
        self.assertEqual(loss_fn(Value(np.zeros(0)), np.zeros(0)).item(), 0.0)
        self.assertEqual(loss_fp(Value(np.zeros(0))).item(), 0.0)

    def test_saturated_scores_are_clipped(self):
        with self.assertLogs("src.attack.objectives", level="WARNING"):
            clipped = clip_scores(Value(np.array([1.0, 0.3])))
        self.assertLess(clipped.data[0], 1.0)
        self.assertTrue(np.isfinite(loss_fp(Value(np.array([1.0]))).item()))


class TestGating(unittest.TestCase):
    def setUp(self):
        self.scene = empty_scene()
        self.mesh = make_icosphere(1, 2, radius=0.8).with_leaves()
        self.inputs = insert_adversary(self.scene, self.mesh, Pose((6.0, 0.0, 1.0), 0.0))

    def test_lidar_only_blocks_texture_gradient(self):
        image, sweep = ModalityGate(["lidar"]).apply(self.inputs)
        backward(T.reduce_sum(image.pixels) + T.reduce_sum(sweep.points))
        self.assertGreater(np.abs(self.mesh.vertices.grad).sum(), 0.0)
        self.assertEqual(np.abs(self.mesh.textures.grad).sum(), 0.0)

    def test_image_only_keeps_texture_gradient(self):
        image, _ = ModalityGate([Modality.IMAGE]).apply(self.inputs)
        backward(T.reduce_sum(image.pixels))
        self.assertGreater(np.abs(self.mesh.textures.grad).sum(), 0.0)

    def test_forward_values_are_unchanged(self):
        image, sweep = ModalityGate(["image"]).apply(self.inputs)
        np.testing.assert_array_equal(image.pixels.data, self.inputs.image.pixels.data)
        np.testing.assert_array_equal(sweep.xyz, self.inputs.sweep.xyz)

    def test_invalid_targets(self):
        with self.assertRaises(AttackError):
            ModalityGate([])
        with self.assertRaises(AttackError):
            ModalityGate(["sonar"])
        self.assertTrue(ModalityGate(["lidar", "image"]).is_identity)


class TestUniversalAttack(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.scenes = list(tiny_scenes()[:3])
        self.det_cfg = detector_config()
        self.params = init_params(self.det_cfg)
        self.cfg = attack_config(relevance_score_min=0.0, lr_vertex=0.05, lr_texture=0.05)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def batch(self):
        return [(s, s.host_index) for s in self.scenes[:2]]

    def test_initial_mesh_is_feasible(self):
        attack = UniversalAttack(self.params, self.det_cfg, self.cfg)
        self.assertEqual(attack.constraint_violation(), 0.0)
        self.assertEqual(attack.mesh.num_faces, 20)

    def test_step_moves_mesh_and_stays_feasible(self):
        attack = UniversalAttack(self.params, self.det_cfg, self.cfg)
        before = attack.mesh.vertices.data.copy()
        record = attack.attack_step(self.batch())
        self.assertTrue(record.accepted)
        self.assertTrue(np.isfinite(record.loss))
        self.assertEqual(attack.steps_taken, 1)
        self.assertFalse(np.array_equal(before, attack.mesh.vertices.data))
        self.assertEqual(attack.constraint_violation(), 0.0)

    def test_projection_after_large_steps(self):
        cfg = attack_config(relevance_score_min=0.0, lr_vertex=5.0, lr_texture=5.0, box=[0.2, 0.2, 0.1])
        attack = UniversalAttack(self.params, self.det_cfg, cfg)
        for _ in range(2):
            attack.attack_step(self.batch())
        self.assertEqual(attack.constraint_violation(), 0.0)

    def test_frozen_detector(self):
        attack = UniversalAttack(self.params, self.det_cfg, self.cfg)
        attack.attack_step(self.batch())
        self.assertTrue(all(v._grad is None for v in self.params.values()))

    def test_losses_match_finite_differences_through_pipeline(self):
        attack = UniversalAttack(self.params, self.det_cfg, self.cfg)
        scene = self.scenes[0]
        host = scene.host_index
        pose = attack.pose_for(scene, host)
        micro = make_icosphere(0, 1, radius=0.5)
        verts, faces = micro.vertices.data, micro.faces
        textures = np.random.default_rng(6).uniform(0.1, 0.9, size=micro.textures.shape)

        def proposals_for(mesh):
            inputs = insert_adversary(scene, mesh, pose, attack.raster, attack.max_range)
            image, sweep = attack.gate.apply(inputs)
            return detect(image, sweep, attack.params, self.det_cfg, scene.camera)

        # candidate sets and IoU weights are constants of the objective
        base_mesh = TexturedMesh(Value(verts), faces, Value(textures))
        base = proposals_for(base_mesh)
        relevant, ious = relevant_proposals(base, scene.host_box(host), 0.0)
        fp = false_positive_candidates(base, scene.ground_truth)
        self.assertTrue(relevant.size and fp.size)
        objectives = {
            "L_fn": lambda p: loss_fn(T.index(p.scores, relevant), ious),
            "L_fp": lambda p: loss_fp(T.index(p.scores, fp)),
        }
        l_fn, l_fp = attack.sample_losses(scene, host, base_mesh)
        self.assertAlmostEqual(l_fn.item(), objectives["L_fn"](base).item())
        self.assertAlmostEqual(l_fp.item(), objectives["L_fp"](base).item())

        meshes = {
            "vertices": (lambda v: TexturedMesh(v, faces, Value(textures)), verts),
            "textures": (lambda t: TexturedMesh(Value(verts), faces, t), textures),
        }
        for name, objective in objectives.items():
            for part, (build, x) in meshes.items():
                with self.subTest(loss=name, wrt=part):
                    report = grad_check(lambda x_: objective(proposals_for(build(x_))), Value(x),
                                        tol=1e-3, atol=1e-4)
                    self.assertTrue(report.passed, report.max_rel_error)
                    self.assertGreater(np.abs(report.analytic).max(), 0.0)

    def test_empty_batch(self):
        attack = UniversalAttack(self.params, self.det_cfg, self.cfg)
        with self.assertRaises(AttackError):
            attack.objective([])

    def test_run_writes_log(self):
        log_path = self.tmp / "attack_log.csv"
        result = run_universal_attack(self.scenes[:2], self.params, self.det_cfg, self.cfg,
                                      val_scenes=self.scenes[2:], log_path=log_path, quiet=True)
        self.assertEqual(len(result.log), self.cfg.steps)
        self.assertFalse(result.mesh.vertices.requires_grad)
        with open(log_path) as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], LOG_COLUMNS)
        self.assertEqual([r[0] for r in rows[1:]], ["0", "1"])

    def test_deterministic(self):
        a = run_universal_attack(self.scenes[:2], self.params, self.det_cfg, self.cfg, quiet=True)
        b = run_universal_attack(self.scenes[:2], self.params, self.det_cfg, self.cfg, quiet=True)
        np.testing.assert_array_equal(a.mesh.vertices.data, b.mesh.vertices.data)
        np.testing.assert_array_equal(a.mesh.textures.data, b.mesh.textures.data)

    def test_no_hosts(self):
        with self.assertRaises(AttackError):
            run_universal_attack([empty_scene()], self.params, self.det_cfg, self.cfg, quiet=True)


class TestBaselines(unittest.TestCase):
    def test_random_mesh(self):
        cfg = attack_config(subdivisions=1)
        a, b = random_mesh(cfg), random_mesh(cfg)
        np.testing.assert_array_equal(a.vertices.data, b.vertices.data)
        self.assertTrue(np.all(np.abs(a.vertices.data) <= cfg.box.as_array() + 1e-12))
        self.assertFalse(np.allclose(a.vertices.data, initial_mesh(cfg).vertices.data))
        self.assertEqual(a.num_faces, initial_mesh(cfg).num_faces)


if __name__ == '__main__':
    unittest.main()
